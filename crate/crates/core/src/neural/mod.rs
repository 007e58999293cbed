//! Dense feed-forward networks with exact reverse-mode gradients and Adam.

mod adam;
mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckReport};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Row-major real array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::input("tensor dimensions must be positive"));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::input(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::input("rows have different widths"));
        }
        Tensor::new(vec![rows.len(), width], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        let width = self.shape.last().copied().unwrap_or(1);
        self.values.chunks_exact(width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    /// Standard deviation of the zero-mean noise added to hidden activations
    /// in training mode.  The output layer never receives noise.
    pub gaussian_noise_sigma: f64,
}

impl DenseNetSpec {
    /// ReLU hidden layers followed by an output layer with `output` activation.
    pub fn mlp(input_width: usize, hidden: &[usize], output_width: usize, output: Activation) -> Self {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&w| LayerSpec { width: w, activation: Activation::Relu }).collect();
        layers.push(LayerSpec { width: output_width, activation: output });
        DenseNetSpec { input_width, layers, gaussian_noise_sigma: 0.0 }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.gaussian_noise_sigma = sigma;
        self
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, |l| l.width)
    }

    fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        if self.input_width == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::input("layer widths must be positive"));
        }
        if !(self.gaussian_noise_sigma >= 0.0) {
            return Err(Error::input("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Weights (`out × in`, row-major) and biases of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters of a network; also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Named parameter arrays, e.g. `layer0.weights`.
    pub fn named(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("layer{i}.weights"), l.weights.as_slice()), (format!("layer{i}.bias"), l.bias.as_slice())]
            })
            .collect()
    }

    pub fn get(&self, flat: usize) -> f64 {
        self.iter().nth(flat).expect("parameter index in range")
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        *self.iter_mut().nth(flat).expect("parameter index in range") = value;
    }
}

pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.activations.pop().expect("trace holds the input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub spec: DenseNetSpec,
    pub params: Params,
}

#[derive(Serialize, Deserialize)]
struct NetDocument {
    version: u32,
    spec: DenseNetSpec,
    layers: Vec<LayerParams>,
}

impl DenseNet {
    /// He-uniform initialisation for ReLU layers, Glorot-uniform otherwise;
    /// zero biases.
    pub fn init(spec: DenseNetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.check()?;
        let mut fan_in = spec.input_width;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let limit = match l.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + l.width) as f64).sqrt(),
            };
            let weights = (0..fan_in * l.width).map(|_| rng.random_range(-limit..limit)).collect();
            layers.push(LayerParams { weights, bias: vec![0.0; l.width] });
            fan_in = l.width;
        }
        Ok(DenseNet { spec, params: Params { layers } })
    }

    pub fn from_params(spec: DenseNetSpec, params: Params) -> Result<Self> {
        spec.check()?;
        let mut fan_in = spec.input_width;
        if params.layers.len() != spec.layers.len() {
            return Err(Error::input("parameter layer count does not match the spec"));
        }
        for (i, (l, p)) in spec.layers.iter().zip(&params.layers).enumerate() {
            if p.weights.len() != fan_in * l.width || p.bias.len() != l.width {
                return Err(Error::input(format!("layer {i} parameters have the wrong shape")));
            }
            fan_in = l.width;
        }
        Ok(DenseNet { spec, params })
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn forward(&self, input: &[f64], mode: Mode<'_>) -> Result<Trace> {
        if input.len() != self.spec.input_width {
            return Err(Error::input(format!(
                "network expects input width {}, got {}",
                self.spec.input_width,
                input.len()
            )));
        }
        Ok(self.forward_unchecked(input, mode))
    }

    fn forward_unchecked(&self, input: &[f64], mut mode: Mode<'_>) -> Trace {
        let n_layers = self.spec.layers.len();
        let noise = match mode {
            Mode::Train(_) if self.spec.gaussian_noise_sigma > 0.0 => {
                Some(Normal::new(0.0, self.spec.gaussian_noise_sigma).expect("sigma checked"))
            }
            _ => None,
        };
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        activations.push(input.to_vec());
        for (i, (spec, p)) in self.spec.layers.iter().zip(&self.params.layers).enumerate() {
            let x = &activations[i];
            let fan_in = x.len();
            let z: Vec<f64> = p
                .weights
                .chunks_exact(fan_in)
                .zip(&p.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            let mut a: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            if let (Some(dist), Mode::Train(rng)) = (&noise, &mut mode) {
                if i + 1 < n_layers {
                    a.iter_mut().for_each(|v| *v += dist.sample(*rng));
                }
            }
            pre.push(z);
            activations.push(a);
        }
        Trace { activations, pre }
    }

    /// Noise-free forward pass.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input, Mode::Eval)?.into_output())
    }

    /// Noise-free forward pass over the rows of a `[n, input_width]` tensor.
    pub fn eval_batch(&self, exec: crate::par::Execution, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.shape()[1] != self.spec.input_width {
            return Err(Error::input(format!("expected a [n, {}] tensor", self.spec.input_width)));
        }
        let rows: Vec<&[f64]> = input.rows().collect();
        let out = crate::par::map_slice(exec, &rows, |r| self.forward_unchecked(r, Mode::Eval).into_output());
        Tensor::new(vec![rows.len(), self.output_width()], out.concat())
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_into(&self, trace: &Trace, output_grad: &[f64], grads: &mut Params) -> Vec<f64> {
        assert_eq!(output_grad.len(), self.output_width(), "output gradient width");
        let mut delta = output_grad.to_vec();
        for i in (0..self.spec.layers.len()).rev() {
            let act = self.spec.layers[i].activation;
            for (d, z) in delta.iter_mut().zip(&trace.pre[i]) {
                *d *= act.derivative(*z);
            }
            let x = &trace.activations[i];
            let fan_in = x.len();
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                for (gw, xv) in g.weights[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                    *gw += d * xv;
                }
            }
            let w = &self.params.layers[i].weights;
            let mut next = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (n, wv) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *n += d * wv;
                }
            }
            delta = next;
        }
        delta
    }

    /// Parameter gradients and input gradient for one trace.
    pub fn backward(&self, trace: &Trace, output_grad: &[f64]) -> (Params, Vec<f64>) {
        let mut grads = Params::zeros_like(&self.params);
        let input_grad = self.backward_into(trace, output_grad, &mut grads);
        (grads, input_grad)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetDocument {
            version: PARAMS_FORMAT_VERSION,
            spec: self.spec.clone(),
            layers: self.params.layers.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDocument = serde_json::from_str(text)?;
        if doc.version != PARAMS_FORMAT_VERSION {
            return Err(Error::Version { found: doc.version, expected: PARAMS_FORMAT_VERSION });
        }
        DenseNet::from_params(doc.spec, Params { layers: doc.layers })
    }
}

/// Seeded generator used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
