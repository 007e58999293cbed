#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spncf::circuit::{Circuit, GradTarget, Node, NodeId, SpnBuilder, SpnGraph};

pub const MAX_NODES: usize = 20;

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn leaf(b: &mut SpnBuilder, rng: &mut ChaCha8Rng, v: usize) -> NodeId {
    b.leaf(v, rng.random_range(-1.5..1.5), rng.random_range(0.6..1.2))
}

fn region(b: &mut SpnBuilder, rng: &mut ChaCha8Rng, scope: &[usize], depth: usize) -> NodeId {
    if scope.len() == 1 {
        if depth < 3 && rng.random_bool(0.3) {
            let kids = vec![leaf(b, rng, scope[0]), leaf(b, rng, scope[0])];
            let w = weights(rng, 2);
            return b.sum(kids, w);
        }
        return leaf(b, rng, scope[0]);
    }
    if depth < 2 && rng.random_bool(0.3) {
        let kids = vec![region(b, rng, scope, depth + 1), region(b, rng, scope, depth + 1)];
        let w = weights(rng, 2);
        return b.sum(kids, w);
    }
    let mut shuffled = scope.to_vec();
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    let cut = rng.random_range(1..shuffled.len());
    let (left, right) = shuffled.split_at(cut);
    let kids = vec![region(b, rng, left, depth + 1), region(b, rng, right, depth + 1)];
    b.product(kids)
}

/// Valid class-partitioned circuit over `dimension ≤ 4` variables with at
/// most [`MAX_NODES`] nodes; leaf means in [-1.5, 1.5], σ in [0.6, 1.2].
pub fn random_circuit(seed: u64, dimension: usize) -> Circuit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scope: Vec<usize> = (0..dimension).collect();
    loop {
        let mut b = SpnBuilder::new();
        let classes = rng.random_range(2..=3);
        let kids: Vec<NodeId> = (0..classes).map(|_| region(&mut b, &mut rng, &scope, 0)).collect();
        if b.len() + 1 > MAX_NODES {
            continue;
        }
        let priors = weights(&mut rng, classes);
        return Circuit::from_class_subnetworks(b, kids, priors, dimension).expect("generator builds valid circuits");
    }
}

/// Composite trapezoid nodes on [-9, 9] with step 0.6; the Gaussian leaves
/// above make the rule exact far below 1e-3.
pub fn grid() -> (Vec<f64>, f64) {
    let h = 0.6;
    let pts: Vec<f64> = (0..=30).map(|i| -9.0 + h * i as f64).collect();
    (pts, h)
}

/// ∫ p(z) dz over the full space by tensor quadrature.
pub fn quadrature_mass(c: &Circuit) -> f64 {
    let (pts, h) = grid();
    let d = c.dimension();
    let n = pts.len();
    let total = n.pow(d as u32);
    let mut z = vec![0.0; d];
    let mut mass = 0.0;
    for flat in 0..total {
        let mut k = flat;
        for zj in z.iter_mut() {
            *zj = pts[k % n];
            k /= n;
        }
        mass += c.log_marginal(&z).unwrap().exp();
    }
    mass * h.powi(d as i32)
}

/// log ∫ p(z) dz_v at `z` with variable `v` integrated numerically.
pub fn quadrature_marginal(c: &Circuit, z: &[f64], v: usize) -> f64 {
    let (pts, h) = grid();
    let mut point = z.to_vec();
    let mass: f64 = pts
        .iter()
        .map(|&t| {
            point[v] = t;
            c.log_marginal(&point).unwrap().exp()
        })
        .sum();
    (mass * h).ln()
}

/// ‖analytic − central difference‖ / max(‖central difference‖, 1e-3).
pub fn gradient_error(c: &Circuit, z: &[f64], target: GradTarget) -> f64 {
    let (_, g) = c.grad_z(z, target).unwrap();
    let f = |p: &[f64]| c.grad_z(p, target).unwrap().0;
    let h = 1e-5;
    let mut diff = 0.0;
    let mut norm = 0.0;
    for j in 0..z.len() {
        let mut a = z.to_vec();
        let mut b = z.to_vec();
        a[j] += h;
        b[j] -= h;
        let fd = (f(&a) - f(&b)) / (2.0 * h);
        diff += (g[j] - fd).powi(2);
        norm += fd * fd;
    }
    diff.sqrt() / norm.sqrt().max(1e-3)
}

pub fn scopes(g: &SpnGraph) -> Vec<Vec<usize>> {
    fn go(g: &SpnGraph, i: usize, memo: &mut Vec<Option<Vec<usize>>>) -> Vec<usize> {
        if let Some(s) = &memo[i] {
            return s.clone();
        }
        let s = match &g.nodes[i] {
            Node::Leaf(l) => vec![l.variable],
            n => {
                let mut s: Vec<usize> = n.children().iter().flat_map(|c| go(g, c.0, memo)).collect();
                s.sort_unstable();
                s.dedup();
                s
            }
        };
        memo[i] = Some(s.clone());
        s
    }
    let mut memo = vec![None; g.nodes.len()];
    (0..g.nodes.len()).map(|i| go(g, i, &mut memo)).collect()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn push_child(node: &mut Node, child: NodeId) {
    match node {
        Node::Sum(s) => {
            s.children.push(child);
            let k = s.weights.len() as f64;
            s.weights.iter_mut().for_each(|w| *w *= k / (k + 1.0));
            s.weights.push(1.0 / (k + 1.0));
        }
        Node::Product(p) => p.children.push(child),
        Node::Leaf(_) => unreachable!(),
    }
}

fn add_leaf(g: &mut SpnGraph, variable: usize) -> NodeId {
    g.nodes.push(Node::Leaf(spncf::circuit::GaussianLeaf { variable, mean: 0.0, stddev: 1.0 }));
    NodeId(g.nodes.len() - 1)
}

/// A sum node gains a leaf child over a strict subset of its scope.
pub fn break_completeness(g: &mut SpnGraph, rng: &mut ChaCha8Rng) -> NodeId {
    let sc = scopes(g);
    let targets: Vec<usize> =
        (0..g.nodes.len()).filter(|&i| matches!(g.nodes[i], Node::Sum(_)) && sc[i].len() >= 2).collect();
    let t = pick(rng, &targets);
    let v = pick(rng, &sc[t]);
    let l = add_leaf(g, v);
    push_child(&mut g.nodes[t], l);
    NodeId(t)
}

/// A product node gains a leaf child over a variable it already covers.
pub fn break_decomposability(g: &mut SpnGraph, rng: &mut ChaCha8Rng) -> NodeId {
    let sc = scopes(g);
    let targets: Vec<usize> = (0..g.nodes.len()).filter(|&i| matches!(g.nodes[i], Node::Product(_))).collect();
    let t = pick(rng, &targets);
    let v = pick(rng, &sc[t]);
    let l = add_leaf(g, v);
    push_child(&mut g.nodes[t], l);
    NodeId(t)
}

/// An internal node below a class sub-network gets that sub-network's
/// root as an extra child.  Returns the node holding the back edge.
pub fn break_acyclicity(g: &mut SpnGraph, rng: &mut ChaCha8Rng) -> NodeId {
    let class_roots = g.nodes[g.root.0].children().to_vec();
    let top = pick(rng, &class_roots);
    let mut internal = Vec::new();
    let mut stack = vec![top];
    while let Some(n) = stack.pop() {
        if !matches!(g.nodes[n.0], Node::Leaf(_)) {
            internal.push(n);
            stack.extend(g.nodes[n.0].children().iter().copied());
        }
    }
    let t = pick(rng, &internal);
    push_child(&mut g.nodes[t.0], top);
    t
}

/// One weight of a sum node is scaled so the weights no longer sum to one.
pub fn break_normalization(g: &mut SpnGraph, rng: &mut ChaCha8Rng) -> NodeId {
    let targets: Vec<usize> = (0..g.nodes.len()).filter(|&i| matches!(g.nodes[i], Node::Sum(_))).collect();
    let t = pick(rng, &targets);
    if let Node::Sum(s) = &mut g.nodes[t] {
        let j = rng.random_range(0..s.weights.len());
        s.weights[j] *= rng.random_range(1.1..2.0);
    }
    NodeId(t)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
