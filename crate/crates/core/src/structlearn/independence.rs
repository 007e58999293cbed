use crate::{Error, Result};

/// Pearson correlation of two equal-length samples; `None` when either has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Connected components of the graph joining columns `i` and `j` whenever
/// `|pearson(i, j)| >= threshold`.  `columns` holds one sample vector per
/// column.  Constant columns are never joined.  Components are listed in
/// order of their smallest column index.
pub fn independence_components(columns: &[Vec<f64>], threshold: f64) -> Result<Vec<Vec<usize>>> {
    let d = columns.len();
    let n = columns.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(Error::input("independence test needs at least two rows"));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::input("columns have different lengths"));
    }
    if columns.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite entry in independence test data"));
    }

    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if pearson(&columns[i], &columns[j]).is_some_and(|r| r.abs() >= threshold) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot_of_root = vec![usize::MAX; d];
    for i in 0..d {
        let r = find(&mut parent, i);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot_of_root[r]].push(i);
    }
    Ok(groups)
}
