//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use topocnn::data::{make_splits, synthetic::{generate, SyntheticSpec}, Splits, SubsetCaps};
use topocnn::{Layout, Scheme};

/// Cosine similarity of rows `i`, `j` of a `(C, F)` block, same epsilon as the library.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-12)
}

fn pair_loss(rows: &[Vec<f64>], positions: &[Vec<f64>]) -> f64 {
    let c = rows.len();
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i < j {
                let d: f64 = positions[i].iter().zip(&positions[j]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                let t = 1.0 / (d + 1.0);
                let s = cosine(&rows[i], &rows[j]);
                acc += (s - t) * (s - t);
            }
        }
    }
    acc * 2.0 / (c * (c - 1)) as f64
}

/// Double-loop topographic loss of `(B, C, F)` activations.
/// Per-sample mode averages one loss per sample; pooled mode concatenates samples.
pub fn naive_topo_loss(acts: &[f64], b: usize, c: usize, f: usize, positions: &[Vec<f64>], pooled: bool) -> f64 {
    let at = |s: usize, ch: usize| &acts[(s * c + ch) * f..(s * c + ch + 1) * f];
    if pooled {
        let rows: Vec<Vec<f64>> = (0..c).map(|ch| (0..b).flat_map(|s| at(s, ch).to_vec()).collect()).collect();
        pair_loss(&rows, positions)
    } else {
        (0..b).map(|s| pair_loss(&(0..c).map(|ch| at(s, ch).to_vec()).collect::<Vec<_>>(), positions)).sum::<f64>() / b as f64
    }
}

pub fn positions(layout: &Layout) -> Vec<Vec<f64>> {
    layout.positions().map(<[f64]>::to_vec).collect()
}

/// Checks counts, distinctness, domain bounds and the target matrix of one layout.
pub fn check_layout(scheme: Scheme, c: usize) -> Result<(), String> {
    let layout = scheme.layout(c).map_err(|e| e.to_string())?;
    let ps = positions(&layout);
    if ps.len() != c || ps.iter().any(|p| p.len() != scheme.dim()) {
        return Err(format!("{scheme:?} C={c}: wrong count or dimension"));
    }
    let mut sorted = ps.clone();
    sorted.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(format!("{scheme:?} C={c}: duplicate positions"));
    }
    match scheme {
        Scheme::Circle | Scheme::Sphere => {
            if let Some(p) = ps.iter().find(|p| (p.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() > 1e-12) {
                return Err(format!("{scheme:?} C={c}: {p:?} off the unit sphere"));
            }
        }
        _ => {
            if let Some(p) = ps.iter().find(|p| p.iter().any(|x| !(0.0..=1.0).contains(x))) {
                return Err(format!("{scheme:?} C={c}: {p:?} outside the unit box"));
            }
        }
    }
    let dt = topocnn::DistanceTarget::new(&layout);
    for i in 0..c {
        if dt.target(i, i) != 1.0 {
            return Err(format!("{scheme:?} C={c}: target diagonal {}", dt.target(i, i)));
        }
        for j in 0..i {
            if dt.target(i, j) != dt.target(j, i) {
                return Err(format!("{scheme:?} C={c}: asymmetric targets at ({i},{j})"));
            }
        }
    }
    Ok(())
}

/// Channel L2 norms by explicit accumulation over `(C_in, kH, kW)`.
pub fn naive_norms(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let mut s = 0.0;
        for i in 0..c_in {
            for y in 0..k {
                for x in 0..k {
                    let v = w[((o * c_in + i) * k + y) * k + x];
                    s += v * v;
                }
            }
        }
        out.push(s.sqrt());
    }
    out
}

/// Pruned channels for fraction `percent / 100`: a channel is pruned when
/// fewer than `floor(percent·C/100)` channels precede it in (norm, index) order.
pub fn oracle_pruned(norms: &[f64], percent: usize) -> Vec<usize> {
    let k = percent * norms.len() / 100;
    (0..norms.len())
        .filter(|&i| {
            let rank = (0..norms.len()).filter(|&j| norms[j] < norms[i] || (norms[j] == norms[i] && j < i)).count();
            rank < k
        })
        .collect()
}

/// Small synthetic image splits for fast training tests.
pub fn tiny_splits(channels: usize, size: usize, dev: usize, train_cap: usize, val: usize) -> Splits {
    let spec = SyntheticSpec { channels, size, dev_examples: dev, test_examples: 100, ..Default::default() };
    let (d, t) = generate(&spec).unwrap();
    make_splits(&d, &t, SubsetCaps { train: Some(train_cap), val: Some(val), test: None }, 0).unwrap()
}
