use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub target: String,
    pub source: String,
    pub accuracy: f64,
    pub chance: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Softmax regression on frozen features, trained by full-batch gradient
/// descent on a stratified split; returns held-out accuracy.
///
/// Features are standardized with training-split statistics. `chance` is
/// `1 / classes`.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Validation("probe needs one label per feature row".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Validation("probe features have ragged rows".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Validation("probe needs at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (&class, idx) in &by_class {
        if idx.len() < 4 {
            return Err(Error::Validation(format!("probe class {class} has fewer than 4 samples")));
        }
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * test_fraction).round() as usize).min(idx.len() - 1);
        if k < 2 {
            return Err(Error::Validation(format!("probe class {class} has fewer than 2 test samples")));
        }
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    // dense class indices in sorted label order
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let index = |y: usize| classes.binary_search(&y).expect("known class");
    let c = classes.len();

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in std.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |i: usize| -> Vec<f64> {
        features[i].iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect()
    };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let ytr: Vec<usize> = train.iter().map(|&i| index(labels[i])).collect();

    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut p = vec![0.0; c];
    for _ in 0..PROBE_ITERATIONS {
        gw.fill(0.0);
        gb.fill(0.0);
        for (x, &y) in xtr.iter().zip(&ytr) {
            logits(x, &w, &b, &mut p);
            softmax(&mut p);
            p[y] -= 1.0;
            for k in 0..d {
                for j in 0..c {
                    gw[k * c + j] += x[k] * p[j];
                }
            }
            for j in 0..c {
                gb[j] += p[j];
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * g / n;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= PROBE_LR * g / n;
        }
    }
    let mut hits = 0;
    for &i in &test {
        logits(&standardize(i), &w, &b, &mut p);
        let pred = (0..c).fold(0, |best, j| if p[j] > p[best] { j } else { best });
        hits += usize::from(pred == index(labels[i]));
    }
    Ok(ProbeReport {
        target: String::new(),
        source: String::new(),
        accuracy: hits as f64 / test.len() as f64,
        chance: 1.0 / c as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}

fn logits(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let c = b.len();
    out.copy_from_slice(b);
    for (k, &xk) in x.iter().enumerate() {
        for j in 0..c {
            out[j] += xk * w[k * c + j];
        }
    }
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}
