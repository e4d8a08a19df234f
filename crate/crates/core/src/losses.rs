//! Training objectives, each recorded as a single graph op with an exact
//! backward rule. Every loss averages over the batch.

use std::f64::consts::PI;

use crate::autodiff::{Graph, GroupSet, ParamGroup, Tensor, Var};
use crate::error::{Error, Result};

/// The four objectives and the parameter groups each one may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Speaker,
    AdvClassifier,
    AdvEliminate,
    Reconstruction,
}

impl Objective {
    pub fn routing(self) -> GroupSet {
        use ParamGroup::*;
        match self {
            Objective::Speaker => GroupSet::of(&[PurifyingEncoder, SpeakerClassifier]),
            Objective::AdvClassifier => GroupSet::of(&[AdversarialClassifier]),
            Objective::AdvEliminate => GroupSet::of(&[EliminatingEncoder]),
            Objective::Reconstruction => {
                GroupSet::of(&[Decoder, PurifyingEncoder, EliminatingEncoder])
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ASoftmaxConfig {
    pub margin: u32,
    pub lambda_cos: f64,
}

impl Default for ASoftmaxConfig {
    fn default() -> Self {
        ASoftmaxConfig {
            margin: 4,
            lambda_cos: 5.0,
        }
    }
}

impl ASoftmaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 1 {
            return Err(Error::Parameter("a-softmax margin m must be >= 1".into()));
        }
        if !(self.lambda_cos >= 0.0 && self.lambda_cos.is_finite()) {
            return Err(Error::Parameter(format!(
                "a-softmax lambda_cos must be finite and >= 0, got {}",
                self.lambda_cos
            )));
        }
        Ok(())
    }
}

fn check_logits(g: &Graph, logits: Var, targets: &[usize]) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 2 {
        return Err(Error::dim("logits", s, &[targets.len()]));
    }
    let (b, n) = (s[0], s[1]);
    if targets.len() != b {
        return Err(Error::dim("targets", s, &[targets.len()]));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Validation(format!("target {t} out of range for {n} classes")));
    }
    Ok((b, n))
}

/// Row-wise softmax with max subtraction; returns (probabilities, log-sum-exp).
fn softmax_rows(z: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(z.len());
    let mut lse = Vec::with_capacity(z.len() / n);
    for row in z.chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        p.extend(row.iter().map(|v| (v - m).exp() / s));
        lse.push(m + s.ln());
    }
    (p, lse)
}

/// Mean cross-entropy of `softmax(logits)` against integer targets.
pub fn softmax_ce(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (b, n) = check_logits(g, logits, targets)?;
    let z = g.value(logits).data();
    let (p, lse) = softmax_rows(z, n);
    let loss = (0..b).map(|j| lse[j] - z[j * n + targets[j]]).sum::<f64>() / b as f64;
    let targets = targets.to_vec();
    Ok(g.custom(&[logits], Tensor::scalar(loss), move |_, _, go| {
        let mut d: Vec<f64> = p.iter().map(|v| v * go[0] / b as f64).collect();
        for (j, &t) in targets.iter().enumerate() {
            d[j * n + t] -= go[0] / b as f64;
        }
        vec![Some(d)]
    }))
}

/// `L_adv_s`: same value as [`softmax_ce`]; callers route it to C_adv only.
pub fn adv_classifier_loss(g: &mut Graph, logits_e: Var, targets: &[usize]) -> Result<Var> {
    softmax_ce(g, logits_e, targets)
}

/// `L_adv_e`: cross-entropy between `softmax(logits_e)` and the uniform
/// distribution, `−(1/N)·Σ log y`. Minimal (= ln N) exactly at uniform output.
pub fn adv_eliminate_loss(g: &mut Graph, logits_e: Var) -> Result<Var> {
    let s = g.shape(logits_e).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::dim("adv_eliminate_loss", &s, &[2]));
    }
    let (b, n) = (s[0], s[1]);
    let z = g.value(logits_e).data();
    let (p, lse) = softmax_rows(z, n);
    let loss = z
        .chunks(n)
        .zip(&lse)
        .map(|(row, l)| l - row.iter().sum::<f64>() / n as f64)
        .sum::<f64>()
        / b as f64;
    Ok(g.custom(&[logits_e], Tensor::scalar(loss), move |_, _, go| {
        let scale = go[0] / b as f64;
        let u = 1.0 / n as f64;
        vec![Some(p.iter().map(|v| (v - u) * scale).collect())]
    }))
}

/// `½‖pred − target‖²` summed per batch item and averaged over the batch
/// (leading axis).
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let ps = g.shape(pred);
    if ps != target.shape() {
        return Err(Error::dim("reconstruction_loss", ps, target.shape()));
    }
    let b = ps[0] as f64;
    let diff: Vec<f64> = g
        .value(pred)
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, t)| a - t)
        .collect();
    let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() / b;
    Ok(g.custom(&[pred], Tensor::scalar(loss), move |_, _, go| {
        vec![Some(diff.iter().map(|d| d * go[0] / b).collect())]
    }))
}

/// Chebyshev polynomials `(T_m(c), U_{m−1}(c))`.
fn chebyshev(c: f64, m: u32) -> (f64, f64) {
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0);
    for _ in 1..m {
        let tn = 2.0 * c * t - t_prev;
        let un = 2.0 * c * u - u_prev;
        t_prev = t;
        t = tn;
        u_prev = u;
        u = un;
    }
    if m == 0 {
        (1.0, 0.0)
    } else {
        (t, u)
    }
}

fn fold_index(theta: f64, m: u32) -> u32 {
    ((theta * m as f64 / PI).floor() as i64).clamp(0, m as i64 - 1) as u32
}

/// `φ` and `dφ/dc` as functions of `c = cos θ`.
fn phi_and_slope(c: f64, m: u32) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let k = fold_index(c.acos(), m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let (t, u) = chebyshev(c, m);
    (sign * t - 2.0 * k as f64, sign * m as f64 * u)
}

/// Folded margin function `φ(θ) = (−1)^k cos(mθ) − 2k` for `θ ∈ [kπ/m, (k+1)π/m]`.
pub fn phi(theta: f64, m: u32) -> f64 {
    let k = fold_index(theta, m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

/// `φ` evaluated from `cos θ`, the form the loss uses internally.
pub fn phi_of_cos(cos_theta: f64, m: u32) -> f64 {
    phi_and_slope(cos_theta, m).0
}

/// Angular logits `‖x‖·cos θ_i` against unit-normalized weight columns.
pub fn angular_logits(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (fs, ws) = (features.shape(), weights.shape());
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[0] {
        return Err(Error::dim("angular_logits", fs, ws));
    }
    let (b, d, n) = (fs[0], fs[1], ws[1]);
    let (w_hat, _) = normalize_columns(weights.data(), d, n);
    let mut out = vec![0.0; b * n];
    for j in 0..b {
        let x = &features.data()[j * d..(j + 1) * d];
        for i in 0..n {
            out[j * n + i] = (0..d).map(|k| x[k] * w_hat[k * n + i]).sum();
        }
    }
    Tensor::new(&[b, n], out)
}

fn normalize_columns(w: &[f64], d: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let norms: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|k| w[k * n + i].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut hat = w.to_vec();
    for k in 0..d {
        for i in 0..n {
            hat[k * n + i] /= norms[i];
        }
    }
    (hat, norms)
}

/// A-softmax loss. `weights: [D×N]` columns are re-normalized on every call.
/// The target logit becomes `(λ·‖x‖cos θ_t + ‖x‖φ(θ_t)) / (λ + 1)`; the others
/// stay `‖x‖cos θ_i`.
pub fn a_softmax_loss(
    g: &mut Graph,
    features: Var,
    weights: Var,
    targets: &[usize],
    cfg: ASoftmaxConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (fs, ws) = (g.shape(features).to_vec(), g.shape(weights).to_vec());
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[0] {
        return Err(Error::dim("a_softmax_loss", &fs, &ws));
    }
    let (b, d, n) = (fs[0], fs[1], ws[1]);
    if targets.len() != b {
        return Err(Error::dim("a_softmax_loss targets", &fs, &[targets.len()]));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Validation(format!("target {t} out of range for {n} classes")));
    }
    let x = g.value(features).data().to_vec();
    let (w_hat, col_norms) = normalize_columns(g.value(weights).data(), d, n);
    let lambda = cfg.lambda_cos;
    let m = cfg.margin;

    let mut z = vec![0.0; b * n];
    let mut rows = Vec::with_capacity(b);
    for j in 0..b {
        let xj = &x[j * d..(j + 1) * d];
        let r = xj.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm feature in batch row {j}")));
        }
        for i in 0..n {
            z[j * n + i] = (0..d).map(|k| xj[k] * w_hat[k * n + i]).sum();
        }
        let t = targets[j];
        let dot = z[j * n + t];
        let c = (dot / r).clamp(-1.0, 1.0);
        let (phi, slope) = phi_and_slope(c, m);
        z[j * n + t] = (lambda * dot + r * phi) / (lambda + 1.0);
        rows.push((r, c, phi, slope));
    }
    let (p, lse) = softmax_rows(&z, n);
    let loss = (0..b).map(|j| lse[j] - z[j * n + targets[j]]).sum::<f64>() / b as f64;
    let targets = targets.to_vec();

    Ok(g.custom(&[features, weights], Tensor::scalar(loss), move |_, _, go| {
        let scale = go[0] / b as f64;
        let mut dx = vec![0.0; b * d];
        let mut dw_hat = vec![0.0; d * n];
        for j in 0..b {
            let xj = &x[j * d..(j + 1) * d];
            let t = targets[j];
            let (r, c, phi, slope) = rows[j];
            let dxj = &mut dx[j * d..(j + 1) * d];
            for i in 0..n {
                let dz = (p[j * n + i] - if i == t { 1.0 } else { 0.0 }) * scale;
                if dz == 0.0 {
                    continue;
                }
                if i == t {
                    for k in 0..d {
                        let wk = w_hat[k * n + i];
                        let xh = xj[k] / r;
                        dxj[k] += dz * (lambda * wk + phi * xh + slope * (wk - c * xh)) / (lambda + 1.0);
                        dw_hat[k * n + i] += dz * (lambda + slope) * xj[k] / (lambda + 1.0);
                    }
                } else {
                    for k in 0..d {
                        dxj[k] += dz * w_hat[k * n + i];
                        dw_hat[k * n + i] += dz * xj[k];
                    }
                }
            }
        }
        // back through the column normalization: (I − ŵŵᵀ)·g / ‖w‖
        let mut dw = vec![0.0; d * n];
        for i in 0..n {
            let proj: f64 = (0..d).map(|k| w_hat[k * n + i] * dw_hat[k * n + i]).sum();
            for k in 0..d {
                dw[k * n + i] = (dw_hat[k * n + i] - proj * w_hat[k * n + i]) / col_norms[i];
            }
        }
        vec![Some(dx), Some(dw)]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_adv: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 1.0,
            lambda_adv: 0.1,
            lambda_r: 0.02,
        }
    }
}

/// Component values of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_p: f64,
    pub l_adv_s: f64,
    pub l_adv_e: f64,
    pub l_r: f64,
    pub l_total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    /// `λ_p·L_p + λ_adv·(L_adv_s + L_adv_e) + λ_r·L_r`, rejecting non-finite parts.
    pub fn combine(l_p: f64, l_adv_s: f64, l_adv_e: f64, l_r: f64, weights: LossWeights) -> Result<Self> {
        for (name, v) in [("L_p", l_p), ("L_adv_s", l_adv_s), ("L_adv_e", l_adv_e), ("L_r", l_r)] {
            if !v.is_finite() {
                return Err(Error::NumericFault {
                    component: name.to_string(),
                });
            }
        }
        let l_total = weights.lambda_p * l_p + weights.lambda_adv * (l_adv_s + l_adv_e) + weights.lambda_r * l_r;
        Ok(LossBundle {
            l_p,
            l_adv_s,
            l_adv_e,
            l_r,
            l_total,
            weights,
        })
    }
}
