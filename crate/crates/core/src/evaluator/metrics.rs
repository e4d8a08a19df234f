use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredTrial {
    pub same_speaker: bool,
    pub score: f64,
}

/// One operating point: accept when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl CostParams {
    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)
    }
}

fn split(scored: &[ScoredTrial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for s in scored {
        if !s.score.is_finite() {
            return Err(Error::Validation(format!("non-finite trial score {}", s.score)));
        }
        if s.same_speaker {
            tar.push(s.score);
        } else {
            non.push(s.score);
        }
    }
    if tar.is_empty() || non.is_empty() {
        return Err(Error::Validation(
            "need at least one target and one non-target trial".into(),
        ));
    }
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    Ok((tar, non))
}

/// Operating points at every distinct score, ascending, followed by `+∞`
/// (reject everything).
pub fn det_points(scored: &[ScoredTrial]) -> Result<Vec<DetPoint>> {
    let (tar, non) = split(scored)?;
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    // two pointers: targets below t, non-targets below t
    let (mut i, mut j) = (0, 0);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            while i < tar.len() && tar[i] < t {
                i += 1;
            }
            while j < non.len() && non[j] < t {
                j += 1;
            }
            DetPoint {
                threshold: t,
                p_miss: i as f64 / nt,
                p_fa: (non.len() - j) as f64 / nn,
            }
        })
        .collect())
}

/// Equal error rate and its threshold, interpolated linearly between the two
/// operating points where `P_fa − P_miss` changes sign.
pub fn compute_eer(scored: &[ScoredTrial]) -> Result<(f64, f64)> {
    let pts = det_points(scored)?;
    Ok(eer_from_points(&pts))
}

pub(crate) fn eer_from_points(pts: &[DetPoint]) -> (f64, f64) {
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.p_fa - a.p_miss, b.p_fa - b.p_miss);
        if da >= 0.0 && db < 0.0 {
            let alpha = da / (da - db);
            let eer = a.p_miss + alpha * (b.p_miss - a.p_miss);
            let thr = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return (eer, thr);
        }
    }
    // unreachable for valid input: the first point has p_fa = 1, the last p_miss = 1
    let last = pts[pts.len() - 1];
    (last.p_miss, last.threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostSummary {
    pub c_det_min: f64,
    pub c_det_min_threshold: f64,
    pub c_det_at_eer: f64,
    pub points: Vec<DetPoint>,
}

/// Detection cost minimized over all operating points, and at the EER threshold.
pub fn compute_cdet(scored: &[ScoredTrial], params: CostParams) -> Result<CostSummary> {
    let points = det_points(scored)?;
    let (_, thr) = eer_from_points(&points);
    let (mut best, mut best_t) = (f64::INFINITY, f64::INFINITY);
    for p in &points {
        let c = params.cost(p.p_miss, p.p_fa);
        if c < best {
            best = c;
            best_t = p.threshold;
        }
    }
    let (tar, non) = split(scored)?;
    let p_miss = tar.iter().filter(|&&s| s < thr).count() as f64 / tar.len() as f64;
    let p_fa = non.iter().filter(|&&s| s >= thr).count() as f64 / non.len() as f64;
    Ok(CostSummary {
        c_det_min: best,
        c_det_min_threshold: best_t,
        c_det_at_eer: params.cost(p_miss, p_fa),
        points,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub c_det_min: f64,
    pub c_det_at_eer: f64,
    pub det_points: Vec<DetPoint>,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub cost: CostParams,
}

pub fn verification_report(scored: &[ScoredTrial], cost: CostParams) -> Result<VerificationReport> {
    let (eer, eer_threshold) = compute_eer(scored)?;
    let c = compute_cdet(scored, cost)?;
    let n_target = scored.iter().filter(|s| s.same_speaker).count();
    Ok(VerificationReport {
        eer,
        eer_threshold,
        c_det_min: c.c_det_min,
        c_det_at_eer: c.c_det_at_eer,
        det_points: c.points,
        n_target,
        n_nontarget: scored.len() - n_target,
        cost,
    })
}
