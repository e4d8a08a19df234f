//! Cosine-scored verification, EER / detection cost, linear probes and report files.

mod metrics;
mod probe;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub use metrics::{
    compute_cdet, compute_eer, det_points, verification_report, CostParams, CostSummary, DetPoint,
    ScoredTrial, VerificationReport,
};
pub use probe::{linear_probe, ProbeReport, PROBE_ITERATIONS, PROBE_LR};

use crate::audio::{self, Spectrogram};
use crate::autodiff::Graph;
use crate::dataset::TrialPair;
use crate::error::{Error, Result};
use crate::networks::{Branch, Model};

const EMBED_BATCH: usize = 32;

/// Mean encoder output over the covering segments of each utterance
/// (hop = segment length, last one cyclic-padded). Not normalized.
pub fn pooled_features(model: &Model, specs: &[&Spectrogram], seg_frames: usize, branch: Branch) -> Result<Vec<Vec<f64>>> {
    let d = model.embedding_dim();
    let mut segments = Vec::new();
    let mut owner = Vec::new();
    for (u, s) in specs.iter().enumerate() {
        for seg in audio::cover_segments(s, seg_frames) {
            segments.push(seg);
            owner.push(u);
        }
    }
    let mut sums = vec![vec![0.0; d]; specs.len()];
    let mut counts = vec![0usize; specs.len()];
    for (chunk, own) in segments.chunks(EMBED_BATCH).zip(owner.chunks(EMBED_BATCH)) {
        let refs: Vec<&Spectrogram> = chunk.iter().collect();
        let x = model.batch_tensor(&refs)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let f = model.encode(&mut g, branch, xv)?;
        for (row, &u) in g.value(f).data().chunks(d).zip(own) {
            for (acc, v) in sums[u].iter_mut().zip(row) {
                *acc += v;
            }
            counts[u] += 1;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("embedding has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-norm verification embeddings.
pub fn embed_utterances(model: &Model, specs: &[&Spectrogram], seg_frames: usize, branch: Branch) -> Result<Vec<Vec<f64>>> {
    pooled_features(model, specs, seg_frames, branch)?
        .iter()
        .map(|v| l2_normalize(v))
        .collect()
}

pub fn embed_utterance(model: &Model, spec: &Spectrogram, seg_frames: usize, branch: Branch) -> Result<Vec<f64>> {
    Ok(embed_utterances(model, &[spec], seg_frames, branch)?.remove(0))
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scores each trial from a table of unit embeddings keyed by utterance id.
pub fn score_trials(trials: &[TrialPair], embeddings: &HashMap<String, Vec<f64>>) -> Result<Vec<ScoredTrial>> {
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let get = |id: &str| {
                embeddings.get(id).ok_or_else(|| {
                    Error::Validation(format!("trial {}: utterance id {id:?} has no embedding", i + 1))
                })
            };
            Ok(ScoredTrial {
                same_speaker: t.same_speaker,
                score: cosine_score(get(&t.utt_a)?, get(&t.utt_b)?),
            })
        })
        .collect()
}

pub fn format_report(r: &VerificationReport, probes: &[ProbeReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "verification");
    let _ = writeln!(s, "  trials          {:>8}", r.n_target + r.n_nontarget);
    let _ = writeln!(s, "  target          {:>8}", r.n_target);
    let _ = writeln!(s, "  non-target      {:>8}", r.n_nontarget);
    let _ = writeln!(s, "  EER (%)         {:>8.2}", 100.0 * r.eer);
    let _ = writeln!(s, "  EER threshold   {:>8.4}", r.eer_threshold);
    let _ = writeln!(s, "  minDCF          {:>8.4}", r.c_det_min);
    let _ = writeln!(s, "  C_det @ EER     {:>8.4}", r.c_det_at_eer);
    let _ = writeln!(s, "  P_tar           {:>8}", r.cost.p_target);
    if !probes.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "probes");
        let _ = writeln!(s, "  {:<10}{:<10}{:>10}{:>10}", "target", "features", "accuracy", "chance");
        for p in probes {
            let _ = writeln!(s, "  {:<10}{:<10}{:>10.4}{:>10.4}", p.target, p.source, p.accuracy, p.chance);
        }
    }
    s
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,p_fa,p_miss\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.p_fa, p.p_miss);
    }
    s
}

pub fn parse_det_csv(text: &str, origin: &str) -> Result<Vec<DetPoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,p_fa,p_miss")) => {}
        _ => {
            return Err(Error::Parse {
                path: origin.into(),
                line: 1,
                msg: "expected header threshold,p_fa,p_miss".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let v: Vec<f64> = l.split(',').filter_map(|x| x.trim().parse().ok()).collect();
            match v.as_slice() {
                &[threshold, p_fa, p_miss] => Ok(DetPoint { threshold, p_fa, p_miss }),
                _ => Err(Error::Parse {
                    path: origin.into(),
                    line: n + 1,
                    msg: "expected three numbers".into(),
                }),
            }
        })
        .collect()
}

pub fn scores_text(scored: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for t in scored {
        let _ = writeln!(s, "{} {}", u8::from(t.same_speaker), t.score);
    }
    s
}

/// Writes `report.txt`, `det.csv` and `scores.txt` into `dir`.
pub fn emit_report(dir: &Path, report: &VerificationReport, scored: &[ScoredTrial], probes: &[ProbeReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("report.txt", format_report(report, probes)),
        ("det.csv", det_csv(&report.det_points)),
        ("scores.txt", scores_text(scored)),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::networks::{EncoderConfig, EncoderKind, ModelConfig};

    fn model() -> Model {
        let enc = EncoderConfig {
            kind: EncoderKind::Conv,
            hidden: vec![2, 3],
            embedding_dim: 4,
        };
        Model::new(ModelConfig::new(enc, 10, 8, 3), 1).unwrap()
    }

    fn spec(frames: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spectrogram::from_frames(frames, 8, (0..frames * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_segment_embedding_is_normalized_encoder_output() {
        let m = model();
        let s = spec(10, 1);
        let e = embed_utterance(&m, &s, 10, Branch::Purifying).unwrap();
        let mut g = Graph::new();
        let x = g.constant(m.batch_tensor(&[&s]).unwrap());
        let f = m.encode_p(&mut g, x).unwrap();
        assert_eq!(e, l2_normalize(g.value(f).data()).unwrap());
        assert!((cosine_score(&e, &e) - 1.0).abs() < 1e-9);
        assert_eq!(e, embed_utterance(&m, &s, 10, Branch::Purifying).unwrap());
    }

    #[test]
    fn long_utterances_average_segments() {
        let m = model();
        let long = spec(25, 2);
        let pooled = pooled_features(&m, &[&long], 10, Branch::Purifying).unwrap();
        let segs = audio::cover_segments(&long, 10);
        assert_eq!(segs.len(), 3);
        let each = pooled_features(&m, &segs.iter().collect::<Vec<_>>(), 10, Branch::Purifying).unwrap();
        for k in 0..4 {
            let mean = (each[0][k] + each[1][k] + each[2][k]) / 3.0;
            assert!((pooled[0][k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_score(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_score(&[0.6, 0.8], &[-0.6, -0.8]), -1.0);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scores_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let table = |c: f64| -> HashMap<String, Vec<f64>> {
            raw.iter()
                .enumerate()
                .map(|(i, v)| {
                    let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
                    (format!("u{i}"), l2_normalize(&scaled).unwrap())
                })
                .collect()
        };
        let trials: Vec<TrialPair> = (0..5)
            .map(|i| TrialPair {
                same_speaker: i % 2 == 0,
                utt_a: format!("u{i}"),
                utt_b: format!("u{}", i + 1),
            })
            .collect();
        let base = score_trials(&trials, &table(1.0)).unwrap();
        assert_eq!(base, score_trials(&trials, &table(4.0)).unwrap());
        assert_eq!(base, score_trials(&trials, &table(0.125)).unwrap());
        let odd = score_trials(&trials, &table(3.7)).unwrap();
        for (a, b) in base.iter().zip(&odd) {
            assert!((a.score - b.score).abs() < 1e-12);
        }
        let missing = vec![TrialPair {
            same_speaker: true,
            utt_a: "u0".into(),
            utt_b: "zz".into(),
        }];
        assert!(score_trials(&missing, &table(1.0)).unwrap_err().to_string().contains("zz"));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scored: Vec<ScoredTrial> = [(true, 0.9), (true, 0.4), (false, 0.5), (false, -0.2), (false, 0.1)]
            .iter()
            .map(|&(same_speaker, score)| ScoredTrial { same_speaker, score })
            .collect();
        let r = verification_report(&scored, CostParams::default()).unwrap();
        let probe = ProbeReport {
            target: "speaker".into(),
            source: "f_p".into(),
            accuracy: 0.5,
            chance: 0.25,
            n_train: 4,
            n_test: 4,
        };
        emit_report(dir.path(), &r, &scored, &[probe]).unwrap();
        let det = std::fs::read_to_string(dir.path().join("det.csv")).unwrap();
        assert_eq!(parse_det_csv(&det, "det.csv").unwrap(), r.det_points);
        let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(report.contains(&format!("{:.2}", 100.0 * r.eer)));
        assert!(report.contains("probes"));
        let scores = std::fs::read_to_string(dir.path().join("scores.txt")).unwrap();
        assert_eq!(scores.lines().count(), scored.len());
        assert!(parse_det_csv("x,y\n", "d").is_err());
    }
}
