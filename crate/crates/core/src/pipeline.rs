//! End-to-end helpers shared by the command line and the acceptance suite.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::audio::{Framing, Spectrogram};
use crate::config::{ModelSpec, RunConfig};
use crate::dataset::{
    load_manifest, load_nuisance, load_trials, FeatureSet, Manifest, SyntheticConfig, SyntheticDataset, TrialPair,
    NUISANCE_FILE,
};
use crate::error::{Error, Result};
use crate::evaluator::{self, CostParams, ProbeReport, ScoredTrial, VerificationReport};
use crate::networks::{Branch, Model};
use crate::trainer::{load_checkpoint, save_checkpoint, StepLog, TrainConfig, TrainData, Trainer};

pub const PROBE_TEST_FRACTION: f64 = 0.25;

pub fn segment_frames(sample_rate: u32, seconds: f64) -> Result<usize> {
    Ok(Framing::standard(sample_rate)?.segment_frames(seconds))
}

/// Builds a fresh model sized for `features` and wraps it in a trainer.
pub fn new_trainer(features: &FeatureSet, spec: &ModelSpec, cfg: TrainConfig, seg_frames: usize) -> Result<Trainer> {
    let model = Model::new(spec.build(seg_frames, features.bins(), features.num_speakers), cfg.seed)?;
    Trainer::new(model, cfg)
}

/// Trains to completion. `on_epoch` sees the trainer and the new log lines.
pub fn train<F>(trainer: &mut Trainer, features: FeatureSet, on_epoch: F) -> Result<TrainData>
where
    F: FnMut(&Trainer, &[StepLog]) -> Result<()>,
{
    let cfg = &trainer.config;
    let data = TrainData::new(features, trainer.model.config.frames, cfg.holdout_fraction, cfg.seed)?;
    trainer.run(&data, on_epoch)?;
    Ok(data)
}

fn check_bins(model: &Model, features: &FeatureSet) -> Result<()> {
    if features.bins() != model.config.bins {
        return Err(Error::Incompatible(format!(
            "model expects {} frequency bins, data has {} (sample rate {})",
            model.config.bins,
            features.bins(),
            features.sample_rate
        )));
    }
    Ok(())
}

/// Unit embeddings for every utterance, keyed by id.
pub fn embedding_table(model: &Model, features: &FeatureSet, branch: Branch) -> Result<HashMap<String, Vec<f64>>> {
    check_bins(model, features)?;
    let specs: Vec<&Spectrogram> = features.spectrograms.iter().collect();
    let emb = evaluator::embed_utterances(model, &specs, model.config.frames, branch)?;
    Ok(features.ids.iter().cloned().zip(emb).collect())
}

pub fn verify(
    model: &Model,
    features: &FeatureSet,
    trials: &[TrialPair],
    branch: Branch,
) -> Result<(VerificationReport, Vec<ScoredTrial>)> {
    let table = embedding_table(model, features, branch)?;
    let scored = evaluator::score_trials(trials, &table)?;
    let report = evaluator::verification_report(&scored, CostParams::default())?;
    Ok((report, scored))
}

/// Speaker and nuisance probes on f_p and f_e. `nuisance` maps utterance id to class.
pub fn probe_suite(
    model: &Model,
    features: &FeatureSet,
    nuisance: Option<&HashMap<String, usize>>,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    check_bins(model, features)?;
    let specs: Vec<&Spectrogram> = features.spectrograms.iter().collect();
    let nuisance_labels: Option<Vec<usize>> = match nuisance {
        None => None,
        Some(map) => Some(
            features
                .ids
                .iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| Error::Validation(format!("no nuisance label for {id:?}")))
                })
                .collect::<Result<_>>()?,
        ),
    };
    let mut out = Vec::new();
    for (branch, source) in [(Branch::Purifying, "f_p"), (Branch::Eliminating, "f_e")] {
        let feats = evaluator::pooled_features(model, &specs, model.config.frames, branch)?;
        let mut targets = vec![("speaker", features.speakers.clone())];
        if let Some(n) = &nuisance_labels {
            targets.push(("nuisance", n.clone()));
        }
        for (target, labels) in targets {
            let mut r = evaluator::linear_probe(&feats, &labels, PROBE_TEST_FRACTION, seed)?;
            r.target = target.into();
            r.source = source.into();
            out.push(r);
        }
    }
    Ok(out)
}

/// Options of the `generate` command.
#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub out: PathBuf,
    pub synthetic: SyntheticConfig,
    pub seed: u64,
    pub force: bool,
}

/// Writes a synthetic dataset (WAVs, manifest, nuisance labels, trials) to a
/// directory that must be empty or absent unless `force` is set.
pub fn generate(opts: &GenerateOptions) -> Result<Manifest> {
    if !opts.force && dir_has_entries(&opts.out)? {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to write into it",
            opts.out.display()
        )));
    }
    let ds = SyntheticDataset::generate(&opts.synthetic, opts.seed)?;
    ds.write_to(&opts.out, opts.seed)
}

fn dir_has_entries(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const RESOLVED_CONFIG: &str = "config.txt";

/// Runs (or resumes) training as described by `run`, writing the resolved
/// config, a step log and a checkpoint after every epoch into `run.out_dir`.
pub fn train_run(run: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    let out = &run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = load_manifest(&run.manifest)?;
    let features = FeatureSet::from_manifest(&manifest)?;
    let seg = segment_frames(features.sample_rate, run.segment_seconds)?;
    let log_path = out.join(TRAIN_LOG);

    let mut trainer = match resume {
        None => {
            write_file(&log_path, "")?;
            new_trainer(&features, &run.model, run.train.clone(), seg)?
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let expected = run.model.build(seg, features.bins(), features.num_speakers);
            if ck.model.config != expected {
                return Err(Error::Incompatible(format!(
                    "{} was trained with a different model or dataset shape",
                    path.display()
                )));
            }
            if ck.train != run.train {
                return Err(Error::Incompatible(format!(
                    "{} was trained with different train.* settings",
                    path.display()
                )));
            }
            let t = Trainer::from_checkpoint(ck)?;
            truncate_log(&log_path, t.progress.step)?;
            t
        }
    };
    write_file(&out.join(RESOLVED_CONFIG), &run.to_text())?;

    let latest = out.join(LATEST_CHECKPOINT);
    train(&mut trainer, features, |t, lines| {
        let mut text = String::new();
        for l in lines {
            text.push_str(&l.line());
            text.push('\n');
        }
        append_file(&log_path, &text)?;
        save_checkpoint(&t.checkpoint(), &latest)
    })?;
    save_checkpoint(&trainer.checkpoint(), &out.join(FINAL_CHECKPOINT))?;
    Ok(trainer)
}

/// Drops log lines written after the checkpoint being resumed from.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split_whitespace()
                .nth(1)
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .flat_map(|l| [l, "\n"])
        .collect();
    write_file(path, &kept)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_file(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Options of the `eval` command.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub trials: PathBuf,
    pub out: PathBuf,
    /// Defaults to `manifest.txt` next to the trial list.
    pub manifest: Option<PathBuf>,
    pub probe: bool,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: VerificationReport,
    pub scored: Vec<ScoredTrial>,
    pub probes: Vec<ProbeReport>,
}

/// Scores a trial list with the checkpoint's evaluation branch and writes
/// `report.txt`, `det.csv` and `scores.txt` into `opts.out`.
pub fn eval_run(opts: &EvalOptions) -> Result<EvalOutcome> {
    let ck = load_checkpoint(&opts.checkpoint)?;
    let branch = ck.train.ablation.eval_branch();
    let seed = ck.train.seed;
    let model = ck.model;
    let manifest_path = match &opts.manifest {
        Some(p) => p.clone(),
        None => opts
            .trials
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("manifest.txt"),
    };
    let manifest = load_manifest(&manifest_path)?;
    let trials = load_trials(&opts.trials, &manifest)?;
    let features = FeatureSet::from_manifest(&manifest)?;
    let (report, scored) = verify(&model, &features, &trials, branch)?;
    let probes = if opts.probe {
        let np = manifest_path.with_file_name(NUISANCE_FILE);
        let nuisance = if np.exists() { Some(load_nuisance(&np)?) } else { None };
        probe_suite(&model, &features, nuisance.as_ref(), seed)?
    } else {
        Vec::new()
    };
    evaluator::emit_report(&opts.out, &report, &scored, &probes)?;
    Ok(EvalOutcome { report, scored, probes })
}
