//! Two-phase training: speaker pre-training of E_p, then adversarial
//! disentanglement with gated per-group updates.

mod checkpoint;
mod sgd;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use sgd::{lr_schedule, Sgd};

use crate::audio::{self, Spectrogram};
use crate::autodiff::{Graph, GroupSet, ParamGroup, Tensor};
use crate::dataset::FeatureSet;
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, LossWeights, Objective};
use crate::networks::{Branch, Model};

const STREAM_SPLIT: u64 = 11;
const STREAM_RANDVEC: u64 = 12;

/// Training branches, named after the rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    EpOnly,
    EpDr,
    EeOnly,
    EeNoAdvS,
    EeNoAdvE,
    EpRandvecDr,
}

/// Where the second half of the fused feature comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EliminatingSource {
    Encoder,
    Zeros,
    RandomVector,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::EpOnly,
        Ablation::EpDr,
        Ablation::EeOnly,
        Ablation::EeNoAdvS,
        Ablation::EeNoAdvE,
        Ablation::EpRandvecDr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::EpOnly => "ep_only",
            Ablation::EpDr => "ep_dr",
            Ablation::EeOnly => "ee_only",
            Ablation::EeNoAdvS => "ee_no_adv_s",
            Ablation::EeNoAdvE => "ee_no_adv_e",
            Ablation::EpRandvecDr => "ep_randvec_dr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation {s:?}; valid: {}", names.join(", ")))
        })
    }

    /// Source of `f_e` for reconstruction, or `None` when `L_r` is off.
    pub fn eliminating_source(self) -> Option<EliminatingSource> {
        match self {
            Ablation::EpOnly => None,
            Ablation::EpDr => Some(EliminatingSource::Zeros),
            Ablation::EpRandvecDr => Some(EliminatingSource::RandomVector),
            _ => Some(EliminatingSource::Encoder),
        }
    }

    pub fn uses_eliminating_encoder(self) -> bool {
        self.eliminating_source() == Some(EliminatingSource::Encoder)
    }

    pub fn trains_adversary(self) -> bool {
        self.uses_eliminating_encoder() && self != Ablation::EeNoAdvS
    }

    pub fn trains_eliminator(self) -> bool {
        self.uses_eliminating_encoder() && self != Ablation::EeNoAdvE
    }

    /// Which encoder supplies verification embeddings.
    pub fn eval_branch(self) -> Branch {
        match self {
            Ablation::EeOnly | Ablation::EeNoAdvS | Ablation::EeNoAdvE => Branch::Eliminating,
            _ => Branch::Purifying,
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_decay: f64,
    pub phase1_epochs: usize,
    pub phase1_accuracy_threshold: f64,
    pub holdout_fraction: f64,
    pub phase2_epochs: usize,
    pub k_adv: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_init: 1e-2,
            lr_floor: 1e-6,
            lr_decay: 0.9,
            phase1_epochs: 20,
            phase1_accuracy_threshold: 0.9,
            holdout_fraction: 0.2,
            phase2_epochs: 20,
            k_adv: 1,
            weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let checks: [(bool, &str); 9] = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr_decay > 0.0 && self.lr_decay < 1.0, "lr_decay must be in (0, 1)"),
            (self.lr_init >= 0.0 && self.lr_floor >= 0.0, "learning rates must be >= 0"),
            ((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (
                w.lambda_p >= 0.0 && w.lambda_adv >= 0.0 && w.lambda_r >= 0.0,
                "loss weights must be >= 0",
            ),
            (self.k_adv >= 1, "k_adv must be >= 1"),
            ((0.0..1.0).contains(&self.holdout_fraction), "holdout_fraction must be in [0, 1)"),
            (self.phase1_accuracy_threshold.is_finite(), "phase1 accuracy threshold must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Parameter(msg.into()));
            }
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr_init, self.lr_decay, self.lr_floor)
    }
}

/// Features plus a speaker-stratified train / held-out split.
pub struct TrainData {
    pub features: FeatureSet,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub seg_frames: usize,
}

impl TrainData {
    pub fn new(features: FeatureSet, seg_frames: usize, holdout_fraction: f64, seed: u64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Validation("no training utterances".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_SPLIT);
        let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &s) in features.speakers.iter().enumerate() {
            by_speaker.entry(s).or_default().push(i);
        }
        let (mut train, mut holdout) = (Vec::new(), Vec::new());
        for (_, mut idx) in by_speaker {
            idx.shuffle(&mut rng);
            let mut k = (idx.len() as f64 * holdout_fraction).round() as usize;
            if holdout_fraction > 0.0 && idx.len() >= 2 {
                k = k.clamp(1, idx.len() - 1);
            }
            holdout.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        holdout.sort_unstable();
        Ok(TrainData {
            features,
            train,
            holdout,
            seg_frames,
        })
    }

    /// Deterministic segment used for held-out accuracy: the first `T_seg` frames.
    pub fn eval_segment(&self, i: usize) -> Spectrogram {
        self.features.spectrograms[i].cyclic_slice(0, self.seg_frames)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adversarial,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "phase1",
            Phase::Adversarial => "phase2",
            Phase::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Phase::Pretrain, Phase::Adversarial, Phase::Done]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub phase: Phase,
    pub phase_epoch: usize,
    pub global_epoch: usize,
    pub step: u64,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossBundle,
    pub lr: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        let l = &self.losses;
        format!(
            "{} {} {} {} {} {} {} {}",
            self.epoch, self.step, l.l_p, l.l_adv_s, l.l_adv_e, l.l_r, l.l_total, self.lr
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_l_p: f64,
    pub speaker_accuracy: f64,
    pub adversary_accuracy: f64,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub opt: Sgd,
    pub progress: Progress,
    pub log: Vec<StepLog>,
    pub history: Vec<EpochSummary>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Sgd::new(&model.store, config.momentum, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            opt,
            progress: Progress {
                phase: Phase::Pretrain,
                phase_epoch: 0,
                global_epoch: 0,
                step: 0,
            },
            log: Vec::new(),
            history: Vec::new(),
            rng,
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Runs both phases to completion, calling `on_epoch` after every epoch.
    pub fn run<F>(&mut self, data: &TrainData, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &[StepLog]) -> Result<()>,
    {
        if data.train.len() < self.config.batch_size {
            return Err(Error::Validation(format!(
                "{} training utterances is fewer than one batch of {}",
                data.train.len(),
                self.config.batch_size
            )));
        }
        loop {
            match self.progress.phase {
                Phase::Pretrain if self.progress.phase_epoch >= self.config.phase1_epochs => {
                    self.enter_phase2()?;
                }
                Phase::Adversarial if self.progress.phase_epoch >= self.config.phase2_epochs => {
                    self.progress.phase = Phase::Done;
                }
                Phase::Done => return Ok(()),
                phase => {
                    let start = self.log.len();
                    self.run_epoch(data)?;
                    let (speaker_accuracy, adversary_accuracy) = self.holdout_accuracy(data)?;
                    let steps = &self.log[start..];
                    let mean_l_p = steps.iter().map(|s| s.losses.l_p).sum::<f64>() / steps.len().max(1) as f64;
                    self.history.push(EpochSummary {
                        phase,
                        epoch: self.progress.global_epoch,
                        mean_l_p,
                        speaker_accuracy,
                        adversary_accuracy,
                    });
                    self.progress.phase_epoch += 1;
                    self.progress.global_epoch += 1;
                    if phase == Phase::Pretrain
                        && (speaker_accuracy >= self.config.phase1_accuracy_threshold
                            || self.progress.phase_epoch >= self.config.phase1_epochs)
                    {
                        self.enter_phase2()?;
                    }
                    let new_steps = self.log[start..].to_vec();
                    on_epoch(self, &new_steps)?;
                }
            }
        }
    }

    /// Switches to the adversarial phase, copying E_p into E_e when used.
    pub fn enter_phase2(&mut self) -> Result<()> {
        if self.config.ablation.uses_eliminating_encoder() {
            self.model.init_from_purifying()?;
        }
        self.progress.phase = Phase::Adversarial;
        self.progress.phase_epoch = 0;
        Ok(())
    }

    fn run_epoch(&mut self, data: &TrainData) -> Result<()> {
        let lr = self.config.lr(self.progress.global_epoch);
        let mut order = data.train.clone();
        order.shuffle(&mut self.rng);
        for batch in order.chunks_exact(self.config.batch_size) {
            let segments: Vec<Spectrogram> = batch
                .iter()
                .map(|&i| audio::sample_segment(&data.features.spectrograms[i], data.seg_frames, &mut self.rng))
                .collect();
            let refs: Vec<&Spectrogram> = segments.iter().collect();
            let x = self.model.batch_tensor(&refs)?;
            let targets: Vec<usize> = batch.iter().map(|&i| data.features.speakers[i]).collect();
            let losses = self.step(&x, &targets, batch, lr)?;
            self.log.push(StepLog {
                epoch: self.progress.global_epoch,
                step: self.progress.step,
                losses,
                lr,
            });
            self.progress.step += 1;
        }
        Ok(())
    }

    /// One gated update on a batch. Phase 1 (and `ep_only`) touch only
    /// {E_p, C_speaker}; the adversarial phase runs, in order, the C_adv step,
    /// the E_e step and the joint speaker + reconstruction step.
    pub fn step(&mut self, x: &Tensor, targets: &[usize], utts: &[usize], lr: f64) -> Result<LossBundle> {
        let ab = self.config.ablation;
        let w = self.config.weights;
        let adversarial = self.progress.phase == Phase::Adversarial;
        let (mut l_adv_s, mut l_adv_e, mut l_r) = (0.0, 0.0, 0.0);

        if adversarial && ab.uses_eliminating_encoder() {
            let mut ge = Graph::new();
            let xv = ge.constant(x.clone());
            let fe = self.model.encode_e(&mut ge, xv)?;
            let fe_value = ge.value(fe).clone();
            let rounds = if ab.trains_adversary() { self.config.k_adv } else { 1 };
            for _ in 0..rounds {
                let mut ga = Graph::new();
                let f = ga.constant(fe_value.clone());
                let z = self.model.classify_adv(&mut ga, f)?;
                let l = losses::adv_classifier_loss(&mut ga, z, targets)?;
                l_adv_s = ga.value(l).data()[0];
                finite("L_adv_s", l_adv_s)?;
                if ab.trains_adversary() {
                    let root = ga.scale(l, w.lambda_adv);
                    self.apply(&mut ga, root, Objective::AdvClassifier.routing(), lr)?;
                }
            }
            // the adversary has just moved; E_e is judged against its new state
            let z = self.model.classify_adv(&mut ge, fe)?;
            let l = losses::adv_eliminate_loss(&mut ge, z)?;
            l_adv_e = ge.value(l).data()[0];
            finite("L_adv_e", l_adv_e)?;
            if ab.trains_eliminator() {
                let root = ge.scale(l, w.lambda_adv);
                self.apply(&mut ge, root, Objective::AdvEliminate.routing(), lr)?;
            }
        }

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fp = self.model.encode_p(&mut g, xv)?;
        let lp = self.model.speaker_loss(&mut g, fp, targets)?;
        let l_p = g.value(lp).data()[0];
        finite("L_p", l_p)?;
        let mut root = g.scale(lp, w.lambda_p);
        let mut groups = Objective::Speaker.routing();
        if let (true, Some(source)) = (adversarial, ab.eliminating_source()) {
            let bsz = targets.len();
            let d = self.model.embedding_dim();
            let fe = match source {
                EliminatingSource::Encoder => self.model.encode_e(&mut g, xv)?,
                EliminatingSource::Zeros => g.constant(Tensor::zeros(&[bsz, d])),
                EliminatingSource::RandomVector => {
                    let rows: Vec<f64> = utts.iter().flat_map(|&u| self.random_vector(u)).collect();
                    g.constant(Tensor::new(&[bsz, d], rows)?)
                }
            };
            let fs = self.model.fuse(&mut g, fp, fe)?;
            let out = self.model.decode(&mut g, fs)?;
            let lr_loss = losses::reconstruction_loss(&mut g, out, x)?;
            l_r = g.value(lr_loss).data()[0];
            finite("L_r", l_r)?;
            let scaled = g.scale(lr_loss, w.lambda_r);
            root = g.add(root, scaled)?;
            groups = groups.union(GroupSet::of(&[ParamGroup::Decoder]));
            if source == EliminatingSource::Encoder {
                groups = groups.union(GroupSet::of(&[ParamGroup::EliminatingEncoder]));
            }
        }
        self.apply(&mut g, root, groups, lr)?;
        LossBundle::combine(l_p, l_adv_s, l_adv_e, l_r, w)
    }

    fn apply(&mut self, g: &mut Graph, root: crate::autodiff::Var, groups: GroupSet, lr: f64) -> Result<()> {
        g.backward(root, groups, &mut self.model.store)?;
        for group in groups.iter() {
            self.opt.step(&mut self.model.store, group, lr)?;
        }
        Ok(())
    }

    /// Fixed standard-normal stand-in for `f_e`, one per utterance.
    pub fn random_vector(&self, utt: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (utt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(STREAM_RANDVEC);
        (0..self.model.embedding_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// Held-out accuracy of C_speaker on f_p and of C_adv on f_e.
    pub fn holdout_accuracy(&self, data: &TrainData) -> Result<(f64, f64)> {
        if data.holdout.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let (mut hit_s, mut hit_a) = (0usize, 0usize);
        for chunk in data.holdout.chunks(64) {
            let segs: Vec<Spectrogram> = chunk.iter().map(|&i| data.eval_segment(i)).collect();
            let refs: Vec<&Spectrogram> = segs.iter().collect();
            let x = self.model.batch_tensor(&refs)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let fp = self.model.encode_p(&mut g, xv)?;
            let zs = self.model.classify_speaker(&mut g, fp)?;
            let fe = self.model.encode_e(&mut g, xv)?;
            let za = self.model.classify_adv(&mut g, fe)?;
            for (j, &i) in chunk.iter().enumerate() {
                let y = data.features.speakers[i];
                hit_s += usize::from(argmax_row(g.value(zs), j) == y);
                hit_a += usize::from(argmax_row(g.value(za), j) == y);
            }
        }
        let n = data.holdout.len() as f64;
        Ok((hit_s as f64 / n, hit_a as f64 / n))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            velocity: self.opt.velocity().to_vec(),
            progress: self.progress,
            rng: self.rng.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.model, ckpt.train)?;
        t.opt.set_velocity(ckpt.velocity)?;
        t.progress = ckpt.progress;
        t.rng = ckpt.rng;
        Ok(t)
    }
}

fn finite(component: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault {
            component: component.to_string(),
        })
    }
}

pub(crate) fn argmax_row(t: &Tensor, row: usize) -> usize {
    let n = t.shape()[1];
    let r = &t.data()[row * n..(row + 1) * n];
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}
