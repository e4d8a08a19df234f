//! Flat `section.key=value` configuration files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{ASoftmaxConfig, LossWeights};
use crate::networks::{EncoderConfig, EncoderKind, ModelConfig, SpeakerHead};
use crate::trainer::{Ablation, TrainConfig};

pub const SEED_ENV: &str = "ALDR_SEED";

/// Parsed key-value pairs that remember which keys were read.
#[derive(Debug)]
pub struct KeyValues {
    origin: String,
    entries: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{}: expected key=value", n + 1)));
            };
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", n + 1)));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("{origin}:{}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(KeyValues {
            origin: origin.to_string(),
            entries,
            consumed: BTreeSet::new(),
        })
    }

    pub fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.consumed.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{}: invalid value {v:?} for key `{key}`", self.origin))),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing required key `{key}`", self.origin)))
    }

    pub fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse_list(&v)
                .ok_or_else(|| Error::Config(format!("{}: invalid list {v:?} for key `{key}`", self.origin))),
        }
    }

    /// Fails on the first key that nothing consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().find(|k| !self.consumed.contains(*k)) {
            Some(k) => Err(Error::Config(format!("{}: unknown key `{k}`", self.origin))),
            None => Ok(()),
        }
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Architecture settings that do not depend on the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub adv_hidden: Vec<usize>,
    pub decoder_hidden: usize,
    pub speaker_head: SpeakerHead,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::new(EncoderConfig::default(), 2, 2, 2);
        ModelSpec {
            encoder: c.encoder,
            adv_hidden: c.adv_hidden,
            decoder_hidden: c.decoder_hidden,
            speaker_head: c.speaker_head,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, frames: usize, bins: usize, num_speakers: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            frames,
            bins,
            num_speakers,
            adv_hidden: self.adv_hidden.clone(),
            decoder_hidden: self.decoder_hidden,
            speaker_head: self.speaker_head,
        }
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        ModelSpec {
            encoder: c.encoder.clone(),
            adv_hidden: c.adv_hidden.clone(),
            decoder_hidden: c.decoder_hidden,
            speaker_head: c.speaker_head,
        }
    }

    pub fn read(kv: &mut KeyValues) -> Result<Self> {
        let d = ModelSpec::default();
        let kind = match kv.raw("model.encoder") {
            Some(s) => EncoderKind::parse(&s)?,
            None => d.encoder.kind,
        };
        let base = match kind {
            EncoderKind::Conv => EncoderConfig::conv(),
            EncoderKind::Mlp => EncoderConfig::mlp(),
        };
        let encoder = EncoderConfig {
            kind,
            hidden: kv.list("model.hidden", base.hidden)?,
            embedding_dim: kv.or("model.embedding_dim", base.embedding_dim)?,
        };
        let a = ASoftmaxConfig::default();
        let head = kv.raw("model.head").unwrap_or_else(|| "softmax".into());
        let margin = kv.or("model.margin", a.margin)?;
        let lambda_cos = kv.or("model.lambda_cos", a.lambda_cos)?;
        let speaker_head = match head.as_str() {
            "softmax" => SpeakerHead::Softmax,
            "asoftmax" => SpeakerHead::ASoftmax(ASoftmaxConfig { margin, lambda_cos }),
            other => return Err(Error::Config(format!("model.head must be softmax or asoftmax, got {other:?}"))),
        };
        Ok(ModelSpec {
            encoder,
            adv_hidden: kv.list("model.adv_hidden", d.adv_hidden)?,
            decoder_hidden: kv.or("model.decoder_hidden", d.decoder_hidden)?,
            speaker_head,
        })
    }

    pub fn write(&self, out: &mut String) {
        let e = &self.encoder;
        let _ = writeln!(out, "model.encoder={}", e.kind.name());
        let _ = writeln!(out, "model.hidden={}", join(&e.hidden));
        let _ = writeln!(out, "model.embedding_dim={}", e.embedding_dim);
        let _ = writeln!(out, "model.adv_hidden={}", join(&self.adv_hidden));
        let _ = writeln!(out, "model.decoder_hidden={}", self.decoder_hidden);
        match self.speaker_head {
            SpeakerHead::Softmax => {
                let _ = writeln!(out, "model.head=softmax");
            }
            SpeakerHead::ASoftmax(a) => {
                let _ = writeln!(out, "model.head=asoftmax");
                let _ = writeln!(out, "model.margin={}", a.margin);
                let _ = writeln!(out, "model.lambda_cos={}", a.lambda_cos);
            }
        }
    }
}

/// Reads `train.*` keys over the defaults. `seed` is supplied separately.
pub fn read_train(kv: &mut KeyValues, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let ablation = match kv.raw("train.ablation") {
        Some(s) => Ablation::parse(&s)?,
        None => d.ablation,
    };
    let c = TrainConfig {
        batch_size: kv.or("train.batch_size", d.batch_size)?,
        momentum: kv.or("train.momentum", d.momentum)?,
        weight_decay: kv.or("train.weight_decay", d.weight_decay)?,
        lr_init: kv.or("train.lr_init", d.lr_init)?,
        lr_floor: kv.or("train.lr_floor", d.lr_floor)?,
        lr_decay: kv.or("train.lr_decay", d.lr_decay)?,
        phase1_epochs: kv.or("train.phase1_epochs", d.phase1_epochs)?,
        phase1_accuracy_threshold: kv.or("train.phase1_accuracy_threshold", d.phase1_accuracy_threshold)?,
        holdout_fraction: kv.or("train.holdout_fraction", d.holdout_fraction)?,
        phase2_epochs: kv.or("train.phase2_epochs", d.phase2_epochs)?,
        k_adv: kv.or("train.k_adv", d.k_adv)?,
        weights: LossWeights {
            lambda_p: kv.or("train.lambda_p", d.weights.lambda_p)?,
            lambda_adv: kv.or("train.lambda_adv", d.weights.lambda_adv)?,
            lambda_r: kv.or("train.lambda_r", d.weights.lambda_r)?,
        },
        seed,
        ablation,
    };
    c.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(c)
}

pub fn write_train(c: &TrainConfig, out: &mut String) {
    let w = &c.weights;
    let lines = [
        ("batch_size", c.batch_size.to_string()),
        ("momentum", c.momentum.to_string()),
        ("weight_decay", c.weight_decay.to_string()),
        ("lr_init", c.lr_init.to_string()),
        ("lr_floor", c.lr_floor.to_string()),
        ("lr_decay", c.lr_decay.to_string()),
        ("phase1_epochs", c.phase1_epochs.to_string()),
        ("phase1_accuracy_threshold", c.phase1_accuracy_threshold.to_string()),
        ("holdout_fraction", c.holdout_fraction.to_string()),
        ("phase2_epochs", c.phase2_epochs.to_string()),
        ("k_adv", c.k_adv.to_string()),
        ("lambda_p", w.lambda_p.to_string()),
        ("lambda_adv", w.lambda_adv.to_string()),
        ("lambda_r", w.lambda_r.to_string()),
        ("ablation", c.ablation.name().to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "train.{k}={v}");
    }
}

/// Everything `train` and `eval` need from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub segment_seconds: f64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub trials: Option<PathBuf>,
}

impl RunConfig {
    /// `env_seed` is the value of `ALDR_SEED`, used when the file has no `seed`.
    pub fn parse(text: &str, origin: &str, env_seed: Option<&str>) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let seed = match (kv.get::<u64>("seed")?, env_seed) {
            (Some(s), _) => s,
            (None, Some(e)) => e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={e:?} is not an unsigned integer")))?,
            (None, None) => {
                return Err(Error::Config(format!(
                    "{origin}: missing required key `seed` (or set {SEED_ENV})"
                )))
            }
        };
        let manifest: PathBuf = kv.require("data.manifest")?;
        let out_dir: PathBuf = kv.require("run.out_dir")?;
        let segment_seconds = kv.or("data.segment_seconds", crate::audio::SEGMENT_SECONDS)?;
        if !(segment_seconds > 0.0) {
            return Err(Error::Config("data.segment_seconds must be positive".into()));
        }
        let model = ModelSpec::read(&mut kv)?;
        let train = read_train(&mut kv, seed)?;
        let trials = kv.get("eval.trials")?;
        kv.finish()?;
        Ok(RunConfig {
            manifest,
            out_dir,
            segment_seconds,
            model,
            train,
            trials,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::parse(&text, &path.display().to_string(), env.as_deref())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.train.seed);
        let _ = writeln!(s, "data.manifest={}", self.manifest.display());
        let _ = writeln!(s, "data.segment_seconds={}", self.segment_seconds);
        let _ = writeln!(s, "run.out_dir={}", self.out_dir.display());
        if let Some(t) = &self.trials {
            let _ = writeln!(s, "eval.trials={}", t.display());
        }
        self.model.write(&mut s);
        write_train(&self.train, &mut s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "seed=3\ndata.manifest=m.txt\nrun.out_dir=out\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MIN, "c", None).unwrap();
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.model.encoder, EncoderConfig::conv());
        assert_eq!(c.segment_seconds, 3.0);
    }

    #[test]
    fn round_trip_through_text() {
        let text = format!(
            "{MIN}train.lr_init=0.05\ntrain.ablation=ep_dr\nmodel.encoder=mlp\nmodel.hidden=32,16\nmodel.head=asoftmax\nmodel.margin=2\neval.trials=t.txt\n"
        );
        let c = RunConfig::parse(&text, "c", None).unwrap();
        assert_eq!(c.train.ablation, Ablation::EpDr);
        assert_eq!(c.model.encoder.hidden, vec![32, 16]);
        assert_eq!(
            c.model.speaker_head,
            SpeakerHead::ASoftmax(ASoftmaxConfig { margin: 2, lambda_cos: 5.0 })
        );
        let again = RunConfig::parse(&c.to_text(), "c2", None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let e = RunConfig::parse("seed=1\nrun.out_dir=o\n", "c", None).unwrap_err();
        assert!(e.to_string().contains("data.manifest"), "{e}");
        let e = RunConfig::parse(&format!("{MIN}train.lr=1\n"), "c", None).unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
        let e = RunConfig::parse(&format!("{MIN}train.ablation=nope\n"), "c", None).unwrap_err();
        assert!(e.to_string().contains("ep_randvec_dr"), "{e}");
    }

    #[test]
    fn seed_falls_back_to_environment_value() {
        let text = "data.manifest=m\nrun.out_dir=o\n";
        assert_eq!(RunConfig::parse(text, "c", Some("17")).unwrap().train.seed, 17);
        assert!(RunConfig::parse(text, "c", None).unwrap_err().to_string().contains("seed"));
        assert!(RunConfig::parse(text, "c", Some("x")).is_err());
        assert_eq!(RunConfig::parse(MIN, "c", Some("17")).unwrap().train.seed, 3);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for extra in ["train.batch_size=0", "train.lr_decay=1.5", "train.momentum=abc", "garbage line"] {
            let e = RunConfig::parse(&format!("{MIN}{extra}\n"), "c", None).unwrap_err();
            assert_eq!(e.class(), crate::error::ErrorClass::Config, "{extra}: {e}");
        }
    }
}
