//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `ALDRCKPT`, `u32` format version, `u64`
//! length + UTF-8 key=value block, `u32` record count, then per record:
//! `u32` name length, name, `u8` dtype tag, `u32` rank, `u64` dims, values.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Phase, Progress, TrainConfig};
use crate::autodiff::Tensor;
use crate::config::{self, KeyValues, ModelSpec};
use crate::error::{Error, Result};
use crate::networks::Model;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ALDRCKPT";
const DTYPE_F64: u8 = 1;

/// Everything needed to resume training exactly or to evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub velocity: Vec<Vec<f64>>,
    pub progress: Progress,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        let m = &self.model.config;
        ModelSpec::from_config(m).write(&mut text);
        let _ = writeln!(text, "model.frames={}", m.frames);
        let _ = writeln!(text, "model.bins={}", m.bins);
        let _ = writeln!(text, "model.num_speakers={}", m.num_speakers);
        config::write_train(&self.train, &mut text);
        let p = &self.progress;
        let _ = writeln!(text, "state.seed={}", self.train.seed);
        let _ = writeln!(text, "state.phase={}", p.phase.name());
        let _ = writeln!(text, "state.phase_epoch={}", p.phase_epoch);
        let _ = writeln!(text, "state.global_epoch={}", p.global_epoch);
        let _ = writeln!(text, "state.step={}", p.step);
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(text, "state.rng_seed={seed}");
        let _ = writeln!(text, "state.rng_stream={}", self.rng.get_stream());
        let _ = writeln!(text, "state.rng_word_pos={}", self.rng.get_word_pos());

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let store = &self.model.store;
        out.extend_from_slice(&(2 * store.len() as u32).to_le_bytes());
        for (id, p) in store.iter() {
            write_record(&mut out, &format!("param/{}", p.name), p.value.shape(), p.value.data());
            write_record(&mut out, &format!("velocity/{}", p.name), p.value.shape(), &self.velocity[id.index()]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("config block is not UTF-8".into()))?;
        let mut kv = KeyValues::parse(text, "checkpoint").map_err(corrupt)?;
        let spec = ModelSpec::read(&mut kv).map_err(corrupt)?;
        let frames = kv.require("model.frames").map_err(corrupt)?;
        let bins = kv.require("model.bins").map_err(corrupt)?;
        let n_spk = kv.require("model.num_speakers").map_err(corrupt)?;
        let seed = kv.require("state.seed").map_err(corrupt)?;
        let train = config::read_train(&mut kv, seed).map_err(corrupt)?;
        let phase: String = kv.require("state.phase").map_err(corrupt)?;
        let progress = Progress {
            phase: Phase::parse(&phase).ok_or_else(|| Error::Corrupt(format!("unknown phase {phase:?}")))?,
            phase_epoch: kv.require("state.phase_epoch").map_err(corrupt)?,
            global_epoch: kv.require("state.global_epoch").map_err(corrupt)?,
            step: kv.require("state.step").map_err(corrupt)?,
        };
        let seed_hex: String = kv.require("state.rng_seed").map_err(corrupt)?;
        let stream: u64 = kv.require("state.rng_stream").map_err(corrupt)?;
        let word_pos: u128 = kv.require("state.rng_word_pos").map_err(corrupt)?;
        kv.finish().map_err(corrupt)?;
        let mut rng = ChaCha8Rng::from_seed(parse_seed(&seed_hex)?);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut model = Model::new(spec.build(frames, bins, n_spk), 0).map_err(corrupt)?;
        let mut velocity: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
        let mut seen = vec![false; model.store.len()];
        let index: std::collections::HashMap<String, usize> = model
            .store
            .iter()
            .map(|(id, p)| (p.name.clone(), id.index()))
            .collect();
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        let count = r.u32()?;
        for _ in 0..count {
            let (name, shape, data) = r.record()?;
            let (kind, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::Corrupt(format!("bad record name {name:?}")))?;
            let &i = index
                .get(pname)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint tensor {pname:?} not in model")))?;
            let p = model.store.get_mut(ids[i]);
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "tensor {pname:?} has shape {shape:?}, model expects {:?}",
                    p.value.shape()
                )));
            }
            match kind {
                "param" => {
                    p.value = Tensor::new(&shape, data)?;
                    seen[i] = true;
                }
                "velocity" => velocity[i] = Some(data),
                _ => return Err(Error::Corrupt(format!("bad record kind {kind:?}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after last record".into()));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Corrupt(format!("missing tensor {}", model.store.get(ids[i]).name)));
        }
        let velocity = velocity
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Corrupt(format!("missing momentum for {}", model.store.get(ids[i]).name))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model,
            train,
            velocity,
            progress,
            rng,
        })
    }
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Parameter(m) => Error::Corrupt(m),
        other => other,
    }
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    let bad = || Error::Corrupt(format!("bad rng seed {hex:?}"));
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(seed)
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?;
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Incompatible(format!("unsupported dtype tag {dtype} for {name:?}")));
        }
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= self.bytes.len() / 8)
            .ok_or_else(|| Error::Corrupt(format!("implausible shape {shape:?} for {name:?}")))?;
        let raw = self.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, data))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    // write-then-rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
