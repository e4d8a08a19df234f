//! The five learnable components: twin encoders, speaker classifier,
//! adversarial classifier and reconstruction decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Spectrogram;
use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, ASoftmaxConfig};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const ADV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Conv,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "conv" => Ok(EncoderKind::Conv),
            _ => Err(Error::Config(format!("encoder kind must be mlp or conv, got {s:?}"))),
        }
    }
}

/// Shared by both encoders of a model. `hidden` holds frame-wise layer widths
/// for `Mlp` and channel counts (3×3, stride 2) for `Conv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    pub fn conv() -> Self {
        EncoderConfig {
            kind: EncoderKind::Conv,
            hidden: vec![8, 16],
            embedding_dim: 64,
        }
    }

    pub fn mlp() -> Self {
        EncoderConfig {
            kind: EncoderKind::Mlp,
            hidden: vec![64],
            embedding_dim: 64,
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::conv()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpeakerHead {
    Softmax,
    ASoftmax(ASoftmaxConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub frames: usize,
    pub bins: usize,
    pub num_speakers: usize,
    pub adv_hidden: Vec<usize>,
    pub decoder_hidden: usize,
    pub speaker_head: SpeakerHead,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, frames: usize, bins: usize, num_speakers: usize) -> Self {
        ModelConfig {
            encoder,
            frames,
            bins,
            num_speakers,
            adv_hidden: vec![128; 3],
            decoder_hidden: 64,
            speaker_head: SpeakerHead::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.embedding_dim < 2 {
            return Err(Error::Parameter("embedding_dim must be >= 2".into()));
        }
        if e.hidden.is_empty() || e.hidden.contains(&0) {
            return Err(Error::Parameter("encoder hidden sizes must be non-empty and positive".into()));
        }
        if self.num_speakers < 2 {
            return Err(Error::Parameter("need at least 2 speakers".into()));
        }
        if self.frames < 2 || self.bins < 2 || self.decoder_hidden == 0 || self.adv_hidden.contains(&0) {
            return Err(Error::Parameter("model sizes must be positive".into()));
        }
        if let SpeakerHead::ASoftmax(cfg) = self.speaker_head {
            cfg.validate()?;
        }
        if e.kind == EncoderKind::Conv {
            conv_sizes(self.frames, self.bins, e.hidden.len())?;
        }
        Ok(())
    }
}

/// Spatial sizes after each conv layer, starting with the input.
fn conv_sizes(h: usize, w: usize, layers: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = vec![(h, w)];
    for _ in 0..layers {
        let (h, w) = *out.last().unwrap();
        if h < KERNEL || w < KERNEL {
            return Err(Error::Parameter(format!(
                "input {}x{} too small for {layers} conv layers",
                out[0].0, out[0].1
            )));
        }
        out.push(((h - KERNEL) / STRIDE + 1, (w - KERNEL) / STRIDE + 1));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<ParamId>,
    frame_layers: Vec<Dense>,
    proj: Dense,
}

#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<Dense>,
    deconvs: Vec<ParamId>,
}

/// Which of the twin encoders to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Purifying,
    Eliminating,
}

impl Branch {
    pub fn group(self) -> ParamGroup {
        match self {
            Branch::Purifying => ParamGroup::PurifyingEncoder,
            Branch::Eliminating => ParamGroup::EliminatingEncoder,
        }
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn xavier(&mut self, name: String, group: ParamGroup, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-s..s)).collect();
        self.store.add(name, group, Tensor::new(shape, data).expect("positive shape"))
    }

    fn dense(&mut self, name: &str, group: ParamGroup, i: usize, o: usize) -> Dense {
        let w = self.xavier(format!("{name}.w"), group, &[i, o], i, o);
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros(&[o]));
        Dense { w, b }
    }

    fn conv(&mut self, name: String, group: ParamGroup, shape: [usize; 4], fan_in_ch: usize, fan_out_ch: usize) -> ParamId {
        let area = KERNEL * KERNEL;
        self.xavier(name, group, &shape, fan_in_ch * area, fan_out_ch * area)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc_p: Encoder,
    enc_e: Encoder,
    speaker: Dense,
    adv: Vec<Dense>,
    decoder: Decoder,
}

impl Model {
    /// Xavier-uniform weights, zero biases, drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let enc_p = build_encoder(&mut b, &config, ParamGroup::PurifyingEncoder);
        let enc_e = build_encoder(&mut b, &config, ParamGroup::EliminatingEncoder);
        let d = config.encoder.embedding_dim;
        let n = config.num_speakers;
        let speaker = b.dense("C_speaker.out", ParamGroup::SpeakerClassifier, d, n);
        let mut adv = Vec::new();
        let mut width = d;
        for (i, &h) in config.adv_hidden.iter().enumerate() {
            adv.push(b.dense(&format!("C_adv.l{i}"), ParamGroup::AdversarialClassifier, width, h));
            width = h;
        }
        adv.push(b.dense("C_adv.out", ParamGroup::AdversarialClassifier, width, n));
        let decoder = build_decoder(&mut b, &config)?;
        Ok(Model {
            config,
            store,
            enc_p,
            enc_e,
            speaker,
            adv,
            decoder,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.store.group_len(group)
    }

    /// Stacks equally sized segments into `[B×T×F]`.
    pub fn batch_tensor(&self, segments: &[&Spectrogram]) -> Result<Tensor> {
        let (t, f) = (self.config.frames, self.config.bins);
        let mut data = Vec::with_capacity(segments.len() * t * f);
        for s in segments {
            if s.frames() != t || s.bins() != f {
                return Err(Error::dim("segment", &[s.frames(), s.bins()], &[t, f]));
            }
            data.extend_from_slice(s.data());
        }
        Tensor::new(&[segments.len(), t, f], data)
    }

    /// Runs one encoder on `x: [B×T×F]`, returning `[B×D]`.
    pub fn encode(&self, g: &mut Graph, branch: Branch, x: Var) -> Result<Var> {
        let (t, f) = (self.config.frames, self.config.bins);
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != t || s[2] != f {
            return Err(Error::dim("encode", &s, &[t, f]));
        }
        let bsz = s[0];
        let enc = match branch {
            Branch::Purifying => &self.enc_p,
            Branch::Eliminating => &self.enc_e,
        };
        let pooled = match self.config.encoder.kind {
            EncoderKind::Conv => {
                let mut h = g.reshape(x, &[bsz, 1, t, f])?;
                for &k in &enc.convs {
                    let kv = g.param(&self.store, k);
                    h = g.conv2d(h, kv, STRIDE)?;
                    h = g.relu(h);
                }
                // temporal average over the frame axis, then flatten channels × bins
                let m = g.mean_axis(h, 2)?;
                let s = g.shape(m).to_vec();
                g.reshape(m, &[bsz, s[1] * s[2]])?
            }
            EncoderKind::Mlp => {
                let mut h = g.reshape(x, &[bsz * t, f])?;
                for layer in &enc.frame_layers {
                    h = layer.apply(g, &self.store, h)?;
                    h = g.relu(h);
                }
                let width = g.shape(h)[1];
                let h = g.reshape(h, &[bsz, t, width])?;
                g.mean_axis(h, 1)?
            }
        };
        enc.proj.apply(g, &self.store, pooled)
    }

    pub fn encode_p(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.encode(g, Branch::Purifying, x)
    }

    pub fn encode_e(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.encode(g, Branch::Eliminating, x)
    }

    pub fn fuse(&self, g: &mut Graph, f_p: Var, f_e: Var) -> Result<Var> {
        g.concat(f_p, f_e)
    }

    fn check_embedding(&self, g: &Graph, f: Var, op: &'static str) -> Result<()> {
        let s = g.shape(f);
        if s.len() != 2 || s[1] != self.embedding_dim() {
            return Err(Error::dim(op, s, &[self.embedding_dim()]));
        }
        Ok(())
    }

    /// Raw speaker logits. With an A-softmax head these are the angular logits
    /// `‖x‖·cos θ_i`, recorded as a constant (use [`Model::speaker_loss`] to train).
    pub fn classify_speaker(&self, g: &mut Graph, f_p: Var) -> Result<Var> {
        self.check_embedding(g, f_p, "classify_speaker")?;
        match self.config.speaker_head {
            SpeakerHead::Softmax => self.speaker.apply(g, &self.store, f_p),
            SpeakerHead::ASoftmax(_) => {
                let w = &self.store.get(self.speaker.w).value;
                let z = losses::angular_logits(g.value(f_p), w)?;
                Ok(g.constant(z))
            }
        }
    }

    /// `L_p` under the configured head.
    pub fn speaker_loss(&self, g: &mut Graph, f_p: Var, targets: &[usize]) -> Result<Var> {
        self.check_embedding(g, f_p, "speaker_loss")?;
        match self.config.speaker_head {
            SpeakerHead::Softmax => {
                let z = self.speaker.apply(g, &self.store, f_p)?;
                losses::softmax_ce(g, z, targets)
            }
            SpeakerHead::ASoftmax(cfg) => {
                let w = g.param(&self.store, self.speaker.w);
                losses::a_softmax_loss(g, f_p, w, targets, cfg)
            }
        }
    }

    pub fn classify_adv(&self, g: &mut Graph, f_e: Var) -> Result<Var> {
        self.check_embedding(g, f_e, "classify_adv")?;
        // batch statistics keep E_e from hiding identity by shrinking f_e
        let mut h = g.standardize_batch(f_e, ADV_EPS)?;
        let last = self.adv.len() - 1;
        for (i, layer) in self.adv.iter().enumerate() {
            h = layer.apply(g, &self.store, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Maps a fused `[B×2D]` feature back to `[B×T×F]`.
    pub fn decode(&self, g: &mut Graph, f_s: Var) -> Result<Var> {
        let s = g.shape(f_s).to_vec();
        if s.len() != 2 || s[1] != 2 * self.embedding_dim() {
            return Err(Error::dim("decode", &s, &[2 * self.embedding_dim()]));
        }
        let bsz = s[0];
        let (t, f) = (self.config.frames, self.config.bins);
        let dec = &self.decoder;
        let mut h = f_s;
        for (i, layer) in dec.layers.iter().enumerate() {
            h = layer.apply(g, &self.store, h)?;
            if i + 1 < dec.layers.len() {
                h = g.relu(h);
            }
        }
        match self.config.encoder.kind {
            EncoderKind::Mlp => g.reshape(h, &[bsz, t, f]),
            EncoderKind::Conv => {
                let ch = &self.config.encoder.hidden;
                let sizes = conv_sizes(t, f, ch.len())?;
                let (hh, ww) = sizes[ch.len()];
                h = g.relu(h);
                h = g.reshape(h, &[bsz, ch[ch.len() - 1], hh, ww])?;
                for (i, &k) in dec.deconvs.iter().enumerate() {
                    let kv = g.param(&self.store, k);
                    let target = sizes[ch.len() - 1 - i];
                    h = g.conv_transpose2d(h, kv, STRIDE, target)?;
                    if i + 1 < dec.deconvs.len() {
                        h = g.relu(h);
                    }
                }
                g.reshape(h, &[bsz, t, f])
            }
        }
    }

    /// Copies every E_p tensor into its E_e counterpart.
    pub fn init_from_purifying(&mut self) -> Result<()> {
        let src = self.store.ids_in(ParamGroup::PurifyingEncoder);
        let dst = self.store.ids_in(ParamGroup::EliminatingEncoder);
        if src.len() != dst.len() {
            return Err(Error::Validation("encoder architectures differ".into()));
        }
        for (s, d) in src.into_iter().zip(dst) {
            let value = self.store.get(s).value.clone();
            if value.shape() != self.store.get(d).value.shape() {
                return Err(Error::Validation(format!(
                    "encoder tensor {} has mismatched shape",
                    self.store.get(d).name
                )));
            }
            self.store.get_mut(d).value = value;
        }
        Ok(())
    }
}

fn build_encoder(b: &mut Builder, cfg: &ModelConfig, group: ParamGroup) -> Encoder {
    let name = group.short_name();
    let e = &cfg.encoder;
    let mut convs = Vec::new();
    let mut frame_layers = Vec::new();
    let pooled = match e.kind {
        EncoderKind::Conv => {
            let mut cin = 1;
            for (i, &c) in e.hidden.iter().enumerate() {
                convs.push(b.conv(format!("{name}.conv{i}"), group, [c, cin, KERNEL, KERNEL], cin, c));
                cin = c;
            }
            let sizes = conv_sizes(cfg.frames, cfg.bins, e.hidden.len()).expect("validated");
            cin * sizes[e.hidden.len()].1
        }
        EncoderKind::Mlp => {
            let mut width = cfg.bins;
            for (i, &h) in e.hidden.iter().enumerate() {
                frame_layers.push(b.dense(&format!("{name}.frame{i}"), group, width, h));
                width = h;
            }
            width
        }
    };
    let proj = b.dense(&format!("{name}.proj"), group, pooled, e.embedding_dim);
    Encoder {
        convs,
        frame_layers,
        proj,
    }
}

fn build_decoder(b: &mut Builder, cfg: &ModelConfig) -> Result<Decoder> {
    let g = ParamGroup::Decoder;
    let e = &cfg.encoder;
    let fused = 2 * e.embedding_dim;
    let hid = cfg.decoder_hidden;
    let mut layers = vec![b.dense("D_r.l0", g, fused, hid)];
    let mut deconvs = Vec::new();
    match e.kind {
        EncoderKind::Mlp => layers.push(b.dense("D_r.out", g, hid, cfg.frames * cfg.bins)),
        EncoderKind::Conv => {
            let n = e.hidden.len();
            let sizes = conv_sizes(cfg.frames, cfg.bins, n)?;
            let (hh, ww) = sizes[n];
            layers.push(b.dense("D_r.l1", g, hid, e.hidden[n - 1] * hh * ww));
            for i in (0..n).rev() {
                let cin = e.hidden[i];
                let cout = if i == 0 { 1 } else { e.hidden[i - 1] };
                deconvs.push(b.conv(format!("D_r.deconv{i}"), g, [cin, cout, KERNEL, KERNEL], cin, cout));
            }
        }
    }
    Ok(Decoder { layers, deconvs })
}
