//! The two-stream encoder: a shared CNN feature extractor, per-stream
//! relative positional convolutions with learnable stream biases,
//! temporal concatenation (enrollment first), a pre-norm Transformer
//! whose self-attention carries a gated relative position bias, and a
//! frame-label prediction head over the main-stream positions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::mixer::LabelAlign;
use crate::objectives::{apply_masks, MaskSpec};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Which side of the concatenation the enrollment stream occupies.
/// `Front` keeps the main stream as a single suffix slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollPosition {
    Front,
    Back,
}

impl std::fmt::Display for EnrollPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnrollPosition::Front => "front",
            EnrollPosition::Back => "back",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// CNN encoder stack as (channels, kernel, stride) per layer.
    pub conv_stack: Vec<(usize, usize, usize)>,
    /// Hidden width.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Positional convolution kernel (odd) and channel groups.
    pub rpe_kernel: usize,
    pub rpe_groups: usize,
    /// Pre-training classes (the K-means codebook size).
    pub n_classes: usize,
    pub rel_pos_buckets: usize,
    pub max_rel_distance: usize,
    pub enroll_position: EnrollPosition,
    /// Speaker-embedding width for adaptation layers.
    pub emb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale: receptive field 400 samples, hop 320 (20 ms).
        ModelConfig {
            conv_stack: vec![(24, 5, 5), (32, 16, 4), (64, 17, 16)],
            d: 64,
            n_layers: 3,
            n_heads: 4,
            ffn_dim: 256,
            rpe_kernel: 15,
            rpe_groups: 4,
            n_classes: 16,
            rel_pos_buckets: 64,
            max_rel_distance: 800,
            enroll_position: EnrollPosition::Front,
            emb_dim: 80,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough for exhaustive finite-difference
    /// checks: hop 20, receptive field 26, a few thousand parameters.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            conv_stack: vec![(8, 4, 2), (12, 4, 2), (16, 5, 5)],
            d: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            rpe_kernel: 5,
            rpe_groups: 2,
            n_classes: 4,
            rel_pos_buckets: 16,
            max_rel_distance: 64,
            enroll_position: EnrollPosition::Front,
            emb_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_stack.is_empty() {
            return Err(Error::Config("empty conv stack".into()));
        }
        if self.conv_stack.last().unwrap().0 != self.d {
            return Err(Error::Config(format!(
                "last conv layer must emit d = {} channels",
                self.d
            )));
        }
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} must be divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.rpe_groups == 0 || self.d % self.rpe_groups != 0 {
            return Err(Error::Config("d must be divisible by rpe_groups".into()));
        }
        if self.rpe_kernel % 2 == 0 {
            return Err(Error::Config("rpe_kernel must be odd".into()));
        }
        if self.rel_pos_buckets < 2 || self.n_classes == 0 || self.n_layers == 0 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }

    /// Total stride of the conv stack (encoder frame hop in samples).
    pub fn encoder_hop(&self) -> usize {
        self.conv_stack.iter().map(|&(_, _, s)| s).product()
    }

    /// Receptive field of the conv stack in samples.
    pub fn receptive_field(&self) -> usize {
        let mut r = 1usize;
        let mut jump = 1usize;
        for &(_, k, s) in &self.conv_stack {
            r += (k - 1) * jump;
            jump *= s;
        }
        r
    }

    /// Encoder frame count for a waveform length, by the closed form
    /// `1 + floor((len - receptive) / hop)`.
    pub fn encoder_frames(&self, samples: usize) -> Result<usize> {
        let r = self.receptive_field();
        if samples < r {
            return Err(Error::domain(
                "cnn_encode",
                format!("input of {samples} samples shorter than the receptive field {r}"),
            ));
        }
        Ok(1 + (samples - r) / self.encoder_hop())
    }

    /// The same count via the per-layer length recurrence; used as an
    /// independent check of the closed form.
    pub fn encoder_frames_by_recurrence(&self, samples: usize) -> Option<usize> {
        let mut len = samples;
        for &(_, k, s) in &self.conv_stack {
            if len < k {
                return None;
            }
            len = (len - k) / s + 1;
        }
        Some(len)
    }

    pub fn label_align(&self) -> LabelAlign {
        LabelAlign {
            feature_hop: crate::features::FRAME_HOP,
            encoder_receptive: self.receptive_field(),
            encoder_hop: self.encoder_hop(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn to_kv(&self, out: &mut BTreeMap<String, String>) {
        let stack: Vec<String> = self
            .conv_stack
            .iter()
            .map(|&(c, k, s)| format!("{c}:{k}:{s}"))
            .collect();
        out.insert("model.conv_stack".into(), stack.join(","));
        out.insert("model.d".into(), self.d.to_string());
        out.insert("model.n_layers".into(), self.n_layers.to_string());
        out.insert("model.n_heads".into(), self.n_heads.to_string());
        out.insert("model.ffn_dim".into(), self.ffn_dim.to_string());
        out.insert("model.rpe_kernel".into(), self.rpe_kernel.to_string());
        out.insert("model.rpe_groups".into(), self.rpe_groups.to_string());
        out.insert("model.n_classes".into(), self.n_classes.to_string());
        out.insert("model.rel_pos_buckets".into(), self.rel_pos_buckets.to_string());
        out.insert("model.max_rel_distance".into(), self.max_rel_distance.to_string());
        out.insert("model.enroll_position".into(), self.enroll_position.to_string());
        out.insert("model.emb_dim".into(), self.emb_dim.to_string());
    }

    /// Defaults overridden by any `model.*` keys present.
    pub fn from_kv(kv: &KvMap) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        if let Some(stack) = kv.get("model.conv_stack") {
            cfg.conv_stack = stack
                .split(',')
                .map(|part| {
                    let nums: Vec<&str> = part.split(':').collect();
                    if nums.len() != 3 {
                        return Err(Error::Config(format!("bad conv layer `{part}`")));
                    }
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad conv layer `{part}`")))
                    };
                    Ok((parse(nums[0])?, parse(nums[1])?, parse(nums[2])?))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.parse_as("model.d")? {
            cfg.d = v;
        }
        if let Some(v) = kv.parse_as("model.n_layers")? {
            cfg.n_layers = v;
        }
        if let Some(v) = kv.parse_as("model.n_heads")? {
            cfg.n_heads = v;
        }
        if let Some(v) = kv.parse_as("model.ffn_dim")? {
            cfg.ffn_dim = v;
        }
        if let Some(v) = kv.parse_as("model.rpe_kernel")? {
            cfg.rpe_kernel = v;
        }
        if let Some(v) = kv.parse_as("model.rpe_groups")? {
            cfg.rpe_groups = v;
        }
        if let Some(v) = kv.parse_as("model.n_classes")? {
            cfg.n_classes = v;
        }
        if let Some(v) = kv.parse_as("model.rel_pos_buckets")? {
            cfg.rel_pos_buckets = v;
        }
        if let Some(v) = kv.parse_as("model.max_rel_distance")? {
            cfg.max_rel_distance = v;
        }
        if let Some(v) = kv.get("model.enroll_position") {
            cfg.enroll_position = match v {
                "front" => EnrollPosition::Front,
                "back" => EnrollPosition::Back,
                other => return Err(Error::Config(format!("bad enroll_position `{other}`"))),
            };
        }
        if let Some(v) = kv.parse_as("model.emb_dim")? {
            cfg.emb_dim = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// All learnable parameters, keyed by stable names.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    /// (kind, site) of an inserted adaptation layer, if any.
    pub adapter: Option<(crate::adapters::AdapterKind, crate::adapters::AdapterSite)>,
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

pub(crate) fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| box_muller(rng) * std).collect();
    Tensor::param(data, shape).expect("init shapes are consistent")
}

fn init_const(shape: &[usize], v: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(vec![v; n], shape).expect("init shapes are consistent")
}

impl ModelState {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::ModelInit, &[]);
        let mut params = BTreeMap::new();
        let mut add = |name: String, t: Tensor| {
            params.insert(name, t);
        };

        let d = config.d;
        let mut c_in = 1usize;
        for (i, &(c_out, k, _)) in config.conv_stack.iter().enumerate() {
            let std = 1.0 / ((c_in * k) as f64).sqrt();
            add(format!("cnn.{i}.weight"), init_normal(&mut rng, &[c_out, c_in, k], std));
            add(format!("cnn.{i}.bias"), init_const(&[c_out], 0.0));
            c_in = c_out;
        }
        add("cnn.post_ln.gamma".into(), init_const(&[d], 1.0));
        add("cnn.post_ln.beta".into(), init_const(&[d], 0.0));

        for stream in ["main", "enroll"] {
            let cg = d / config.rpe_groups;
            let std = 1.0 / ((cg * config.rpe_kernel) as f64).sqrt();
            add(
                format!("rpe.{stream}.weight"),
                init_normal(&mut rng, &[d, cg, config.rpe_kernel], std),
            );
            add(format!("rpe.{stream}.bias"), init_const(&[d], 0.0));
        }
        add("stream_bias.main".into(), init_normal(&mut rng, &[d], 0.02));
        add("stream_bias.enroll".into(), init_normal(&mut rng, &[d], 0.02));
        add(
            "rel_bias.table".into(),
            init_normal(&mut rng, &[config.rel_pos_buckets, config.n_heads], 0.02),
        );

        for i in 0..config.n_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                add(
                    format!("layers.{i}.attn.{name}"),
                    init_normal(&mut rng, &[d, d], 0.02),
                );
            }
            // No key bias: it shifts every score in a row equally and
            // cancels in the softmax.
            for name in ["bq", "bv", "bo"] {
                add(format!("layers.{i}.attn.{name}"), init_const(&[d], 0.0));
            }
            add(
                format!("layers.{i}.attn.gate_u"),
                init_normal(&mut rng, &[config.n_heads, config.head_dim()], 0.02),
            );
            add(format!("layers.{i}.attn.gate_alpha"), init_const(&[config.n_heads], 1.0));
            add(format!("layers.{i}.attn.gate_beta"), init_const(&[config.n_heads], 0.0));
            for ln in ["ln1", "ln2"] {
                add(format!("layers.{i}.{ln}.gamma"), init_const(&[d], 1.0));
                add(format!("layers.{i}.{ln}.beta"), init_const(&[d], 0.0));
            }
            add(
                format!("layers.{i}.ffn.w1"),
                init_normal(&mut rng, &[d, config.ffn_dim], 0.02),
            );
            add(format!("layers.{i}.ffn.b1"), init_const(&[config.ffn_dim], 0.0));
            add(
                format!("layers.{i}.ffn.w2"),
                init_normal(&mut rng, &[config.ffn_dim, d], 0.02),
            );
            add(format!("layers.{i}.ffn.b2"), init_const(&[d], 0.0));
        }
        add("head.w".into(), init_normal(&mut rng, &[d, config.n_classes], 0.02));
        add("head.b".into(), init_const(&[config.n_classes], 0.0));

        Ok(ModelState {
            config,
            params,
            adapter: None,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Copy with one parameter replaced; cheap (handles are shared).
    pub fn with_param(&self, name: &str, t: Tensor) -> ModelState {
        let mut copy = self.clone();
        copy.params.insert(name.to_string(), t);
        copy
    }

    /// Re-draw every parameter from N(0, sigma^2). Gradient checks run
    /// at such a point so derivatives sit well above the noise floor of
    /// central differences; near-init gradients of deep parameters can
    /// be ~1e-10 and drown in it.
    pub fn randomize(&mut self, seed: u64, sigma: f64) {
        let mut rng = stream_rng(seed, Stream::ModelInit, &[1]);
        for name in self.param_names() {
            let p = self.param(&name).expect("listed name exists");
            let shape = p.shape().to_vec();
            let t = init_normal(&mut rng, &shape, sigma);
            self.params.insert(name, t);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in &self.params {
            ck.insert(name, t.shape(), t.data().to_vec());
        }
        self.config.to_kv(&mut ck.config);
        if let Some((kind, site)) = self.adapter {
            ck.config.insert("adapter.kind".into(), kind.to_string());
            ck.config.insert("adapter.site".into(), site.to_string());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ModelState> {
        let kv = KvMap::from_map(ck.config.clone());
        let config = ModelConfig::from_kv(&kv)?;
        let mut params = BTreeMap::new();
        for (name, (shape, data)) in &ck.entries {
            if name.starts_with("codebook.") {
                continue; // provenance entries, not parameters
            }
            params.insert(name.clone(), Tensor::param(data.clone(), shape)?);
        }
        let adapter = match (ck.config_str("adapter.kind"), ck.config_str("adapter.site")) {
            (Some(k), Some(s)) => Some((
                crate::adapters::AdapterKind::parse(k)?,
                crate::adapters::AdapterSite::parse(s)?,
            )),
            _ => None,
        };
        Ok(ModelState {
            config,
            params,
            adapter,
        })
    }
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Pre-norm layer normalization over the feature axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mu = x.row_mean()?;
    let sd = x.row_std(LN_EPS)?;
    x.sub_col(&mu)?.div_col(&sd)?.mul_row(gamma)?.add_row(beta)
}

/// Shared CNN encoder: conv stack with GELU between layers, then a
/// layer norm. One parameter set serves both streams.
pub fn cnn_encode(state: &ModelState, wav: &Waveform) -> Result<Tensor> {
    let cfg = &state.config;
    cfg.encoder_frames(wav.len())?; // clear error before conv-level ones
    let mut x = Tensor::from_vec(wav.samples.clone(), &[1, wav.len()])?;
    for (i, &(_, _, stride)) in cfg.conv_stack.iter().enumerate() {
        let w = state.param(&format!("cnn.{i}.weight"))?;
        let b = state.param(&format!("cnn.{i}.bias"))?;
        x = x.conv1d(w, b, stride, 0, 1)?.gelu()?;
    }
    let feats = x.transpose()?;
    layer_norm(
        &feats,
        state.param("cnn.post_ln.gamma")?,
        state.param("cnn.post_ln.beta")?,
    )
}

/// Convolutional relative position encoding: x + GELU(grouped same-pad
/// conv over time). Independent weights per stream.
fn rpe_apply(state: &ModelState, x: &Tensor, stream: &str) -> Result<Tensor> {
    let cfg = &state.config;
    let w = state.param(&format!("rpe.{stream}.weight"))?;
    let b = state.param(&format!("rpe.{stream}.bias"))?;
    let pos = x
        .transpose()?
        .conv1d(w, b, 1, (cfg.rpe_kernel - 1) / 2, cfg.rpe_groups)?
        .transpose()?
        .gelu()?;
    x.add(&pos)
}

/// Output of stream fusion: the concatenated sequence plus where the
/// main stream lives in it.
#[derive(Debug, Clone)]
pub struct Fused {
    pub z: Tensor,
    /// First main-stream row; equals the enrollment length for
    /// front-positioned enrollment and 0 otherwise.
    pub boundary: usize,
    pub main_len: usize,
}

/// Per-stream rPE plus stream bias, then temporal concatenation.
pub fn fuse_streams(state: &ModelState, x_main: &Tensor, x_enroll: Option<&Tensor>) -> Result<Fused> {
    let main_len = x_main.rows();
    let xm = rpe_apply(state, x_main, "main")?.add_row(state.param("stream_bias.main")?)?;
    let Some(xe) = x_enroll else {
        return Ok(Fused {
            z: xm,
            boundary: 0,
            main_len,
        });
    };
    if xe.cols() != xm.cols() {
        return Err(Error::shape(
            "fuse_streams",
            format!("main dim {} vs enrollment dim {}", xm.cols(), xe.cols()),
        ));
    }
    let xe = rpe_apply(state, xe, "enroll")?.add_row(state.param("stream_bias.enroll")?)?;
    match state.config.enroll_position {
        EnrollPosition::Front => Ok(Fused {
            boundary: xe.rows(),
            z: Tensor::concat(&[&xe, &xm], 0)?,
            main_len,
        }),
        EnrollPosition::Back => Ok(Fused {
            boundary: 0,
            z: Tensor::concat(&[&xm, &xe], 0)?,
            main_len,
        }),
    }
}

/// Bucket a relative distance `j - i`: exact buckets up to +/-8, then
/// log-spaced up to `max_distance`, symmetric in sign.
pub fn rel_bucket(delta: i64, n_buckets: usize, max_distance: usize) -> usize {
    let a = delta.unsigned_abs() as usize;
    let exact = 8.min(n_buckets - 1);
    if a <= exact {
        return a;
    }
    if n_buckets == exact + 1 || max_distance <= exact {
        return exact;
    }
    let span = (n_buckets - 1 - exact) as f64;
    let ratio = ((a as f64) / exact as f64).ln() / ((max_distance as f64) / exact as f64).ln();
    (exact + (ratio * span).floor() as usize).min(n_buckets - 1)
}

fn attention(state: &ModelState, layer: usize, x: &Tensor) -> Result<Tensor> {
    let cfg = &state.config;
    let s = x.rows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let p = |n: &str| state.param(&format!("layers.{layer}.attn.{n}"));

    let q = x.matmul(p("wq")?)?.add_row(p("bq")?)?;
    let k = x.matmul(p("wk")?)?;
    let v = x.matmul(p("wv")?)?.add_row(p("bv")?)?;

    // Bucket ids depend only on relative offsets, so bias(i, j) is
    // invariant under index shifts.
    let mut bucket_idx = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            bucket_idx.push(rel_bucket(
                j as i64 - i as i64,
                cfg.rel_pos_buckets,
                cfg.max_rel_distance,
            ));
        }
    }
    let table = state.param("rel_bias.table")?;
    let gate_u = p("gate_u")?;
    let gate_alpha = p("gate_alpha")?;
    let gate_beta = p("gate_beta")?;

    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;

        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;

        // Gated relative position bias: (alpha + g_i * beta) * d_bucket(j - i),
        // with g_i = sigmoid(<q_i, u_h> / sqrt(d_head)).
        let rel_h = table
            .slice_cols(h, h + 1)?
            .reshape(&[cfg.rel_pos_buckets])?
            .gather(&bucket_idx)?
            .reshape(&[s, s])?;
        let u_col = gate_u.slice_rows(h, h + 1)?.reshape(&[dh, 1])?;
        let gate = qh.matmul(&u_col)?.scale(scale)?.reshape(&[s])?.sigmoid()?;
        let alpha_h = gate_alpha.gather(&[h])?;
        let beta_h = gate_beta.gather(&[h])?;
        let coef = gate.mul_tscalar(&beta_h)?.add_tscalar(&alpha_h)?;
        let bias = rel_h.mul_col(&coef)?;

        let probs = scores.add(&bias)?.softmax_rows()?;
        heads.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let ctx = Tensor::concat(&refs, 1)?;
    ctx.matmul(p("wo")?)?.add_row(p("bo")?)
}

/// Per-layer LN, possibly converted to a conditional LN by an inserted
/// adapter (first layer only).
fn layer_ln(
    state: &ModelState,
    layer: usize,
    which: &str,
    x: &Tensor,
    emb: Option<&Tensor>,
) -> Result<Tensor> {
    let gamma = state.param(&format!("layers.{layer}.{which}.gamma"))?;
    let beta = state.param(&format!("layers.{layer}.{which}.beta"))?;
    if layer == 0 {
        if let (Some((kind, site)), Some(emb)) = (state.adapter, emb) {
            if kind == crate::adapters::AdapterKind::Cln
                && site == crate::adapters::AdapterSite::FirstLayerLn
            {
                return crate::adapters::adapt_cln_named(state, which, x, emb, gamma, beta);
            }
        }
    }
    layer_norm(x, gamma, beta)
}

/// Pre-norm Transformer stack. With the attention and FFN output
/// projections zeroed, the input passes through unchanged.
pub fn transformer_forward(state: &ModelState, z: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
    let mut h = z.clone();
    for layer in 0..state.config.n_layers {
        let xn = layer_ln(state, layer, "ln1", &h, emb)?;
        h = h.add(&attention(state, layer, &xn)?)?;
        let xn2 = layer_ln(state, layer, "ln2", &h, emb)?;
        let p = |n: &str| state.param(&format!("layers.{layer}.ffn.{n}"));
        let ffn = xn2
            .matmul(p("w1")?)?
            .add_row(p("b1")?)?
            .gelu()?
            .matmul(p("w2")?)?
            .add_row(p("b2")?)?;
        h = h.add(&ffn)?;
    }
    Ok(h)
}

/// Frame-label logits for the suffix rows `H[boundary:]`; enrollment
/// positions produce no predictions.
pub fn predict_logits(state: &ModelState, h: &Tensor, boundary: usize) -> Result<Tensor> {
    if boundary > h.rows() {
        return Err(Error::shape(
            "predict_logits",
            format!("boundary {boundary} out of {} rows", h.rows()),
        ));
    }
    h.slice_rows(boundary, h.rows())?
        .matmul(state.param("head.w")?)?
        .add_row(state.param("head.b")?)
}

/// CTC logits over the vocabulary for already-sliced main-stream rows.
pub fn ctc_logits(state: &ModelState, h_main: &Tensor) -> Result<Tensor> {
    h_main
        .matmul(state.param("ctc_head.w")?)?
        .add_row(state.param("ctc_head.b")?)
}

/// Encoded, masked, fused and transformed input; `h` rows
/// `[boundary, boundary + main_len)` are the main stream.
pub struct Encoded {
    pub h: Tensor,
    pub boundary: usize,
    pub main_len: usize,
}

impl Encoded {
    pub fn main(&self) -> Result<Tensor> {
        self.h.slice_rows(self.boundary, self.boundary + self.main_len)
    }
}

/// Full composition up to the Transformer output:
/// cnn -> mask (main only) -> post-CNN adapter -> fuse -> transformer.
pub fn encode(
    state: &ModelState,
    y: &Waveform,
    e: Option<&Waveform>,
    mask: &MaskSpec,
    emb: Option<&Tensor>,
) -> Result<Encoded> {
    let mut x = cnn_encode(state, y)?;
    x = apply_masks(&x, mask)?;
    if let Some((kind, site)) = state.adapter {
        if site == crate::adapters::AdapterSite::PostCnn {
            let emb = emb.ok_or_else(|| {
                Error::Config("model has a post-CNN adapter but no speaker embedding was given".into())
            })?;
            x = crate::adapters::apply_post_cnn(state, kind, &x, emb)?;
        }
    }
    let x_enroll = match e {
        Some(e) => Some(cnn_encode(state, e)?),
        None => None,
    };
    let fused = fuse_streams(state, &x, x_enroll.as_ref())?;
    let h = transformer_forward(state, &fused.z, emb)?;
    Ok(Encoded {
        h,
        boundary: fused.boundary,
        main_len: fused.main_len,
    })
}

/// Pre-training forward pass: frame-label logits `[T, n_classes]` for
/// the main utterance.
pub fn forward(
    state: &ModelState,
    y: &Waveform,
    e: Option<&Waveform>,
    mask: &MaskSpec,
    emb: Option<&Tensor>,
) -> Result<Tensor> {
    let enc = encode(state, y, e, mask, emb)?;
    enc.main()?
        .matmul(state.param("head.w")?)?
        .add_row(state.param("head.b")?)
}
