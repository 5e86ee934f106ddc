//! Speaker-adaptation layers (Add, FiLM, cLN) with near-identity
//! initialization, plus the spectral-statistics speaker embedding that
//! feeds them.
//!
//! Near-identity here is exact: the final projection weights and biases
//! start at zero and the scale path carries a fixed +1 offset, so an
//! inserted adapter initially computes the unadapted function.

use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{logmel, N_MELS};
use crate::model::{ModelState, LN_EPS};
use crate::tensor::Tensor;

/// Mean-and-std log-mel statistics of an enrollment; 2 * N_MELS wide by
/// default. Any E-dim vector can stand in for it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Constant `[1, E]` tensor for use inside the graph.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone(), &[1, self.values.len()]).expect("embedding shape")
    }
}

/// Concatenated per-band mean and population std of the enrollment's
/// log-mel frames. Deterministic; errors if the waveform is shorter
/// than one analysis frame.
pub fn extract_embedding(e: &Waveform) -> Result<SpeakerEmbedding> {
    let fm = logmel(e, N_MELS)?;
    let mut mean = vec![0.0f64; fm.d];
    for r in 0..fm.t {
        for (j, v) in fm.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= fm.t as f64;
    }
    let mut var = vec![0.0f64; fm.d];
    for r in 0..fm.t {
        for (j, v) in fm.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let mut values = mean;
    values.extend(var.iter().map(|v| (v / fm.t as f64).sqrt()));
    Ok(SpeakerEmbedding { values })
}

pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Embedding cache sidecar: one `[E]` entry per utterance id.
pub fn save_embeddings(map: &BTreeMap<String, SpeakerEmbedding>, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::default();
    for (name, e) in map {
        ck.insert(name, &[e.dim()], e.values.clone());
    }
    ck.save(path)
}

pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let ck = Checkpoint::load(path)?;
    Ok(ck
        .entries
        .into_iter()
        .map(|(name, (_, values))| (name, SpeakerEmbedding { values }))
        .collect())
}

// ---------------------------------------------------------------------------
// Adapter kinds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Add,
    Film,
    Cln,
}

impl AdapterKind {
    pub fn parse(s: &str) -> Result<AdapterKind> {
        match s {
            "add" => Ok(AdapterKind::Add),
            "film" => Ok(AdapterKind::Film),
            "cln" => Ok(AdapterKind::Cln),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Add => "add",
            AdapterKind::Film => "film",
            AdapterKind::Cln => "cln",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSite {
    /// After the CNN encoder, main stream only (Add, FiLM).
    PostCnn,
    /// The layer norms of the first Transformer layer (cLN).
    FirstLayerLn,
}

impl AdapterSite {
    pub fn parse(s: &str) -> Result<AdapterSite> {
        match s {
            "post_cnn" => Ok(AdapterSite::PostCnn),
            "first_layer_ln" => Ok(AdapterSite::FirstLayerLn),
            other => Err(Error::Config(format!("unknown adapter site `{other}`"))),
        }
    }
}

impl std::fmt::Display for AdapterSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterSite::PostCnn => "post_cnn",
            AdapterSite::FirstLayerLn => "first_layer_ln",
        })
    }
}

/// Projection parameters of one adaptation layer: the scale path
/// `w(emb) = emb . w_proj + w_bias (+1)` and, for FiLM/cLN, the shift
/// path `b(emb) = emb . b_proj + b_bias`.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub kind: AdapterKind,
    pub w_proj: Tensor,
    pub w_bias: Tensor,
    pub b_proj: Option<Tensor>,
    pub b_bias: Option<Tensor>,
}

impl AdapterParams {
    /// Exact-identity parameters: all projections and biases zero.
    pub fn near_identity(kind: AdapterKind, emb_dim: usize, d: usize) -> AdapterParams {
        let zero_proj = || Tensor::param(vec![0.0; emb_dim * d], &[emb_dim, d]).unwrap();
        let zero_bias = || Tensor::param(vec![0.0; d], &[d]).unwrap();
        let second = !matches!(kind, AdapterKind::Add);
        AdapterParams {
            kind,
            w_proj: zero_proj(),
            w_bias: zero_bias(),
            b_proj: second.then(zero_proj),
            b_bias: second.then(zero_bias),
        }
    }
}

/// `emb . proj + bias`, optionally with the fixed +1 scale offset.
fn modulation(emb: &Tensor, proj: &Tensor, bias: &Tensor, plus_one: bool) -> Result<Tensor> {
    let d = proj.cols();
    let v = emb.matmul(proj)?.reshape(&[d])?.add(bias)?;
    if plus_one {
        v.add_const(1.0)
    } else {
        Ok(v)
    }
}

fn expect_kind(op: &'static str, got: AdapterKind, want: AdapterKind) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::domain(op, format!("adapter kind is {got}, expected {want}")))
    }
}

/// Add: `X + broadcast(P . emb)`.
pub fn adapt_add(x: &Tensor, emb: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    expect_kind("adapt_add", params.kind, AdapterKind::Add)?;
    let shift = modulation(emb, &params.w_proj, &params.w_bias, false)?;
    x.add_row(&shift)
}

/// FiLM: `w(emb) * X + b(emb)` per feature, broadcast over frames.
pub fn adapt_film(x: &Tensor, emb: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    expect_kind("adapt_film", params.kind, AdapterKind::Film)?;
    let w = modulation(emb, &params.w_proj, &params.w_bias, true)?;
    let b = modulation(
        emb,
        params.b_proj.as_ref().expect("film has a shift path"),
        params.b_bias.as_ref().expect("film has a shift path"),
        false,
    )?;
    x.mul_row(&w)?.add_row(&b)
}

fn check_nondegenerate_rows(op: &'static str, x: &Tensor) -> Result<()> {
    let d = x.cols();
    for (r, row) in x.data().chunks(d).enumerate() {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        if var.sqrt() < 1e-12 {
            return Err(Error::domain(
                op,
                format!("frame {r} is constant (sigma < 1e-12)"),
            ));
        }
    }
    Ok(())
}

/// cLN: `[w(emb) * gamma + b(emb)] * (X - mu) / sigma + beta`, with the
/// host layer norm's gamma/beta and its epsilon-stabilized sigma.
/// Constant frames are rejected.
pub fn adapt_cln(
    x: &Tensor,
    emb: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    params: &AdapterParams,
) -> Result<Tensor> {
    expect_kind("adapt_cln", params.kind, AdapterKind::Cln)?;
    check_nondegenerate_rows("adapt_cln", x)?;
    let w = modulation(emb, &params.w_proj, &params.w_bias, true)?;
    let b = modulation(
        emb,
        params.b_proj.as_ref().expect("cln has a shift path"),
        params.b_bias.as_ref().expect("cln has a shift path"),
        false,
    )?;
    let eff_gamma = w.mul(gamma)?.add(&b)?;
    let mu = x.row_mean()?;
    let sd = x.row_std(LN_EPS)?;
    x.sub_col(&mu)?.div_col(&sd)?.mul_row(&eff_gamma)?.add_row(beta)
}

// ---------------------------------------------------------------------------
// In-model wiring
// ---------------------------------------------------------------------------

fn named_params(state: &ModelState, kind: AdapterKind, prefix: &str) -> Result<AdapterParams> {
    let second = !matches!(kind, AdapterKind::Add);
    Ok(AdapterParams {
        kind,
        w_proj: state.param(&format!("{prefix}.w.w"))?.clone(),
        w_bias: state.param(&format!("{prefix}.w.b"))?.clone(),
        b_proj: if second {
            Some(state.param(&format!("{prefix}.b.w"))?.clone())
        } else {
            None
        },
        b_bias: if second {
            Some(state.param(&format!("{prefix}.b.b"))?.clone())
        } else {
            None
        },
    })
}

/// Apply a post-CNN adapter (Add or FiLM) to the main-stream features.
pub fn apply_post_cnn(state: &ModelState, kind: AdapterKind, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
    match kind {
        AdapterKind::Add => adapt_add(x, emb, &named_params(state, kind, "adapter.add")?),
        AdapterKind::Film => adapt_film(x, emb, &named_params(state, kind, "adapter.film")?),
        AdapterKind::Cln => Err(Error::domain("apply_post_cnn", "cLN lives in the first layer's LNs")),
    }
}

/// The first Transformer layer's LN, converted to a conditional LN.
pub fn adapt_cln_named(
    state: &ModelState,
    which: &str,
    x: &Tensor,
    emb: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let params = named_params(state, AdapterKind::Cln, &format!("adapter.cln.{which}"))?;
    adapt_cln(x, emb, gamma, beta, &params)
}

/// Register near-identity adapter parameters on a model. Valid
/// combinations: Add/FiLM at the post-CNN site, cLN at the first
/// Transformer layer's LNs.
pub fn insert_adapter(state: &ModelState, kind: AdapterKind, site: AdapterSite) -> Result<ModelState> {
    let valid = matches!(
        (kind, site),
        (AdapterKind::Add, AdapterSite::PostCnn)
            | (AdapterKind::Film, AdapterSite::PostCnn)
            | (AdapterKind::Cln, AdapterSite::FirstLayerLn)
    );
    if !valid {
        return Err(Error::domain(
            "insert_adapter",
            format!("adapter {kind} cannot be inserted at site {site}"),
        ));
    }
    if state.adapter.is_some() {
        return Err(Error::domain("insert_adapter", "model already has an adapter"));
    }
    let e = state.config.emb_dim;
    let d = state.config.d;
    let mut out = state.clone();
    let zero_proj = || Tensor::param(vec![0.0; e * d], &[e, d]).unwrap();
    let zero_bias = || Tensor::param(vec![0.0; d], &[d]).unwrap();
    match kind {
        AdapterKind::Add => {
            out.set_param("adapter.add.w.w", zero_proj());
            out.set_param("adapter.add.w.b", zero_bias());
        }
        AdapterKind::Film => {
            for path in ["w", "b"] {
                out.set_param(&format!("adapter.film.{path}.w"), zero_proj());
                out.set_param(&format!("adapter.film.{path}.b"), zero_bias());
            }
        }
        AdapterKind::Cln => {
            for ln in ["ln1", "ln2"] {
                for path in ["w", "b"] {
                    out.set_param(&format!("adapter.cln.{ln}.{path}.w"), zero_proj());
                    out.set_param(&format!("adapter.cln.{ln}.{path}.b"), zero_bias());
                }
            }
        }
    }
    out.adapter = Some((kind, site));
    Ok(out)
}

/// Closed-form parameter count of an adapter configuration.
pub fn adapter_param_count(kind: AdapterKind, emb_dim: usize, d: usize) -> usize {
    let per_projection = emb_dim * d + d;
    match kind {
        AdapterKind::Add => per_projection,
        AdapterKind::Film => 2 * per_projection,
        AdapterKind::Cln => 4 * per_projection,
    }
}
