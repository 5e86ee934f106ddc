//! Training loops and evaluation: masked-prediction pre-training,
//! CTC fine-tuning with freezing policies, the warmup/decay schedule,
//! checkpointing, and WER evaluation with fixed enrollment lists.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::adapters::{extract_embedding, insert_adapter, AdapterKind, AdapterSite};
use crate::checkpoint::Checkpoint;
use crate::config::KvMap;
use crate::corpus::{load_enroll_map, AudioCache, SpeakerInventory};
use crate::error::{Error, Result};
use crate::labeler::Codebook;
use crate::mixer::{sample_batch_seconds, truncate_enrollment};
use crate::model::{ctc_logits, encode, forward, init_normal, ModelConfig, ModelState};
use crate::objectives::{
    ctc_decode, ctc_loss, masked_accuracy, masked_ce_loss, sample_masks, wer, Vocab,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Everything the loops need; every field is addressable from the flat
/// config file.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Batch size in seconds of main-utterance audio.
    pub batch_seconds: f64,
    /// Freeze the CNN encoder (always forced on during fine-tuning).
    pub freeze_cnn: bool,
    /// Freeze every pre-trained parameter for this many initial
    /// fine-tuning steps (only new heads/adapters train).
    pub freeze_backbone_steps: usize,
    pub seed: u64,
    pub adapter: Option<AdapterKind>,
    pub enrollment_enabled: bool,
    /// Enrollments are randomly truncated to this many samples.
    pub enroll_max_samples: usize,
    /// Checkpoint every N steps (and always at the end).
    pub save_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            steps: 1000,
            peak_lr: 2e-3,
            warmup_steps: 100,
            batch_seconds: 30.0,
            freeze_cnn: false,
            freeze_backbone_steps: 0,
            seed: 1,
            adapter: None,
            enrollment_enabled: true,
            enroll_max_samples: 48_000,
            save_every: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_seconds <= 0.0 {
            return Err(Error::Config("batch_seconds must be positive".into()));
        }
        Ok(())
    }

    /// Defaults overridden by any matching keys. Warmup defaults to 10%
    /// of the step budget when not given explicitly.
    pub fn from_kv(kv: &KvMap) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = kv.parse_as("steps")? {
            cfg.steps = v;
            cfg.warmup_steps = v / 10;
        }
        if let Some(v) = kv.parse_as("peak_lr")? {
            cfg.peak_lr = v;
        }
        if let Some(v) = kv.parse_as("warmup_steps")? {
            cfg.warmup_steps = v;
        }
        if let Some(v) = kv.parse_as("batch_seconds")? {
            cfg.batch_seconds = v;
        }
        if let Some(v) = kv.parse_bool("freeze_cnn")? {
            cfg.freeze_cnn = v;
        }
        if let Some(v) = kv.parse_as("freeze_backbone_steps")? {
            cfg.freeze_backbone_steps = v;
        }
        if let Some(v) = kv.parse_as("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv.get("adapter") {
            cfg.adapter = match v {
                "none" => None,
                other => Some(AdapterKind::parse(other)?),
            };
        }
        if let Some(v) = kv.parse_bool("enrollment_enabled")? {
            cfg.enrollment_enabled = v;
        }
        if let Some(v) = kv.parse_as("enroll_max_samples")? {
            cfg.enroll_max_samples = v;
        }
        if let Some(v) = kv.parse_as("save_every")? {
            cfg.save_every = v;
        }
        if let Some(v) = kv.parse_as("adam_beta1")? {
            cfg.adam_beta1 = v;
        }
        if let Some(v) = kv.parse_as("adam_beta2")? {
            cfg.adam_beta2 = v;
        }
        if let Some(v) = kv.parse_as("adam_eps")? {
            cfg.adam_eps = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, out: &mut std::collections::BTreeMap<String, String>) {
        out.insert("train.steps".into(), self.steps.to_string());
        out.insert("train.peak_lr".into(), self.peak_lr.to_string());
        out.insert("train.warmup_steps".into(), self.warmup_steps.to_string());
        out.insert("train.batch_seconds".into(), self.batch_seconds.to_string());
        out.insert("train.freeze_cnn".into(), self.freeze_cnn.to_string());
        out.insert(
            "train.freeze_backbone_steps".into(),
            self.freeze_backbone_steps.to_string(),
        );
        out.insert("train.seed".into(), self.seed.to_string());
        out.insert(
            "train.enrollment_enabled".into(),
            self.enrollment_enabled.to_string(),
        );
        out.insert(
            "train.enroll_max_samples".into(),
            self.enroll_max_samples.to_string(),
        );
    }
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear
/// decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.steps == 0 {
        return 0.0;
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.steps {
        return 0.0;
    }
    cfg.peak_lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup_steps) as f64
}

/// One training-progress line, emitted as JSONL.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_wer: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam without weight decay; moments and update counts are kept per
/// parameter name, so freeze windows do not skew bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
    t: std::collections::BTreeMap<String, u32>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: Default::default(),
            v: Default::default(),
            t: Default::default(),
        }
    }

    /// Apply one update to every unfrozen parameter that received a
    /// gradient. Frozen parameters keep their exact tensors.
    pub fn step(&mut self, state: &mut ModelState, lr: f64, frozen: &BTreeSet<String>) {
        let names = state.param_names();
        for name in names {
            if frozen.contains(&name) {
                continue;
            }
            let p = state.param(&name).expect("listed name exists");
            let Some(g) = p.grad() else { continue };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let mut new_data = p.data().to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                new_data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            let shape = p.shape().to_vec();
            state.set_param(&name, Tensor::param(new_data, &shape).expect("shape unchanged"));
        }
    }
}

// ---------------------------------------------------------------------------
// Shared loop plumbing
// ---------------------------------------------------------------------------

fn divergence_at(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } => {
            Error::Divergence(format!("non-finite values at step {step}: {err}"))
        }
        other => other,
    }
}

struct MetricsSink {
    file: fs::File,
}

impl MetricsSink {
    fn create(dir: &Path) -> Result<MetricsSink> {
        let path = dir.join("metrics.jsonl");
        Ok(MetricsSink {
            file: fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
        })
    }

    fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("metrics serialize");
        writeln!(self.file, "{line}")
            .map_err(|e| Error::io(PathBuf::from("metrics.jsonl"), e))
    }
}

#[cfg(debug_assertions)]
fn assert_frozen_untouched(before: &[(String, Tensor)], state: &ModelState) {
    for (name, old) in before {
        let now = state.param(name).expect("frozen param exists");
        debug_assert!(
            std::ptr::eq(old.data().as_ptr(), now.data().as_ptr()) || old.data() == now.data(),
            "frozen parameter `{name}` changed during its freeze window"
        );
    }
}

fn mean_loss(losses: &[Tensor]) -> Result<Tensor> {
    let mut it = losses.iter();
    let first = it.next().expect("nonempty batch").clone();
    let sum = it.try_fold(first, |acc, l| acc.add(l))?;
    sum.scale(1.0 / losses.len() as f64)
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

/// Masked-prediction pre-training over on-the-fly mixtures. Writes
/// `metrics.jsonl`, periodic `step_*.tspt` checkpoints and `final.tspt`
/// under `out_dir`; returns the final checkpoint.
pub fn pretrain(
    inv: &SpeakerInventory,
    codebook: &Codebook,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Checkpoint> {
    cfg.validate()?;
    model_cfg.validate()?;
    if codebook.k != model_cfg.n_classes {
        return Err(Error::Config(format!(
            "codebook has {} centroids but the model predicts {} classes",
            codebook.k, model_cfg.n_classes
        )));
    }
    if inv.speaker_count() < 2 {
        return Err(Error::Data(format!(
            "pre-training needs at least 2 speakers, have {}",
            inv.speaker_count()
        )));
    }
    for utt in &inv.utterances {
        if !inv.labels.contains_key(utt) {
            return Err(Error::Data(format!("unlabeled utterance `{utt}`")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let cache = AudioCache::preload(inv)?;
    let align = model_cfg.label_align();
    let mut state = ModelState::init(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg);
    let mut sink = MetricsSink::create(out_dir)?;
    let frozen: BTreeSet<String> = if cfg.freeze_cnn {
        state
            .param_names()
            .into_iter()
            .filter(|n| n.starts_with("cnn."))
            .collect()
    } else {
        BTreeSet::new()
    };

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch = sample_batch_seconds(
            inv,
            &cache,
            cfg.batch_seconds,
            cfg.seed,
            step as u64,
            &align,
            true,
        )?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut acc_sum = 0.0;
        for (j, sample) in batch.iter().enumerate() {
            let mut trunc_rng = stream_rng(cfg.seed, Stream::EnrollTruncate, &[step as u64, j as u64]);
            let enrollment = truncate_enrollment(&sample.enrollment, cfg.enroll_max_samples, &mut trunc_rng);
            let t_frames = sample.labels.len();
            let mut mask_rng = stream_rng(cfg.seed, Stream::Mask, &[step as u64, j as u64]);
            let mask = sample_masks(t_frames, &mut mask_rng)?;

            let e_in = cfg.enrollment_enabled.then_some(&enrollment);
            let logits = forward(&state, &sample.mixed, e_in, &mask, None)
                .map_err(|e| divergence_at(step, e))?;
            acc_sum += masked_accuracy(&logits, &sample.labels, &mask);
            losses.push(
                masked_ce_loss(&logits, &sample.labels, &mask)
                    .map_err(|e| divergence_at(step, e))?,
            );
        }
        let loss = mean_loss(&losses)?;
        let loss_val = loss.value()?;
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!("loss {loss_val} at step {step}")));
        }
        backward(&loss).map_err(|e| divergence_at(step, e))?;

        #[cfg(debug_assertions)]
        let before: Vec<(String, Tensor)> = frozen
            .iter()
            .map(|n| (n.clone(), state.param(n).unwrap().clone()))
            .collect();

        let lr = lr_at(step + 1, cfg);
        adam.step(&mut state, lr, &frozen);
        state.zero_grads();

        #[cfg(debug_assertions)]
        assert_frozen_untouched(&before, &state);

        sink.write(&MetricsRecord {
            step,
            loss: loss_val,
            masked_accuracy: Some(acc_sum / batch.len() as f64),
            train_wer: None,
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        })?;

        if cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 && step + 1 < cfg.steps {
            let ck = build_checkpoint(&state, cfg, Some(codebook), None);
            ck.save(&out_dir.join(format!("step_{:06}.tspt", step + 1)))?;
        }
    }

    let ck = build_checkpoint(&state, cfg, Some(codebook), None);
    ck.save(&out_dir.join("final.tspt"))?;
    Ok(ck)
}

fn build_checkpoint(
    state: &ModelState,
    cfg: &TrainConfig,
    codebook: Option<&Codebook>,
    vocab: Option<&Vocab>,
) -> Checkpoint {
    let mut ck = state.to_checkpoint();
    cfg.to_kv(&mut ck.config);
    if let Some(cb) = codebook {
        ck.insert("codebook.centroids", &[cb.k, cb.dim], cb.centroids.clone());
    }
    if let Some(v) = vocab {
        ck.config.insert("vocab".into(), v.to_config_string());
    }
    ck
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// CTC fine-tuning from a pre-trained checkpoint on (mixture,
/// enrollment, transcript) triples. The CNN encoder is always frozen;
/// with `freeze_backbone_steps > 0` every pre-trained parameter is
/// frozen for that many initial steps so only the CTC head (and any
/// adapter) trains.
pub fn finetune(
    inv: &SpeakerInventory,
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if inv.transcripts.is_empty() {
        return Err(Error::Data(
            "fine-tuning needs transcripts.tsv next to the manifest".into(),
        ));
    }
    for utt in &inv.utterances {
        if !inv.transcripts.contains_key(utt) {
            return Err(Error::Data(format!("utterance `{utt}` has no transcript")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = ModelState::from_checkpoint(ckpt)?;
    let backbone: BTreeSet<String> = state.param_names().into_iter().collect();
    let model_cfg = state.config.clone();
    let align = model_cfg.label_align();

    let vocab = Vocab::build(inv.transcripts.values());
    vocab.save(&out_dir.join("vocab.txt"))?;

    // New layers: CTC head, plus the requested adapter at its site.
    let mut head_rng = stream_rng(cfg.seed, Stream::ModelInit, &[2]);
    state.set_param(
        "ctc_head.w",
        init_normal(&mut head_rng, &[model_cfg.d, vocab.size()], 0.02),
    );
    state.set_param("ctc_head.b", {
        Tensor::param(vec![0.0; vocab.size()], &[vocab.size()])?
    });
    if let Some(kind) = cfg.adapter {
        let site = match kind {
            AdapterKind::Add | AdapterKind::Film => AdapterSite::PostCnn,
            AdapterKind::Cln => AdapterSite::FirstLayerLn,
        };
        state = insert_adapter(&state, kind, site)?;
    }

    let cache = AudioCache::preload(inv)?;
    let mut adam = Adam::new(cfg);
    let mut sink = MetricsSink::create(out_dir)?;

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch = sample_batch_seconds(
            inv,
            &cache,
            cfg.batch_seconds,
            cfg.seed,
            step as u64,
            &align,
            false,
        )?;
        let mut losses = Vec::new();
        let mut edits = 0usize;
        let mut ref_words = 0usize;
        for (j, sample) in batch.iter().enumerate() {
            let mut trunc_rng = stream_rng(cfg.seed, Stream::EnrollTruncate, &[step as u64, j as u64]);
            let enrollment = truncate_enrollment(&sample.enrollment, cfg.enroll_max_samples, &mut trunc_rng);
            let transcript = &inv.transcripts[&sample.utt_id];
            let target = vocab.encode(transcript)?;

            let emb_t = match cfg.adapter {
                Some(_) => Some(extract_embedding(&enrollment)?.to_tensor()),
                None => None,
            };
            let e_in = cfg.enrollment_enabled.then_some(&enrollment);
            let enc = encode(&state, &sample.mixed, e_in, &crate::objectives::MaskSpec::empty(), emb_t.as_ref())
                .map_err(|e| divergence_at(step, e))?;
            let log_probs = ctc_logits(&state, &enc.main()?)?
                .log_softmax_rows()
                .map_err(|e| divergence_at(step, e))?;

            let loss = ctc_loss(&log_probs, &target)?;
            let lv = loss.value()?;
            if lv.is_infinite() {
                eprintln!(
                    "warning: step {step}: `{}` is unalignable ({} frames, {} tokens); skipped",
                    sample.utt_id,
                    log_probs.rows(),
                    target.len()
                );
                continue;
            }
            losses.push(loss);

            let hyp = vocab.decode(&ctc_decode(&log_probs)?);
            edits += crate::objectives::edit_distance(&hyp, transcript);
            ref_words += transcript.len();
        }
        if losses.is_empty() {
            return Err(Error::Data(format!(
                "step {step}: every sample in the batch was unalignable"
            )));
        }
        let loss = mean_loss(&losses)?;
        let loss_val = loss.value()?;
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!("loss {loss_val} at step {step}")));
        }
        backward(&loss).map_err(|e| divergence_at(step, e))?;

        let mut frozen: BTreeSet<String> = state
            .param_names()
            .into_iter()
            .filter(|n| n.starts_with("cnn."))
            .collect();
        if step < cfg.freeze_backbone_steps {
            frozen.extend(backbone.iter().cloned());
        }

        #[cfg(debug_assertions)]
        let before: Vec<(String, Tensor)> = frozen
            .iter()
            .map(|n| (n.clone(), state.param(n).unwrap().clone()))
            .collect();

        let lr = lr_at(step + 1, cfg);
        adam.step(&mut state, lr, &frozen);
        state.zero_grads();

        #[cfg(debug_assertions)]
        assert_frozen_untouched(&before, &state);

        sink.write(&MetricsRecord {
            step,
            loss: loss_val,
            masked_accuracy: None,
            train_wer: Some(edits as f64 / ref_words.max(1) as f64),
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        })?;

        if cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 && step + 1 < cfg.steps {
            let ck = build_checkpoint(&state, cfg, None, Some(&vocab));
            ck.save(&out_dir.join(format!("step_{:06}.tspt", step + 1)))?;
        }
    }

    let ck = build_checkpoint(&state, cfg, None, Some(&vocab));
    ck.save(&out_dir.join("final.tspt"))?;
    Ok(ck)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct UttReport {
    pub utt: String,
    pub wer: f64,
    pub edits: usize,
    pub ref_len: usize,
    pub hyp: String,
    pub reference: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub corpus_wer: f64,
    pub utterances: usize,
    pub total_edits: usize,
    pub total_ref_words: usize,
    #[serde(skip)]
    pub per_utt: Vec<UttReport>,
}

/// Decode every transcript-bearing manifest row with its mapped
/// enrollment and score WER. The report is written as JSONL (one row
/// per utterance plus a summary line).
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &Path,
    enroll_map_path: &Path,
    out_path: &Path,
) -> Result<EvalReport> {
    let state = ModelState::from_checkpoint(ckpt)?;
    let vocab = Vocab::from_config_string(
        ckpt.config_str("vocab")
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary; fine-tune first".into()))?,
    )?;
    let enrollment_enabled = ckpt
        .config_str("train.enrollment_enabled")
        .map(|v| v == "true")
        .unwrap_or(true);

    let inv = crate::corpus::build_inventory(manifest)?;
    let enroll_map = load_enroll_map(enroll_map_path)?;
    let eval_utts: Vec<String> = inv
        .utterances
        .iter()
        .filter(|u| inv.transcripts.contains_key(*u))
        .cloned()
        .collect();
    if eval_utts.is_empty() {
        return Err(Error::Data(format!(
            "{}: no transcript-bearing utterances to evaluate",
            manifest.display()
        )));
    }

    let mut per_utt = Vec::with_capacity(eval_utts.len());
    let mut total_edits = 0usize;
    let mut total_ref = 0usize;
    for utt in &eval_utts {
        let enroll_id = enroll_map.get(utt).ok_or_else(|| {
            Error::Data(format!("enrollment map has no entry for `{utt}`"))
        })?;
        let wav = crate::audio::load_wav(&inv.audio_path(utt)?)?;
        let enroll = crate::audio::load_wav(&inv.audio_path(enroll_id)?)?;

        let emb_t = match state.adapter {
            Some(_) => Some(extract_embedding(&enroll)?.to_tensor()),
            None => None,
        };
        let e_in = enrollment_enabled.then_some(&enroll);
        let enc = encode(&state, &wav, e_in, &crate::objectives::MaskSpec::empty(), emb_t.as_ref())?;
        let log_probs = ctc_logits(&state, &enc.main()?)?.log_softmax_rows()?;
        let hyp = vocab.decode(&ctc_decode(&log_probs)?);

        let reference = &inv.transcripts[utt];
        let edits = crate::objectives::edit_distance(&hyp, reference);
        let utt_wer = wer(&hyp, reference)?;
        total_edits += edits;
        total_ref += reference.len();
        per_utt.push(UttReport {
            utt: utt.clone(),
            wer: utt_wer,
            edits,
            ref_len: reference.len(),
            hyp: hyp.join(" "),
            reference: reference.join(" "),
        });
    }

    let report = EvalReport {
        corpus_wer: total_edits as f64 / total_ref as f64,
        utterances: per_utt.len(),
        total_edits,
        total_ref_words: total_ref,
        per_utt,
    };

    let mut body = String::new();
    for row in &report.per_utt {
        body.push_str(&serde_json::to_string(row).expect("report row"));
        body.push('\n');
    }
    body.push_str(&serde_json::to_string(&report).expect("report summary"));
    body.push('\n');
    fs::write(out_path, body).map_err(|e| Error::io(out_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_for(steps: usize, warmup: usize, peak: f64) -> TrainConfig {
        TrainConfig {
            steps,
            warmup_steps: warmup,
            peak_lr: peak,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_contract() {
        let cfg = cfg_for(400_000, 8000, 2e-5);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(4000, &cfg) - 1e-5).abs() < 1e-20);
        assert_eq!(lr_at(8000, &cfg), 2e-5);
        assert_eq!(lr_at(400_000, &cfg), 0.0);
        // Linear decay midpoint.
        let mid = (400_000 + 8000) / 2;
        assert!((lr_at(mid, &cfg) - 1e-5).abs() < 1e-10);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let kv = KvMap::parse("steps = 300\npeak_lr = 1e-3\nadapter = film\n").unwrap();
        let cfg = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.steps, 300);
        assert_eq!(cfg.warmup_steps, 30); // 10% default
        assert_eq!(cfg.adapter, Some(AdapterKind::Film));
        assert!(cfg.enrollment_enabled);

        let bad = KvMap::parse("steps = 10\nwarmup_steps = 20\n").unwrap();
        assert!(TrainConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn adam_moves_only_unfrozen_params() {
        let mut state = ModelState::init(ModelConfig::tiny(), 3).unwrap();
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&cfg);

        // Fake gradients on two params.
        for name in ["head.w", "stream_bias.main"] {
            let p = state.param(name).unwrap();
            let loss = p.mul(p).unwrap().sum().unwrap();
            backward(&loss).unwrap();
        }
        let head_before = state.param("head.w").unwrap().data().to_vec();
        let bias_before = state.param("stream_bias.main").unwrap().data().to_vec();
        let frozen: BTreeSet<String> = ["stream_bias.main".to_string()].into();
        adam.step(&mut state, 1e-2, &frozen);
        assert_ne!(state.param("head.w").unwrap().data(), &head_before[..]);
        assert_eq!(state.param("stream_bias.main").unwrap().data(), &bias_before[..]);
        // Params with no gradient are untouched.
        let wq = state.param("layers.0.attn.wq").unwrap().data().to_vec();
        adam.step(&mut state, 1e-2, &frozen);
        assert_eq!(state.param("layers.0.attn.wq").unwrap().data(), &wq[..]);
    }
}
