//! Training objectives: the span mask policy and masked cross-entropy
//! for pre-training; CTC loss, best-path decoding and word error rate
//! for fine-tuning and evaluation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask span length in frames.
pub const MASK_SPAN: usize = 10;
/// Mask starts per frame; with span 10 this makes the 80% ceiling exact.
pub const MASK_START_RATE: f64 = 0.08;

/// Sampled mask positions: the sorted union of the spans plus the spans
/// themselves (each at most [`MASK_SPAN`] long after truncation at T).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
}

impl MaskSpec {
    pub fn empty() -> MaskSpec {
        MaskSpec {
            masked: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn coverage(&self, t: usize) -> f64 {
        self.masked.len() as f64 / t as f64
    }
}

/// Sample mask spans for a `T`-frame utterance: `max(1, round(0.08 T))`
/// start positions without replacement, each spawning a span of 10
/// frames truncated at `T`. Overlapping spans merge in the masked set,
/// so coverage usually stays below the 80% ceiling.
pub fn sample_masks(t: usize, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    if t == 0 {
        return Err(Error::domain("sample_masks", "T must be positive"));
    }
    let n_starts = ((MASK_START_RATE * t as f64).round() as usize).max(1).min(t);
    // Partial Fisher-Yates draw without replacement.
    let mut pool: Vec<usize> = (0..t).collect();
    for i in 0..n_starts {
        let j = rng.random_range(i..t);
        pool.swap(i, j);
    }
    let mut starts: Vec<usize> = pool[..n_starts].to_vec();
    starts.sort_unstable();

    let spans: Vec<(usize, usize)> = starts
        .iter()
        .map(|&s| (s, MASK_SPAN.min(t - s)))
        .collect();
    let mut masked: Vec<usize> = spans
        .iter()
        .flat_map(|&(s, len)| s..s + len)
        .collect();
    masked.sort_unstable();
    masked.dedup();
    Ok(MaskSpec { masked, spans })
}

/// Zero the masked rows of a feature matrix; unmasked rows pass through
/// bit-identically.
pub fn apply_masks(x: &Tensor, m: &MaskSpec) -> Result<Tensor> {
    x.mask_rows(&m.masked)
}

/// Mean over masked frames of the per-frame cross-entropy
/// `-log softmax(logits[t])[labels[t]]`. Unmasked frames contribute
/// exactly zero, in value and in gradient.
pub fn masked_ce_loss(logits: &Tensor, labels: &[usize], m: &MaskSpec) -> Result<Tensor> {
    let (t, k) = match logits.shape() {
        [t, k] => (*t, *k),
        s => return Err(Error::shape("masked_ce_loss", format!("logits rank {:?}", s))),
    };
    if m.masked.is_empty() {
        return Err(Error::domain("masked_ce_loss", "empty mask"));
    }
    if labels.len() != t {
        return Err(Error::shape(
            "masked_ce_loss",
            format!("{} labels for {t} frames", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::domain("masked_ce_loss", format!("label {bad} out of {k} classes")));
    }
    if m.masked.iter().any(|&f| f >= t) {
        return Err(Error::shape("masked_ce_loss", "mask index out of range"));
    }
    let ls = logits.log_softmax_rows()?;
    let flat = ls.reshape(&[t * k])?;
    let idx: Vec<usize> = m.masked.iter().map(|&f| f * k + labels[f]).collect();
    flat.gather(&idx)?.mean()?.neg()
}

/// Fraction of masked frames whose argmax logit equals the label.
pub fn masked_accuracy(logits: &Tensor, labels: &[usize], m: &MaskSpec) -> f64 {
    let k = logits.cols();
    if m.masked.is_empty() {
        return 0.0;
    }
    let hits = m
        .masked
        .iter()
        .filter(|&&f| {
            let row = &logits.data()[f * k..(f + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == labels[f]
        })
        .count();
    hits as f64 / m.masked.len() as f64
}

// ---------------------------------------------------------------------------
// CTC
// ---------------------------------------------------------------------------

/// Blank token index in every CTC vocabulary.
pub const BLANK: usize = 0;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended_target(target: &[usize]) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * target.len() + 1);
    z.push(BLANK);
    for &u in target {
        z.push(u);
        z.push(BLANK);
    }
    z
}

/// Forward lattice over the blank-interleaved target, in the log domain.
#[derive(Debug, Clone)]
pub struct CtcTable {
    /// Row-major `T x (2U+1)` log-alpha entries.
    pub log_alpha: Vec<f64>,
    pub t: usize,
    pub s: usize,
}

impl CtcTable {
    pub fn at(&self, t: usize, s: usize) -> f64 {
        self.log_alpha[t * self.s + s]
    }

    /// Total log-likelihood of the target.
    pub fn log_prob(&self) -> f64 {
        let last = self.at(self.t - 1, self.s - 1);
        if self.s > 1 {
            lse2(last, self.at(self.t - 1, self.s - 2))
        } else {
            last
        }
    }
}

/// Run the CTC forward recursion for `target` over `T x V` log
/// probabilities (row-major).
pub fn ctc_forward_table(log_probs: &[f64], t: usize, v: usize, target: &[usize]) -> Result<CtcTable> {
    if t == 0 || v == 0 || log_probs.len() != t * v {
        return Err(Error::shape("ctc", format!("{t} x {v} lattice")));
    }
    if let Some(&bad) = target.iter().find(|&&u| u == BLANK || u >= v) {
        return Err(Error::domain("ctc", format!("target token {bad} invalid for V = {v}")));
    }
    let z = extended_target(target);
    let s = z.len();
    let lp = |ti: usize, tok: usize| log_probs[ti * v + tok];

    let mut alpha = vec![f64::NEG_INFINITY; t * s];
    alpha[0] = lp(0, z[0]);
    if s > 1 {
        alpha[1] = lp(0, z[1]);
    }
    for ti in 1..t {
        for si in 0..s {
            let mut acc = alpha[(ti - 1) * s + si];
            if si >= 1 {
                acc = lse2(acc, alpha[(ti - 1) * s + si - 1]);
            }
            if si >= 2 && z[si] != BLANK && z[si] != z[si - 2] {
                acc = lse2(acc, alpha[(ti - 1) * s + si - 2]);
            }
            alpha[ti * s + si] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + lp(ti, z[si])
            };
        }
    }
    Ok(CtcTable { log_alpha: alpha, t, s })
}

/// Negative log-likelihood of `target` under per-frame log probabilities
/// `[T, V]` (blank at index 0), differentiable through the graph via the
/// forward-backward occupancy gradient. An unalignable target (longer
/// than the frames can carry) yields a detached `+inf` loss for the
/// caller to flag.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<Tensor> {
    let (t, v) = match log_probs.shape() {
        [t, v] => (*t, *v),
        s => return Err(Error::shape("ctc_loss", format!("log_probs rank {:?}", s))),
    };
    let table = ctc_forward_table(log_probs.data(), t, v, target)?;
    let log_p = table.log_prob();
    if log_p == f64::NEG_INFINITY {
        return Ok(Tensor::scalar(f64::INFINITY));
    }

    // Backward (right-to-left) lattice, emissions included, for the
    // occupancy gradient.
    let z = extended_target(target);
    let s = z.len();
    let data = log_probs.data();
    let lp = |ti: usize, tok: usize| data[ti * v + tok];
    let mut beta = vec![f64::NEG_INFINITY; t * s];
    beta[(t - 1) * s + s - 1] = lp(t - 1, z[s - 1]);
    if s > 1 {
        beta[(t - 1) * s + s - 2] = lp(t - 1, z[s - 2]);
    }
    for ti in (0..t - 1).rev() {
        for si in 0..s {
            let mut acc = beta[(ti + 1) * s + si];
            if si + 1 < s {
                acc = lse2(acc, beta[(ti + 1) * s + si + 1]);
            }
            if si + 2 < s && z[si + 2] != BLANK && z[si + 2] != z[si] {
                acc = lse2(acc, beta[(ti + 1) * s + si + 2]);
            }
            beta[ti * s + si] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + lp(ti, z[si])
            };
        }
    }

    // dL/dlp[t][v] = -exp(lse_{s: z[s]=v}(alpha + beta) - lp[t][v] - logP).
    let mut grad = vec![0.0f64; t * v];
    for ti in 0..t {
        let mut per_tok = vec![f64::NEG_INFINITY; v];
        for si in 0..s {
            let ab = table.at(ti, si) + beta[ti * s + si];
            per_tok[z[si]] = lse2(per_tok[z[si]], ab);
        }
        for tok in 0..v {
            if per_tok[tok] != f64::NEG_INFINITY {
                grad[ti * v + tok] = -(per_tok[tok] - lp(ti, tok) - log_p).exp();
            }
        }
    }

    Tensor::from_op(
        "ctc_loss",
        vec![-log_p],
        vec![1],
        vec![log_probs.clone()],
        Box::new(move |d| vec![grad.iter().map(|g| g * d[0]).collect()]),
    )
}

/// Best-path (greedy Viterbi) decoding: per-frame argmax, collapse
/// repeats, strip blanks.
pub fn ctc_decode(log_probs: &Tensor) -> Result<Vec<usize>> {
    let (t, v) = match log_probs.shape() {
        [t, v] => (*t, *v),
        s => return Err(Error::shape("ctc_decode", format!("log_probs rank {:?}", s))),
    };
    let data = log_probs.data();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for ti in 0..t {
        let row = &data[ti * v..(ti + 1) * v];
        let mut best = 0;
        for (j, &val) in row.iter().enumerate() {
            if val > row[best] {
                best = j;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// WER
// ---------------------------------------------------------------------------

/// Levenshtein edit distance (substitutions + insertions + deletions).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, xa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, xb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(xa != xb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: edit distance over the reference length.
pub fn wer<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::domain("wer", "empty reference"));
    }
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// CTC vocabulary. Token 0 is always the blank symbol `<b>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    pub const BLANK_SYMBOL: &'static str = "<b>";

    /// Build from transcripts: blank plus the sorted unique tokens.
    pub fn build<'a>(token_seqs: impl IntoIterator<Item = &'a Vec<String>>) -> Vocab {
        let mut uniq: std::collections::BTreeSet<String> = Default::default();
        for seq in token_seqs {
            uniq.extend(seq.iter().cloned());
        }
        let mut tokens = vec![Self::BLANK_SYMBOL.to_string()];
        tokens.extend(uniq);
        Vocab { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.tokens
                    .iter()
                    .position(|t| t == w)
                    .filter(|&i| i != BLANK)
                    .ok_or_else(|| Error::Data(format!("token `{w}` not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// One token per line, blank first.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(Self::BLANK_SYMBOL) {
            return Err(Error::Data(format!(
                "{}: first vocabulary line must be {}",
                path.display(),
                Self::BLANK_SYMBOL
            )));
        }
        Ok(Vocab { tokens })
    }

    /// Space-joined form for the checkpoint config trailer.
    pub fn to_config_string(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn from_config_string(s: &str) -> Result<Vocab> {
        let tokens: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(Self::BLANK_SYMBOL) {
            return Err(Error::Data("vocab config must start with the blank symbol".into()));
        }
        Ok(Vocab { tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::{backward, finite_diff_check};
    use proptest::prelude::*;

    fn rng_for(t: u64) -> ChaCha8Rng {
        stream_rng(42, Stream::Mask, &[t])
    }

    #[test]
    fn mask_counts_and_ceiling() {
        let mut rng = rng_for(0);
        let m = sample_masks(100, &mut rng).unwrap();
        assert_eq!(m.spans.len(), 8); // round(0.08 * 100)
        assert!(m.masked.len() <= 80);
        for &(_, len) in &m.spans {
            assert!(len <= MASK_SPAN);
        }
    }

    #[test]
    fn tiny_t_truncates_spans() {
        let mut rng = rng_for(1);
        let m = sample_masks(5, &mut rng).unwrap();
        assert_eq!(m.spans.len(), 1);
        assert!(m.spans[0].1 <= 5);
        assert!(m.masked.iter().all(|&f| f < 5));
        assert!(sample_masks(0, &mut rng).is_err());
    }

    #[test]
    fn masks_are_deterministic_per_stream() {
        let a = sample_masks(64, &mut rng_for(7)).unwrap();
        let b = sample_masks(64, &mut rng_for(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_masks_zeroes_only_masked_rows() {
        let x = Tensor::from_vec((0..24).map(|i| i as f64 + 1.0).collect(), &[6, 4]).unwrap();
        let m = MaskSpec {
            masked: (1..=3).collect(),
            spans: vec![(1, 3)],
        };
        let y = apply_masks(&x, &m).unwrap();
        for r in 0..6 {
            for c in 0..4 {
                let expect = if (1..=3).contains(&r) { 0.0 } else { x.at2(r, c) };
                assert_eq!(y.at2(r, c).to_bits(), expect.to_bits());
            }
        }
        // Empty mask: unchanged.
        let same = apply_masks(&x, &MaskSpec::empty()).unwrap();
        assert_eq!(same.data(), x.data());
        // Out of range: error.
        let bad = MaskSpec {
            masked: vec![6],
            spans: vec![(6, 1)],
        };
        assert!(apply_masks(&x, &bad).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let t = 7;
        let k = 16;
        let logits = Tensor::from_vec(vec![0.0; t * k], &[t, k]).unwrap();
        let labels = vec![3usize; t];
        let m = MaskSpec {
            masked: vec![0, 2, 4],
            spans: vec![(0, 1), (2, 1), (4, 1)],
        };
        let loss = masked_ce_loss(&logits, &labels, &m).unwrap().value().unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unmasked_frames_do_not_matter() {
        let t = 6;
        let k = 4;
        let mut vals: Vec<f64> = (0..t * k).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.6).collect();
        let logits = Tensor::from_vec(vals.clone(), &[t, k]).unwrap();
        let labels = vec![1, 2, 3, 0, 1, 2];
        let m = MaskSpec {
            masked: vec![1, 4],
            spans: vec![(1, 1), (4, 1)],
        };
        let base = masked_ce_loss(&logits, &labels, &m).unwrap().value().unwrap();

        // Perturb logits at unmasked frames only.
        vals[0] += 100.0;
        vals[3 * k + 2] = -40.0;
        let logits2 = Tensor::from_vec(vals, &[t, k]).unwrap();
        let same = masked_ce_loss(&logits2, &labels, &m).unwrap().value().unwrap();
        assert_eq!(base.to_bits(), same.to_bits());

        // Perturb labels at unmasked frames only.
        let labels2 = vec![3, 2, 0, 1, 1, 0];
        let same2 = masked_ce_loss(&logits2, &labels2, &m).unwrap().value().unwrap();
        assert_eq!(base.to_bits(), same2.to_bits());

        // Empty mask is a contract violation.
        assert!(masked_ce_loss(&logits2, &labels, &MaskSpec::empty()).is_err());
    }

    #[test]
    fn masked_ce_matches_direct_summation() {
        let t = 5;
        let k = 3;
        let vals: Vec<f64> = (0..t * k).map(|i| ((i * 13 % 7) as f64) * 0.4 - 1.0).collect();
        let logits = Tensor::from_vec(vals.clone(), &[t, k]).unwrap();
        let labels = vec![2, 0, 1, 1, 0];
        let m = MaskSpec {
            masked: vec![0, 2, 3],
            spans: vec![(0, 1), (2, 2)],
        };
        let got = masked_ce_loss(&logits, &labels, &m).unwrap().value().unwrap();

        // Direct re-summation oracle.
        let mut total = 0.0;
        for &f in &m.masked {
            let row = &vals[f * k..(f + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += -(row[labels[f]] - lse);
        }
        let expected = total / m.masked.len() as f64;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_gradient_is_zero_at_unmasked_rows() {
        let t = 6;
        let k = 4;
        let vals: Vec<f64> = (0..t * k).map(|i| ((i * 11 % 9) as f64) * 0.2 - 0.8).collect();
        let logits = Tensor::param(vals, &[t, k]).unwrap();
        let labels = vec![1, 2, 3, 0, 1, 2];
        let m = MaskSpec {
            masked: vec![1, 4],
            spans: vec![(1, 1), (4, 1)],
        };
        let loss = masked_ce_loss(&logits, &labels, &m).unwrap();
        backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        for f in 0..t {
            let row = &g[f * k..(f + 1) * k];
            if m.masked.contains(&f) {
                assert!(row.iter().any(|&v| v != 0.0), "masked row {f} has zero grad");
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "unmasked row {f} has nonzero grad");
            }
        }
    }

    // -- CTC ---------------------------------------------------------------

    fn log_softmax_rows(vals: &[f64], t: usize, v: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(t * v);
        for row in vals.chunks(v) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        out
    }

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &p in path {
            if p != prev {
                if p != BLANK {
                    out.push(p);
                }
                prev = p;
            }
        }
        out
    }

    /// Exhaustive alignment-sum oracle over the V^T paths.
    fn brute_force_log_prob(lp: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
        let mut total = 0.0f64;
        let n_paths = v.pow(t as u32);
        for mut code in 0..n_paths {
            let mut path = Vec::with_capacity(t);
            for _ in 0..t {
                path.push(code % v);
                code /= v;
            }
            if collapse(&path) == target {
                let logp: f64 = path.iter().enumerate().map(|(ti, &tok)| lp[ti * v + tok]).sum();
                total += logp.exp();
            }
        }
        total.ln()
    }

    #[test]
    fn ctc_two_frame_hand_case() {
        // target "a" over {blank, a}, both frames uniform: the three
        // valid alignments (a,a), (a,-), (-,a) give P = 0.75.
        let lp = log_softmax_rows(&[0.0, 0.0, 0.0, 0.0], 2, 2);
        let t = Tensor::from_vec(lp, &[2, 2]).unwrap();
        let loss = ctc_loss(&t, &[1]).unwrap().value().unwrap();
        assert!((loss - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_is_all_blank_path() {
        let vals: Vec<f64> = (0..3 * 2).map(|i| (i as f64) * 0.3 - 0.5).collect();
        let lp = log_softmax_rows(&vals, 3, 2);
        let expected: f64 = (0..3).map(|ti| lp[ti * 2 + BLANK]).sum();
        let t = Tensor::from_vec(lp, &[3, 2]).unwrap();
        let loss = ctc_loss(&t, &[]).unwrap().value().unwrap();
        assert!((loss + expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_unalignable_target_is_infinite() {
        let lp = log_softmax_rows(&[0.0; 2 * 3], 2, 3);
        let t = Tensor::from_vec(lp, &[2, 3]).unwrap();
        // Three distinct tokens need at least three frames.
        let loss = ctc_loss(&t, &[1, 2, 1]).unwrap().value().unwrap();
        assert!(loss.is_infinite());
    }

    #[test]
    fn ctc_matches_exhaustive_enumeration() {
        let mut seed = 0x2468u64;
        let mut rnd = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let mut cases = 0;
        for t in 1..=6 {
            for v in 2..=3usize {
                for u in 0..=3usize {
                    let vals: Vec<f64> = (0..t * v).map(|_| rnd()).collect();
                    let lp = log_softmax_rows(&vals, t, v);
                    // Deterministic token pattern; skip invalid targets.
                    let target: Vec<usize> = (0..u).map(|i| 1 + (i % (v - 1))).collect();
                    let oracle = brute_force_log_prob(&lp, t, v, &target);
                    let tens = Tensor::from_vec(lp, &[t, v]).unwrap();
                    let got = ctc_loss(&tens, &target).unwrap().value().unwrap();
                    if oracle == f64::NEG_INFINITY {
                        assert!(got.is_infinite(), "T={t} V={v} U={u}");
                    } else {
                        assert!(
                            (got - (-oracle)).abs() < 1e-10,
                            "T={t} V={v} U={u}: {got} vs {}",
                            -oracle
                        );
                    }
                    cases += 1;
                }
            }
        }
        assert!(cases >= 40);
    }

    #[test]
    fn ctc_gradient_passes_finite_differences() {
        let vals: Vec<f64> = (0..5 * 3)
            .map(|i| ((i * 29 % 13) as f64) * 0.25 - 1.5)
            .collect();
        let x = Tensor::from_vec(vals, &[5, 3]).unwrap();
        let err = finite_diff_check(
            |t| ctc_loss(&t.log_softmax_rows()?, &[1, 2]),
            &x,
            1e-5,
        );
        assert!(err < 1e-5, "ctc gradient error {err}");
        // Also directly on unnormalized log-probs, which the gradient
        // formula treats as free coordinates.
        let err2 = finite_diff_check(|t| ctc_loss(t, &[2, 1, 1]), &x, 1e-5);
        assert!(err2 < 1e-5, "ctc raw gradient error {err2}");
    }

    #[test]
    fn ctc_table_entries_are_nonpositive_for_log_probs() {
        let vals: Vec<f64> = (0..6 * 3).map(|i| ((i * 17 % 11) as f64) * 0.5).collect();
        let lp = log_softmax_rows(&vals, 6, 3);
        let table = ctc_forward_table(&lp, 6, 3, &[1, 2]).unwrap();
        assert!(table.log_alpha.iter().all(|&a| a <= 0.0));
    }

    #[test]
    fn decode_collapses_and_strips() {
        // Argmax sequence (a, a, blank, a) -> "aa".
        let rows = [
            [0.1, 0.9],
            [0.2, 0.8],
            [0.9, 0.1],
            [0.3, 0.7],
        ];
        let lp: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p: &f64| p.ln())).collect();
        let t = Tensor::from_vec(lp, &[4, 2]).unwrap();
        assert_eq!(ctc_decode(&t).unwrap(), vec![1, 1]);

        let all_blank = Tensor::from_vec(
            vec![0.9f64.ln(), 0.1f64.ln()].repeat(3),
            &[3, 2],
        )
        .unwrap();
        assert_eq!(ctc_decode(&all_blank).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn decode_matches_brute_force_best_path() {
        let mut seed = 0x1357u64;
        let mut rnd = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _case in 0..20 {
            let t = 6;
            let v = 4;
            let vals: Vec<f64> = (0..t * v).map(|_| rnd() * 3.0 - 1.5).collect();
            let lp = log_softmax_rows(&vals, t, v);
            // Exhaustive best path over the 4^6 unconstrained paths.
            let mut best_path = Vec::new();
            let mut best_lp = f64::NEG_INFINITY;
            for mut code in 0..v.pow(t as u32) {
                let mut path = Vec::with_capacity(t);
                for _ in 0..t {
                    path.push(code % v);
                    code /= v;
                }
                let score: f64 = path.iter().enumerate().map(|(ti, &tok)| lp[ti * v + tok]).sum();
                if score > best_lp {
                    best_lp = score;
                    best_path = path;
                }
            }
            let tens = Tensor::from_vec(lp, &[t, v]).unwrap();
            assert_eq!(ctc_decode(&tens).unwrap(), collapse(&best_path));
        }
    }

    // -- WER ----------------------------------------------------------------

    #[test]
    fn wer_basics() {
        let a = ["a", "b", "c"];
        assert_eq!(wer(&a, &a).unwrap(), 0.0);
        assert!((wer(&["a", "c"], &["a", "b", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&["b"], &["a"]).unwrap(), 1.0);
        assert!(wer::<&str>(&["a"], &[]).is_err());
    }

    proptest! {
        #[test]
        fn wer_symmetry_under_length_scaling(
            a in proptest::collection::vec(0u8..4, 1..8),
            b in proptest::collection::vec(0u8..4, 1..8),
        ) {
            let astr: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let bstr: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let ab = wer(&astr, &bstr).unwrap() * bstr.len() as f64;
            let ba = wer(&bstr, &astr).unwrap() * astr.len() as f64;
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn mask_coverage_bound_holds(t in 1usize..400, tag in 0u64..50) {
            let mut rng = stream_rng(9, Stream::Mask, &[tag]);
            let m = sample_masks(t, &mut rng).unwrap();
            let bound = 0.8 + 9.0 / t as f64;
            prop_assert!(m.coverage(t) <= bound + 1e-12);
            for &(s, len) in &m.spans {
                prop_assert!(len <= MASK_SPAN);
                prop_assert!(s + len <= t);
            }
            // Union of spans equals the masked set.
            let mut union: Vec<usize> = m.spans.iter().flat_map(|&(s, l)| s..s + l).collect();
            union.sort_unstable();
            union.dedup();
            prop_assert_eq!(union, m.masked.clone());
        }
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = vec![
            vec!["i".to_string(), "a".to_string()],
            vec!["u".to_string(), "a".to_string()],
        ];
        let vocab = Vocab::build(&seqs);
        assert_eq!(vocab.tokens[0], "<b>");
        assert_eq!(vocab.size(), 4);
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), vocab);
        let cfg = vocab.to_config_string();
        assert_eq!(Vocab::from_config_string(&cfg).unwrap(), vocab);
        let ids = vocab.encode(&["a".to_string(), "u".to_string()]).unwrap();
        assert_eq!(vocab.decode(&ids), vec!["a".to_string(), "u".to_string()]);
        assert!(vocab.encode(&["zz".to_string()]).is_err());
    }
}
