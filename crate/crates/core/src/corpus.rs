//! Deterministic synthetic speaker corpus and the speaker-grouped
//! utterance inventory.
//!
//! Each synthetic speaker is a harmonic source with speaker-specific
//! fundamental, formant scaling and amplitude envelope. Utterances are
//! sequences of vowel-like syllables; the syllable choices double as the
//! utterance's pseudo-transcript, so the downstream recognizer has
//! ground-truth targets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::audio::{save_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Vowel-like syllable inventory: (symbol, F1 Hz, F2 Hz).
pub const SYLLABLES: [(char, f64, f64); 5] = [
    ('a', 800.0, 1150.0),
    ('e', 480.0, 1900.0),
    ('i', 320.0, 2500.0),
    ('o', 520.0, 920.0),
    ('u', 350.0, 760.0),
];

/// Generator parameters that make one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    /// Fundamental frequency in Hz.
    pub f0: f64,
    /// Multiplier applied to syllable formant centers.
    pub formant_scale: f64,
    /// Amplitude-modulation rate in Hz.
    pub env_rate: f64,
    /// Amplitude-modulation depth in [0, 1).
    pub env_depth: f64,
    /// Target utterance RMS, kept inside [0.05, 0.5].
    pub rms: f64,
}

impl SpeakerProfile {
    /// Deterministic profile for speaker `index` of `total` under `seed`.
    /// Fundamentals are spread geometrically over [110, 250] Hz so every
    /// pair of speakers is spectrally separable.
    pub fn derive(seed: u64, index: usize, total: usize) -> SpeakerProfile {
        let mut rng = stream_rng(seed, Stream::CorpusSpeaker, &[index as u64]);
        let frac = if total > 1 {
            index as f64 / (total - 1) as f64
        } else {
            0.0
        };
        SpeakerProfile {
            f0: 110.0 * (250.0f64 / 110.0).powf(frac) * rng.random_range(0.98..1.02),
            formant_scale: rng.random_range(0.90..1.15),
            env_rate: rng.random_range(2.0..6.0),
            env_depth: rng.random_range(0.2..0.5),
            rms: rng.random_range(0.12..0.30),
        }
    }
}

fn formant_bump(freq: f64, center: f64) -> f64 {
    let d = freq - center;
    (-d * d / (2.0 * 150.0 * 150.0)).exp()
}

/// Synthesize one utterance. Deterministic given (profile, duration,
/// seed); returns the waveform and its syllable transcript.
pub fn synth_utterance_full(
    profile: &SpeakerProfile,
    duration_s: f64,
    seed: u64,
) -> Result<(Waveform, Vec<char>)> {
    if duration_s <= 0.0 {
        return Err(Error::domain("synth_utterance", "duration must be positive"));
    }
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let total = (duration_s * sr).round() as usize;
    let mut rng = stream_rng(seed, Stream::CorpusUtterance, &[]);

    let n_syl = ((duration_s / 0.35).round() as usize).max(1);
    let syl_len = total / n_syl;
    let n_harm = ((7600.0 / profile.f0).floor() as usize).clamp(1, 30);
    let phases: Vec<f64> = (0..n_harm)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let env_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut samples = vec![0.0f64; total];
    let mut transcript = Vec::with_capacity(n_syl);
    let ramp = (0.015 * sr) as usize; // 15 ms syllable on/offset
    for s in 0..n_syl {
        let syl = SYLLABLES[rng.random_range(0..SYLLABLES.len())];
        transcript.push(syl.0);
        let f1 = syl.1 * profile.formant_scale;
        let f2 = syl.2 * profile.formant_scale;
        // Harmonic amplitudes: 1/n^1.7 rolloff with formant boosts. The
        // fundamental stays dominant so spectral peak picking recovers f0.
        let amps: Vec<f64> = (1..=n_harm)
            .map(|n| {
                let freq = n as f64 * profile.f0;
                (1.0 + 2.2 * formant_bump(freq, f1) + 1.8 * formant_bump(freq, f2))
                    / (n as f64).powf(1.7)
            })
            .collect();
        let start = s * syl_len;
        let end = if s + 1 == n_syl { total } else { start + syl_len };
        for i in start..end {
            let t = i as f64 / sr;
            let mut v = 0.0;
            for (n, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
                v += a * (std::f64::consts::TAU * (n + 1) as f64 * profile.f0 * t + ph).sin();
            }
            let local = i - start;
            let fade_in = (local as f64 / ramp as f64).min(1.0);
            let fade_out = ((end - 1 - i) as f64 / ramp as f64).min(1.0);
            let am = 1.0 - profile.env_depth * 0.5
                + profile.env_depth * 0.5
                    * (std::f64::consts::TAU * profile.env_rate * t + env_phase).sin();
            samples[i] = v * fade_in * fade_out * am;
        }
    }

    // Exact RMS normalization.
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / total as f64).sqrt();
    if rms > 0.0 {
        let g = profile.rms / rms;
        for s in &mut samples {
            *s *= g;
        }
    }
    Ok((Waveform::new(samples, DEFAULT_SAMPLE_RATE), transcript))
}

/// Synthesize one utterance, waveform only.
pub fn synth_utterance(profile: &SpeakerProfile, duration_s: f64, seed: u64) -> Result<Waveform> {
    synth_utterance_full(profile, duration_s, seed).map(|(w, _)| w)
}

// ---------------------------------------------------------------------------
// Inventory
// ---------------------------------------------------------------------------

/// Speaker-grouped utterance catalog with label and transcript stores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeakerInventory {
    /// speaker id -> utterance ids, each list sorted.
    pub groups: BTreeMap<String, Vec<String>>,
    /// utterance id -> speaker id.
    pub speaker_of: BTreeMap<String, String>,
    /// utterance id -> frame labels at the feature rate.
    pub labels: BTreeMap<String, Vec<usize>>,
    /// utterance id -> pseudo-transcript tokens.
    pub transcripts: BTreeMap<String, Vec<String>>,
    /// utterance id -> audio path relative to the manifest directory.
    pub rel_paths: BTreeMap<String, String>,
    /// utterance id -> sample count from the manifest.
    pub num_samples: BTreeMap<String, usize>,
    /// Directory the relative paths resolve against.
    pub base_dir: PathBuf,
    /// All utterance ids, sorted.
    pub utterances: Vec<String>,
}

impl SpeakerInventory {
    pub fn speaker_count(&self) -> usize {
        self.groups.len()
    }

    pub fn audio_path(&self, utt: &str) -> Result<PathBuf> {
        let rel = self
            .rel_paths
            .get(utt)
            .ok_or_else(|| Error::Data(format!("unknown utterance id `{utt}`")))?;
        Ok(self.base_dir.join(rel))
    }

    pub fn speaker(&self, utt: &str) -> Result<&str> {
        self.speaker_of
            .get(utt)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Data(format!("unknown utterance id `{utt}`")))
    }
}

/// Parse a manifest TSV (`utt_id<TAB>speaker_id<TAB>rel_path<TAB>num_samples`).
/// Rows are sorted by utterance id; duplicate ids and missing audio files
/// are errors. A `transcripts.tsv` sidecar next to the manifest is loaded
/// when present.
pub fn build_inventory(manifest_path: &Path) -> Result<SpeakerInventory> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut inv = SpeakerInventory {
        base_dir: base_dir.clone(),
        ..Default::default()
    };
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Data(format!(
                "{}:{}: expected 4 tab-separated columns, got {}",
                manifest_path.display(),
                ln + 1,
                cols.len()
            )));
        }
        let (utt, spk, rel, n) = (cols[0], cols[1], cols[2], cols[3]);
        let n: usize = n.parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: bad sample count `{n}`",
                manifest_path.display(),
                ln + 1
            ))
        })?;
        if inv.speaker_of.contains_key(utt) {
            return Err(Error::Data(format!("duplicate utterance id `{utt}`")));
        }
        let audio = base_dir.join(rel);
        if !audio.is_file() {
            return Err(Error::Data(format!(
                "utterance `{utt}` references missing audio {}",
                audio.display()
            )));
        }
        inv.speaker_of.insert(utt.to_string(), spk.to_string());
        inv.rel_paths.insert(utt.to_string(), rel.to_string());
        inv.num_samples.insert(utt.to_string(), n);
        inv.groups.entry(spk.to_string()).or_default().push(utt.to_string());
    }
    if inv.speaker_of.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", manifest_path.display())));
    }
    for utts in inv.groups.values_mut() {
        utts.sort();
    }
    inv.utterances = inv.speaker_of.keys().cloned().collect();

    let tr_path = base_dir.join("transcripts.tsv");
    if tr_path.is_file() {
        inv.transcripts = load_transcripts(&tr_path)?;
    }
    Ok(inv)
}

/// Write the manifest rows of an inventory (sorted by utterance id).
pub fn write_manifest(inv: &SpeakerInventory, path: &Path) -> Result<()> {
    let mut out = String::new();
    for utt in &inv.utterances {
        out.push_str(&format!(
            "{utt}\t{}\t{}\t{}\n",
            inv.speaker_of[utt], inv.rel_paths[utt], inv.num_samples[utt]
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Label file: `utt_id<TAB>space-separated integer labels`.
pub fn save_labels(labels: &BTreeMap<String, Vec<usize>>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (utt, seq) in labels {
        let joined: Vec<String> = seq.iter().map(|l| l.to_string()).collect();
        out.push_str(&format!("{utt}\t{}\n", joined.join(" ")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (utt, rest) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: missing tab", path.display(), ln + 1))
        })?;
        let seq: std::result::Result<Vec<usize>, _> =
            rest.split_whitespace().map(str::parse).collect();
        let seq = seq.map_err(|_| {
            Error::Data(format!("{}:{}: non-integer label", path.display(), ln + 1))
        })?;
        map.insert(utt.to_string(), seq);
    }
    Ok(map)
}

/// Transcript file: `utt_id<TAB>space-separated tokens`.
pub fn load_transcripts(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some((utt, rest)) = line.split_once('\t') {
            map.insert(
                utt.to_string(),
                rest.split_whitespace().map(str::to_string).collect(),
            );
        }
    }
    Ok(map)
}

pub fn save_transcripts(tr: &BTreeMap<String, Vec<String>>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (utt, toks) in tr {
        out.push_str(&format!("{utt}\t{}\n", toks.join(" ")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Enrollment map: `utt_id<TAB>enrollment_utt_id` (evaluation only).
pub fn load_enroll_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some((utt, enroll)) = line.split_once('\t') {
            map.insert(utt.to_string(), enroll.trim().to_string());
        }
    }
    Ok(map)
}

/// Every inventory waveform preloaded into memory. Mixing samples
/// thousands of pairs per epoch; reading WAVs once keeps that cheap.
#[derive(Debug, Clone)]
pub struct AudioCache {
    map: BTreeMap<String, Waveform>,
}

impl AudioCache {
    pub fn preload(inv: &SpeakerInventory) -> Result<AudioCache> {
        let mut map = BTreeMap::new();
        for utt in &inv.utterances {
            let path = inv.audio_path(utt)?;
            let wav = crate::audio::load_wav(&path)?;
            if wav.is_empty() {
                return Err(Error::Data(format!("utterance `{utt}` is empty")));
            }
            map.insert(utt.clone(), wav);
        }
        Ok(AudioCache { map })
    }

    pub fn get(&self, utt: &str) -> Result<&Waveform> {
        self.map
            .get(utt)
            .ok_or_else(|| Error::Data(format!("no cached audio for `{utt}`")))
    }
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

/// Options for [`gen_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            speakers: 8,
            utts_per_speaker: 10,
            seed: 1,
            min_dur_s: 2.0,
            max_dur_s: 4.0,
        }
    }
}

/// Materialize a synthetic corpus: `wav/*.wav`, `manifest.tsv` and
/// `transcripts.tsv` under `out_dir`. Returns the manifest path.
pub fn gen_corpus(out_dir: &Path, spec: &CorpusSpec) -> Result<PathBuf> {
    if spec.speakers == 0 || spec.utts_per_speaker == 0 {
        return Err(Error::domain("gen_corpus", "speakers and utts must be positive"));
    }
    if !(spec.min_dur_s > 0.0 && spec.max_dur_s >= spec.min_dur_s) {
        return Err(Error::domain("gen_corpus", "bad duration range"));
    }
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut manifest = String::new();
    let mut transcripts = BTreeMap::new();
    for s in 0..spec.speakers {
        let profile = SpeakerProfile::derive(spec.seed, s, spec.speakers);
        let spk_id = format!("spk{s:03}");
        for u in 0..spec.utts_per_speaker {
            let mut rng = stream_rng(spec.seed, Stream::CorpusUtterance, &[s as u64, u as u64]);
            let dur = rng.random_range(spec.min_dur_s..=spec.max_dur_s);
            let utt_seed = rng.random::<u64>();
            let (wav, chars) = synth_utterance_full(&profile, dur, utt_seed)?;
            let utt_id = format!("{spk_id}_utt{u:03}");
            let rel = format!("wav/{utt_id}.wav");
            save_wav(&wav_dir.join(format!("{utt_id}.wav")), &wav)?;
            manifest.push_str(&format!("{utt_id}\t{spk_id}\t{rel}\t{}\n", wav.len()));
            transcripts.insert(utt_id, chars.iter().map(|c| c.to_string()).collect());
        }
    }
    let manifest_path = out_dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    save_transcripts(&transcripts, &out_dir.join("transcripts.tsv"))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::logmel;

    fn profile(f0: f64) -> SpeakerProfile {
        SpeakerProfile {
            f0,
            formant_scale: 1.0,
            env_rate: 3.0,
            env_depth: 0.3,
            rms: 0.2,
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = profile(150.0);
        let a = synth_utterance(&p, 1.0, 42).unwrap();
        let b = synth_utterance(&p, 1.0, 42).unwrap();
        assert_eq!(
            a.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_duration_is_an_error() {
        assert!(synth_utterance(&profile(150.0), 0.0, 1).is_err());
    }

    #[test]
    fn rms_hits_target_in_range() {
        let p = profile(180.0);
        let w = synth_utterance(&p, 1.5, 7).unwrap();
        assert!((w.rms() - 0.2).abs() < 1e-9);
        assert!(w.rms() >= 0.05 && w.rms() <= 0.5);
    }

    /// Hann-windowed 1024-point DFT peak. Brute-force oracle for the
    /// spectral contract of the synthesizer.
    fn dominant_peak_hz(w: &Waveform) -> f64 {
        let n = 1024;
        let start = w.len() / 2 - n / 2;
        let seg: Vec<f64> = (0..n)
            .map(|i| {
                let win = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos();
                w.samples[start + i] * win
            })
            .collect();
        let mut best_bin = 0;
        let mut best_mag = -1.0;
        for k in 0..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &s) in seg.iter().enumerate() {
                let ang = std::f64::consts::TAU * k as f64 * i as f64 / n as f64;
                re += s * ang.cos();
                im -= s * ang.sin();
            }
            let mag = re * re + im * im;
            if mag > best_mag {
                best_mag = mag;
                best_bin = k;
            }
        }
        best_bin as f64 * w.sample_rate as f64 / n as f64
    }

    #[test]
    fn dominant_peak_tracks_f0() {
        for f0 in [120.0, 220.0] {
            let w = synth_utterance(&profile(f0), 1.0, 11).unwrap();
            let peak = dominant_peak_hz(&w);
            let bin_hz = 16_000.0 / 1024.0;
            assert!(
                (peak - f0).abs() <= bin_hz,
                "f0 {f0}: dominant peak {peak} off by more than one bin"
            );
        }
    }

    #[test]
    fn gen_corpus_and_inventory_contract() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            speakers: 8,
            utts_per_speaker: 10,
            seed: 1,
            min_dur_s: 0.5,
            max_dur_s: 0.8,
        };
        let manifest = gen_corpus(dir.path(), &spec).unwrap();
        let inv = build_inventory(&manifest).unwrap();
        assert_eq!(inv.speaker_count(), 8);
        assert_eq!(inv.utterances.len(), 80);
        // Every utterance in exactly one group, consistent with speaker_of.
        let mut seen = std::collections::BTreeSet::new();
        for (spk, utts) in &inv.groups {
            for u in utts {
                assert!(seen.insert(u.clone()), "utterance {u} in two groups");
                assert_eq!(inv.speaker_of[u], *spk);
            }
        }
        assert_eq!(seen.len(), 80);
        assert_eq!(inv.transcripts.len(), 80);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            speakers: 2,
            utts_per_speaker: 2,
            seed: 3,
            min_dur_s: 0.4,
            max_dur_s: 0.5,
        };
        let manifest = gen_corpus(dir.path(), &spec).unwrap();
        let inv = build_inventory(&manifest).unwrap();
        let copy_path = dir.path().join("manifest_copy.tsv");
        write_manifest(&inv, &copy_path).unwrap();
        let back = build_inventory(&copy_path).unwrap();
        assert_eq!(inv, back);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        save_wav(&wav, &Waveform::new(vec![0.1; 800], 16_000)).unwrap();
        let manifest = dir.path().join("manifest.tsv");
        fs::write(&manifest, "u1\ts1\ta.wav\t800\nu1\ts1\ta.wav\t800\n").unwrap();
        let err = build_inventory(&manifest).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_audio_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.tsv");
        fs::write(&manifest, "u1\ts1\tnot_there.wav\t800\n").unwrap();
        let err = build_inventory(&manifest).unwrap_err();
        assert!(err.to_string().contains("missing audio"), "{err}");
    }

    #[test]
    fn speaker_pairs_have_distinct_mean_features() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            speakers: 4,
            utts_per_speaker: 2,
            seed: 5,
            min_dur_s: 0.5,
            max_dur_s: 0.6,
        };
        let manifest = gen_corpus(dir.path(), &spec).unwrap();
        let inv = build_inventory(&manifest).unwrap();
        let cache = AudioCache::preload(&inv).unwrap();
        let mut means: Vec<Vec<f64>> = Vec::new();
        for (_, utts) in inv.groups.iter() {
            let fm = logmel(cache.get(&utts[0]).unwrap(), 40).unwrap();
            let mut m = vec![0.0; fm.d];
            for r in 0..fm.t {
                for (j, v) in fm.row(r).iter().enumerate() {
                    m[j] += v / fm.t as f64;
                }
            }
            means.push(m);
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 0.0, "speakers {i} and {j} collapse in feature space");
            }
        }
    }
}
