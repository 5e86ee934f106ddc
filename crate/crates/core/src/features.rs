//! Log-mel spectral features.
//!
//! 25 ms Hann windows with a 10 ms hop at 16 kHz, zero-padded to a
//! 512-point FFT, 40 triangular mel filters by default. These are the
//! frame features behind pseudo-labeling and the spectral speaker
//! embedding.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Analysis window length in samples (25 ms at 16 kHz).
pub const FRAME_LEN: usize = 400;
/// Hop between frames in samples (10 ms at 16 kHz).
pub const FRAME_HOP: usize = 160;
/// Default number of mel bands.
pub const N_MELS: usize = 40;

const N_FFT: usize = 512;
const LOG_FLOOR: f64 = 1e-10;

/// T x D frame matrix with the framing geometry that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Row-major T x D values.
    pub data: Vec<f64>,
    pub t: usize,
    pub d: usize,
    pub frame_hop: usize,
    pub frame_len: usize,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Frame count for the spectral path: `1 + floor((len - frame_len) / hop)`.
pub fn frame_count(samples: usize, frame_len: usize, hop: usize) -> Option<usize> {
    if samples < frame_len {
        None
    } else {
        Some(1 + (samples - frame_len) / hop)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters as (bin, weight) lists, one per mel band.
fn mel_filterbank(n_mels: usize, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| {
            let hz = mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64);
            hz * N_FFT as f64 / sample_rate as f64 // fractional bin
        })
        .collect();
    let n_bins = N_FFT / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut taps = Vec::new();
            for b in lo.ceil() as usize..=(hi.floor() as usize).min(n_bins - 1) {
                let bf = b as f64;
                let w = if bf < mid {
                    if mid > lo { (bf - lo) / (mid - lo) } else { 0.0 }
                } else if hi > mid {
                    (hi - bf) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((b, w));
                }
            }
            taps
        })
        .collect()
}

/// Log mel-filtered power per frame: `log(mel_power + 1e-10)`.
pub fn logmel(wav: &Waveform, n_mels: usize) -> Result<FeatureMatrix> {
    if n_mels == 0 {
        return Err(Error::domain("logmel", "n_mels must be positive"));
    }
    let t = frame_count(wav.len(), FRAME_LEN, FRAME_HOP).ok_or_else(|| {
        Error::domain(
            "logmel",
            format!("waveform of {} samples shorter than one {FRAME_LEN}-sample frame", wav.len()),
        )
    })?;

    let window: Vec<f64> = (0..FRAME_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (FRAME_LEN - 1) as f64).cos())
        .collect();
    let filters = mel_filterbank(n_mels, wav.sample_rate);
    let fft = FftPlanner::new().plan_fft_forward(N_FFT);

    let mut data = Vec::with_capacity(t * n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; N_FFT / 2 + 1];
    for fi in 0..t {
        let start = fi * FRAME_HOP;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < FRAME_LEN {
                Complex::new(wav.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (b, p) in power.iter_mut().enumerate() {
            *p = buf[b].norm_sqr();
        }
        for taps in &filters {
            let e: f64 = taps.iter().map(|&(b, w)| w * power[b]).sum();
            data.push((e + LOG_FLOOR).ln());
        }
    }
    Ok(FeatureMatrix {
        data,
        t,
        d: n_mels,
        frame_hop: FRAME_HOP,
        frame_len: FRAME_LEN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;

    fn tone(freq: f64, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| 0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        Waveform::new(samples, 16_000)
    }

    #[test]
    fn frame_count_matches_invariant() {
        // 16000 samples, frame 400, hop 160 -> 98 frames.
        assert_eq!(frame_count(16_000, 400, 160), Some(98));
        let fm = logmel(&tone(440.0, 16_000), 40).unwrap();
        assert_eq!(fm.t, 98);
        assert_eq!(fm.d, 40);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let fm = logmel(&Waveform::new(vec![0.0; 4000], 16_000), 40).unwrap();
        let expected = (1e-10f64).ln();
        assert!(fm.data.iter().all(|&v| v == expected));
    }

    #[test]
    fn zero_mels_is_an_error() {
        assert!(logmel(&tone(440.0, 4000), 0).is_err());
    }

    #[test]
    fn too_short_waveform_is_an_error() {
        assert!(logmel(&Waveform::new(vec![0.1; 399], 16_000), 40).is_err());
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let w = tone(523.0, 6000);
        let base = logmel(&w, 40).unwrap();
        let mut delayed_samples = vec![0.0; FRAME_HOP];
        delayed_samples.extend_from_slice(&w.samples);
        let delayed = logmel(&Waveform::new(delayed_samples, 16_000), 40).unwrap();
        // Interior frames of the delayed signal replicate the original,
        // offset by one index, bit-identically.
        for fi in 0..base.t.min(delayed.t - 1) {
            assert_eq!(base.row(fi), delayed.row(fi + 1), "frame {fi}");
        }
    }

    #[test]
    fn distinct_tones_have_distinct_features() {
        let a = logmel(&tone(150.0, 8000), 40).unwrap();
        let b = logmel(&tone(900.0, 8000), 40).unwrap();
        let mean = |fm: &FeatureMatrix| -> Vec<f64> {
            let mut m = vec![0.0; fm.d];
            for r in 0..fm.t {
                for (j, v) in fm.row(r).iter().enumerate() {
                    m[j] += v / fm.t as f64;
                }
            }
            m
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let dist: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(dist > 1.0, "mean log-mel L2 distance {dist}");
    }
}
