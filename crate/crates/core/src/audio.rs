//! Mono waveforms and PCM 16-bit WAV I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio. Samples are nominally in [-1, 1]; in-memory mixtures may
/// exceed that range and only get clamped on WAV export.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }
}

/// Read a RIFF/WAVE file. Only PCM 16-bit mono is accepted; samples are
/// scaled to [-1, 1] by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Audio(format!("{}: {msg}", path.display()));

    let mut hdr = [0u8; 12];
    r.read_exact(&mut hdr).map_err(|e| Error::io(path, e))?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(bad("malformed header (not RIFF/WAVE)"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (codec, channels, rate, bits)
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut chunk_hdr = [0u8; 8];
        match r.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let size = u32::from_le_bytes(chunk_hdr[4..8].try_into().unwrap()) as usize;
        let mut body = vec![0u8; size];
        r.read_exact(&mut body).map_err(|e| Error::io(path, e))?;
        match &chunk_hdr[0..4] {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let codec = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((codec, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip other chunks
        }
        if size % 2 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }

    let (codec, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if codec != 1 || bits != 16 {
        return Err(bad("unsupported encoding (PCM 16-bit required)"));
    }
    if channels != 1 {
        return Err(bad("multichannel input not supported"));
    }
    if rate == 0 {
        return Err(bad("zero sample rate"));
    }
    let body = data.ok_or_else(|| bad("missing data chunk"))?;
    let samples = body
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Write PCM 16-bit mono. Samples outside [-1, 1] are clamped; the
/// number of clamped samples is returned so callers can warn.
pub fn save_wav(path: &Path, wav: &Waveform) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    let n = wav.samples.len();
    let data_bytes = (n * 2) as u32;
    let byte_rate = wav.sample_rate * 2;

    w.write_all(b"RIFF").map_err(io)?;
    w.write_all(&(36 + data_bytes).to_le_bytes()).map_err(io)?;
    w.write_all(b"WAVE").map_err(io)?;
    w.write_all(b"fmt ").map_err(io)?;
    w.write_all(&16u32.to_le_bytes()).map_err(io)?;
    w.write_all(&1u16.to_le_bytes()).map_err(io)?; // PCM
    w.write_all(&1u16.to_le_bytes()).map_err(io)?; // mono
    w.write_all(&wav.sample_rate.to_le_bytes()).map_err(io)?;
    w.write_all(&byte_rate.to_le_bytes()).map_err(io)?;
    w.write_all(&2u16.to_le_bytes()).map_err(io)?; // block align
    w.write_all(&16u16.to_le_bytes()).map_err(io)?; // bits
    w.write_all(b"data").map_err(io)?;
    w.write_all(&data_bytes.to_le_bytes()).map_err(io)?;

    let mut clamped = 0usize;
    for &s in &wav.samples {
        let v = if s > 1.0 || s < -1.0 {
            clamped += 1;
            s.clamp(-1.0, 1.0)
        } else {
            s
        };
        // Quantize with the same 1/32768 scale the reader uses so a
        // round trip stays within one quantization step.
        let q = (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_all(&q.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(clamped)
}
