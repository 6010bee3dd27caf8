//! Mel filterbank construction and log-mel spectrogram extraction, plus the
//! MEL1 on-disk format.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::audio::stft::{stft, StftConfig};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-5;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, peak-1 (no area normalization).
/// Rows are filters over the one-sided FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub bands: usize,
    pub fft_size: usize,
    pub sample_rate_hz: u32,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// `bands x (fft_size/2 + 1)`, row-major.
    pub weights: Vec<f64>,
    /// Peak frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

pub fn mel_filterbank(
    bands: usize,
    fft_size: usize,
    sample_rate_hz: u32,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(0.0 <= fmin_hz && fmin_hz < fmax_hz && fmax_hz <= nyquist) {
        return Err(Error::InvalidConfig(format!(
            "mel range [{fmin_hz}, {fmax_hz}] invalid for nyquist {nyquist}"
        )));
    }
    if bands == 0 {
        return Err(Error::InvalidConfig("need at least one mel band".into()));
    }
    let bins = fft_size / 2 + 1;
    let m_lo = hz_to_mel(fmin_hz);
    let m_hi = hz_to_mel(fmax_hz);
    // bands + 2 edge points, uniformly spaced on the mel scale
    let edges_hz: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (bands + 1) as f64))
        .collect();

    let mut weights = vec![0.0; bands * bins];
    for b in 0..bands {
        let (lo, mid, hi) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate_hz as f64 / fft_size as f64;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            weights[b * bins + k] = rise.min(fall).max(0.0);
        }
    }
    Ok(MelFilterbank {
        bands,
        fft_size,
        sample_rate_hz,
        fmin_hz,
        fmax_hz,
        weights,
        centers_hz: edges_hz[1..=bands].to_vec(),
    })
}

/// Log-mel frames, frame-major (`num_frames x bands`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub bands: usize,
    pub hop_size: u32,
    pub sample_rate_hz: u32,
}

impl MelSpectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.bands..(i + 1) * self.bands]
    }

    /// Number of output samples this conditioning pairs with.
    pub fn paired_samples(&self) -> usize {
        self.num_frames * self.hop_size as usize
    }

    /// Band-major `[bands, num_frames]` tensor for use as conditioning input.
    pub fn to_conditioning_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.frames.len()];
        for f in 0..self.num_frames {
            for b in 0..self.bands {
                data[b * self.num_frames + f] = self.frames[f * self.bands + b];
            }
        }
        Tensor::new(vec![self.bands, self.num_frames], data).expect("consistent dims")
    }
}

/// `log(max(fb . |stft|, 1e-5))`, natural log.
pub fn mel_spectrogram(
    buf: &AudioBuffer,
    cfg: &StftConfig,
    fb: &MelFilterbank,
) -> Result<MelSpectrogram> {
    if fb.fft_size != cfg.fft_size {
        return Err(Error::ShapeMismatch {
            op: "mel_spectrogram",
            detail: format!(
                "filterbank built for fft {} but stft uses {}",
                fb.fft_size, cfg.fft_size
            ),
        });
    }
    let spec = stft(buf, cfg)?;
    let bins = cfg.bins();
    let mut frames = vec![0.0; spec.num_frames * fb.bands];
    for f in 0..spec.num_frames {
        let frame = spec.frame(f);
        for b in 0..fb.bands {
            let row = &fb.weights[b * bins..(b + 1) * bins];
            let mut acc = 0.0;
            for (w, c) in row.iter().zip(frame) {
                if *w != 0.0 {
                    acc += w * c.norm();
                }
            }
            frames[f * fb.bands + b] = acc.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        num_frames: spec.num_frames,
        bands: fb.bands,
        hop_size: cfg.hop_size as u32,
        sample_rate_hz: buf.sample_rate_hz,
    })
}

const MEL_MAGIC: &[u8; 4] = b"MEL1";

/// MEL1 file: magic, then u32 LE frames, bands, hop, sample_rate, then
/// `frames * bands` f32 LE row-major.
pub fn write_mel(mel: &MelSpectrogram, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + mel.frames.len() * 4);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(mel.num_frames as u32).to_le_bytes());
    out.extend_from_slice(&(mel.bands as u32).to_le_bytes());
    out.extend_from_slice(&mel.hop_size.to_le_bytes());
    out.extend_from_slice(&mel.sample_rate_hz.to_le_bytes());
    for &v in &mel.frames {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != MEL_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{} is not a MEL1 file",
            path.display()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let num_frames = u32_at(4) as usize;
    let bands = u32_at(8) as usize;
    let hop_size = u32_at(12);
    let sample_rate_hz = u32_at(16);
    let need = 20 + num_frames * bands * 4;
    if bytes.len() < need {
        return Err(Error::CheckpointTruncated {
            need,
            have: bytes.len(),
        });
    }
    let frames: Vec<f64> = bytes[20..need]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(MelSpectrogram {
        frames,
        num_frames,
        bands,
        hop_size,
        sample_rate_hz,
    })
}
