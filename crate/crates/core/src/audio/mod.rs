//! Audio I/O, framing, STFT and mel-spectrogram extraction.

pub mod mel;
pub mod stft;
pub mod wav;

pub use mel::{mel_filterbank, mel_spectrogram, MelSpectrogram};
pub use stft::{stft, StftConfig, WindowKind};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Mono waveform with its sample rate. Amplitudes are dimensionless with a
/// nominal range of [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooShort { have: 0, need: 1 });
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::Constraint("non-finite audio sample".into()));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// STFT config plus a matching filterbank, bundled for repeated extraction.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stft: StftConfig,
    pub filterbank: mel::MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(
        stft: StftConfig,
        bands: usize,
        sample_rate_hz: u32,
        fmin_hz: f64,
        fmax_hz: f64,
    ) -> Result<Self> {
        stft.validate()?;
        let filterbank = mel_filterbank(bands, stft.fft_size, sample_rate_hz, fmin_hz, fmax_hz)?;
        Ok(FeatureExtractor { stft, filterbank })
    }

    /// Conventional vocoder range: 0-8000 Hz.
    pub fn with_defaults(stft: StftConfig, bands: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(stft, bands, sample_rate_hz, 0.0, 8000.0)
    }

    pub fn extract(&self, buf: &AudioBuffer) -> Result<MelSpectrogram> {
        mel_spectrogram(buf, &self.stft, &self.filterbank)
    }
}

/// Uniform random contiguous crop of exactly `len` samples.
/// Returns the crop and its start index.
pub fn random_crop(buf: &AudioBuffer, len: usize, rng: &mut Rng) -> Result<(AudioBuffer, usize)> {
    if buf.len() < len {
        return Err(Error::TooShort {
            have: buf.len(),
            need: len,
        });
    }
    let start = rng.uniform_usize(buf.len() - len + 1);
    let crop = AudioBuffer {
        samples: buf.samples[start..start + len].to_vec(),
        sample_rate_hz: buf.sample_rate_hz,
    };
    Ok((crop, start))
}
