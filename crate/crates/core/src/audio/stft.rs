//! Short-time Fourier transform with centered reflection padding.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 1024,
            win_size: 1024,
            hop_size: 256,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.win_size == 0 || self.hop_size == 0 {
            return Err(Error::InvalidConfig("stft sizes must be positive".into()));
        }
        if self.win_size > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "win_size {} exceeds fft_size {}",
                self.win_size, self.fft_size
            )));
        }
        if self.hop_size > self.win_size {
            return Err(Error::InvalidConfig(format!(
                "hop_size {} exceeds win_size {}",
                self.hop_size, self.win_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `n` samples: floor(n / hop) + 1.
    pub fn num_frames(&self, n: usize) -> usize {
        n / self.hop_size + 1
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Index into a signal of length `n` with reflection at both boundaries,
/// total for any pad size (repeated folding; constant for n = 1).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// One-sided complex spectrogram, frame-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub num_frames: usize,
    pub bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Centered STFT: the signal is reflection-padded by `fft_size / 2` on both
/// sides, framed at `hop_size`, Hann-windowed (window zero-centered inside
/// the FFT frame when `win_size < fft_size`) and transformed one frame at a
/// time. Frame count is `floor(n / hop) + 1`.
pub fn stft(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = buf.samples.len();
    let pad = cfg.fft_size / 2;
    let frames = cfg.num_frames(n);
    let bins = cfg.bins();

    let window = hann_window(cfg.win_size);
    let win_offset = (cfg.fft_size - cfg.win_size) / 2;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut data = Vec::with_capacity(frames * bins);
    let mut frame_buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];

    for f in 0..frames {
        frame_buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = (f * cfg.hop_size) as isize - pad as isize;
        for (w, &wv) in window.iter().enumerate() {
            let src = reflect_index(start + (win_offset + w) as isize, n);
            frame_buf[win_offset + w] = Complex64::new(buf.samples[src] * wv, 0.0);
        }
        fft.process(&mut frame_buf);
        data.extend_from_slice(&frame_buf[..bins]);
    }
    Ok(Spectrogram {
        num_frames: frames,
        bins,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(samples, 22050).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_spectrum() {
        let b = buf(vec![0.0; 2048]);
        let s = stft(&b, &StftConfig::default()).unwrap();
        assert!(s.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        assert_eq!(stft(&buf(vec![0.1; 22050]), &cfg).unwrap().num_frames, 87);
        assert_eq!(stft(&buf(vec![0.1; 256]), &cfg).unwrap().num_frames, 2);
        assert_eq!(stft(&buf(vec![0.1; 1]), &cfg).unwrap().num_frames, 1);
    }

    #[test]
    fn constant_input_concentrates_at_dc() {
        let b = buf(vec![1.0; 4096]);
        let cfg = StftConfig::default();
        let s = stft(&b, &cfg).unwrap();
        let mid = s.frame(s.num_frames / 2);
        let dc = mid[0].norm();
        // the Hann window itself contributes to bin 1; everything past the
        // window's main lobe must vanish
        assert!(dc > mid[1].norm());
        let tail: f64 = mid[2..].iter().map(|c| c.norm()).sum();
        assert!(tail < 1e-9 * dc, "dc {dc} tail {tail}");
    }

    #[test]
    fn bin_centered_tone_peaks_at_its_bin() {
        // direct DFT oracle on one window: a bin-centered tone has its
        // windowed DFT magnitude maximal at bin k in every interior frame
        let cfg = StftConfig::default();
        let sr = 22050.0;
        let k = 32;
        let freq = k as f64 * sr / cfg.fft_size as f64;
        let n = 8192;
        let b = buf(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
                .collect(),
        );
        let s = stft(&b, &cfg).unwrap();

        // oracle: windowed DFT of one interior frame computed directly
        let window = hann_window(cfg.win_size);
        let f = s.num_frames / 2;
        let start = (f * cfg.hop_size) as isize - (cfg.fft_size / 2) as isize;
        let mut oracle = vec![0.0f64; cfg.bins()];
        for (bin, o) in oracle.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (w, &wv) in window.iter().enumerate() {
                let idx = start + w as isize;
                if idx < 0 || idx >= n as isize {
                    continue;
                }
                let x = b.samples[idx as usize] * wv;
                let ang = -2.0 * std::f64::consts::PI * bin as f64 * w as f64
                    / cfg.fft_size as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *o = (re * re + im * im).sqrt();
        }
        let oracle_peak = oracle
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(oracle_peak, k);

        for f in 3..s.num_frames - 3 {
            let frame = s.frame(f);
            let peak = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .unwrap()
                .0;
            assert_eq!(peak, k, "frame {f}");
        }
        // and the production frame agrees with the oracle numerically
        let mid = s.frame(s.num_frames / 2);
        for bin in 0..cfg.bins() {
            assert!(
                (mid[bin].norm() - oracle[bin]).abs() < 1e-6 * oracle[k].max(1.0),
                "bin {bin}"
            );
        }
    }

    #[test]
    fn linearity_in_amplitude() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..4000).map(|i| ((i * 7) as f64 * 0.013).sin()).collect();
        let s1 = stft(&buf(x.clone()), &cfg).unwrap();
        let s3 = stft(&buf(x.iter().map(|v| 3.0 * v).collect()), &cfg).unwrap();
        for (a, b) in s1.data.iter().zip(&s3.data) {
            let scaled = a * 3.0;
            let denom = scaled.norm().max(1.0);
            assert!((scaled - b).norm() / denom < 1e-12);
        }
    }

    #[test]
    fn parseval_energy_identity() {
        // sum of squared windowed-frame samples equals the summed squared
        // spectrum magnitudes divided by fft_size, with the one-sided
        // correction computed here (double interior bins)
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..3000)
            .map(|i| (i as f64 * 0.037).sin() + 0.3 * (i as f64 * 0.11).cos())
            .collect();
        let b = buf(x);
        let s = stft(&b, &cfg).unwrap();

        let window = hann_window(cfg.win_size);
        for f in [0, s.num_frames / 2, s.num_frames - 1] {
            let start = (f * cfg.hop_size) as isize - (cfg.fft_size / 2) as isize;
            let mut time_energy = 0.0;
            for (w, &wv) in window.iter().enumerate() {
                let src = super::reflect_index(start + w as isize, b.samples.len());
                let v = b.samples[src] * wv;
                time_energy += v * v;
            }
            let frame = s.frame(f);
            let mut spec_energy = frame[0].norm_sqr() + frame[cfg.bins() - 1].norm_sqr();
            for c in &frame[1..cfg.bins() - 1] {
                spec_energy += 2.0 * c.norm_sqr();
            }
            spec_energy /= cfg.fft_size as f64;
            let rel = (time_energy - spec_energy).abs() / time_energy.max(1e-30);
            assert!(rel < 1e-9, "frame {f}: rel {rel}");
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let bad = StftConfig {
            fft_size: 512,
            win_size: 1024,
            hop_size: 256,
            window: WindowKind::Hann,
        };
        assert!(bad.validate().is_err());
        let bad2 = StftConfig {
            fft_size: 1024,
            win_size: 256,
            hop_size: 512,
            window: WindowKind::Hann,
        };
        assert!(bad2.validate().is_err());
    }
}
