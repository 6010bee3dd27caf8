//! Waveform synthesis: the ancestral sampling loop over a (fast or full)
//! schedule, plus real-time-factor benchmarking.

use std::time::{Duration, Instant};

use crate::audio::{AudioBuffer, MelSpectrogram};
use crate::diffusion::{reverse_step, SamplingSchedule};
use crate::error::{Error, Result};
use crate::nn::tape::ParamStore;
use crate::refiner::Refiner;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Condition on aligned real-valued training steps `t_m`.
    DiscreteAligned,
    /// Full-length schedule conditioned on integer steps.
    DiscreteFull,
    /// Condition on the schedule's amplitude directly.
    Continuous,
}

#[derive(Debug, Clone)]
pub struct SampleStats {
    pub refiner_evals: usize,
    pub wall: Duration,
}

/// Runs the reverse loop `s = T_m..1` from unit Gaussian noise of the target
/// length (`mel frames * hop`); the final step is deterministic.
pub fn sample(
    refiner: &Refiner,
    store: &ParamStore,
    mel: &MelSpectrogram,
    sched: &SamplingSchedule,
    seed: u64,
    mode: SampleMode,
) -> Result<(AudioBuffer, SampleStats)> {
    let hop = refiner.cfg.upsample_product();
    if mel.hop_size as usize != hop {
        return Err(Error::ShapeMismatch {
            op: "sample",
            detail: format!(
                "mel hop {} does not match refiner upsample product {hop}",
                mel.hop_size
            ),
        });
    }
    if matches!(mode, SampleMode::DiscreteAligned | SampleMode::DiscreteFull)
        && !sched.is_aligned()
    {
        return Err(Error::InvalidConfig(
            "discrete sampling needs an aligned schedule (t_m missing)".into(),
        ));
    }
    let cond = mel.to_conditioning_tensor();
    let len = mel.paired_samples();
    let mut rng = Rng::seed_from_u64(seed);
    let mut x = rng.normal_tensor(&[1, len]);
    let started = Instant::now();
    let mut evals = 0usize;

    for s in (1..=sched.len()).rev() {
        let t_cond = match mode {
            SampleMode::DiscreteAligned | SampleMode::DiscreteFull => {
                sched.t_m.as_ref().expect("aligned checked above")[s - 1]
            }
            SampleMode::Continuous => sched.alpha_hat[s - 1],
        };
        let eps = refiner.predict(store, &x, &cond, t_cond)?;
        evals += 1;
        let last = s == 1;
        let z = if last {
            Tensor::zeros(&[1, len])
        } else {
            rng.normal_tensor(&[1, len])
        };
        x = reverse_step(&x, &eps, s, sched, &z, last)?;
    }
    let stats = SampleStats {
        refiner_evals: evals,
        wall: started.elapsed(),
    };
    let audio = AudioBuffer::new(x.into_data(), mel.sample_rate_hz)?;
    Ok((audio, stats))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RtfReport {
    /// Median wall-clock synthesis time divided by audio duration.
    pub rtf: f64,
    pub refiner_evals: usize,
    pub wall_secs_median: f64,
    pub audio_secs: f64,
}

/// Benchmarks synthesis over `repeats` runs (same seed; identical work each
/// run) and reports the median real-time factor.
pub fn rtf_bench(
    refiner: &Refiner,
    store: &ParamStore,
    mel: &MelSpectrogram,
    sched: &SamplingSchedule,
    mode: SampleMode,
    repeats: usize,
) -> Result<RtfReport> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("rtf_bench needs repeats >= 1".into()));
    }
    let mut walls = Vec::with_capacity(repeats);
    let mut evals = 0;
    let mut audio_secs = 0.0;
    for _ in 0..repeats {
        let (audio, stats) = sample(refiner, store, mel, sched, 0, mode)?;
        walls.push(stats.wall.as_secs_f64());
        evals = stats.refiner_evals;
        audio_secs = audio.duration_secs();
    }
    walls.sort_by(f64::total_cmp);
    let median = walls[walls.len() / 2];
    Ok(RtfReport {
        rtf: median / audio_secs,
        refiner_evals: evals,
        wall_secs_median: median,
        audio_secs,
    })
}
