//! Training loops for the refiner and the noise predictor, plus checkpoint
//! persistence and the data pipeline.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, store_checksum, Checkpoint};

use std::path::Path;

use crate::audio::{random_crop, AudioBuffer, FeatureExtractor};
use crate::diffusion::{
    beta_hat_for_training, continuous_alpha_sample, forward_diffuse, forward_diffuse_continuous,
    noise_predictor_loss_tape, score_loss_tape, TrainingSchedule,
};
use crate::error::{Error, Result};
use crate::nn::adamw::{AdamW, AdamWConfig};
use crate::nn::tape::{ParamStore, Tape};
use crate::phi::NoisePredictor;
use crate::refiner::Refiner;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub clip_len: usize,
    pub seed: u64,
    pub tau: usize,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
    /// Train with continuous noise levels instead of discrete steps.
    pub continuous: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 1,
            steps: 1000,
            clip_len: 16000,
            seed: 0,
            tau: 200,
            grad_clip: Some(10.0),
            continuous: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.lr < 0.0 || self.batch_size == 0 || self.clip_len == 0 {
            return Err(Error::InvalidConfig("training sizes must be positive".into()));
        }
        if self.tau == 0 || 2 * self.tau >= t_steps {
            return Err(Error::InvalidConfig(format!(
                "tau {} must satisfy 0 < 2*tau < T ({t_steps})",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

/// Per-step loss record, written as `step,loss` CSV.
pub type LossTrace = Vec<(usize, f64)>;

pub fn write_loss_csv(trace: &LossTrace, path: &Path) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in trace {
        out.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One training pair: clean target padded to a whole number of conditioning
/// frames, plus the mel computed from the clean (pre-pad) crop.
pub struct TrainPair {
    pub x0: Tensor,
    pub cond: Tensor,
    pub clip_index: usize,
}

/// Crops (or zero-pads) a clip, extracts its mel, and pads the target to
/// `frames * hop` so the refiner's length contract holds.
pub fn prepare_pair(
    dataset: &[AudioBuffer],
    features: &FeatureExtractor,
    clip_len: usize,
    rng: &mut Rng,
) -> Result<TrainPair> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let clip_index = rng.uniform_usize(dataset.len());
    let buf = &dataset[clip_index];
    let clip = if buf.len() >= clip_len {
        random_crop(buf, clip_len, rng)?.0
    } else {
        let mut samples = buf.samples.clone();
        samples.resize(clip_len, 0.0);
        AudioBuffer::new(samples, buf.sample_rate_hz)?
    };
    let mel = features.extract(&clip)?;
    let target_len = mel.paired_samples();
    let mut samples = clip.samples;
    samples.resize(target_len, 0.0);
    Ok(TrainPair {
        x0: Tensor::new(vec![1, target_len], samples)?,
        cond: mel.to_conditioning_tensor(),
        clip_index,
    })
}

/// Refiner training: corrupt a clean crop at a random step and regress the
/// drawn noise, conditioned on the crop's mel.
pub fn train_refiner(
    dataset: &[AudioBuffer],
    refiner: &Refiner,
    store: &mut ParamStore,
    sched: &TrainingSchedule,
    features: &FeatureExtractor,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate(sched.len())?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer());
    let mut trace = LossTrace::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        store.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = prepare_pair(dataset, features, cfg.clip_len, &mut rng)?;
            let t = 1 + rng.uniform_usize(sched.len());
            let eps = rng.normal_tensor(pair.x0.shape());
            let (x_t, t_cond) = if cfg.continuous {
                let alpha_s = continuous_alpha_sample(t, sched, &mut rng)?;
                (forward_diffuse_continuous(&pair.x0, alpha_s, &eps), alpha_s)
            } else {
                (forward_diffuse(&pair.x0, t, &eps, sched)?, t as f64)
            };

            let mut tape = Tape::new();
            let pred = refiner.forward(&mut tape, store, &x_t, &pair.cond, t_cond)?;
            let loss = score_loss_tape(&mut tape, &eps, pred);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite loss at step {step} (t = {t}, clip {})",
                    pair.clip_index
                )));
            }
            batch_loss += loss_val;
            tape.backward(loss, store)?;
        }
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f64;
            for (_, p) in store.iter_mut() {
                for g in p.grad.data_mut() {
                    *g *= inv;
                }
            }
        }
        if let Some(max_norm) = cfg.grad_clip {
            store.clip_grad_norm(max_norm);
        }
        opt.step(store);
        trace.push((step, batch_loss / cfg.batch_size as f64));
    }
    Ok(trace)
}

/// Noise-predictor training against a frozen refiner. Gradients reach only
/// the predictor: the refiner's output enters the loss as a constant.
#[allow(clippy::too_many_arguments)]
pub fn train_noise_predictor(
    dataset: &[AudioBuffer],
    phi: &NoisePredictor,
    phi_store: &mut ParamStore,
    refiner: &Refiner,
    theta_store: &ParamStore,
    sched: &TrainingSchedule,
    features: &FeatureExtractor,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate(sched.len())?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer());
    let mut trace = LossTrace::with_capacity(cfg.steps);
    let support = sched.len() - 2 * cfg.tau + 1;

    for step in 0..cfg.steps {
        phi_store.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = prepare_pair(dataset, features, cfg.clip_len, &mut rng)?;
            let t = cfg.tau + rng.uniform_usize(support);
            let eps = rng.normal_tensor(pair.x0.shape());
            let x_t = forward_diffuse(&pair.x0, t, &eps, sched)?;
            // frozen refiner: plain prediction, no graph
            let eps_pred = refiner.predict(theta_store, &x_t, &pair.cond, t as f64)?;

            let mut tape = Tape::new();
            let ratio = phi.forward(&mut tape, phi_store, &x_t)?;
            let cap = beta_hat_for_training(t, 1.0, sched, cfg.tau)?;
            let beta_hat = tape.scale(ratio, cap);
            let loss =
                noise_predictor_loss_tape(&mut tape, &eps, &eps_pred, beta_hat, sched.delta(t))?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite loss at step {step} (t = {t}, clip {})",
                    pair.clip_index
                )));
            }
            batch_loss += loss_val;
            tape.backward(loss, phi_store)?;
        }
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f64;
            for (_, p) in phi_store.iter_mut() {
                for g in p.grad.data_mut() {
                    *g *= inv;
                }
            }
        }
        if let Some(max_norm) = cfg.grad_clip {
            phi_store.clip_grad_norm(max_norm);
        }
        opt.step(phi_store);
        trace.push((step, batch_loss / cfg.batch_size as f64));
    }
    Ok(trace)
}

/// Loads every `.wav` under a directory, sorted by file name.
pub fn load_wav_dir(dir: &Path) -> Result<Vec<AudioBuffer>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .wav files under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| crate::audio::read_wav(p)).collect()
}
