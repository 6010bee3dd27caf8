//! The noise-ratio predictor: maps a noisy waveform to one scalar in (0, 1)
//! that scales the capped next-step variance during schedule search.
//!
//! Windowed embedding followed by blocks of local (within-segment conv) and
//! global (pooled, per-segment FC) mixing, then a pooled sigmoid head. The
//! published predictor uses a GALR stack here; this module keeps its shape
//! hyperparameters and scalar contract with simpler mixing internals, so a
//! different backbone can drop in behind the same interface.

use crate::diffusion::NoiseRatio;
use crate::error::{Error, Result};
use crate::nn::init_uniform;
use crate::nn::ops::{ConvGeom, Padding};
use crate::nn::tape::{ParamStore, Tape, Var};
use crate::refiner::LRELU_SLOPE;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhiConfig {
    /// Samples per analysis window.
    pub window_length: usize,
    /// Windows per segment for local/global mixing.
    pub segment_size: usize,
    pub num_blocks: usize,
    pub hidden: usize,
}

impl Default for PhiConfig {
    fn default() -> Self {
        PhiConfig {
            window_length: 8,
            segment_size: 64,
            num_blocks: 2,
            hidden: 128,
        }
    }
}

impl PhiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.segment_size == 0 || self.num_blocks == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "noise-predictor sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct NoisePredictor {
    pub cfg: PhiConfig,
}

impl NoisePredictor {
    pub fn new(cfg: PhiConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(NoisePredictor { cfg })
    }

    /// Parameters live under the `phi.` prefix.
    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let h = self.cfg.hidden;
        let w = self.cfg.window_length;
        let mut store = ParamStore::new();
        store.insert("phi.embed.w", init_uniform(rng, &[h, w, 1], w));
        store.insert("phi.embed.b", init_uniform(rng, &[h], w));
        for i in 0..self.cfg.num_blocks {
            store.insert(&format!("phi.block{i}.local.w"), init_uniform(rng, &[h, h, 3], h * 3));
            store.insert(&format!("phi.block{i}.local.b"), init_uniform(rng, &[h], h * 3));
            store.insert(&format!("phi.block{i}.global.w"), init_uniform(rng, &[h, h, 1], h));
            store.insert(&format!("phi.block{i}.global.b"), init_uniform(rng, &[h], h));
        }
        store.insert("phi.head.w", init_uniform(rng, &[1, h], h));
        store.insert("phi.head.b", init_uniform(rng, &[1], h));
        store
    }

    /// Scalar ratio in (0, 1) as a graph variable.
    ///
    /// The waveform is framed into `window_length`-sample windows (trailing
    /// partial window dropped), embedded, mixed locally within segments and
    /// globally across them, mean-pooled and squashed.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_t: &Tensor) -> Result<Var> {
        let l = x_t.len();
        if l < self.cfg.window_length {
            return Err(Error::TooShort {
                have: l,
                need: self.cfg.window_length,
            });
        }
        let x = tape.constant(x_t.clone());
        let framed = tape.frame(x, self.cfg.window_length)?;
        let ew = tape.param_of(store, "phi.embed.w");
        let eb = tape.param_of(store, "phi.embed.b");
        let mut h = tape.conv1d(framed, ew, Some(eb), ConvGeom::plain(1, Padding::Same))?;

        let seg = self.cfg.segment_size;
        for i in 0..self.cfg.num_blocks {
            let lw = tape.param_of(store, &format!("phi.block{i}.local.w"));
            let lb = tape.param_of(store, &format!("phi.block{i}.local.b"));
            let local = tape.segment_conv(h, lw, Some(lb), seg)?;
            let local = tape.lrelu(local, LRELU_SLOPE);
            h = tape.add(h, local);

            let pooled = tape.segment_mean(h, seg);
            let gw = tape.param_of(store, &format!("phi.block{i}.global.w"));
            let gb = tape.param_of(store, &format!("phi.block{i}.global.b"));
            let g = tape.conv1d(pooled, gw, Some(gb), ConvGeom::plain(1, Padding::Same))?;
            let g = tape.lrelu(g, LRELU_SLOPE);
            h = tape.segment_broadcast_add(h, g, seg);
        }

        let v = tape.row_mean(h);
        let hw = tape.param_of(store, "phi.head.w");
        let hb = tape.param_of(store, "phi.head.b");
        let logit = tape.linear(v, hw, Some(hb))?;
        Ok(tape.sigmoid(logit))
    }

    /// Forward pass outside any training graph.
    pub fn predict(&self, store: &ParamStore, x_t: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, x_t)?;
        Ok(tape.value(v).item())
    }
}

/// Adapter exposing the predictor + parameters as a ratio function for the
/// schedule search.
pub struct PhiRatio<'a> {
    pub phi: &'a NoisePredictor,
    pub store: &'a ParamStore,
}

impl NoiseRatio for PhiRatio<'_> {
    fn ratio(&self, x_t: &Tensor) -> Result<f64> {
        self.phi.predict(self.store, x_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> (NoisePredictor, PhiConfig) {
        let cfg = PhiConfig {
            window_length: 8,
            segment_size: 16,
            num_blocks: 2,
            hidden: 8,
        };
        (NoisePredictor::new(cfg.clone()).unwrap(), cfg)
    }

    #[test]
    fn zero_params_give_half() {
        let (phi, _) = micro();
        let mut rng = Rng::seed_from_u64(0);
        let mut store = phi.init_params(&mut rng);
        for name in store.names() {
            store.get_mut(&name).value.fill(0.0);
        }
        let x = rng.normal_tensor(&[1, 256]);
        assert_eq!(phi.predict(&store, &x).unwrap(), 0.5);
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let (phi, _) = micro();
        let mut rng = Rng::seed_from_u64(1);
        for trial in 0..1000 {
            let store = phi.init_params(&mut rng);
            let l = 8 + rng.uniform_usize(400);
            let x = rng.normal_tensor(&[1, l]).scale(1.0 + (trial % 7) as f64);
            let r = phi.predict(&store, &x).unwrap();
            assert!(0.0 < r && r < 1.0, "trial {trial}: {r}");
        }
    }

    #[test]
    fn too_short_input_rejected() {
        let (phi, _) = micro();
        let mut rng = Rng::seed_from_u64(2);
        let store = phi.init_params(&mut rng);
        let x = Tensor::zeros(&[1, 7]);
        assert!(matches!(
            phi.forward(&mut Tape::new(), &store, &x),
            Err(Error::TooShort { have: 7, need: 8 })
        ));
    }

    #[test]
    fn trailing_partial_window_is_ignored() {
        let (phi, _) = micro();
        let mut rng = Rng::seed_from_u64(3);
        let store = phi.init_params(&mut rng);
        let x = rng.normal_tensor(&[1, 160]);
        let base = phi.predict(&store, &x).unwrap();
        for extra in 1..8 {
            let mut data = x.data().to_vec();
            data.extend(std::iter::repeat(0.0).take(extra));
            let padded = Tensor::new(vec![1, 160 + extra], data).unwrap();
            assert_eq!(phi.predict(&store, &padded).unwrap(), base, "extra {extra}");
        }
    }

    #[test]
    fn stub_ratio_is_input_independent() {
        use crate::diffusion::{ConstRatio, NoiseRatio};
        let stub = ConstRatio(0.5);
        let mut rng = Rng::seed_from_u64(4);
        for len in [8usize, 100, 5000] {
            let x = rng.normal_tensor(&[1, len]);
            assert_eq!(stub.ratio(&x).unwrap(), 0.5);
        }
        let tiny = ConstRatio(1e-12);
        assert_eq!(tiny.ratio(&rng.normal_tensor(&[1, 64])).unwrap(), 1e-12);
    }

    #[test]
    fn gradients_through_predictor_loss_match_finite_differences() {
        use crate::diffusion::noise_predictor_loss_tape;
        use crate::nn::grad_check::grad_check_filtered;
        let (phi, _) = micro();
        let mut rng = Rng::seed_from_u64(5);
        let mut store = phi.init_params(&mut rng);
        let x_t = rng.normal_tensor(&[1, 128]);
        let eps = rng.normal_tensor(&[1, 128]);
        let eps_pred = rng.normal_tensor(&[1, 128]);
        let delta_t = 0.9;
        let cap = 0.25; // stand-in for min(1 - a_t^2, 1 - a_{t+tau}^2/a_t^2)
        let report = grad_check_filtered(
            &mut store,
            |tape, store| {
                let ratio = phi.forward(tape, store, &x_t).unwrap();
                let beta_hat = tape.scale(ratio, cap);
                noise_predictor_loss_tape(tape, &eps, &eps_pred, beta_hat, delta_t).unwrap()
            },
            1e-5,
            Some((20, 1234)),
            1e-5,
        );
        assert!(
            report.max_rel_err <= 1e-4,
            "phi grad err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
