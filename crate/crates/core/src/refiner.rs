//! The refinement network: predicts the corruption noise from a noisy
//! waveform, conditioned on a mel-spectrogram and a (real-valued) diffusion
//! step.
//!
//! Layout mirrors a U-shape: an input channel lift, a DBlock chain
//! downsampling the noisy audio into skip features, then a chain of
//! upsampling blocks whose gated location-variable convolutions use
//! per-frame kernels generated from the conditioning and the step embedding.

use crate::error::{Error, Result};
use crate::nn::ops::{ConvGeom, Padding};
use crate::nn::tape::{ParamStore, Tape, Var};
use crate::nn::init_uniform;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub hidden_channels: usize,
    pub down_ratios: Vec<usize>,
    pub up_ratios: Vec<usize>,
    pub lvc_layers_per_block: usize,
    pub lvc_kernel_size: usize,
    pub pe_dim: usize,
    pub embed_dim: usize,
    pub kernel_predictor_hidden: usize,
    pub mel_bands: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            hidden_channels: 32,
            down_ratios: vec![4, 8, 8],
            up_ratios: vec![8, 8, 4],
            lvc_layers_per_block: 4,
            lvc_kernel_size: 3,
            pe_dim: 128,
            embed_dim: 512,
            kernel_predictor_hidden: 64,
            mel_bands: 80,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0
            || self.lvc_layers_per_block == 0
            || self.lvc_kernel_size == 0
            || self.embed_dim == 0
            || self.kernel_predictor_hidden == 0
            || self.mel_bands == 0
        {
            return Err(Error::InvalidConfig("refiner sizes must be positive".into()));
        }
        if self.pe_dim < 2 || !self.pe_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("pe_dim must be even and >= 2".into()));
        }
        if self.down_ratios.is_empty() || self.up_ratios.len() != self.down_ratios.len() {
            return Err(Error::InvalidConfig(
                "down/up ratio lists must be non-empty and equal length".into(),
            ));
        }
        let rev: Vec<usize> = self.down_ratios.iter().rev().cloned().collect();
        if rev != self.up_ratios {
            return Err(Error::InvalidConfig(format!(
                "up ratios {:?} must mirror down ratios {:?} for skip pairing",
                self.up_ratios, self.down_ratios
            )));
        }
        if self.up_ratios.iter().any(|&r| r < 2 || r % 2 != 0) {
            return Err(Error::InvalidConfig(
                "resampling ratios must be even and >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Total upsampling = the conditioning hop this network supports.
    pub fn upsample_product(&self) -> usize {
        self.up_ratios.iter().product()
    }

    /// Rows emitted by a kernel predictor per frame: filter+gate kernels for
    /// every LVC layer of one block.
    pub fn kernel_rows(&self) -> usize {
        2 * self.lvc_layers_per_block
            * self.hidden_channels
            * self.hidden_channels
            * self.lvc_kernel_size
    }
}

/// Positional encoding of a (real-valued) step:
/// `[sin(10^(4i/(d/2-1)) t)]_i ++ [cos(10^(4i/(d/2-1)) t)]_i`.
pub fn positional_encoding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = 10f64.powf(4.0 * i as f64 / (half - 1) as f64);
        data[i] = (freq * t).sin();
        data[half + i] = (freq * t).cos();
    }
    Tensor::from_vec(data)
}

/// Splits `[c, d]` into `d / m` contiguous segments of length `m`.
/// The layer consuming the segments applies its convolution with dilation
/// `3^q`; `q` is carried by the caller.
pub fn split(x: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    let (c, d) = match x.shape() {
        [c, d] => (*c, *d),
        s => {
            return Err(Error::ShapeMismatch {
                op: "split",
                detail: format!("expected [channels, length], got {s:?}"),
            })
        }
    };
    if m == 0 || d % m != 0 {
        return Err(Error::ShapeMismatch {
            op: "split",
            detail: format!("length {d} not divisible by segment length {m}"),
        });
    }
    let k = d / m;
    let mut out = Vec::with_capacity(k);
    for seg in 0..k {
        let mut data = Vec::with_capacity(c * m);
        for ch in 0..c {
            data.extend_from_slice(&x.data()[ch * d + seg * m..ch * d + seg * m + m]);
        }
        out.push(Tensor::new(vec![c, m], data)?);
    }
    Ok(out)
}

pub struct Refiner {
    pub cfg: RefinerConfig,
}

impl Refiner {
    pub fn new(cfg: RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Refiner { cfg })
    }

    /// Initializes all parameters under the `refiner.` prefix. With
    /// `zero_final`, kernel-predictor output layers start at zero so training
    /// begins in the stable pass-through regime.
    pub fn init_params(&self, rng: &mut Rng, zero_final: bool) -> ParamStore {
        let c = self.cfg.hidden_channels;
        let mut store = ParamStore::new();
        let conv = |store: &mut ParamStore, name: &str, co: usize, ci: usize, k: usize, rng: &mut Rng| {
            store.insert(&format!("{name}.w"), init_uniform(rng, &[co, ci, k], ci * k));
            store.insert(&format!("{name}.b"), init_uniform(rng, &[co], ci * k));
        };

        conv(&mut store, "refiner.input", c, 1, 1, rng);
        let e = self.cfg.embed_dim;
        let p = self.cfg.pe_dim;
        store.insert("refiner.embed.fc1.w", init_uniform(rng, &[e, p], p));
        store.insert("refiner.embed.fc1.b", init_uniform(rng, &[e], p));
        store.insert("refiner.embed.fc2.w", init_uniform(rng, &[e, e], e));
        store.insert("refiner.embed.fc2.b", init_uniform(rng, &[e], e));

        for (i, &r) in self.cfg.down_ratios.iter().enumerate() {
            conv(&mut store, &format!("refiner.down{i}.stride"), c, c, 2 * r, rng);
            conv(&mut store, &format!("refiner.down{i}.conv"), c, c, 3, rng);
        }
        let h = self.cfg.kernel_predictor_hidden;
        let rows = self.cfg.kernel_rows();
        for (i, &r) in self.cfg.up_ratios.iter().enumerate() {
            // transposed conv weight layout is [c_in, c_out, k]
            store.insert(
                &format!("refiner.up{i}.upsample.w"),
                init_uniform(rng, &[c, c, 2 * r], c * 2 * r),
            );
            store.insert(
                &format!("refiner.up{i}.upsample.b"),
                init_uniform(rng, &[c], c * 2 * r),
            );
            conv(&mut store, &format!("refiner.up{i}.kp.cond"), h, self.cfg.mel_bands, 1, rng);
            store.insert(
                &format!("refiner.up{i}.kp.emb.w"),
                init_uniform(rng, &[h, e], e),
            );
            store.insert(
                &format!("refiner.up{i}.kp.emb.b"),
                init_uniform(rng, &[h], e),
            );
            conv(&mut store, &format!("refiner.up{i}.kp.mid"), h, h, 3, rng);
            if zero_final {
                store.insert(&format!("refiner.up{i}.kp.out.w"), Tensor::zeros(&[rows, h, 1]));
                store.insert(&format!("refiner.up{i}.kp.out.b"), Tensor::zeros(&[rows]));
            } else {
                conv(&mut store, &format!("refiner.up{i}.kp.out"), rows, h, 1, rng);
            }
        }
        conv(&mut store, "refiner.output", 1, c, 3, rng);
        store
    }

    /// PE -> FC -> LReLU -> FC step embedding.
    pub fn diffusion_embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: f64,
    ) -> Result<Var> {
        let pe = tape.constant(positional_encoding(t, self.cfg.pe_dim));
        let w1 = tape.param_of(store, "refiner.embed.fc1.w");
        let b1 = tape.param_of(store, "refiner.embed.fc1.b");
        let h = tape.linear(pe, w1, Some(b1))?;
        let h = tape.lrelu(h, LRELU_SLOPE);
        let w2 = tape.param_of(store, "refiner.embed.fc2.w");
        let b2 = tape.param_of(store, "refiner.embed.fc2.b");
        tape.linear(h, w2, Some(b2))
    }

    /// Per-frame kernel coefficients for one upsampling block:
    /// conditioning projection plus broadcast step embedding through a small
    /// conv stack, `[kernel_rows, frames]` out.
    pub fn kernel_predictor(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        cond: Var,
        emb: Var,
    ) -> Result<Var> {
        let pre = format!("refiner.up{block}.kp");
        let cw = tape.param_of(store, &format!("{pre}.cond.w"));
        let cb = tape.param_of(store, &format!("{pre}.cond.b"));
        let c1 = tape.conv1d(cond, cw, Some(cb), ConvGeom::plain(1, Padding::Same))?;
        let ew = tape.param_of(store, &format!("{pre}.emb.w"));
        let eb = tape.param_of(store, &format!("{pre}.emb.b"));
        let e = tape.linear(emb, ew, Some(eb))?;
        let h = tape.add_col(c1, e);
        let h = tape.lrelu(h, LRELU_SLOPE);
        let mw = tape.param_of(store, &format!("{pre}.mid.w"));
        let mb = tape.param_of(store, &format!("{pre}.mid.b"));
        let h = tape.conv1d(h, mw, Some(mb), ConvGeom::plain(1, Padding::Same))?;
        let h = tape.lrelu(h, LRELU_SLOPE);
        let ow = tape.param_of(store, &format!("{pre}.out.w"));
        let ob = tape.param_of(store, &format!("{pre}.out.b"));
        tape.conv1d(h, ow, Some(ob), ConvGeom::plain(1, Padding::Same))
    }

    /// Strided conv -> LReLU -> same conv -> LReLU; halves length by `ratio`.
    pub fn dblock(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        x: Var,
        ratio: usize,
    ) -> Result<Var> {
        let pre = format!("refiner.down{block}");
        let sw = tape.param_of(store, &format!("{pre}.stride.w"));
        let sb = tape.param_of(store, &format!("{pre}.stride.b"));
        let geom = ConvGeom {
            stride: ratio,
            dilation: 1,
            padding: Padding::Explicit(ratio / 2, ratio / 2),
        };
        let h = tape.conv1d(x, sw, Some(sb), geom)?;
        let h = tape.lrelu(h, LRELU_SLOPE);
        let cw = tape.param_of(store, &format!("{pre}.conv.w"));
        let cb = tape.param_of(store, &format!("{pre}.conv.b"));
        let h = tape.conv1d(h, cw, Some(cb), ConvGeom::plain(1, Padding::Same))?;
        Ok(tape.lrelu(h, LRELU_SLOPE))
    }

    /// Transposed-conv upsample, skip add, then the block's time-aware LVC
    /// layers with dilations `3^q`.
    #[allow(clippy::too_many_arguments)]
    pub fn ublock(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        x: Var,
        skip: Var,
        cond: Var,
        emb: Var,
        ratio: usize,
    ) -> Result<Var> {
        let uw = tape.param_of(store, &format!("refiner.up{block}.upsample.w"));
        let ub = tape.param_of(store, &format!("refiner.up{block}.upsample.b"));
        let up = tape.conv_transpose1d(x, uw, Some(ub), ratio, ratio / 2)?;
        if tape.value(up).shape() != tape.value(skip).shape() {
            return Err(Error::ShapeMismatch {
                op: "ublock",
                detail: format!(
                    "upsampled {:?} vs skip {:?}",
                    tape.value(up).shape(),
                    tape.value(skip).shape()
                ),
            });
        }
        let mut h = tape.add(up, skip);
        let kp = self.kernel_predictor(tape, store, block, cond, emb)?;
        let c = self.cfg.hidden_channels;
        let k = self.cfg.lvc_kernel_size;
        for q in 0..self.cfg.lvc_layers_per_block {
            let f = tape.kernel_slice(kp, q, 0, c, k);
            let g = tape.kernel_slice(kp, q, 1, c, k);
            h = tape.lvc_gated(h, f, g, 3usize.pow(q as u32))?;
        }
        Ok(h)
    }

    /// Full noise prediction: `[1, l]` noisy audio plus `[bands, frames]`
    /// conditioning at hop = upsample product, any real `t >= 0`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: &Tensor,
        cond: &Tensor,
        t: f64,
    ) -> Result<Var> {
        let (bands, frames) = match cond.shape() {
            [b, f] => (*b, *f),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "refiner_forward",
                    detail: format!("conditioning must be [bands, frames], got {s:?}"),
                })
            }
        };
        if bands != self.cfg.mel_bands {
            return Err(Error::ShapeMismatch {
                op: "refiner_forward",
                detail: format!("expected {} mel bands, got {bands}", self.cfg.mel_bands),
            });
        }
        let l = match x_t.shape() {
            [1, l] => *l,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "refiner_forward",
                    detail: format!("input must be [1, length], got {s:?}"),
                })
            }
        };
        let hop = self.cfg.upsample_product();
        if l != frames * hop {
            return Err(Error::ShapeMismatch {
                op: "refiner_forward",
                detail: format!(
                    "length {l} must equal frames ({frames}) x upsample product ({hop})"
                ),
            });
        }

        let x = tape.constant(x_t.clone());
        let cond = tape.constant(cond.clone());
        let emb = self.diffusion_embed(tape, store, t)?;

        let iw = tape.param_of(store, "refiner.input.w");
        let ib = tape.param_of(store, "refiner.input.b");
        let h0 = tape.conv1d(x, iw, Some(ib), ConvGeom::plain(1, Padding::Same))?;

        let mut skips = vec![h0];
        let mut s = h0;
        let down = self.cfg.down_ratios.clone();
        for (i, &r) in down.iter().enumerate() {
            s = self.dblock(tape, store, i, s, r)?;
            skips.push(s);
        }
        let mut u = skips.pop().expect("bottom features");
        let up = self.cfg.up_ratios.clone();
        for (j, &r) in up.iter().enumerate() {
            let skip = skips.pop().expect("skip per ublock");
            u = self.ublock(tape, store, j, u, skip, cond, emb, r)?;
        }
        let ow = tape.param_of(store, "refiner.output.w");
        let ob = tape.param_of(store, "refiner.output.b");
        let out = tape.conv1d(u, ow, Some(ob), ConvGeom::plain(1, Padding::Same))?;
        debug_assert_eq!(tape.value(out).shape(), &[1, l]);
        #[cfg(debug_assertions)]
        tape.value(out).check_finite("refiner_forward")?;
        Ok(out)
    }

    /// Forward pass outside any training graph, returning a plain tensor.
    pub fn predict(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        cond: &Tensor,
        t: f64,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, x_t, cond, t)?;
        Ok(tape.value(v).clone())
    }
}

/// Adapter exposing a refiner + parameters + fixed conditioning as a noise
/// model for the sampler and the schedule search.
pub struct RefinerEps<'a> {
    pub refiner: &'a Refiner,
    pub store: &'a ParamStore,
    pub cond: &'a Tensor,
}

impl crate::diffusion::EpsModel for RefinerEps<'_> {
    fn predict_eps(&self, x_t: &Tensor, t_cond: f64) -> Result<Tensor> {
        self.refiner.predict(self.store, x_t, self.cond, t_cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> RefinerConfig {
        RefinerConfig {
            hidden_channels: 4,
            down_ratios: vec![4, 8, 8],
            up_ratios: vec![8, 8, 4],
            lvc_layers_per_block: 4,
            lvc_kernel_size: 3,
            pe_dim: 128,
            embed_dim: 16,
            kernel_predictor_hidden: 8,
            mel_bands: 8,
        }
    }

    #[test]
    fn pe_values_and_identity() {
        let pe = positional_encoding(0.0, 128);
        assert!(pe.data()[..64].iter().all(|&v| v == 0.0));
        assert!(pe.data()[64..].iter().all(|&v| v == 1.0));
        // i = 0 has unit frequency: sin(pi/2) = 1 at t = pi/2
        let pe = positional_encoding(std::f64::consts::FRAC_PI_2, 128);
        assert!((pe.data()[0] - 1.0).abs() < 1e-12);
        // sin^2 + cos^2 = 1 pairwise, everything in [-1, 1]
        for &t in &[0.0, 0.5, 1.0, 37.2, 999.9] {
            let pe = positional_encoding(t, 128);
            for i in 0..64 {
                let (s, c) = (pe.data()[i], pe.data()[64 + i]);
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn split_partition_and_errors() {
        let x = Tensor::new(vec![1, 8], (1..=8).map(|v| v as f64).collect()).unwrap();
        let segs = split(&x, 2).unwrap();
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[0].data(), &[1.0, 2.0]);
        assert_eq!(segs[3].data(), &[7.0, 8.0]);
        // concatenation restores the input
        let rebuilt: Vec<f64> = segs.iter().flat_map(|s| s.data().to_vec()).collect();
        assert_eq!(rebuilt, x.data());
        // 16000 % 256 = 128: not divisible, rejected
        let long = Tensor::zeros(&[1, 16000]);
        assert!(split(&long, 256).is_err());
    }

    #[test]
    fn embed_shapes_and_zero_weights() {
        let refiner = Refiner::new(micro_cfg()).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let mut store = refiner.init_params(&mut rng, true);
        // zero the embedding weights: output must be zero
        for name in ["refiner.embed.fc1.w", "refiner.embed.fc1.b", "refiner.embed.fc2.w", "refiner.embed.fc2.b"] {
            store.get_mut(name).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let e = refiner.diffusion_embed(&mut tape, &store, 5.0).unwrap();
        assert_eq!(tape.value(e).shape(), &[16]);
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_predictor_output_count_and_zero_case() {
        let cfg = micro_cfg();
        let refiner = Refiner::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let store = refiner.init_params(&mut rng, true);
        let frames = 5;
        let mut tape = Tape::new();
        let cond = tape.constant(Tensor::zeros(&[cfg.mel_bands, frames]));
        let emb = tape.constant(Tensor::zeros(&[cfg.embed_dim]));
        let kp = refiner.kernel_predictor(&mut tape, &store, 0, cond, emb).unwrap();
        // element count = frames * 2 * layers * c*c*k
        assert_eq!(
            tape.value(kp).len(),
            frames * 2 * cfg.lvc_layers_per_block * 4 * 4 * 3
        );
        // zero conditioning + zero embedding + zero-initialized final layer
        // -> all-zero kernels
        assert!(tape.value(kp).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_predictor_depends_on_embedding() {
        let cfg = micro_cfg();
        let refiner = Refiner::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let store = refiner.init_params(&mut rng, false);
        let frames = 3;
        let cond_t = rng.normal_tensor(&[cfg.mel_bands, frames]);
        let emb_t = rng.normal_tensor(&[cfg.embed_dim]);
        let eval = |emb_t: &Tensor| {
            let mut tape = Tape::new();
            let cond = tape.constant(cond_t.clone());
            let emb = tape.constant(emb_t.clone());
            let kp = refiner.kernel_predictor(&mut tape, &store, 0, cond, emb).unwrap();
            tape.value(kp).clone()
        };
        let base = eval(&emb_t);
        let mut bumped = emb_t.clone();
        bumped.data_mut()[0] += 1e-3;
        let moved = eval(&bumped);
        // finite-difference probe: a nonzero Jacobian block
        assert!(moved.sub(&base).max_abs() > 0.0);
    }

    #[test]
    fn dblock_lengths_and_zero_params() {
        let refiner = Refiner::new(micro_cfg()).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let mut store = refiner.init_params(&mut rng, true);
        let mut tape = Tape::new();
        let x = tape.constant(rng.normal_tensor(&[4, 32]));
        let y = refiner.dblock(&mut tape, &store, 0, x, 4).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 8]);
        // zero parameters give zero output
        for name in store.names() {
            if name.starts_with("refiner.down0") {
                store.get_mut(&name).value.fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(rng.normal_tensor(&[4, 32]));
        let y = refiner.dblock(&mut tape, &store, 0, x, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shape_contract_and_determinism() {
        let cfg = micro_cfg();
        let refiner = Refiner::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let store = refiner.init_params(&mut rng, false);
        let frames = 16;
        let l = frames * 256;
        let x = rng.normal_tensor(&[1, l]);
        let cond = rng.normal_tensor(&[cfg.mel_bands, frames]);
        let y1 = refiner.predict(&store, &x, &cond, 3.5).unwrap();
        assert_eq!(y1.shape(), &[1, l]);
        let y2 = refiner.predict(&store, &x, &cond, 3.5).unwrap();
        assert_eq!(y1.data(), y2.data(), "bit-identical forward");
        // mismatched length rejected
        let bad = rng.normal_tensor(&[1, l - 1]);
        assert!(refiner.predict(&store, &bad, &cond, 3.5).is_err());
    }

    #[test]
    fn zero_kernels_reduce_to_skeleton() {
        // with zero-initialized kernel predictors the network equals its
        // conv/upsample skeleton, computed here directly
        let cfg = micro_cfg();
        let refiner = Refiner::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(5);
        let store = refiner.init_params(&mut rng, true);
        let frames = 8;
        let l = frames * 256;
        let x = rng.normal_tensor(&[1, l]);
        let cond = rng.normal_tensor(&[cfg.mel_bands, frames]);
        let got = refiner.predict(&store, &x, &cond, 7.0).unwrap();

        // skeleton: input conv, dblocks, (convT + skip) chain, output conv
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let iw = tape.param_of(&store, "refiner.input.w");
        let ib = tape.param_of(&store, "refiner.input.b");
        let h0 = tape.conv1d(xv, iw, Some(ib), ConvGeom::plain(1, Padding::Same)).unwrap();
        let mut skips = vec![h0];
        let mut s = h0;
        for (i, &r) in cfg.down_ratios.iter().enumerate() {
            s = refiner.dblock(&mut tape, &store, i, s, r).unwrap();
            skips.push(s);
        }
        let mut u = skips.pop().unwrap();
        for (j, &r) in cfg.up_ratios.iter().enumerate() {
            let skip = skips.pop().unwrap();
            let uw = tape.param_of(&store, &format!("refiner.up{j}.upsample.w"));
            let ub = tape.param_of(&store, &format!("refiner.up{j}.upsample.b"));
            let up = tape.conv_transpose1d(u, uw, Some(ub), r, r / 2).unwrap();
            u = tape.add(up, skip);
        }
        let ow = tape.param_of(&store, "refiner.output.w");
        let ob = tape.param_of(&store, "refiner.output.b");
        let skel = tape.conv1d(u, ow, Some(ob), ConvGeom::plain(1, Padding::Same)).unwrap();
        assert!(got.sub(tape.value(skel)).max_abs() < 1e-12);
    }

    #[test]
    fn ublock_zero_kernels_pass_residual_chain() {
        let cfg = micro_cfg();
        let refiner = Refiner::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(6);
        let store = refiner.init_params(&mut rng, true);
        let frames = 4;
        let mut tape = Tape::new();
        let x = tape.constant(rng.normal_tensor(&[4, frames]));
        let skip = tape.constant(rng.normal_tensor(&[4, frames * 8]));
        let cond = tape.constant(rng.normal_tensor(&[cfg.mel_bands, frames]));
        let emb = tape.constant(rng.normal_tensor(&[cfg.embed_dim]));
        let y = refiner.ublock(&mut tape, &store, 0, x, skip, cond, emb, 8).unwrap();
        // zero kernels: output = upsample(x) + skip exactly
        let uw = tape.param_of(&store, "refiner.up0.upsample.w");
        let ub = tape.param_of(&store, "refiner.up0.upsample.b");
        let up = tape.conv_transpose1d(x, uw, Some(ub), 8, 4).unwrap();
        let want = tape.add(up, skip);
        let diff = tape.value(y).sub(tape.value(want)).max_abs();
        assert!(diff < 1e-15);
        // length 4 -> 32 before LVC
        assert_eq!(tape.value(y).shape(), &[4, 32]);
    }

    #[test]
    fn full_refiner_gradients_match_finite_differences() {
        // micro-config gradient check through the whole network and score
        // loss, randomly sampled coordinates per tensor
        let cfg = RefinerConfig {
            hidden_channels: 4,
            embed_dim: 16,
            kernel_predictor_hidden: 8,
            mel_bands: 8,
            ..micro_cfg()
        };
        let refiner = Refiner::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(7);
        let mut store = refiner.init_params(&mut rng, false);
        let frames = 4;
        let l = frames * 256;
        let x = rng.normal_tensor(&[1, l]);
        let cond = rng.normal_tensor(&[cfg.mel_bands, frames]);
        let eps = rng.normal_tensor(&[1, l]);
        let report = crate::nn::grad_check::grad_check_filtered(
            &mut store,
            |tape, store| {
                let pred = refiner.forward(tape, store, &x, &cond, 2.7).unwrap();
                crate::diffusion::score_loss_tape(tape, &eps, pred)
            },
            1e-5,
            Some((8, 99)),
            1e-5,
        );
        assert!(
            report.max_rel_err <= 1e-4,
            "refiner grad err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
