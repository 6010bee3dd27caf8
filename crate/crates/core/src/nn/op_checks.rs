//! Randomized finite-difference checks for every differentiable op.
//!
//! Kept as library code (not just tests) so the acceptance suite can run the
//! same battery. Losses are random linear functionals of the op output (plus
//! a squared term), which keeps per-coordinate gradients O(1); mean-style
//! losses shrink single-tap gradients into finite-difference round-off.

use crate::nn::grad_check::grad_check;
use crate::nn::ops::{ConvGeom, Padding};
use crate::nn::tape::{ParamStore, Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn probe_loss(tape: &mut Tape, y: Var, r: &Tensor) -> Var {
    let rv = tape.constant(r.clone());
    let lin = tape.mul(y, rv);
    let sq = tape.mul(lin, lin);
    let s = tape.add(lin, sq);
    tape.sum(s)
}

/// Runs `trials` randomized gradient checks across the op set and returns the
/// worst relative error seen.
pub fn check_all_ops(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut track = |err: f64| {
        if err > worst {
            worst = err;
        }
    };

    for trial in 0..trials {
        let c_in = 1 + rng.uniform_usize(3);
        let c_out = 1 + rng.uniform_usize(3);
        let k = 1 + rng.uniform_usize(4);
        let dil = 1 + rng.uniform_usize(3);
        let l = 8 + rng.uniform_usize(9);

        // conv1d
        {
            let mut store = ParamStore::new();
            store.insert("x", rng.normal_tensor(&[c_in, l]));
            let ws = 1.0 / ((c_in * k) as f64).sqrt();
            store.insert("w", rng.normal_tensor(&[c_out, c_in, k]).scale(ws));
            store.insert("b", rng.normal_tensor(&[c_out]));
            let padding = match trial % 3 {
                0 => Padding::Same,
                1 => Padding::Valid,
                _ => Padding::Explicit(1, 2),
            };
            let geom = ConvGeom {
                stride: if trial % 4 == 0 { 2 } else { 1 },
                dilation: dil,
                padding,
            };
            if geom.out_len(l, k).is_ok() && !(padding == Padding::Same && geom.stride != 1) {
                let l_out = geom.out_len(l, k).unwrap();
                let r = rng.normal_tensor(&[c_out, l_out]);
                let report = grad_check(
                    &mut store,
                    |tape, store| {
                        let x = tape.param_of(store, "x");
                        let w = tape.param_of(store, "w");
                        let b = tape.param_of(store, "b");
                        let y = tape.conv1d(x, w, Some(b), geom).unwrap();
                        probe_loss(tape, y, &r)
                    },
                    1e-5,
                    None,
                );
                track(report.max_rel_err);
            }
        }

        // conv_transpose1d
        {
            let stride = 1 + rng.uniform_usize(3);
            let kt = stride * 2;
            let pad = stride / 2;
            let mut store = ParamStore::new();
            store.insert("x", rng.normal_tensor(&[c_in, l]));
            let ws = 1.0 / ((c_in * kt) as f64).sqrt();
            store.insert("w", rng.normal_tensor(&[c_in, c_out, kt]).scale(ws));
            store.insert("b", rng.normal_tensor(&[c_out]));
            let l_out = (l - 1) * stride + kt - 2 * pad;
            let r = rng.normal_tensor(&[c_out, l_out]);
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.param_of(store, "x");
                    let w = tape.param_of(store, "w");
                    let b = tape.param_of(store, "b");
                    let y = tape.conv_transpose1d(x, w, Some(b), stride, pad).unwrap();
                    probe_loss(tape, y, &r)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }

        // linear followed by smooth activations
        {
            let d_in = 2 + rng.uniform_usize(5);
            let d_out = 2 + rng.uniform_usize(5);
            let mut store = ParamStore::new();
            store.insert("x", rng.normal_tensor(&[d_in]));
            let ws = 1.0 / (d_in as f64).sqrt();
            store.insert("w", rng.normal_tensor(&[d_out, d_in]).scale(ws));
            store.insert("b", rng.normal_tensor(&[d_out]));
            let r = rng.normal_tensor(&[d_out]);
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.param_of(store, "x");
                    let w = tape.param_of(store, "w");
                    let b = tape.param_of(store, "b");
                    let y = tape.linear(x, w, Some(b)).unwrap();
                    let y = tape.tanh(y);
                    let y = tape.sigmoid(y);
                    probe_loss(tape, y, &r)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }

        // lrelu, with inputs pushed away from the kink so central differences
        // stay valid
        {
            let n = 4 + rng.uniform_usize(8);
            let x = rng
                .normal_tensor(&[n])
                .map(|v| v.signum() * (v.abs() + 0.1));
            let mut store = ParamStore::new();
            store.insert("x", x);
            let r = rng.normal_tensor(&[n]);
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.param_of(store, "x");
                    let y = tape.lrelu(x, 0.2);
                    probe_loss(tape, y, &r)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }

        // gated LVC with per-segment kernels
        {
            let c = 1 + rng.uniform_usize(3);
            let k_seg = 1 + rng.uniform_usize(4);
            let m = 2 + rng.uniform_usize(4);
            let d = k_seg * m;
            let kk = 3;
            let mut store = ParamStore::new();
            store.insert("x", rng.normal_tensor(&[c, d]));
            let ks = 1.0 / ((c * kk) as f64).sqrt();
            store.insert("f", rng.normal_tensor(&[k_seg, c, c, kk]).scale(ks));
            store.insert("g", rng.normal_tensor(&[k_seg, c, c, kk]).scale(ks));
            let r = rng.normal_tensor(&[c, d]);
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.param_of(store, "x");
                    let f = tape.param_of(store, "f");
                    let g = tape.param_of(store, "g");
                    let y = tape.lvc_gated(x, f, g, dil).unwrap();
                    probe_loss(tape, y, &r)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }

        // frame / segment pooling / broadcast / row_mean / add_col
        {
            let c = 1 + rng.uniform_usize(3);
            let w_len = 6 + rng.uniform_usize(10);
            let seg = 2 + rng.uniform_usize(3);
            let mut store = ParamStore::new();
            store.insert("x", rng.normal_tensor(&[c, w_len]));
            store.insert("v", rng.normal_tensor(&[c]));
            let r = rng.normal_tensor(&[c]);
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.param_of(store, "x");
                    let v = tape.param_of(store, "v");
                    let x = tape.add_col(x, v);
                    let pooled = tape.segment_mean(x, seg);
                    let x = tape.segment_broadcast_add(x, pooled, seg);
                    let y = tape.row_mean(x);
                    probe_loss(tape, y, &r)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }

        // kernel_slice reshaping plus frame
        {
            let c = 1 + rng.uniform_usize(2);
            let kk = 3;
            let layers = 2;
            let frames = 2 + rng.uniform_usize(3);
            let rows = 2 * layers * c * c * kk;
            let mut store = ParamStore::new();
            store.insert("kp", rng.normal_tensor(&[rows, frames]));
            let r = rng.normal_tensor(&[frames, c, c, kk]);
            let layer = rng.uniform_usize(layers);
            let which = rng.uniform_usize(2);
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let kp = tape.param_of(store, "kp");
                    let y = tape.kernel_slice(kp, layer, which, c, kk);
                    probe_loss(tape, y, &r)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }

        // scalar graph ops used by the schedule-predictor loss
        {
            let n = 4 + rng.uniform_usize(5);
            let a_const = rng.normal_tensor(&[n]);
            let b_const = rng.normal_tensor(&[n]);
            let mut store = ParamStore::new();
            store.insert("s", Tensor::scalar(0.2 + 0.5 * rng.uniform()));
            let report = grad_check(
                &mut store,
                |tape, store| {
                    let s = tape.param_of(store, "s");
                    let neg = tape.scale(s, -1.0);
                    let shifted = tape.add_const(neg, 0.9);
                    let w = tape.recip(shifted);
                    let combo = tape.add_scaled_const(a_const.clone(), b_const.clone(), s);
                    let sq = tape.mul(combo, combo);
                    let inner = tape.mean(sq);
                    tape.mul(w, inner)
                },
                1e-5,
                None,
            );
            track(report.max_rel_err);
        }
    }
    worst
}
