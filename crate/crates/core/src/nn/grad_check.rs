//! Central finite-difference verification of analytic gradients.

use crate::nn::tape::{ParamStore, Tape, Var};
use crate::rng::Rng;

/// Coordinate subsampling for large parameter tensors. `None` checks every
/// coordinate; `Some((n, seed))` checks up to `n` deterministically chosen
/// coordinates per tensor.
pub type CoordSample = Option<(usize, u64)>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients against `(f(p+h) - f(p-h)) / 2h` per coordinate.
///
/// `build` must construct the same deterministic scalar loss every call. The
/// relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    build: F,
    h: f64,
    sample: CoordSample,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    grad_check_filtered(store, build, h, sample, 0.0)
}

/// [`grad_check`] restricted to coordinates with `|analytic| >= min_grad`.
///
/// Full-network checks need the floor: coordinates whose true gradient is
/// down at 1e-8 drown in central-difference round-off long before they say
/// anything about the backward pass.
pub fn grad_check_filtered<F>(
    store: &mut ParamStore,
    mut build: F,
    h: f64,
    sample: CoordSample,
    min_grad: f64,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store)
        .expect("grad_check: backward failed");
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, p)| (name.clone(), p.grad.data().to_vec()))
        .collect();

    let eval = |store: &ParamStore, build: &mut F| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (name, grads) in &analytic {
        let n = grads.len();
        let coords: Vec<usize> = match sample {
            Some((max, seed)) if n > max => {
                let mut rng = Rng::seed_from_u64(seed ^ fxhash(name));
                let mut picked: Vec<usize> = (0..max).map(|_| rng.uniform_usize(n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for &i in &coords {
            if grads[i].abs() < min_grad {
                continue;
            }
            let orig = store.get(name).value.data()[i];
            store.get_mut(name).value.data_mut()[i] = orig + h;
            let f_plus = eval(store, &mut build);
            store.get_mut(name).value.data_mut()[i] = orig - h;
            let f_minus = eval(store, &mut build);
            store.get_mut(name).value.data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}
