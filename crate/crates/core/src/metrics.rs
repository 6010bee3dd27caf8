//! Evaluation metrics: waveform MSE/SNR, log-spectral distance, and the
//! NDB/JSD diversity pair over mel frames.

use crate::audio::stft::{stft, StftConfig};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const SNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub snr_db: f64,
    pub lsd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rtf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndb: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsd: Option<f64>,
}

/// MSE, SNR (dB, capped at 99) and log-spectral distance between two
/// equal-length waveforms.
pub fn metrics(reference: &AudioBuffer, generated: &AudioBuffer) -> Result<MetricReport> {
    if reference.len() != generated.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            detail: format!(
                "length mismatch {} vs {} (trim first)",
                reference.len(),
                generated.len()
            ),
        });
    }
    let n = reference.len() as f64;
    let mut err_power = 0.0;
    let mut ref_power = 0.0;
    for (r, g) in reference.samples.iter().zip(&generated.samples) {
        err_power += (r - g) * (r - g);
        ref_power += r * r;
    }
    let mse = err_power / n;
    let snr_db = if err_power == 0.0 {
        SNR_CAP_DB
    } else {
        (10.0 * (ref_power / err_power).log10()).min(SNR_CAP_DB)
    };
    let lsd = log_spectral_distance(reference, generated)?;
    Ok(MetricReport {
        mse,
        snr_db,
        lsd,
        rtf: None,
        ndb: None,
        jsd: None,
    })
}

/// Mean over frames of the per-frame RMS log-magnitude gap, with the same
/// 1e-5 floor the mel pipeline uses.
pub fn log_spectral_distance(a: &AudioBuffer, b: &AudioBuffer) -> Result<f64> {
    let cfg = StftConfig::default();
    let sa = stft(a, &cfg)?;
    let sb = stft(b, &cfg)?;
    let frames = sa.num_frames.min(sb.num_frames);
    let bins = sa.bins;
    let mut total = 0.0;
    for f in 0..frames {
        let (fa, fb) = (sa.frame(f), sb.frame(f));
        let mut acc = 0.0;
        for k in 0..bins {
            let la = fa[k].norm().max(1e-5).ln();
            let lb = fb[k].norm().max(1e-5).ln();
            acc += (la - lb) * (la - lb);
        }
        total += (acc / bins as f64).sqrt();
    }
    Ok(total / frames as f64)
}

/// Inverse standard normal CDF (Acklam's rational approximation).
fn inv_norm_cdf(p: f64) -> f64 {
    assert!(0.0 < p && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inv_norm_cdf(1.0 - p)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd k-means with a fixed seed and iteration count; empty clusters keep
/// their previous centroid.
fn kmeans(frames: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed);
    let n = frames.len();
    // k distinct starting points
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.uniform_usize(n - i);
        order.swap(i, j);
    }
    let mut centroids: Vec<Vec<f64>> = order[..k].iter().map(|&i| frames[i].clone()).collect();
    let dim = frames[0].len();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, f) in frames.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, cent) in centroids.iter().enumerate() {
                let d = squared_distance(f, cent);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in frames.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cent, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cent = s / counts[c] as f64;
                }
            }
        }
    }
    centroids
}

fn histogram(frames: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    let mut counts = vec![0usize; centroids.len()];
    for f in frames {
        let mut best = (f64::INFINITY, 0);
        for (c, cent) in centroids.iter().enumerate() {
            let d = squared_distance(f, cent);
            if d < best.0 {
                best = (d, c);
            }
        }
        counts[best.1] += 1;
    }
    counts
}

/// Number of statistically-different bins plus Jensen-Shannon divergence
/// between bin histograms. Training frames are clustered (k-means, 50
/// iterations, fixed seed); both sets are assigned to the nearest centroid;
/// each bin gets a two-proportion z-test at significance `alpha`.
pub fn ndb_jsd(
    train_frames: &[Vec<f64>],
    gen_frames: &[Vec<f64>],
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<(usize, f64)> {
    if train_frames.is_empty() || gen_frames.is_empty() {
        return Err(Error::InvalidConfig("ndb_jsd: empty input set".into()));
    }
    if k == 0 || k > train_frames.len() {
        return Err(Error::InvalidConfig(format!(
            "ndb_jsd: k = {k} exceeds training population {}",
            train_frames.len()
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidConfig("ndb_jsd: alpha must be in (0,1)".into()));
    }
    let centroids = kmeans(train_frames, k, 50, seed);
    let h_train = histogram(train_frames, &centroids);
    let h_gen = histogram(gen_frames, &centroids);
    let n1 = train_frames.len() as f64;
    let n2 = gen_frames.len() as f64;
    let z_crit = inv_norm_cdf(1.0 - alpha / 2.0);

    let mut ndb = 0usize;
    for bin in 0..k {
        let p1 = h_train[bin] as f64 / n1;
        let p2 = h_gen[bin] as f64 / n2;
        let pooled = (h_train[bin] + h_gen[bin]) as f64 / (n1 + n2);
        let denom = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
        if denom > 0.0 && ((p1 - p2) / denom).abs() > z_crit {
            ndb += 1;
        }
    }

    let jsd = jensen_shannon(&h_train, &h_gen);
    Ok((ndb, jsd))
}

/// Jensen-Shannon divergence (natural log) between two count histograms.
pub fn jensen_shannon(a: &[usize], b: &[usize]) -> f64 {
    let na: f64 = a.iter().sum::<usize>() as f64;
    let nb: f64 = b.iter().sum::<usize>() as f64;
    let mut jsd = 0.0;
    for (&ca, &cb) in a.iter().zip(b) {
        let p = ca as f64 / na;
        let q = cb as f64 / nb;
        let m = 0.5 * (p + q);
        if p > 0.0 {
            jsd += 0.5 * p * (p / m).ln();
        }
        if q > 0.0 {
            jsd += 0.5 * q * (q / m).ln();
        }
    }
    jsd.clamp(0.0, 2.0f64.ln())
}
