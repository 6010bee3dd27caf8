//! Raw numeric kernels for the differentiable ops.
//!
//! Forward and backward routines live here as plain functions over tensors;
//! the tape in `nn::tape` wires them into the graph. Layouts: activations are
//! `[channels, length]`, conv weights `[c_out, c_in, k]`, transposed-conv
//! weights `[c_in, c_out, k]`, linear weights `[d_out, d_in]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length (stride 1).
    Same,
    /// No padding; output shrinks by `dilation * (k - 1)`.
    Valid,
    /// Explicit (left, right) zero padding.
    Explicit(usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn plain(dilation: usize, padding: Padding) -> Self {
        ConvGeom {
            stride: 1,
            dilation,
            padding,
        }
    }

    pub fn pads(&self, k: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = self.dilation * (k - 1);
                (total / 2, total - total / 2)
            }
            Padding::Explicit(l, r) => (l, r),
        }
    }

    pub fn out_len(&self, l_in: usize, k: usize) -> Result<usize> {
        let (pl, pr) = self.pads(k);
        let span = self.dilation * (k - 1) + 1;
        let padded = l_in + pl + pr;
        if padded < span {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("input length {l_in} too short for kernel span {span}"),
            });
        }
        Ok((padded - span) / self.stride + 1)
    }
}

fn expect_3d(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected 3-d weight, got {s:?}"),
        }),
    }
}

fn expect_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected 2-d tensor, got {s:?}"),
        }),
    }
}

/// Dilated, strided cross-correlation. `x: [c_in, l]`, `w: [c_out, c_in, k]`.
pub fn conv1d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    geom: &ConvGeom,
) -> Result<Tensor> {
    let (c_in, l_in) = expect_2d(x, "conv1d")?;
    let (c_out, w_cin, k) = expect_3d(w, "conv1d")?;
    if w_cin != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("input has {c_in} channels, weight expects {w_cin}"),
        });
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::InvalidConfig("conv1d: stride/dilation must be >= 1".into()));
    }
    let l_out = geom.out_len(l_in, k)?;
    let (pl, _) = geom.pads(k);
    let mut out = Tensor::zeros(&[c_out, l_out]);

    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for co in 0..c_out {
        let orow = &mut od[co * l_out..(co + 1) * l_out];
        if let Some(bias) = b {
            let bv = bias.data()[co];
            orow.iter_mut().for_each(|v| *v = bv);
        }
        for ci in 0..c_in {
            let xrow = &xd[ci * l_in..(ci + 1) * l_in];
            for i in 0..k {
                let wv = wd[(co * c_in + ci) * k + i];
                if wv == 0.0 {
                    continue;
                }
                // x index: j*stride + i*dilation - pl
                let off = (i * geom.dilation) as isize - pl as isize;
                for (j, o) in orow.iter_mut().enumerate() {
                    let p = (j * geom.stride) as isize + off;
                    if p >= 0 && (p as usize) < l_in {
                        *o += wv * xrow[p as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates conv1d gradients. Any of `gx`, `gw`, `gb` may be None.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    geom: &ConvGeom,
    mut gx: Option<&mut Tensor>,
    mut gw: Option<&mut Tensor>,
    gb: Option<&mut Tensor>,
) {
    let (c_in, l_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let l_out = gout.shape()[1];
    let (pl, _) = geom.pads(k);
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    if let Some(gb) = gb {
        let gbd = gb.data_mut();
        for co in 0..c_out {
            gbd[co] += gd[co * l_out..(co + 1) * l_out].iter().sum::<f64>();
        }
    }
    for co in 0..c_out {
        let grow = &gd[co * l_out..(co + 1) * l_out];
        for ci in 0..c_in {
            for i in 0..k {
                let off = (i * geom.dilation) as isize - pl as isize;
                let widx = (co * c_in + ci) * k + i;
                if let Some(gw) = gw.as_deref_mut() {
                    let xrow = &xd[ci * l_in..(ci + 1) * l_in];
                    let mut acc = 0.0;
                    for (j, g) in grow.iter().enumerate() {
                        let p = (j * geom.stride) as isize + off;
                        if p >= 0 && (p as usize) < l_in {
                            acc += g * xrow[p as usize];
                        }
                    }
                    gw.data_mut()[widx] += acc;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = wd[widx];
                    if wv == 0.0 {
                        continue;
                    }
                    let gxrow = &mut gx.data_mut()[ci * l_in..(ci + 1) * l_in];
                    for (j, g) in grow.iter().enumerate() {
                        let p = (j * geom.stride) as isize + off;
                        if p >= 0 && (p as usize) < l_in {
                            gxrow[p as usize] += wv * g;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed conv (adjoint of the strided conv with the same geometry).
/// `x: [c_in, l]`, `w: [c_in, c_out, k]`, output length `(l-1)*stride + k - 2*pad`.
pub fn conv_transpose1d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, l_in) = expect_2d(x, "conv_transpose1d")?;
    let (w_cin, c_out, k) = expect_3d(w, "conv_transpose1d")?;
    if w_cin != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose1d",
            detail: format!("input has {c_in} channels, weight expects {w_cin}"),
        });
    }
    let full = (l_in - 1) * stride + k;
    if full < 2 * pad + 1 {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose1d",
            detail: format!("padding {pad} swallows the whole output (full {full})"),
        });
    }
    let l_out = full - 2 * pad;
    let mut out = Tensor::zeros(&[c_out, l_out]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();

    for co in 0..c_out {
        if let Some(bias) = b {
            let bv = bias.data()[co];
            od[co * l_out..(co + 1) * l_out].iter_mut().for_each(|v| *v = bv);
        }
        for ci in 0..c_in {
            let xrow = &xd[ci * l_in..(ci + 1) * l_in];
            for i in 0..k {
                let wv = wd[(ci * c_out + co) * k + i];
                if wv == 0.0 {
                    continue;
                }
                let off = i as isize - pad as isize;
                let orow = &mut od[co * l_out..(co + 1) * l_out];
                for (j, xv) in xrow.iter().enumerate() {
                    let q = (j * stride) as isize + off;
                    if q >= 0 && (q as usize) < l_out {
                        orow[q as usize] += wv * xv;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    mut gx: Option<&mut Tensor>,
    mut gw: Option<&mut Tensor>,
    gb: Option<&mut Tensor>,
) {
    let (c_in, l_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[1], w.shape()[2]);
    let l_out = gout.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    if let Some(gb) = gb {
        let gbd = gb.data_mut();
        for co in 0..c_out {
            gbd[co] += gd[co * l_out..(co + 1) * l_out].iter().sum::<f64>();
        }
    }
    for ci in 0..c_in {
        for co in 0..c_out {
            let grow = &gd[co * l_out..(co + 1) * l_out];
            for i in 0..k {
                let off = i as isize - pad as isize;
                let widx = (ci * c_out + co) * k + i;
                if let Some(gw) = gw.as_deref_mut() {
                    let xrow = &xd[ci * l_in..(ci + 1) * l_in];
                    let mut acc = 0.0;
                    for (j, xv) in xrow.iter().enumerate() {
                        let q = (j * stride) as isize + off;
                        if q >= 0 && (q as usize) < l_out {
                            acc += xv * grow[q as usize];
                        }
                    }
                    gw.data_mut()[widx] += acc;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = wd[widx];
                    if wv == 0.0 {
                        continue;
                    }
                    let gxrow = &mut gx.data_mut()[ci * l_in..(ci + 1) * l_in];
                    for (j, gxv) in gxrow.iter_mut().enumerate() {
                        let q = (j * stride) as isize + off;
                        if q >= 0 && (q as usize) < l_out {
                            *gxv += wv * grow[q as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Affine map of the trailing dimension: `x: [d_in]`, `w: [d_out, d_in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (d_out, d_in) = expect_2d(w, "linear")?;
    if x.shape() != [d_in] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("input {:?} does not match weight [{d_out}, {d_in}]", x.shape()),
        });
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; d_out];
    for (o, outv) in out.iter_mut().enumerate() {
        let row = &wd[o * d_in..(o + 1) * d_in];
        let mut acc = if let Some(bias) = b { bias.data()[o] } else { 0.0 };
        for (wv, xv) in row.iter().zip(xd) {
            acc += wv * xv;
        }
        *outv = acc;
    }
    Tensor::new(vec![d_out], out)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    gx: Option<&mut Tensor>,
    gw: Option<&mut Tensor>,
    gb: Option<&mut Tensor>,
) {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let gd = gout.data();
    if let Some(gb) = gb {
        for (g, go) in gb.data_mut().iter_mut().zip(gd) {
            *g += go;
        }
    }
    if let Some(gw) = gw {
        let gwd = gw.data_mut();
        let xd = x.data();
        for o in 0..d_out {
            let go = gd[o];
            for (i, xv) in xd.iter().enumerate() {
                gwd[o * d_in + i] += go * xv;
            }
        }
    }
    if let Some(gx) = gx {
        let gxd = gx.data_mut();
        let wd = w.data();
        for o in 0..d_out {
            let go = gd[o];
            for (i, gxv) in gxd.iter_mut().enumerate() {
                *gxv += go * wd[o * d_in + i];
            }
        }
    }
}

/// Gated location-variable convolution over contiguous segments, with a
/// residual add of the input.
///
/// `x: [c, d]`, kernels `f`/`g: [k_seg, c, c, k]` with one kernel pair per
/// segment of length `d / k_seg`. The per-segment convolution reads context
/// across segment boundaries from the real signal (zeros past the ends).
/// Returns `(out, tanh_pre, sig_pre)`; the activations are saved for backward.
pub fn lvc_gated_forward(
    x: &Tensor,
    f: &Tensor,
    g: &Tensor,
    dilation: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, d) = expect_2d(x, "lvc_gated")?;
    let fs = f.shape();
    if fs.len() != 4 || fs[1] != c || fs[2] != c {
        return Err(Error::ShapeMismatch {
            op: "lvc_gated",
            detail: format!("filter kernels {fs:?} incompatible with input [{c}, {d}]"),
        });
    }
    if g.shape() != fs {
        return Err(Error::ShapeMismatch {
            op: "lvc_gated",
            detail: format!("gate kernels {:?} differ from filter kernels {fs:?}", g.shape()),
        });
    }
    let k_seg = fs[0];
    let k = fs[3];
    if d % k_seg != 0 {
        return Err(Error::ShapeMismatch {
            op: "lvc_gated",
            detail: format!("length {d} not divisible by {k_seg} segments"),
        });
    }
    let m = d / k_seg;
    let c0 = (dilation * (k - 1) / 2) as isize;

    let mut sf = Tensor::zeros(&[c, d]);
    let mut sg = Tensor::zeros(&[c, d]);
    let xd = x.data();
    for (kern, pre) in [(f, &mut sf), (g, &mut sg)] {
        let kd = kern.data();
        let pd = pre.data_mut();
        for seg in 0..k_seg {
            let s0 = seg * m;
            for co in 0..c {
                let prow = &mut pd[co * d + s0..co * d + s0 + m];
                for ci in 0..c {
                    let xrow = &xd[ci * d..(ci + 1) * d];
                    for i in 0..k {
                        let wv = kd[((seg * c + co) * c + ci) * k + i];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = (i * dilation) as isize - c0;
                        // valid global positions p with 0 <= p + off < d
                        let lo = (-off).max(s0 as isize).max(0) as usize;
                        let hi = ((d as isize - off).min((s0 + m) as isize)).max(0) as usize;
                        for p in lo.max(s0)..hi {
                            prow[p - s0] += wv * xrow[(p as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    // out = x + tanh(sf) * sigmoid(sg); store activations in place
    for v in sf.data_mut() {
        *v = v.tanh();
    }
    for v in sg.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    let mut out = x.clone();
    for ((o, th), sig) in out.data_mut().iter_mut().zip(sf.data()).zip(sg.data()) {
        *o += th * sig;
    }
    Ok((out, sf, sg))
}

#[allow(clippy::too_many_arguments)]
pub fn lvc_gated_backward<'a>(
    x: &Tensor,
    f: &Tensor,
    g: &Tensor,
    tanh_act: &Tensor,
    sig_act: &Tensor,
    gout: &Tensor,
    dilation: usize,
    mut gx: Option<&mut Tensor>,
    mut gf: Option<&'a mut Tensor>,
    mut gg: Option<&'a mut Tensor>,
) {
    let (c, d) = (x.shape()[0], x.shape()[1]);
    let k_seg = f.shape()[0];
    let k = f.shape()[3];
    let m = d / k_seg;
    let c0 = (dilation * (k - 1) / 2) as isize;

    // residual path
    if let Some(gx) = gx.as_deref_mut() {
        for (a, b) in gx.data_mut().iter_mut().zip(gout.data()) {
            *a += b;
        }
    }
    // pre-activation grads
    let n = c * d;
    let mut gpre_f = vec![0.0; n];
    let mut gpre_g = vec![0.0; n];
    let th = tanh_act.data();
    let sig = sig_act.data();
    let go = gout.data();
    for i in 0..n {
        gpre_f[i] = go[i] * sig[i] * (1.0 - th[i] * th[i]);
        gpre_g[i] = go[i] * th[i] * sig[i] * (1.0 - sig[i]);
    }

    let xd = x.data();
    for (kern, gkern, gpre) in [(f, &mut gf, &gpre_f), (g, &mut gg, &gpre_g)] {
        let kd = kern.data();
        for seg in 0..k_seg {
            let s0 = seg * m;
            for co in 0..c {
                let prow = &gpre[co * d + s0..co * d + s0 + m];
                for ci in 0..c {
                    for i in 0..k {
                        let widx = ((seg * c + co) * c + ci) * k + i;
                        let off = (i * dilation) as isize - c0;
                        let lo = (-off).max(s0 as isize).max(0) as usize;
                        let hi = ((d as isize - off).min((s0 + m) as isize)).max(0) as usize;
                        let lo = lo.max(s0);
                        if let Some(gk) = gkern.as_deref_mut() {
                            let xrow = &xd[ci * d..(ci + 1) * d];
                            let mut acc = 0.0;
                            for p in lo..hi {
                                acc += prow[p - s0] * xrow[(p as isize + off) as usize];
                            }
                            gk.data_mut()[widx] += acc;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = kd[widx];
                            if wv == 0.0 {
                                continue;
                            }
                            let gxrow = &mut gx.data_mut()[ci * d..(ci + 1) * d];
                            for p in lo..hi {
                                gxrow[(p as isize + off) as usize] += wv * prow[p - s0];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col_slice(x: &Tensor, a: usize, b: usize) -> Tensor {
    let (c, l) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(c * (b - a));
    for ch in 0..c {
        data.extend_from_slice(&x.data()[ch * l + a..ch * l + b]);
    }
    Tensor::new(vec![c, b - a], data).expect("slice dims")
}

/// Same-padded conv applied independently within each fixed-size column
/// segment (zero padding at segment edges). The trailing segment may be
/// shorter.
pub fn segment_conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    seg: usize,
) -> Result<Tensor> {
    let (_, l) = expect_2d(x, "segment_conv")?;
    let (c_out, _, _) = expect_3d(w, "segment_conv")?;
    let geom = ConvGeom::plain(1, Padding::Same);
    let mut out = Tensor::zeros(&[c_out, l]);
    let mut a = 0;
    while a < l {
        let bnd = (a + seg).min(l);
        let piece = col_slice(x, a, bnd);
        let y = conv1d_forward(&piece, w, b, &geom)?;
        let span = bnd - a;
        for co in 0..c_out {
            out.data_mut()[co * l + a..co * l + bnd]
                .copy_from_slice(&y.data()[co * span..(co + 1) * span]);
        }
        a = bnd;
    }
    Ok(out)
}

pub fn segment_conv_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    seg: usize,
    mut gx: Option<&mut Tensor>,
    mut gw: Option<&mut Tensor>,
    mut gb: Option<&mut Tensor>,
) {
    let (c_in, l) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[0];
    let geom = ConvGeom::plain(1, Padding::Same);
    let mut a = 0;
    while a < l {
        let bnd = (a + seg).min(l);
        let span = bnd - a;
        let piece = col_slice(x, a, bnd);
        let gpiece = col_slice(gout, a, bnd);
        let mut gx_piece = gx.as_ref().map(|_| Tensor::zeros(&[c_in, span]));
        conv1d_backward(
            &piece,
            w,
            &gpiece,
            &geom,
            gx_piece.as_mut(),
            gw.as_deref_mut(),
            gb.as_deref_mut(),
        );
        if let (Some(gx), Some(gx_piece)) = (gx.as_deref_mut(), gx_piece) {
            for ci in 0..c_in {
                for (j, v) in gx_piece.data()[ci * span..(ci + 1) * span].iter().enumerate() {
                    gx.data_mut()[ci * l + a + j] += v;
                }
            }
        }
        let _ = c_out;
        a = bnd;
    }
}

/// Non-overlapping framing: `[1, l]` (or `[l]`) becomes `[win, n_frames]`,
/// column j holding samples `j*win .. j*win+win`. Trailing partial frame dropped.
pub fn frame_forward(x: &Tensor, win: usize) -> Result<Tensor> {
    let l = x.len();
    let n = l / win;
    if n == 0 {
        return Err(Error::TooShort { have: l, need: win });
    }
    let xd = x.data();
    let mut out = Tensor::zeros(&[win, n]);
    let od = out.data_mut();
    for j in 0..n {
        for i in 0..win {
            od[i * n + j] = xd[j * win + i];
        }
    }
    Ok(out)
}

pub fn frame_backward(gout: &Tensor, win: usize, gx: &mut Tensor) {
    let n = gout.shape()[1];
    let gd = gout.data();
    let gxd = gx.data_mut();
    for j in 0..n {
        for i in 0..win {
            gxd[j * win + i] += gd[i * n + j];
        }
    }
}
