//! Reverse-mode autodiff over a per-step tape.
//!
//! The graph is rebuilt for every forward pass (define-by-run). Each recorded
//! node keeps its value plus a closure that maps the incoming gradient to
//! contributions for its parents; `backward` walks the tape once in reverse
//! and accumulates (`+=`) into the bound parameters.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(Var, Tensor)>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    /// Set on parameter leaves; gradients flow back into the store by name.
    param_name: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// One named parameter: value plus an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Named parameters with deterministic (sorted) iteration order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        self.params
            .insert(name.to_string(), Parameter::new(name, value));
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for p in self.params.values_mut() {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Leaf bound to a named parameter; backward accumulates into the store.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.push(p.value.clone(), true, None);
        self.nodes[v.0].param_name = Some(p.name.clone());
        v
    }

    /// Binds every parameter whose gradient should flow, by name, from a store.
    pub fn param_of(&mut self, store: &ParamStore, name: &str) -> Var {
        self.param(store.get(name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let req = self.needs(a) || self.needs(b);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let req = self.needs(a) || self.needs(b);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.scale(-1.0))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
        )
        .expect("same shape");
        let req = self.needs(a) || self.needs(b);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                )
                .unwrap();
                vec![(a, ga), (b, gb)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let req = self.needs(a);
        self.push(
            out,
            req,
            Some(Box::new(move |g| vec![(a, g.scale(c))])),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let req = self.needs(a);
        self.push(out, req, Some(Box::new(move |g| vec![(a, g.clone())])))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| 1.0 / x);
        let req = self.needs(a);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, x)| -g / (x * x))
                        .collect(),
                )
                .unwrap();
                vec![(a, ga)]
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        let req = self.needs(a);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let gv = g.item();
                let mut t = Tensor::zeros(&shape);
                t.fill(gv);
                vec![(a, t)]
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len() as f64;
        let out = Tensor::scalar(self.value(a).mean());
        let req = self.needs(a);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let gv = g.item() / n;
                let mut t = Tensor::zeros(&shape);
                t.fill(gv);
                vec![(a, t)]
            })),
        )
    }

    pub fn lrelu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| if x >= 0.0 { x } else { slope * x });
        let req = self.needs(a);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, x)| if *x >= 0.0 { *g } else { slope * g })
                        .collect(),
                )
                .unwrap();
                vec![(a, ga)]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let req = self.needs(a);
        let saved = Rc::new(out.clone());
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(saved.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )
                .unwrap();
                vec![(a, ga)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let req = self.needs(a);
        let saved = Rc::new(out.clone());
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(saved.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                )
                .unwrap();
                vec![(a, ga)]
            })),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let out = ops::linear_forward(&xv, &wv, b.map(|b| self.value(b)))?;
        let needs = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
        let req = needs.0 || needs.1 || needs.2;
        Ok(self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = needs.0.then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs.1.then(|| Tensor::zeros(wv.shape()));
                let mut gb = needs.2.then(|| Tensor::zeros(&[g.len()]));
                ops::linear_backward(&xv, &wv, g, gx.as_mut(), gw.as_mut(), gb.as_mut());
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gw) = gw {
                    res.push((w, gw));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    res.push((b, gb));
                }
                res
            })),
        ))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let out = ops::conv1d_forward(&xv, &wv, b.map(|b| self.value(b)), &geom)?;
        let needs = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
        let req = needs.0 || needs.1 || needs.2;
        Ok(self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = needs.0.then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs.1.then(|| Tensor::zeros(wv.shape()));
                let mut gb = needs.2.then(|| Tensor::zeros(&[wv.shape()[0]]));
                ops::conv1d_backward(&xv, &wv, g, &geom, gx.as_mut(), gw.as_mut(), gb.as_mut());
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gw) = gw {
                    res.push((w, gw));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    res.push((b, gb));
                }
                res
            })),
        ))
    }

    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let out = ops::conv_transpose1d_forward(&xv, &wv, b.map(|b| self.value(b)), stride, pad)?;
        let needs = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
        let req = needs.0 || needs.1 || needs.2;
        Ok(self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = needs.0.then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs.1.then(|| Tensor::zeros(wv.shape()));
                let mut gb = needs.2.then(|| Tensor::zeros(&[wv.shape()[1]]));
                ops::conv_transpose1d_backward(
                    &xv,
                    &wv,
                    g,
                    stride,
                    pad,
                    gx.as_mut(),
                    gw.as_mut(),
                    gb.as_mut(),
                );
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gw) = gw {
                    res.push((w, gw));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    res.push((b, gb));
                }
                res
            })),
        ))
    }

    /// Gated location-variable convolution with residual input add.
    pub fn lvc_gated(&mut self, x: Var, f: Var, g: Var, dilation: usize) -> Result<Var> {
        let xv = self.value_rc(x);
        let fv = self.value_rc(f);
        let gv = self.value_rc(g);
        let (out, th, sig) = ops::lvc_gated_forward(&xv, &fv, &gv, dilation)?;
        let th = Rc::new(th);
        let sig = Rc::new(sig);
        let needs = (self.needs(x), self.needs(f), self.needs(g));
        let req = needs.0 || needs.1 || needs.2;
        Ok(self.push(
            out,
            req,
            Some(Box::new(move |gout| {
                let mut gx = needs.0.then(|| Tensor::zeros(xv.shape()));
                let mut gf = needs.1.then(|| Tensor::zeros(fv.shape()));
                let mut gg = needs.2.then(|| Tensor::zeros(gv.shape()));
                ops::lvc_gated_backward(
                    &xv,
                    &fv,
                    &gv,
                    &th,
                    &sig,
                    gout,
                    dilation,
                    gx.as_mut(),
                    gf.as_mut(),
                    gg.as_mut(),
                );
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gf) = gf {
                    res.push((f, gf));
                }
                if let Some(gg) = gg {
                    res.push((g, gg));
                }
                res
            })),
        ))
    }

    /// Extracts per-frame kernels for one LVC layer from the kernel-predictor
    /// output `[2*layers*c*c*k, frames]`. `which` selects filter (0) or gate (1).
    pub fn kernel_slice(
        &mut self,
        kp: Var,
        layer: usize,
        which: usize,
        c: usize,
        k: usize,
    ) -> Var {
        let kv = self.value_rc(kp);
        let frames = kv.shape()[1];
        let rows = kv.shape()[0];
        let base = (layer * 2 + which) * c * c * k;
        assert!(base + c * c * k <= rows, "kernel_slice out of range");
        let mut out = Tensor::zeros(&[frames, c, c, k]);
        {
            let od = out.data_mut();
            let kd = kv.data();
            for fr in 0..frames {
                for r in 0..c * c * k {
                    od[fr * c * c * k + r] = kd[(base + r) * frames + fr];
                }
            }
        }
        let req = self.needs(kp);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gk = Tensor::zeros(kv.shape());
                {
                    let gkd = gk.data_mut();
                    let gd = g.data();
                    for fr in 0..frames {
                        for r in 0..c * c * k {
                            gkd[(base + r) * frames + fr] += gd[fr * c * c * k + r];
                        }
                    }
                }
                vec![(kp, gk)]
            })),
        )
    }

    /// Broadcast-adds a `[c]` vector to every column of `[c, l]`.
    pub fn add_col(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value_rc(x);
        let vv = self.value_rc(v);
        let (c, l) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(vv.shape(), &[c], "add_col: vector/channel mismatch");
        let mut out = xv.as_ref().clone();
        for ch in 0..c {
            let b = vv.data()[ch];
            for o in &mut out.data_mut()[ch * l..(ch + 1) * l] {
                *o += b;
            }
        }
        let needs = (self.needs(x), self.needs(v));
        let req = needs.0 || needs.1;
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut res = Vec::new();
                if needs.0 {
                    res.push((x, g.clone()));
                }
                if needs.1 {
                    let mut gv = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        gv.data_mut()[ch] = g.data()[ch * l..(ch + 1) * l].iter().sum();
                    }
                    res.push((v, gv));
                }
                res
            })),
        )
    }

    /// Same-padded conv applied independently within fixed-size column
    /// segments.
    pub fn segment_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        seg: usize,
    ) -> Result<Var> {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let out = ops::segment_conv_forward(&xv, &wv, b.map(|b| self.value(b)), seg)?;
        let needs = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
        let req = needs.0 || needs.1 || needs.2;
        Ok(self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = needs.0.then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs.1.then(|| Tensor::zeros(wv.shape()));
                let mut gb = needs.2.then(|| Tensor::zeros(&[wv.shape()[0]]));
                ops::segment_conv_backward(&xv, &wv, g, seg, gx.as_mut(), gw.as_mut(), gb.as_mut());
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gw) = gw {
                    res.push((w, gw));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    res.push((b, gb));
                }
                res
            })),
        ))
    }

    /// Frames `[1, l]` into `[win, n]` columns; trailing partial window dropped.
    pub fn frame(&mut self, x: Var, win: usize) -> Result<Var> {
        let xv = self.value_rc(x);
        let out = ops::frame_forward(&xv, win)?;
        let req = self.needs(x);
        Ok(self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(xv.shape());
                ops::frame_backward(g, win, &mut gx);
                vec![(x, gx)]
            })),
        ))
    }

    /// Mean over fixed-size column groups: `[c, l]` -> `[c, ceil(l/seg)]`.
    /// The trailing group may be shorter.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value_rc(x);
        let (c, l) = (xv.shape()[0], xv.shape()[1]);
        let s = l.div_ceil(seg);
        let mut out = Tensor::zeros(&[c, s]);
        for ch in 0..c {
            for si in 0..s {
                let a = si * seg;
                let b = ((si + 1) * seg).min(l);
                let m: f64 = xv.data()[ch * l + a..ch * l + b].iter().sum::<f64>() / (b - a) as f64;
                out.data_mut()[ch * s + si] = m;
            }
        }
        let req = self.needs(x);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[c, l]);
                for ch in 0..c {
                    for si in 0..s {
                        let a = si * seg;
                        let b = ((si + 1) * seg).min(l);
                        let gv = g.data()[ch * s + si] / (b - a) as f64;
                        for p in a..b {
                            gx.data_mut()[ch * l + p] += gv;
                        }
                    }
                }
                vec![(x, gx)]
            })),
        )
    }

    /// x + per-segment broadcast of y: `x: [c, l]`, `y: [c, ceil(l/seg)]`.
    pub fn segment_broadcast_add(&mut self, x: Var, y: Var, seg: usize) -> Var {
        let xv = self.value_rc(x);
        let yv = self.value_rc(y);
        let (c, l) = (xv.shape()[0], xv.shape()[1]);
        let s = l.div_ceil(seg);
        assert_eq!(yv.shape(), &[c, s], "segment_broadcast_add: shape mismatch");
        let mut out = xv.as_ref().clone();
        for ch in 0..c {
            for si in 0..s {
                let a = si * seg;
                let b = ((si + 1) * seg).min(l);
                let yvv = yv.data()[ch * s + si];
                for o in &mut out.data_mut()[ch * l + a..ch * l + b] {
                    *o += yvv;
                }
            }
        }
        let needs = (self.needs(x), self.needs(y));
        let req = needs.0 || needs.1;
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut res = Vec::new();
                if needs.0 {
                    res.push((x, g.clone()));
                }
                if needs.1 {
                    let mut gy = Tensor::zeros(&[c, s]);
                    for ch in 0..c {
                        for si in 0..s {
                            let a = si * seg;
                            let b = ((si + 1) * seg).min(l);
                            gy.data_mut()[ch * s + si] =
                                g.data()[ch * l + a..ch * l + b].iter().sum();
                        }
                    }
                    res.push((y, gy));
                }
                res
            })),
        )
    }

    /// Mean over columns: `[c, l]` -> `[c]`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let (c, l) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] = xv.data()[ch * l..(ch + 1) * l].iter().sum::<f64>() / l as f64;
        }
        let req = self.needs(x);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[c, l]);
                for ch in 0..c {
                    let gv = g.data()[ch] / l as f64;
                    gx.data_mut()[ch * l..(ch + 1) * l]
                        .iter_mut()
                        .for_each(|v| *v += gv);
                }
                vec![(x, gx)]
            })),
        )
    }

    /// out = a + s * b with constant tensors `a`, `b` and scalar variable `s`.
    pub fn add_scaled_const(&mut self, a: Tensor, b: Tensor, s: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add_scaled_const: shape mismatch");
        assert_eq!(self.value(s).len(), 1, "add_scaled_const: s must be scalar");
        let sv = self.value(s).item();
        let mut out = a.clone();
        out.axpy(sv, &b);
        let b = Rc::new(b);
        let req = self.needs(s);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let gs: f64 = g.data().iter().zip(b.data()).map(|(g, b)| g * b).sum();
                vec![(s, Tensor::scalar(gs))]
            })),
        )
    }

    /// Reverse sweep from a scalar loss; gradients of bound parameters are
    /// accumulated (`+=`) into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::TapeUsage(
                "backward called before any forward pass was recorded".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::TapeUsage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&[1]));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Some(name) = &self.nodes[id].param_name {
                if store.contains(name) {
                    store.get_mut(name).grad.axpy(1.0, &g);
                } else {
                    return Err(Error::TapeUsage(format!(
                        "gradient produced for unknown parameter {name}"
                    )));
                }
            }
            if let Some(back) = &self.nodes[id].backward {
                for (v, contrib) in back(&g) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.axpy(1.0, &contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(())
    }
}
