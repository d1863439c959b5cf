//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node to the tape; node ids are assigned in
//! creation order, so the tape is already topologically sorted and a single
//! reverse sweep visits each record once. Gradients are accumulated in a
//! fixed order, which makes backward passes bitwise reproducible.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Upsample2x(Var),
    Focal { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64, scale: f64 },
    BceLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    Iou { ltrb: Var, targets: Vec<f64>, weights: Vec<f64> },
    WeightedSq { x: Var, anchor: Vec<f64>, weights: Vec<f64>, lambda: f64 },
    HuberSq { x: Var, anchor: Vec<f64>, weights: Vec<f64>, lambda: f64, clip: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Operation names covered by [`Tape`]; used to enumerate gradient checks.
pub const OP_NAMES: &[&str] = &[
    "conv2d", "relu", "sigmoid", "exp", "add", "sub", "mul", "scale", "sum", "upsample2x",
    "focal", "bce_logits", "iou", "weighted_sq", "huber_sq",
];

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Variables bound to the entries of a [`ParameterStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, name: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn named_leaf(&mut self, name: &str, value: Tensor, tracked: bool) -> Var {
        let v = self.leaf(value, tracked);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds every store entry as a named leaf; `tracked(name)` decides
    /// which ones receive gradients.
    pub fn bind_store(&mut self, store: &ParameterStore, tracked: impl Fn(&str) -> bool) -> Bindings {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            let mut value = t.clone();
            value.grad = None;
            let v = self.named_leaf(name, value, tracked(name));
            vars.insert(name.to_string(), v);
        }
        Bindings { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- forward operations -------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!("conv2d expects rank-4 input/weight, got {xs:?} / {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::config(format!("conv2d channel mismatch: input {cin}, weight {wcin}")));
        }
        if bs != [cout] {
            return Err(Error::config(format!("conv2d bias shape {bs:?}, expected [{cout}]")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let geo = ConvGeom::new(cin, h, wd, kh, kw, stride, pad)?;
        let (ho, wo) = (geo.ho, geo.wo);
        let p = ho * wo;
        let xd = self.data(x);
        let wdat = self.data(w);
        let bd = self.data(b);
        let k = geo.k();
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; k * p];
        for ni in 0..n {
            let xin = &xd[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            geo.im2col(xin, &mut cols);
            let o = &mut out[ni * cout * p..(ni + 1) * cout * p];
            for co in 0..cout {
                let orow = &mut o[co * p..(co + 1) * p];
                orow.fill(bd[co]);
                let wrow = &wdat[co * k..(co + 1) * k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    let crow = &cols[ki * p..(ki + 1) * p];
                    for (ov, cv) in orow.iter_mut().zip(crow) {
                        *ov += wv * cv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.len() == 1 {
            ta.shape().to_vec()
        } else if ta.len() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::config(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n)
            .map(|i| f(da[if da.len() == 1 { 0 } else { i }], db[if db.len() == 1 { 0 } else { i }]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of several scalars, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::usage("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::config(format!("upsample2x expects rank 4, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; nc * 4 * h * w];
        for c in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(c * 2 * h + y) * 2 * w + xx] = src[(c * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg))
    }

    /// `scale · Σ focal(z, t)` with the sigmoid focal loss
    /// `−α t (1−p)^γ ln p − (1−α)(1−t) p^γ ln(1−p)`, `p = σ(z)`.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64, scale: f64) -> Result<Var> {
        let z = self.data(logits);
        check_len("focal_loss", z.len(), targets.len())?;
        let mut s = 0.0;
        for (&zi, &t) in z.iter().zip(&targets) {
            s += focal_value(zi, t, alpha, gamma);
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(scale * s), Op::Focal { logits, targets, alpha, gamma, scale }, rg))
    }

    /// `Σ w · (BCE(σ(z), c) − H(c))`: binary cross-entropy offset by the
    /// target entropy so an exact prediction costs zero. Gradient `w(σ(z) − c)`.
    pub fn bce_logits(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let z = self.data(logits);
        check_len("bce_logits", z.len(), targets.len())?;
        check_len("bce_logits", z.len(), weights.len())?;
        let mut s = 0.0;
        for i in 0..z.len() {
            if weights[i] != 0.0 {
                s += weights[i] * (softplus(z[i]) - targets[i] * z[i] - binary_entropy(targets[i]));
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(s), Op::BceLogits { logits, targets, weights }, rg))
    }

    /// `Σ w · (1 − IoU)` between predicted and target side distances laid
    /// out as `[N, 4, H, W]` (l, t, r, b); `weights` is `[N, H, W]`.
    pub fn iou_loss(&mut self, ltrb: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let s = self.shape(ltrb).to_vec();
        if s.len() != 4 || s[1] != 4 {
            return Err(Error::config(format!("iou_loss expects [N,4,H,W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        check_len("iou_loss", s[0] * 4 * hw, targets.len())?;
        check_len("iou_loss", s[0] * hw, weights.len())?;
        let p = self.data(ltrb);
        let mut total = 0.0;
        for n in 0..s[0] {
            for px in 0..hw {
                let w = weights[n * hw + px];
                if w == 0.0 {
                    continue;
                }
                let (pl, tl) = gather4(p, &targets, n, hw, px);
                total += w * (1.0 - ltrb_iou(&pl, &tl));
            }
        }
        let rg = self.rg(ltrb);
        Ok(self.push(Tensor::scalar(total), Op::Iou { ltrb, targets, weights }, rg))
    }

    /// `(λ/2) Σ w (x − a)²`.
    pub fn weighted_sq(&mut self, x: Var, anchor: Vec<f64>, weights: Vec<f64>, lambda: f64) -> Result<Var> {
        let d = self.data(x);
        check_len("weighted_sq", d.len(), anchor.len())?;
        check_len("weighted_sq", d.len(), weights.len())?;
        let mut s = 0.0;
        for i in 0..d.len() {
            let r = d[i] - anchor[i];
            s += weights[i] * r * r;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(0.5 * lambda * s), Op::WeightedSq { x, anchor, weights, lambda }, rg))
    }

    /// Per-entry Huber form of [`Tape::weighted_sq`]: quadratic while
    /// `|λ w (x − a)| ≤ clip`, linear with slope `±clip` beyond.
    pub fn huber_sq(&mut self, x: Var, anchor: Vec<f64>, weights: Vec<f64>, lambda: f64, clip: f64) -> Result<Var> {
        let d = self.data(x);
        check_len("huber_sq", d.len(), anchor.len())?;
        check_len("huber_sq", d.len(), weights.len())?;
        let mut s = 0.0;
        for i in 0..d.len() {
            s += huber_value(d[i] - anchor[i], lambda * weights[i], clip);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::HuberSq { x, anchor, weights, lambda, clip }, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of tracked nodes are
    /// available through [`Tape::grad`] afterwards. A non-finite gradient on
    /// any tracked leaf raises [`Error::Explosion`] naming that leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(g) = &grads[id] {
                if g.iter().any(|v| !v.is_finite()) {
                    let param = node.name.clone().unwrap_or_else(|| format!("leaf#{id}"));
                    self.grads = grads;
                    return Err(Error::Explosion { param, detail: "non-finite gradient".into() });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[id].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xd = self.data(*x);
                    let d: Vec<f64> = g.iter().zip(xd).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let d: Vec<f64> = g.iter().zip(out).map(|(&gi, &s)| gi * s * (1.0 - s)).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    let d: Vec<f64> = g.iter().zip(out).map(|(&gi, &e)| gi * e).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let d: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Add(a, b) => {
                self.broadcast_back(*a, g, |gi, _| gi, grads);
                self.broadcast_back(*b, g, |gi, _| gi, grads);
            }
            Op::Sub(a, b) => {
                self.broadcast_back(*a, g, |gi, _| gi, grads);
                self.broadcast_back(*b, g, |gi, _| -gi, grads);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.broadcast_back(*a, g, |gi, i| gi * db[if db.len() == 1 { 0 } else { i }], grads);
                self.broadcast_back(*b, g, |gi, i| gi * da[if da.len() == 1 { 0 } else { i }], grads);
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    accumulate(grads, *x, &d);
                }
            }
            Op::Upsample2x(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut d = vec![0.0; nc * h * w];
                    for c in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(c * h + y / 2) * w + xx / 2] += g[(c * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(grads, *x, &d);
                }
            }
            Op::Focal { logits, targets, alpha, gamma, scale } => {
                if self.rg(*logits) {
                    let z = self.data(*logits);
                    let d: Vec<f64> = z
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &t)| g[0] * scale * focal_grad(zi, t, *alpha, *gamma))
                        .collect();
                    accumulate(grads, *logits, &d);
                }
            }
            Op::BceLogits { logits, targets, weights } => {
                if self.rg(*logits) {
                    let z = self.data(*logits);
                    let d: Vec<f64> = (0..z.len())
                        .map(|i| if weights[i] == 0.0 { 0.0 } else { g[0] * weights[i] * (sigmoid(z[i]) - targets[i]) })
                        .collect();
                    accumulate(grads, *logits, &d);
                }
            }
            Op::Iou { ltrb, targets, weights } => {
                if self.rg(*ltrb) {
                    let s = self.shape(*ltrb);
                    let hw = s[2] * s[3];
                    let p = self.data(*ltrb);
                    let mut d = vec![0.0; p.len()];
                    for n in 0..s[0] {
                        for px in 0..hw {
                            let w = weights[n * hw + px];
                            if w == 0.0 {
                                continue;
                            }
                            let (pl, tl) = gather4(p, targets, n, hw, px);
                            let gi = ltrb_iou_grad(&pl, &tl);
                            for c in 0..4 {
                                d[(n * 4 + c) * hw + px] = -g[0] * w * gi[c];
                            }
                        }
                    }
                    accumulate(grads, *ltrb, &d);
                }
            }
            Op::WeightedSq { x, anchor, weights, lambda } => {
                if self.rg(*x) {
                    let xd = self.data(*x);
                    let d: Vec<f64> = (0..xd.len()).map(|i| g[0] * lambda * weights[i] * (xd[i] - anchor[i])).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::HuberSq { x, anchor, weights, lambda, clip } => {
                if self.rg(*x) {
                    let xd = self.data(*x);
                    let d: Vec<f64> = (0..xd.len())
                        .map(|i| g[0] * huber_grad(xd[i] - anchor[i], lambda * weights[i], *clip))
                        .collect();
                    accumulate(grads, *x, &d);
                }
            }
        }
    }

    fn broadcast_back(&self, v: Var, g: &[f64], f: impl Fn(f64, usize) -> f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.rg(v) {
            return;
        }
        if self.value(v).len() == 1 && g.len() != 1 {
            let s: f64 = g.iter().enumerate().map(|(i, &gi)| f(gi, i)).sum();
            accumulate(grads, v, &[s]);
        } else {
            let d: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| f(gi, i)).collect();
            accumulate(grads, v, &d);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let geo = ConvGeom::new(cin, h, wd, kh, kw, stride, pad).expect("validated in forward");
        let p = geo.ho * geo.wo;
        let k = geo.k();
        let (need_x, need_w, need_b) = (self.rg(x), self.rg(w), self.rg(b));
        if need_b {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, dbv) in db.iter_mut().enumerate() {
                    *dbv += g[(ni * cout + co) * p..(ni * cout + co + 1) * p].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, &db);
        }
        if !need_x && !need_w {
            return;
        }
        let xd = self.data(x);
        let wdat = self.data(w);
        let mut dw = if need_w { vec![0.0; cout * k] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut cols = vec![0.0; k * p];
        let mut dcols = vec![0.0; k * p];
        for ni in 0..n {
            let gout = &g[ni * cout * p..(ni + 1) * cout * p];
            if need_w {
                geo.im2col(&xd[ni * cin * h * wd..(ni + 1) * cin * h * wd], &mut cols);
                for co in 0..cout {
                    let grow = &gout[co * p..(co + 1) * p];
                    for ki in 0..k {
                        let crow = &cols[ki * p..(ki + 1) * p];
                        dw[co * k + ki] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if need_x {
                dcols.fill(0.0);
                for co in 0..cout {
                    let grow = &gout[co * p..(co + 1) * p];
                    for ki in 0..k {
                        let wv = wdat[co * k + ki];
                        if wv == 0.0 {
                            continue;
                        }
                        let drow = &mut dcols[ki * p..(ki + 1) * p];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                }
                geo.col2im(&dcols, &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd]);
            }
        }
        if need_w {
            accumulate(grads, w, &dw);
        }
        if need_x {
            accumulate(grads, x, &dx);
        }
    }

    /// Copies gradients of bound, tracked parameters into the store's
    /// tensors; untracked parameters get `grad = None`.
    pub fn write_grads(&self, bindings: &Bindings, store: &mut ParameterStore) {
        for (name, var) in bindings.iter() {
            if let Some(t) = store.get_mut(name) {
                t.grad = if self.rg(var) {
                    Some(self.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
                } else {
                    None
                };
            }
        }
    }
}

fn check_len(op: &str, want: usize, got: usize) -> Result<()> {
    if want != got {
        return Err(Error::config(format!("{op}: expected {want} entries, got {got}")));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(Error::config(format!(
                "conv2d geometry {h}x{w}, kernel {kh}x{kw}, pad {pad} leaves no output"
            )));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            cols[row + oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[(c * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(c * self.h + iy as usize) * self.w + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`, stable for large |z|.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn binary_entropy(c: f64) -> f64 {
    let mut h = 0.0;
    if c > 0.0 {
        h -= c * c.ln();
    }
    if c < 1.0 {
        h -= (1.0 - c) * (1.0 - c).ln();
    }
    h
}

fn focal_value(z: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    -alpha * t * (1.0 - p).powf(gamma) * log_p - (1.0 - alpha) * (1.0 - t) * p.powf(gamma) * log_q
}

fn focal_grad(z: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(z);
    let q = 1.0 - p;
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let pos = alpha * q.powf(gamma) * (gamma * p * log_p - q);
    let neg = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_q);
    t * pos + (1.0 - t) * neg
}

fn huber_value(r: f64, k: f64, clip: f64) -> f64 {
    if k == 0.0 {
        return 0.0;
    }
    if (k * r).abs() <= clip {
        0.5 * k * r * r
    } else {
        clip * r.abs() - clip * clip / (2.0 * k)
    }
}

fn huber_grad(r: f64, k: f64, clip: f64) -> f64 {
    let g = k * r;
    g.clamp(-clip, clip)
}

fn gather4(p: &[f64], t: &[f64], n: usize, hw: usize, px: usize) -> ([f64; 4], [f64; 4]) {
    let mut a = [0.0; 4];
    let mut b = [0.0; 4];
    for c in 0..4 {
        a[c] = p[(n * 4 + c) * hw + px];
        b[c] = t[(n * 4 + c) * hw + px];
    }
    (a, b)
}

/// IoU of two boxes given as side distances from a common point.
pub fn ltrb_iou(p: &[f64; 4], t: &[f64; 4]) -> f64 {
    let ap = (p[0] + p[2]) * (p[1] + p[3]);
    let at = (t[0] + t[2]) * (t[1] + t[3]);
    let iw = p[0].min(t[0]) + p[2].min(t[2]);
    let ih = p[1].min(t[1]) + p[3].min(t[3]);
    let inter = iw * ih;
    inter / (ap + at - inter)
}

fn ltrb_iou_grad(p: &[f64; 4], t: &[f64; 4]) -> [f64; 4] {
    let ap = (p[0] + p[2]) * (p[1] + p[3]);
    let at = (t[0] + t[2]) * (t[1] + t[3]);
    let iw = p[0].min(t[0]) + p[2].min(t[2]);
    let ih = p[1].min(t[1]) + p[3].min(t[3]);
    let inter = iw * ih;
    let union = ap + at - inter;
    let mut out = [0.0; 4];
    for c in 0..4 {
        // horizontal sides are 0 and 2, vertical 1 and 3
        let (d_area, d_inter) = if c % 2 == 0 {
            (p[1] + p[3], if p[c] < t[c] { ih } else { 0.0 })
        } else {
            (p[0] + p[2], if p[c] < t[c] { iw } else { 0.0 })
        };
        out[c] = (d_inter * (union + inter) - inter * d_area) / (union * union);
    }
    out
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` at `x`, with denominator `max(|a|, |b|, 1e-8)`.
/// Any non-finite comparison yields `+∞`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let Ok(y) = f(&mut tape, xv) else { return f64::INFINITY };
        if tape.backward(y).is_err() {
            return f64::INFINITY;
        }
        tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |t: Tensor| -> Option<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t, false);
        f(&mut tape, xv).ok().map(|y| tape.data(y)[0])
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (Some(fp), Some(fm)) = (eval(plus), eval(minus)) else { return f64::INFINITY };
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return f64::INFINITY;
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
