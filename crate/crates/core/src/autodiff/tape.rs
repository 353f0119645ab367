use super::kernels::{col2im, gemm, im2col};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Relu {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    AddScalars {
        terms: Vec<Var>,
    },
    MaskedMean {
        x: Var,
        image: usize,
        pixels: Vec<u32>,
    },
    SoftCrossEntropy {
        p: Var,
        target: Vec<f64>,
    },
    PickedNll {
        x: Var,
        picks: Vec<u32>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } | Op::ConvTranspose2x2 { x, w, b } => vec![*x, *w, *b],
            Op::MaxPool2x2 { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::SumAll { x }
            | Op::MaskedMean { x, .. }
            | Op::PickedNll { x, .. } => vec![*x],
            Op::SoftCrossEntropy { p, .. } => vec![*p],
            Op::Concat { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddScalars { terms } => terms.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order for a reverse sweep.
///
/// Nodes only ever reference earlier nodes, so the recording is acyclic and
/// walking it backwards visits every node after all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds each variable's gradient into the matching parameter.
    pub fn accumulate_into(&self, params: &mut [&mut Parameter], vars: &[Var]) {
        assert_eq!(params.len(), vars.len());
        for (p, v) in params.iter_mut().zip(vars) {
            if let Some(g) = self.get(*v) {
                p.grad.add_assign(g);
            }
        }
    }
}

fn same_b_hw(a: &[usize; 4], b: &[usize; 4]) -> bool {
    a[0] == b[0] && a[2] == b[2] && a[3] == b[3]
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter's current value as a differentiable leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.variable(p.value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Stride-1 convolution (cross-correlation) with zero "same" padding.
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]` with odd `k`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [bn, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, k, k2] = self.value(w).dims4()?;
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::arg(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::arg(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                self.value(b).shape()
            )));
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; bn * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for img in 0..bn {
                let xi = &xv[img * cin * hw..(img + 1) * cin * hw];
                let src: &[f64] = if k == 1 {
                    xi
                } else {
                    im2col(xi, cin, h, wd, k, &mut cols);
                    &cols
                };
                let o = &mut out[img * cout * hw..(img + 1) * cout * hw];
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.fill(bv[co]);
                }
                gemm(cout, kk, hw, 1.0, wv, (kk, 1), src, (hw, 1), 1.0, o, (hw, 1));
            }
        }
        let value = Tensor::new(&[bn, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }))
    }

    /// Transposed convolution with kernel 2 and stride 2, doubling H and W.
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, 2, 2]`, `b: [Cout]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [bn, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, k, k2] = self.value(w).dims4()?;
        if wcin != cin || k != 2 || k2 != 2 {
            return Err(Error::arg(format!(
                "conv_transpose2x2: weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::arg(format!(
                "conv_transpose2x2: bias shape {:?}, expected [{cout}]",
                self.value(b).shape()
            )));
        }
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0; bn * cout * oh * ow];
        let mut tmp = vec![0.0; cout * 4 * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for img in 0..bn {
                let xi = &xv[img * cin * hw..(img + 1) * cin * hw];
                // tmp[(co,a,b), hw] = Σ_ci w[ci, (co,a,b)] x[ci, hw]
                gemm(
                    cout * 4,
                    cin,
                    hw,
                    1.0,
                    wv,
                    (1, cout * 4),
                    xi,
                    (hw, 1),
                    0.0,
                    &mut tmp,
                    (hw, 1),
                );
                let o = &mut out[img * cout * oh * ow..(img + 1) * cout * oh * ow];
                for co in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let t = &tmp[(co * 4 + a * 2 + bb) * hw..][..hw];
                            for i in 0..h {
                                let row = &mut o[(co * oh + 2 * i + a) * ow..][..ow];
                                for j in 0..wd {
                                    row[2 * j + bb] = t[i * wd + j] + bv[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[bn, cout, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2x2 { x, w, b }))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major block order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::arg(format!("maxpool2x2: odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bn * c * oh * ow);
        let mut argmax = Vec::with_capacity(bn * c * oh * ow);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[bn, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2x2 { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    /// Concatenates along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.value(a).dims4()?;
        let db = self.value(b).dims4()?;
        if !same_b_hw(&da, &db) {
            return Err(Error::arg(format!(
                "concat_channels: shapes {da:?} and {db:?} differ outside the channel axis"
            )));
        }
        let [bn, ca, h, w] = da;
        let cb = db[1];
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bn * (ca + cb) * hw);
        for img in 0..bn {
            out.extend_from_slice(&av[img * ca * hw..(img + 1) * ca * hw]);
            out.extend_from_slice(&bv[img * cb * hw..(img + 1) * cb * hw]);
        }
        let value = Tensor::new(&[bn, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for img in 0..bn {
            let base = img * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(xv[base + ch * hw + p]);
                }
                let mut s = 0.0;
                for ch in 0..c {
                    let e = (xv[base + ch * hw + p] - m).exp();
                    out[base + ch * hw + p] = e;
                    s += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= s;
                }
            }
        }
        let value = Tensor::new(&[bn, c, h, w], out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::arg(format!(
                "mul: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Sum of scalar nodes, accumulated left to right. An empty list yields a
    /// constant zero.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for t in terms {
            let v = self.value(*t);
            if !v.is_scalar() {
                return Err(Error::arg(format!("add_scalars: term of shape {:?}", v.shape())));
            }
            s += v.item();
        }
        if terms.is_empty() {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::AddScalars {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Mean over the listed pixels of image `image` of `x: [B, C, H, W]`,
    /// giving a `[C]` vector. `pixels` are flat `h * W + w` indices.
    pub fn masked_mean(&mut self, x: Var, image: usize, pixels: &[u32]) -> Result<Var> {
        let [bn, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        if image >= bn {
            return Err(Error::arg(format!("masked_mean: image {image} of {bn}")));
        }
        if pixels.is_empty() {
            return Err(Error::arg("masked_mean: empty pixel set"));
        }
        if pixels.iter().any(|&p| p as usize >= hw) {
            return Err(Error::arg("masked_mean: pixel index out of range"));
        }
        let xv = self.value(x).data();
        let n = pixels.len() as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| {
                let plane = &xv[(image * c + ch) * hw..][..hw];
                pixels.iter().map(|&p| plane[p as usize]).sum::<f64>() / n
            })
            .collect();
        let value = Tensor::new(&[c], out)?;
        Ok(self.push(
            value,
            Op::MaskedMean {
                x,
                image,
                pixels: pixels.to_vec(),
            },
        ))
    }

    /// `-(1/n) Σ target_i ln(clamp(p_i, 1e-7, 1))` for a length-`n` vector.
    pub fn soft_cross_entropy(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != [target.len()] {
            return Err(Error::arg(format!(
                "soft_cross_entropy: prediction shape {:?} vs target length {}",
                pv.shape(),
                target.len()
            )));
        }
        let value = soft_ce_value(pv.data(), target);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftCrossEntropy {
                p,
                target: target.to_vec(),
            },
        ))
    }

    /// Mean of `-ln(clamp(x[i], 1e-7, 1))` over the flat indices `picks`.
    pub fn picked_nll(&mut self, x: Var, picks: &[u32]) -> Result<Var> {
        let xv = self.value(x).data();
        if picks.is_empty() {
            return Err(Error::arg("picked_nll: no entries"));
        }
        if picks.iter().any(|&i| i as usize >= xv.len()) {
            return Err(Error::arg("picked_nll: index out of range"));
        }
        let s: f64 = picks
            .iter()
            .map(|&i| -xv[i as usize].clamp(LOG_CLAMP, 1.0).ln())
            .sum();
        let value = Tensor::scalar(s / picks.len() as f64);
        Ok(self.push(
            value,
            Op::PickedNll {
                x,
                picks: picks.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::arg(format!(
                "backward: loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut add = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = self.conv2d_backward(*x, *w, g);
                if let Some(dx) = dx {
                    add(*x, dx);
                }
                if self.wants(*w) {
                    add(*w, dw);
                }
                if self.wants(*b) {
                    add(*b, db);
                }
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let (dx, dw, db) = self.convt_backward(*x, *w, g);
                if let Some(dx) = dx {
                    add(*x, dx);
                }
                if self.wants(*w) {
                    add(*w, dw);
                }
                if self.wants(*b) {
                    add(*b, db);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (gi, &src) in g.data().iter().zip(argmax) {
                        d[src as usize] += gi;
                    }
                    add(*x, dx);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add(*x, Tensor::new(self.value(*x).shape(), data)?);
                }
            }
            Op::Concat { a, b } => {
                let [bn, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?[1];
                let hw = h * w;
                let gd = g.data();
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(bn * ca * hw);
                    for img in 0..bn {
                        da.extend_from_slice(&gd[img * (ca + cb) * hw..][..ca * hw]);
                    }
                    add(*a, Tensor::new(&[bn, ca, h, w], da)?);
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(bn * cb * hw);
                    for img in 0..bn {
                        db.extend_from_slice(&gd[(img * (ca + cb) + ca) * hw..][..cb * hw]);
                    }
                    add(*b, Tensor::new(&[bn, cb, h, w], db)?);
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let [bn, c, h, w] = node.value.dims4()?;
                    let hw = h * w;
                    let y = node.value.data();
                    let gd = g.data();
                    let mut dx = vec![0.0; y.len()];
                    for img in 0..bn {
                        let base = img * c * hw;
                        for p in 0..hw {
                            let dot: f64 = (0..c)
                                .map(|ch| gd[base + ch * hw + p] * y[base + ch * hw + p])
                                .sum();
                            for ch in 0..c {
                                let i = base + ch * hw + p;
                                dx[i] = y[i] * (gd[i] - dot);
                            }
                        }
                    }
                    add(*x, Tensor::new(node.value.shape(), dx)?);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    add(*a, Tensor::new(av.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    add(*b, Tensor::new(bv.shape(), d)?);
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    add(*x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::AddScalars { terms } => {
                for t in terms {
                    if self.wants(*t) {
                        add(*t, Tensor::full(self.value(*t).shape(), g.item()));
                    }
                }
            }
            Op::MaskedMean { x, image, pixels } => {
                if self.wants(*x) {
                    let [_, c, h, w] = self.value(*x).dims4()?;
                    let hw = h * w;
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    let n = pixels.len() as f64;
                    for ch in 0..c {
                        let gc = g.data()[ch] / n;
                        let plane = &mut d[(image * c + ch) * hw..][..hw];
                        for &p in pixels {
                            plane[p as usize] += gc;
                        }
                    }
                    add(*x, dx);
                }
            }
            Op::SoftCrossEntropy { p, target } => {
                if self.wants(*p) {
                    let pv = self.value(*p).data();
                    let n = target.len() as f64;
                    let gs = g.item();
                    let d = pv
                        .iter()
                        .zip(target)
                        .map(|(&pi, &ti)| {
                            if pi > LOG_CLAMP && pi <= 1.0 {
                                -gs * ti / (n * pi)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add(*p, Tensor::new(&[target.len()], d)?);
                }
            }
            Op::PickedNll { x, picks } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    let scale = g.item() / picks.len() as f64;
                    for &i in picks {
                        let v = xv[i as usize];
                        if v > LOG_CLAMP && v <= 1.0 {
                            d[i as usize] -= scale / v;
                        }
                    }
                    add(*x, dx);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(&self, x: Var, w: Var, g: &Tensor) -> (Option<Tensor>, Tensor, Tensor) {
        let xt = self.value(x);
        let wt = self.value(w);
        let [bn, cin, h, wd] = xt.dims4().expect("checked in forward");
        let [cout, _, k, _] = wt.dims4().expect("checked in forward");
        let hw = h * wd;
        let kk = cin * k * k;
        let gd = g.data();
        let mut dw = vec![0.0; cout * kk];
        let mut db = vec![0.0; cout];
        let want_x = self.wants(x);
        let mut dx = if want_x {
            vec![0.0; xt.len()]
        } else {
            Vec::new()
        };
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        let mut dcols = if want_x && k != 1 {
            vec![0.0; kk * hw]
        } else {
            Vec::new()
        };
        for img in 0..bn {
            let xi = &xt.data()[img * cin * hw..(img + 1) * cin * hw];
            let gi = &gd[img * cout * hw..(img + 1) * cout * hw];
            for (co, plane) in gi.chunks(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
            let src: &[f64] = if k == 1 {
                xi
            } else {
                im2col(xi, cin, h, wd, k, &mut cols);
                &cols
            };
            // dW += G · colsᵀ
            gemm(cout, hw, kk, 1.0, gi, (hw, 1), src, (1, hw), 1.0, &mut dw, (kk, 1));
            if want_x {
                let dxi = &mut dx[img * cin * hw..(img + 1) * cin * hw];
                if k == 1 {
                    gemm(kk, cout, hw, 1.0, wt.data(), (1, kk), gi, (hw, 1), 1.0, dxi, (hw, 1));
                } else {
                    // dcols = Wᵀ · G
                    gemm(
                        kk,
                        cout,
                        hw,
                        1.0,
                        wt.data(),
                        (1, kk),
                        gi,
                        (hw, 1),
                        0.0,
                        &mut dcols,
                        (hw, 1),
                    );
                    col2im(&dcols, cin, h, wd, k, dxi);
                }
            }
        }
        let dx = want_x.then(|| Tensor::new(xt.shape(), dx).expect("shape"));
        (
            dx,
            Tensor::new(wt.shape(), dw).expect("shape"),
            Tensor::new(&[cout], db).expect("shape"),
        )
    }

    fn convt_backward(&self, x: Var, w: Var, g: &Tensor) -> (Option<Tensor>, Tensor, Tensor) {
        let xt = self.value(x);
        let wt = self.value(w);
        let [bn, cin, h, wd] = xt.dims4().expect("checked in forward");
        let cout = wt.dims4().expect("checked in forward")[1];
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let gd = g.data();
        let mut dw = vec![0.0; cin * cout * 4];
        let mut db = vec![0.0; cout];
        let want_x = self.wants(x);
        let mut dx = if want_x {
            vec![0.0; xt.len()]
        } else {
            Vec::new()
        };
        let mut dtmp = vec![0.0; cout * 4 * hw];
        for img in 0..bn {
            let gi = &gd[img * cout * oh * ow..(img + 1) * cout * oh * ow];
            for co in 0..cout {
                db[co] += gi[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                for a in 0..2 {
                    for bb in 0..2 {
                        let t = &mut dtmp[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            let row = &gi[(co * oh + 2 * i + a) * ow..][..ow];
                            for j in 0..wd {
                                t[i * wd + j] = row[2 * j + bb];
                            }
                        }
                    }
                }
            }
            let xi = &xt.data()[img * cin * hw..(img + 1) * cin * hw];
            // dW[ci, (co,a,b)] += X · dtmpᵀ
            gemm(
                cin,
                hw,
                cout * 4,
                1.0,
                xi,
                (hw, 1),
                &dtmp,
                (1, hw),
                1.0,
                &mut dw,
                (cout * 4, 1),
            );
            if want_x {
                let dxi = &mut dx[img * cin * hw..(img + 1) * cin * hw];
                gemm(
                    cin,
                    cout * 4,
                    hw,
                    1.0,
                    wt.data(),
                    (cout * 4, 1),
                    &dtmp,
                    (hw, 1),
                    1.0,
                    dxi,
                    (hw, 1),
                );
            }
        }
        let dx = want_x.then(|| Tensor::new(xt.shape(), dx).expect("shape"));
        (
            dx,
            Tensor::new(wt.shape(), dw).expect("shape"),
            Tensor::new(&[cout], db).expect("shape"),
        )
    }
}

pub(crate) fn soft_ce_value(p: &[f64], target: &[f64]) -> f64 {
    let n = target.len() as f64;
    -p.iter()
        .zip(target)
        .map(|(&pi, &ti)| ti * pi.clamp(LOG_CLAMP, 1.0).ln())
        .sum::<f64>()
        / n
}
