use super::kernels::{ConvGeom, TConvGeom};
use super::{AutodiffError, ParamId, ParamStore, Result, Scalar, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    TConv {
        x: Var,
        k: Var,
        geom: TConvGeom,
    },
    BiasChannels {
        x: Var,
        b: Var,
    },
    Elu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Logit {
        x: Var,
        eps: T,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Stack(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    Mix {
        w: Var,
        x: Var,
    },
    Sum(Var),
    Bce {
        r: Var,
        target: Vec<T>,
        eps: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation graph. Nodes are stored in execution order, which
/// is a topological order, so backward is a single reverse sweep.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    record_params: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            record_params: true,
        }
    }

    /// A graph in which parameters enter as constants; nothing records
    /// gradients.
    pub fn inference() -> Self {
        Self {
            record_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf created with [`Graph::input`]`(.., true)`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if self.record_params {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// `x[B,I] @ w[I,O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(mismatch("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], ws[0], ws[1]);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut y = Vec::with_capacity(batch * out);
        for r in 0..batch {
            y.extend_from_slice(bd);
            let row = &mut y[r * out..(r + 1) * out];
            for i in 0..inp {
                let xv = xd[r * inp + i];
                if xv == T::zero() {
                    continue;
                }
                for (yv, &wv) in row.iter_mut().zip(&wd[i * out..(i + 1) * out]) {
                    *yv += xv * wv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, out], y)?, Op::Dense { x, w, b }, rg))
    }

    /// 3x3 cross-correlation, padding 1, over `x[B,C,H,W]` with `k[F,C,3,3]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != 3 || ks[3] != 3 {
            return Err(mismatch("conv2d", format!("x {xs:?}, k {ks:?}")));
        }
        if !(stride == 1 || stride == 2) || xs[2] < 3 || xs[3] < 3 {
            return Err(mismatch("conv2d", format!("stride {stride}, input {xs:?}")));
        }
        let out = |n| ConvGeom::out_len(n, 3, stride, 1);
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            input: [1, xs[2], xs[3]],
            output: [1, out(xs[2]), out(xs[3])],
            kernel: [1, 3, 3],
            stride: [1, stride, stride],
            pad: [0, 1, 1],
        };
        let shape = vec![xs[0], ks[0], geom.output[1], geom.output[2]];
        self.conv_node(x, k, geom, shape)
    }

    /// 3x3x3 cross-correlation, padding 1, over `x[B,C,D,H,W]` with `k[F,C,3,3,3]`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 5 || ks.len() != 5 || ks[1] != xs[1] || ks[2..] != [3, 3, 3] {
            return Err(mismatch("conv3d", format!("x {xs:?}, k {ks:?}")));
        }
        if !(stride == 1 || stride == 2) || xs[2..].iter().any(|&d| d < 2) {
            return Err(mismatch("conv3d", format!("stride {stride}, input {xs:?}")));
        }
        let out = |n| ConvGeom::out_len(n, 3, stride, 1);
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            input: [xs[2], xs[3], xs[4]],
            output: [out(xs[2]), out(xs[3]), out(xs[4])],
            kernel: [3, 3, 3],
            stride: [stride; 3],
            pad: [1; 3],
        };
        let shape = vec![xs[0], ks[0], geom.output[0], geom.output[1], geom.output[2]];
        self.conv_node(x, k, geom, shape)
    }

    fn conv_node(&mut self, x: Var, k: Var, geom: ConvGeom, shape: Vec<usize>) -> Result<Var> {
        let mut y = vec![T::zero(); shape.iter().product()];
        geom.forward(self.data(x), self.data(k), &mut y);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, k, geom }, rg))
    }

    /// Transposed convolution with a 4x4x4 kernel, stride 2, padding 1:
    /// `x[B,C,D,D,D]`, `k[C,F,4,4,4]` -> `[B,F,2D,2D,2D]`.
    pub fn tconv3d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 5 || ks.len() != 5 || ks[0] != xs[1] || ks[2..] != [4, 4, 4] {
            return Err(mismatch("tconv3d", format!("x {xs:?}, k {ks:?}")));
        }
        let out = |n| TConvGeom::out_len(n, 4, 2, 1);
        let geom = TConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ks[1],
            input: [xs[2], xs[3], xs[4]],
            output: [out(xs[2]), out(xs[3]), out(xs[4])],
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let shape = vec![xs[0], ks[1], geom.output[0], geom.output[1], geom.output[2]];
        let mut y = vec![T::zero(); shape.iter().product()];
        geom.forward(self.data(x), self.data(k), &mut y);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::new(shape, y)?, Op::TConv { x, k, geom }, rg))
    }

    /// Adds `b[C]` to every element of channel `c` of `x[B,C,...]`.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() < 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(mismatch("bias_channels", format!("x {xs:?}, b {bs:?}")));
        }
        let spatial: usize = xs[2..].iter().product();
        let channels = xs[1];
        let bd = self.data(b).to_vec();
        let mut y = self.data(x).to_vec();
        for (i, chunk) in y.chunks_mut(spatial).enumerate() {
            let bv = bd[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::BiasChannels { x, b }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = &self.nodes[x.0].value;
        let y = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(y, op, rg)
    }

    /// `x` for `x >= 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |a| if a >= T::zero() { a } else { a.exp_m1() },
            Op::Elu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Clamped inverse sigmoid `ln(c / (1 - c))`, `c = clamp(x, eps, 1 - eps)`.
    pub fn logit(&mut self, x: Var, eps: T) -> Var {
        self.unary(
            x,
            |a| {
                let c = a.max(eps).min(T::one() - eps);
                c.ln() - (-c).ln_1p()
            },
            Op::Logit { x, eps },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let last = self.shape(x).len() - 1;
        self.softmax_axis(x, last).expect("last axis exists")
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(xd[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - m).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let y: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |a| a * factor, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| mismatch("stack", "no inputs".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(items.len() * self.value(*first).numel());
        for &v in items {
            if self.shape(v) != inner.as_slice() {
                return Err(mismatch(
                    "stack",
                    format!("{:?} vs {inner:?}", self.shape(v)),
                ));
            }
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack(items.to_vec()), rg))
    }

    /// `x[index]` along the leading axis; the result drops that axis, or keeps
    /// a unit axis when `x` is one-dimensional.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if index >= shape[0] {
            return Err(mismatch("select", format!("index {index} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[index * inner..(index + 1) * inner].to_vec();
        let out_shape = if shape.len() > 1 {
            shape[1..].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Select { x, index }, rg))
    }

    /// `sum_k w[k] * x[k, ...]`.
    pub fn mix(&mut self, w: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if ws.len() != 1 || xs.len() < 2 || xs[0] != ws[0] {
            return Err(mismatch("mix", format!("w {ws:?}, x {xs:?}")));
        }
        let inner: usize = xs[1..].iter().product();
        let (wd, xd) = (self.data(w), self.data(x));
        let mut y = vec![T::zero(); inner];
        for (k, &wk) in wd.iter().enumerate() {
            for (yv, &xv) in y.iter_mut().zip(&xd[k * inner..(k + 1) * inner]) {
                *yv += wk * xv;
            }
        }
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::new(xs[1..].to_vec(), y)?, Op::Mix { w, x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = T::lit(self.data(x).iter().map(|v| v.as_f64()).sum());
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean binary cross entropy of predictions `r` against `target`, with
    /// `r` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, r: Var, target: &[T], eps: T) -> Result<Var> {
        if self.value(r).numel() != target.len() {
            return Err(mismatch(
                "bce",
                format!(
                    "{} predictions vs {} targets",
                    self.value(r).numel(),
                    target.len()
                ),
            ));
        }
        let mut total = 0.0f64;
        for (&p, &t) in self.data(r).iter().zip(target) {
            let c = p.max(eps).min(T::one() - eps);
            total += (t * c.ln() + (T::one() - t) * (-c).ln_1p()).as_f64();
        }
        let loss = T::lit(-total / target.len() as f64);
        let rg = self.rg(r);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                r,
                target: target.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of differentiable leaves are added to this graph.
    /// Nothing is zeroed, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let seed = T::one();
        self.backward_seeded(loss, seed, store)
    }

    /// As [`Graph::backward`] with `d(output)/d(loss) = seed`.
    pub fn backward_seeded(&mut self, loss: Var, seed: T, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    add_into(slot, &g);
                }
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| nodes[v.0].value.data();
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Dense { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let out = y.shape()[1];
                if wants(x) {
                    let wd = val(w);
                    let gx = slot(grads, nodes, x);
                    for r in 0..batch {
                        let grow = &g[r * out..(r + 1) * out];
                        for i in 0..inp {
                            let mut acc = T::zero();
                            for (&a, &bv) in grow.iter().zip(&wd[i * out..(i + 1) * out]) {
                                acc += a * bv;
                            }
                            gx[r * inp + i] += acc;
                        }
                    }
                }
                if wants(w) {
                    let xd = val(x);
                    let gw = slot(grads, nodes, w);
                    for r in 0..batch {
                        let grow = &g[r * out..(r + 1) * out];
                        for i in 0..inp {
                            let xv = xd[r * inp + i];
                            if xv == T::zero() {
                                continue;
                            }
                            for (d, &a) in gw[i * out..(i + 1) * out].iter_mut().zip(grow) {
                                *d += xv * a;
                            }
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    for r in 0..batch {
                        add_into(gb, &g[r * out..(r + 1) * out]);
                    }
                }
            }
            Op::Conv { x, k, geom } => {
                if wants(x) {
                    let kd = val(k);
                    geom.backward_input(g, kd, slot(grads, nodes, x));
                }
                if wants(k) {
                    let xd = val(x);
                    geom.backward_kernel(g, xd, slot(grads, nodes, k));
                }
            }
            Op::TConv { x, k, geom } => {
                if wants(x) {
                    let kd = val(k);
                    geom.backward_input(g, kd, slot(grads, nodes, x));
                }
                if wants(k) {
                    let xd = val(x);
                    geom.backward_kernel(g, xd, slot(grads, nodes, k));
                }
            }
            Op::BiasChannels { x, b } => {
                if wants(x) {
                    add_into(slot(grads, nodes, x), g);
                }
                if wants(b) {
                    let xs = nodes[x.0].value.shape();
                    let channels = xs[1];
                    let spatial: usize = xs[2..].iter().product();
                    let gb = slot(grads, nodes, b);
                    for (i, chunk) in g.chunks(spatial).enumerate() {
                        gb[i % channels] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Elu(x) => {
                let xd = val(x);
                let gx = slot(grads, nodes, x);
                for ((d, &a), (&yv, &gv)) in gx.iter_mut().zip(xd).zip(y.data().iter().zip(g)) {
                    *d += if a >= T::zero() {
                        gv
                    } else {
                        gv * (yv + T::one())
                    };
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, nodes, x);
                for (d, (&yv, &gv)) in gx.iter_mut().zip(y.data().iter().zip(g)) {
                    *d += gv * yv * (T::one() - yv);
                }
            }
            Op::Logit { x, eps } => {
                let xd = val(x);
                let gx = slot(grads, nodes, x);
                let hi = T::one() - *eps;
                for ((d, &a), &gv) in gx.iter_mut().zip(xd).zip(g) {
                    if a > *eps && a < hi {
                        *d += gv / (a * (T::one() - a));
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let yd = y.data();
                let gx = slot(grads, nodes, x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            dot += g[at(j)] * yd[at(j)];
                        }
                        for j in 0..*len {
                            gx[at(j)] += yd[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(slot(grads, nodes, a), g);
                }
                if wants(b) {
                    add_into(slot(grads, nodes, b), g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bd = val(b);
                    for ((d, &gv), &bv) in slot(grads, nodes, a).iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if wants(b) {
                    let ad = val(a);
                    for ((d, &gv), &av) in slot(grads, nodes, b).iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, f) => {
                for (d, &gv) in slot(grads, nodes, x).iter_mut().zip(g) {
                    *d += gv * *f;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, nodes, x), g),
            Op::Stack(items) => {
                let inner = g.len() / items.len();
                for (k, v) in items.iter().enumerate() {
                    if wants(v) {
                        add_into(slot(grads, nodes, v), &g[k * inner..(k + 1) * inner]);
                    }
                }
            }
            Op::Select { x, index } => {
                let n = g.len();
                add_into(&mut slot(grads, nodes, x)[index * n..(index + 1) * n], g);
            }
            Op::Mix { w, x } => {
                let inner = g.len();
                if wants(w) {
                    let xd = val(x);
                    let gw = slot(grads, nodes, w);
                    for (k, d) in gw.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for (&gv, &xv) in g.iter().zip(&xd[k * inner..(k + 1) * inner]) {
                            acc += gv * xv;
                        }
                        *d += acc;
                    }
                }
                if wants(x) {
                    let wd = val(w).to_vec();
                    let gx = slot(grads, nodes, x);
                    for (k, &wk) in wd.iter().enumerate() {
                        for (d, &gv) in gx[k * inner..(k + 1) * inner].iter_mut().zip(g) {
                            *d += wk * gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                slot(grads, nodes, x).iter_mut().for_each(|d| *d += gv);
            }
            Op::Bce { r, target, eps } => {
                let rd = val(r);
                let n = T::lit(target.len() as f64);
                let hi = T::one() - *eps;
                let scale = g[0] / n;
                for ((d, &p), &t) in slot(grads, nodes, r).iter_mut().zip(rd).zip(target) {
                    if p > *eps && p < hi {
                        *d += scale * (p - t) / (p * (T::one() - p));
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: &Var,
) -> &'a mut Vec<T> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}
