use super::{sigmoid, softplus, Grads, ParamId, ParamStore, HALF_LOG_2PI};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Column { w: ParamId, col: usize },
    Linear { w: ParamId, x: Var, b: Option<ParamId> },
    Add(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    FloorMax(Var, f64),
    AddConst(Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Index(Var, usize),
    GaussianNll { x: f64, mean: Var, std: Var },
    SoftmaxXent { logits: Var, target: usize },
    Sum(Vec<Var>),
}

/// Records vector-valued operations for reverse-mode differentiation.
///
/// Parameters are read from the borrowed store; `backward` returns
/// gradients aligned with it.
pub struct Tape<'p> {
    params: &'p ParamStore,
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, ops: Vec::new(), values: Vec::new() }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn input(&mut self, v: Vec<f64>) -> Var {
        self.push(Op::Input, v)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.params.get(id).data.clone();
        self.push(Op::Param(id), v)
    }

    /// Column `col` of matrix parameter `w` (one-hot times matrix).
    pub fn column(&mut self, w: ParamId, col: usize) -> Result<Var> {
        let t = self.params.get(w);
        if col >= t.cols {
            return Err(Error::Shape(format!("column {col} of a {}x{} matrix", t.rows, t.cols)));
        }
        let v = (0..t.rows).map(|r| t.at(r, col)).collect();
        Ok(self.push(Op::Column { w, col }, v))
    }

    /// `W x + b`.
    pub fn linear(&mut self, w: ParamId, x: Var, b: Option<ParamId>) -> Result<Var> {
        let wt = self.params.get(w);
        let xv = &self.values[x.0];
        if wt.cols != xv.len() {
            return Err(Error::Shape(format!("{}x{} matrix times vector of length {}", wt.rows, wt.cols, xv.len())));
        }
        let mut out = wt.matvec(xv);
        if let Some(b) = b {
            let bt = self.params.get(b);
            if bt.len() != out.len() {
                return Err(Error::Shape(format!("bias of length {} for output of length {}", bt.len(), out.len())));
            }
            out.iter_mut().zip(&bt.data).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Op::Linear { w, x, b }, out))
    }

    fn same_len(&self, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.values[a.0].len(), self.values[b.0].len());
        if la != lb {
            return Err(Error::Shape(format!("elementwise op on lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let v = self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let v = self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.values[a.0].iter().map(|&x| f(x)).collect();
        self.push(op, v)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a), |x| 1.0 - x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// `max(a, floor)`; the gradient is zero where the floor binds.
    pub fn floor_max(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::FloorMax(a, floor), |x| x.max(floor))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddConst(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().flat_map(|p| self.values[p.0].iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let x = *self.values[a.0]
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} into vector of length {}", self.values[a.0].len())))?;
        Ok(self.push(Op::Index(a, i), vec![x]))
    }

    /// `-log N(x; mean, std)` with scalar `mean` and `std` nodes.
    pub fn gaussian_nll(&mut self, x: f64, mean: Var, std: Var) -> Result<Var> {
        let (m, s) = (self.scalar(mean), self.scalar(std));
        if !(s > 0.0) {
            return Err(Error::Domain(format!("std must be positive, got {s}")));
        }
        let d = x - m;
        let v = s.ln() + HALF_LOG_2PI + d * d / (2.0 * s * s);
        Ok(self.push(Op::GaussianNll { x, mean, std }, vec![v]))
    }

    /// `-log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = &self.values[logits.0];
        if target >= l.len() {
            return Err(Error::Vocab { mark: target as u32, size: l.len() });
        }
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let v = lse - l[target];
        Ok(self.push(Op::SoftmaxXent { logits, target }, vec![v]))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().map(|p| self.values[p.0][0]).sum();
        self.push(Op::Sum(parts.to_vec()), vec![v])
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let mut grads = self.params.zero_grads();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates d(loss)/d(param) into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        if loss.0 >= self.values.len() || self.values[loss.0].len() != 1 {
            return Err(Error::State("loss must be a scalar node of this tape".into()));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];

        fn acc(adj: &mut [Vec<f64>], v: Var, g: impl Iterator<Item = f64>, len: usize) {
            let slot = &mut adj[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; len];
            }
            slot.iter_mut().zip(g).for_each(|(a, d)| *a += d);
        }

        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let out = &self.values[i];
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(id) => {
                    grads.tensors[id.0].data.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                }
                Op::Column { w, col } => {
                    let t = &mut grads.tensors[w.0];
                    for (r, d) in g.iter().enumerate() {
                        t.data[r * t.cols + col] += d;
                    }
                }
                Op::Linear { w, x, b } => {
                    let xv = &self.values[x.0];
                    let wt = self.params.get(*w);
                    let gw = &mut grads.tensors[w.0];
                    for (r, d) in g.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &mut gw.data[r * wt.cols..(r + 1) * wt.cols];
                        row.iter_mut().zip(xv).for_each(|(a, xv)| *a += d * xv);
                    }
                    if let Some(b) = b {
                        grads.tensors[b.0].data.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                    }
                    let mut gx = vec![0.0; wt.cols];
                    for (r, d) in g.iter().enumerate() {
                        let row = &wt.data[r * wt.cols..(r + 1) * wt.cols];
                        gx.iter_mut().zip(row).for_each(|(a, w)| *a += d * w);
                    }
                    acc(&mut adj, *x, gx.into_iter(), wt.cols);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.iter().copied(), g.len());
                    acc(&mut adj, *b, g.iter().copied(), g.len());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    acc(&mut adj, *a, g.iter().zip(bv).map(|(d, y)| d * y), g.len());
                    acc(&mut adj, *b, g.iter().zip(av).map(|(d, x)| d * x), g.len());
                }
                Op::OneMinus(a) => acc(&mut adj, *a, g.iter().map(|d| -d), g.len()),
                Op::Sigmoid(a) => acc(&mut adj, *a, g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)), g.len()),
                Op::Tanh(a) => acc(&mut adj, *a, g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)), g.len()),
                Op::Relu(a) => {
                    let xv = &self.values[a.0];
                    acc(&mut adj, *a, g.iter().zip(xv).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }), g.len())
                }
                Op::Softplus(a) => {
                    let xv = &self.values[a.0];
                    acc(&mut adj, *a, g.iter().zip(xv).map(|(d, x)| d * sigmoid(*x)), g.len())
                }
                Op::FloorMax(a, floor) => {
                    let xv = &self.values[a.0];
                    acc(&mut adj, *a, g.iter().zip(xv).map(|(d, x)| if x > floor { *d } else { 0.0 }), g.len())
                }
                Op::AddConst(a) => acc(&mut adj, *a, g.iter().copied(), g.len()),
                Op::Scale(a, s) => acc(&mut adj, *a, g.iter().map(|d| d * s), g.len()),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.values[p.0].len();
                        acc(&mut adj, *p, g[off..off + n].iter().copied(), n);
                        off += n;
                    }
                }
                Op::Index(a, k) => {
                    let n = self.values[a.0].len();
                    let d = g[0];
                    acc(&mut adj, *a, (0..n).map(|j| if j == *k { d } else { 0.0 }), n);
                }
                Op::GaussianNll { x, mean, std } => {
                    let (m, s) = (self.scalar(*mean), self.scalar(*std));
                    let diff = x - m;
                    let d = g[0];
                    acc(&mut adj, *mean, std::iter::once(-d * diff / (s * s)), 1);
                    acc(&mut adj, *std, std::iter::once(d * (1.0 / s - diff * diff / (s * s * s))), 1);
                }
                Op::SoftmaxXent { logits, target } => {
                    let p = super::softmax(&self.values[logits.0]);
                    let d = g[0];
                    let n = p.len();
                    acc(
                        &mut adj,
                        *logits,
                        p.iter().enumerate().map(|(j, pj)| d * (pj - if j == *target { 1.0 } else { 0.0 })),
                        n,
                    );
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(&mut adj, *p, std::iter::once(g[0]), 1);
                    }
                }
            }
        }
        Ok(())
    }
}
