use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use super::kernels::{self, valid_range};
use super::{ParamId, ParamTensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Coarse primitive tag, used for fault injection and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddColBias,
    Scale,
    Relu,
    Tanh,
    Sqrt,
    ClampMin,
    Max,
    SoftmaxRows,
    LayerNorm,
    Conv1d,
    SumRows,
    Sum,
    VStack,
    NormalizeRows,
    AamLogits,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddColBias,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sqrt,
        OpKind::ClampMin,
        OpKind::Max,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Conv1d,
        OpKind::SumRows,
        OpKind::Sum,
        OpKind::VStack,
        OpKind::NormalizeRows,
        OpKind::AamLogits,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddColBias => "add_col_bias",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sqrt => "sqrt",
            OpKind::ClampMin => "clamp_min",
            OpKind::Max => "max",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv1d => "conv1d",
            OpKind::SumRows => "sum_rows",
            OpKind::Sum => "sum",
            OpKind::VStack => "vstack",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::AamLogits => "aam_logits",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Multiplies the input gradients produced by every backward rule of one
/// primitive kind. Lets tests confirm that a gradient check actually catches
/// a broken rule.
#[derive(Debug, Clone, Copy)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddColBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Max(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        dilation: usize,
    },
    SumRows(Var),
    Sum(Var),
    VStack(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    AamLogits {
        cos: Var,
        label: usize,
        scale: f64,
        margin: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddColBias(..) => OpKind::AddColBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Max(..) => OpKind::Max,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::SumRows(_) => OpKind::SumRows,
            Op::Sum(_) => OpKind::Sum,
            Op::VStack(_) => OpKind::VStack,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::AamLogits { .. } => OpKind::AamLogits,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records primitives during one forward pass.
///
/// Parameters are bound with [`Tape::param`]; binding the same parameter
/// twice returns the same node, so its gradient is accumulated once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Hash of every piecewise choice made in the forward pass: which ReLU
    /// inputs were positive, which `max` argument won, which clamps and square
    /// roots sat at their floor. Two passes with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let mut bits = |flags: &mut dyn Iterator<Item = bool>| {
                h.write_usize(i);
                let mut word = 0u64;
                for (k, f) in flags.enumerate() {
                    word |= u64::from(f) << (k % 64);
                    if k % 64 == 63 {
                        h.write_u64(word);
                        word = 0;
                    }
                }
                h.write_u64(word);
            };
            match &n.op {
                Op::Relu(a) => bits(&mut self.nodes[a.0].value.iter().map(|&x| x > 0.0)),
                Op::Max(a, b) => bits(
                    &mut self.nodes[a.0]
                        .value
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(x, y)| x >= y),
                ),
                Op::ClampMin(a, floor) => bits(&mut self.nodes[a.0].value.iter().map(|x| x > floor)),
                Op::Sqrt(_) => bits(&mut n.value.iter().map(|&y| y > 0.0)),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::NonScalarLoss(vec![n.rows, n.cols]));
        }
        Ok(n.value[0])
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// A leaf input that receives a gradient, readable via [`Gradients::wrt`].
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, grad: bool) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("leaf", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, grad))
    }

    pub fn param(&mut self, p: &ParamTensor) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let (rows, cols) = p.matrix_dims();
        let v = self.push(rows, cols, p.values().to_vec(), Op::Param, p.requires_grad());
        self.params.insert(p.id(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let g = self.needs(&[a, b]);
        Ok(self.push(m, n, value, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = kernels::transpose(self.value(a), r, c);
        let g = self.needs(&[a]);
        self.push(c, r, value, Op::Transpose(a), g)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = match op {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            _ => "max",
        };
        let (r, c) = self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let g = self.needs(&[a, b]);
        Ok(self.push(r, c, value, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum. On exact ties the first argument wins, and only
    /// the winner receives gradient.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    /// `x + bias` with `bias: rows×1` broadcast across columns.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != r || bc != 1 {
            return Err(Error::shape("add_col_bias", &[r, c], &[br, bc]));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut value = xv.to_vec();
        for row in 0..r {
            for v in &mut value[row * c..(row + 1) * c] {
                *v += bv[row];
            }
        }
        let g = self.needs(&[x, bias]);
        Ok(self.push(r, c, value, Op::AddColBias(x, bias), g))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let g = self.needs(&[a]);
        self.push(r, c, value, op, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = kernels::softmax_rows(self.value(a), r, c);
        let g = self.needs(&[a]);
        self.push(r, c, value, Op::SoftmaxRows(a), g)
    }

    /// Normalises every column over the row axis (the channel axis of a
    /// `channels×frames` sequence), then applies per-row gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            let d = self.dims(p);
            if d != (r, 1) {
                return Err(Error::shape("layer_norm", &[r, c], &[d.0, d.1]));
            }
        }
        let stats = kernels::normalize_columns(self.value(x), r, c, kernels::LAYER_NORM_EPS);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut value = vec![0.0; r * c];
        for row in 0..r {
            for col in 0..c {
                let i = row * c + col;
                value[i] = gv[row] * stats.xhat[i] + bv[row];
            }
        }
        let g = self.needs(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: stats.xhat,
            rstd: stats.rstd,
        };
        Ok(self.push(r, c, value, op, g))
    }

    /// Same-padded 1-D convolution of `x: c_in×t` with `w` holding
    /// `c_out×(c_in·kernel)` values.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel));
        }
        let (c_in, t) = self.dims(x);
        let (c_out, wk) = self.dims(w);
        if wk != c_in * kernel {
            return Err(Error::shape("conv1d", &[c_in, t], &[c_out, wk]));
        }
        let value = kernels::conv1d(self.value(x), self.value(w), c_in, c_out, t, kernel, dilation);
        let g = self.needs(&[x, w]);
        Ok(self.push(
            c_out,
            t,
            value,
            Op::Conv1d {
                x,
                w,
                kernel,
                dilation,
            },
            g,
        ))
    }

    /// Sums across columns: `rows×cols -> rows×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        let g = self.needs(&[a]);
        self.push(r, 1, value, Op::SumRows(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let g = self.needs(&[a]);
        self.push(1, 1, vec![total], Op::Sum(a), g)
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("vstack"))?;
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape("vstack", &[rows, cols], &[r, c]));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let g = self.needs(parts);
        Ok(self.push(rows, cols, value, Op::VStack(parts.to_vec()), g))
    }

    /// Divides every row by its Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let xv = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut value = vec![0.0; r * c];
        for row in 0..r {
            let src = &xv[row * c..(row + 1) * c];
            let n = src.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            for (d, s) in value[row * c..(row + 1) * c].iter_mut().zip(src) {
                *d = s / n;
            }
            norms.push(n);
        }
        let g = self.needs(&[a]);
        Ok(self.push(r, c, value, Op::NormalizeRows { x: a, norms }, g))
    }

    /// Additive-angular-margin logits from a vector of cosines: the label
    /// entry becomes `s·cos(θ+m)` (via `cosθ·cos m − sinθ·sin m`), every
    /// other entry `s·cosθ`.
    pub fn aam_logits(&mut self, cos: Var, label: usize, scale: f64, margin: f64) -> Result<Var> {
        let (r, c) = self.dims(cos);
        let n = r * c;
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let mut value: Vec<f64> = self.value(cos).iter().map(|x| scale * x).collect();
        let ct = self.value(cos)[label];
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        value[label] = scale * (ct * margin.cos() - st * margin.sin());
        let g = self.needs(&[cos]);
        let op = Op::AamLogits {
            cos,
            label,
            scale,
            margin,
        };
        Ok(self.push(r, c, value, op, g))
    }

    /// Softmax cross-entropy of a logit vector against one class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.dims(logits);
        let n = r * c;
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let z = self.value(logits);
        let probs = kernels::softmax_rows(z, 1, n);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let g = self.needs(&[logits]);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, label, probs }, g))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(vec![ln.rows, ln.cols]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let factor = match self.fault {
                Some(f) if f.op == node.op.kind() => f.factor,
                _ => 1.0,
            };
            let mut emit = |v: Var, g: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                let slot = &mut grads[v.0];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += factor * b;
                        }
                    }
                    None => {
                        *slot = Some(if factor == 1.0 {
                            g
                        } else {
                            g.into_iter().map(|x| factor * x).collect()
                        });
                    }
                }
            };
            self.backward_node(node, &dy, &mut emit);
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            grads,
            params: self.params,
        })
    }

    fn backward_node(&self, node: &Node, dy: &[f64], emit: &mut impl FnMut(Var, Vec<f64>)) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = node.cols;
                if self.node(a).requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&mut da, dy, self.value(b), m, n, k);
                    emit(a, da);
                }
                if self.node(b).requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&mut db, self.value(a), dy, m, k, n);
                    emit(b, db);
                }
            }
            &Op::Transpose(a) => {
                emit(a, kernels::transpose(dy, node.rows, node.cols));
            }
            &Op::Add(a, b) => {
                emit(a, dy.to_vec());
                emit(b, dy.to_vec());
            }
            &Op::Sub(a, b) => {
                emit(a, dy.to_vec());
                emit(b, dy.iter().map(|g| -g).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                emit(a, dy.iter().zip(bv).map(|(g, x)| g * x).collect());
                emit(b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            &Op::Max(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let wins: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x >= y).collect();
                emit(a, dy.iter().zip(&wins).map(|(&g, &w)| if w { g } else { 0.0 }).collect());
                emit(b, dy.iter().zip(&wins).map(|(&g, &w)| if w { 0.0 } else { g }).collect());
            }
            &Op::AddColBias(x, bias) => {
                emit(x, dy.to_vec());
                let db = dy.chunks(node.cols).map(|row| row.iter().sum()).collect();
                emit(bias, db);
            }
            &Op::Scale(a, s) => emit(a, dy.iter().map(|g| g * s).collect()),
            &Op::Relu(a) => {
                let av = self.value(a);
                emit(a, dy.iter().zip(av).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect());
            }
            &Op::Tanh(a) => emit(a, dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            &Op::Sqrt(a) => emit(
                a,
                dy.iter()
                    .zip(y)
                    .map(|(&g, &s)| if s > 0.0 { 0.5 * g / s } else { 0.0 })
                    .collect(),
            ),
            &Op::ClampMin(a, floor) => {
                let av = self.value(a);
                emit(a, dy.iter().zip(av).map(|(&g, &x)| if x > floor { g } else { 0.0 }).collect());
            }
            &Op::SoftmaxRows(a) => {
                let c = node.cols;
                let mut dx = vec![0.0; dy.len()];
                for ((dxr, dyr), yr) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = dyr.iter().zip(yr).map(|(g, p)| g * p).sum();
                    for ((d, g), p) in dxr.iter_mut().zip(dyr).zip(yr) {
                        *d = p * (g - dot);
                    }
                }
                emit(a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (node.rows, node.cols);
                let gv = self.value(*gain);
                let mut dgain = vec![0.0; r];
                let mut dbias = vec![0.0; r];
                for row in 0..r {
                    for col in 0..c {
                        let i = row * c + col;
                        dgain[row] += dy[i] * xhat[i];
                        dbias[row] += dy[i];
                    }
                }
                if self.node(*x).requires_grad {
                    let n = r as f64;
                    let mut dx = vec![0.0; r * c];
                    for col in 0..c {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for row in 0..r {
                            let i = row * c + col;
                            let dh = dy[i] * gv[row];
                            s1 += dh;
                            s2 += dh * xhat[i];
                        }
                        for row in 0..r {
                            let i = row * c + col;
                            let dh = dy[i] * gv[row];
                            dx[i] = rstd[col] * (dh - s1 / n - xhat[i] * s2 / n);
                        }
                    }
                    emit(*x, dx);
                }
                emit(*gain, dgain);
                emit(*bias, dbias);
            }
            &Op::Conv1d {
                x,
                w,
                kernel,
                dilation,
            } => {
                let (c_in, t) = self.dims(x);
                let c_out = node.rows;
                let xv = self.value(x);
                let wv = self.value(w);
                let pad = (dilation * (kernel - 1) / 2) as isize;
                let want_x = self.node(x).requires_grad;
                let want_w = self.node(w).requires_grad;
                let mut dx = vec![0.0; if want_x { c_in * t } else { 0 }];
                let mut dw = vec![0.0; if want_w { wv.len() } else { 0 }];
                for o in 0..c_out {
                    let dyr = &dy[o * t..(o + 1) * t];
                    for i in 0..c_in {
                        let xr = &xv[i * t..(i + 1) * t];
                        for k in 0..kernel {
                            let widx = (o * c_in + i) * kernel + k;
                            let shift = (k * dilation) as isize - pad;
                            let (lo, hi) = valid_range(shift, t);
                            if want_w {
                                let mut acc = 0.0;
                                for tt in lo..hi {
                                    acc += dyr[tt] * xr[(tt as isize + shift) as usize];
                                }
                                dw[widx] += acc;
                            }
                            if want_x {
                                let wk = wv[widx];
                                let dxr = &mut dx[i * t..(i + 1) * t];
                                for tt in lo..hi {
                                    dxr[(tt as isize + shift) as usize] += wk * dyr[tt];
                                }
                            }
                        }
                    }
                }
                if want_x {
                    emit(x, dx);
                }
                if want_w {
                    emit(w, dw);
                }
            }
            &Op::SumRows(a) => {
                let (r, c) = self.dims(a);
                let mut dx = vec![0.0; r * c];
                for (row, chunk) in dx.chunks_mut(c).enumerate() {
                    chunk.iter_mut().for_each(|d| *d = dy[row]);
                }
                emit(a, dx);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                emit(a, vec![dy[0]; n]);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    emit(p, dy[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.cols;
                let mut dx = vec![0.0; dy.len()];
                for (row, ((dxr, dyr), yr)) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)).enumerate() {
                    let dot: f64 = dyr.iter().zip(yr).map(|(g, v)| g * v).sum();
                    for ((d, g), v) in dxr.iter_mut().zip(dyr).zip(yr) {
                        *d = (g - v * dot) / norms[row];
                    }
                }
                emit(*x, dx);
            }
            &Op::AamLogits {
                cos,
                label,
                scale,
                margin,
            } => {
                let mut dx: Vec<f64> = dy.iter().map(|g| g * scale).collect();
                let ct = self.value(cos)[label];
                let s2 = 1.0 - ct * ct;
                let dsin = if s2 > 0.0 { -ct / s2.sqrt() } else { 0.0 };
                dx[label] = dy[label] * scale * (margin.cos() - dsin * margin.sin());
                emit(cos, dx);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut dx: Vec<f64> = probs.iter().map(|p| dy[0] * p).collect();
                dx[*label] -= dy[0];
                emit(*logits, dx);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a recorded node, `None` if it was unreachable
    /// or does not require a gradient.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Adds this pass's gradient into the parameter's buffer. Parameters not
    /// reached from the loss are left untouched.
    pub fn accumulate_into(&self, p: &mut ParamTensor) {
        if let Some(g) = self.param(p.id()) {
            for (acc, x) in p.grad_mut().iter_mut().zip(g) {
                *acc += x;
            }
        }
    }
}
