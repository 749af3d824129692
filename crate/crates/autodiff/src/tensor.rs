use crate::custom::CustomOp;
use crate::dtype::DType;
use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Slice};
use std::cell::Cell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with graph recording disabled; intermediates are freed eagerly.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Force graph recording on (used by custom backward rules that build local
/// sub-graphs regardless of the caller's mode).
pub fn with_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(true));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Tanh,
    Gelu,
    Softplus,
    Sqrt,
    Recip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How a tensor was produced. Referenced tensors keep the upstream graph
/// alive; leaves terminate traversal.
pub enum Op {
    Leaf,
    Unary(Tensor, UnaryKind),
    Binary(Tensor, Tensor, BinaryKind),
    /// x[..., w] + b[w], bias broadcast over leading axes.
    AddBias(Tensor, Tensor),
    /// x[..., w] * g[w], gain broadcast over leading axes.
    MulBias(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    SliceLastDim(Tensor, usize, usize),
    ConcatLastDim(Vec<Tensor>),
    /// out[i, :] = x[idx[i], :] on a 2-d tensor.
    GatherRows(Tensor, Rc<Vec<usize>>),
    /// out[g, :] = mean over rows listed in groups[g] (2-d tensor).
    GroupMeanRows(Tensor, Rc<Vec<Vec<usize>>>),
    Softmax(Tensor),
    LayerNorm(Tensor, f64),
    SumAll(Tensor),
    /// sum(x * w) with constant weights w.
    WeightedSumAll(Tensor, Rc<ArrayD<f64>>),
    /// scalar [1] broadcast to an arbitrary shape.
    ExpandScalar(Tensor),
    Scale(Tensor, f64),
    AddConst(Tensor, f64),
    Cast(Tensor),
    Custom(Vec<Tensor>, Rc<dyn CustomOp>),
}

pub struct TensorInner {
    pub(crate) id: TensorId,
    pub(crate) data: ArrayD<f64>,
    pub(crate) dtype: DType,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Immutable tensor handle. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<TensorInner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={:?}, grad={})",
            self.0.id,
            self.shape(),
            self.0.dtype,
            self.0.requires_grad
        )
    }
}

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn build(mut data: ArrayD<f64>, dtype: DType, op: Op, requires_grad: bool) -> Tensor {
        dtype.quantize(&mut data);
        let record = requires_grad && is_grad_enabled();
        Tensor(Rc::new(TensorInner {
            id: fresh_id(),
            data,
            dtype,
            op: if record { op } else { Op::Leaf },
            requires_grad: record,
        }))
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(data: ArrayD<f64>, dtype: DType) -> Tensor {
        Tensor::build(data, dtype, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or probed input).
    pub fn leaf(data: ArrayD<f64>, dtype: DType) -> Tensor {
        let mut data = data;
        dtype.quantize(&mut data);
        Tensor(Rc::new(TensorInner {
            id: fresh_id(),
            data,
            dtype,
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    pub fn scalar(v: f64, dtype: DType) -> Tensor {
        Tensor::constant(ArrayD::from_elem(ndarray::IxDyn(&[1]), v), dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::constant(ArrayD::zeros(ndarray::IxDyn(shape)), dtype)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op(&self) -> &Op {
        &self.0.op
    }

    pub fn value(&self) -> ArrayViewD<'_, f64> {
        self.0.data.view()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.0.data.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar_value on tensor of shape {:?}", self.shape());
        *self.0.data.iter().next().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|x| x.is_finite())
    }

    /// Same value, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.data.clone(), self.0.dtype)
    }

    fn any_grad(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.0.requires_grad)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let data = match kind {
            UnaryKind::Neg => self.0.data.mapv(|x| -x),
            UnaryKind::Exp => self.0.data.mapv(f64::exp),
            UnaryKind::Ln => self.0.data.mapv(f64::ln),
            UnaryKind::Tanh => self.0.data.mapv(f64::tanh),
            UnaryKind::Gelu => self.0.data.mapv(gelu),
            UnaryKind::Softplus => self.0.data.mapv(softplus),
            UnaryKind::Sqrt => self.0.data.mapv(f64::sqrt),
            UnaryKind::Recip => self.0.data.mapv(f64::recip),
        };
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::Unary(self.clone(), kind), rg)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }
    pub fn ln(&self) -> Tensor {
        self.unary(UnaryKind::Ln)
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh)
    }
    pub fn gelu(&self) -> Tensor {
        self.unary(UnaryKind::Gelu)
    }
    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryKind::Softplus)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn recip(&self) -> Tensor {
        self.unary(UnaryKind::Recip)
    }

    fn binary(&self, rhs: &Tensor, kind: BinaryKind) -> Tensor {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "binary {:?}: shape mismatch {:?} vs {:?}",
            kind,
            self.shape(),
            rhs.shape()
        );
        let data = match kind {
            BinaryKind::Add => &self.0.data + &rhs.0.data,
            BinaryKind::Sub => &self.0.data - &rhs.0.data,
            BinaryKind::Mul => &self.0.data * &rhs.0.data,
            BinaryKind::Div => &self.0.data / &rhs.0.data,
        };
        let dtype = DType::promote(self.0.dtype, rhs.0.dtype);
        let rg = Tensor::any_grad(&[self, rhs]);
        Tensor::build(data, dtype, Op::Binary(self.clone(), rhs.clone(), kind), rg)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Add)
    }
    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Sub)
    }
    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Mul)
    }
    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Div)
    }

    /// x[..., w] + b[w].
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let w = *self.shape().last().expect("add_bias on 0-d tensor");
        assert_eq!(bias.shape(), [w], "bias shape {:?} != [{}]", bias.shape(), w);
        let mut data = self.0.data.clone();
        let b = bias
            .0
            .data
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let last = Axis(data.ndim() - 1);
        for mut lane in data.lanes_mut(last) {
            lane += &b;
        }
        let dtype = DType::promote(self.0.dtype, bias.0.dtype);
        let rg = Tensor::any_grad(&[self, bias]);
        Tensor::build(data, dtype, Op::AddBias(self.clone(), bias.clone()), rg)
    }

    /// x[..., w] * g[w].
    pub fn mul_bias(&self, gain: &Tensor) -> Tensor {
        let w = *self.shape().last().expect("mul_bias on 0-d tensor");
        assert_eq!(gain.shape(), [w], "gain shape {:?} != [{}]", gain.shape(), w);
        let mut data = self.0.data.clone();
        let g = gain
            .0
            .data
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let last = Axis(data.ndim() - 1);
        for mut lane in data.lanes_mut(last) {
            lane *= &g;
        }
        let dtype = DType::promote(self.0.dtype, gain.0.dtype);
        let rg = Tensor::any_grad(&[self, gain]);
        Tensor::build(data, dtype, Op::MulBias(self.clone(), gain.clone()), rg)
    }

    /// 2-d matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = self.0.data.view().into_dimensionality::<Ix2>().unwrap();
        let b = rhs.0.data.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dim mismatch: {:?} x {:?}", a.dim(), b.dim());
        let data = a.dot(&b).into_dyn();
        let dtype = DType::promote(self.0.dtype, rhs.0.dtype);
        let rg = Tensor::any_grad(&[self, rhs]);
        Tensor::build(data, dtype, Op::Matmul(self.clone(), rhs.clone()), rg)
    }

    /// 2-d transpose (materialized).
    pub fn transpose(&self) -> Tensor {
        let a = self.0.data.view().into_dimensionality::<Ix2>().unwrap();
        let data = a.t().to_owned().into_dyn();
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::Transpose(self.clone()), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let data = self
            .0
            .data
            .clone()
            .into_shape_clone(ndarray::IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", self.shape(), shape));
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::Reshape(self.clone()), rg)
    }

    pub fn slice_last_dim(&self, start: usize, len: usize) -> Tensor {
        let last = Axis(self.0.data.ndim() - 1);
        let data = self
            .0
            .data
            .slice_axis(last, Slice::from(start..start + len))
            .to_owned();
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::SliceLastDim(self.clone(), start, len), rg)
    }

    pub fn concat_last_dim(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let last = Axis(parts[0].0.data.ndim() - 1);
        let views: Vec<_> = parts.iter().map(|t| t.0.data.view()).collect();
        let data = ndarray::concatenate(last, &views).expect("concat_last_dim shape mismatch");
        let dtype = parts
            .iter()
            .map(|t| t.0.dtype)
            .fold(DType::F32, DType::promote);
        let rg = parts.iter().any(|t| t.0.requires_grad);
        Tensor::build(data, dtype, Op::ConcatLastDim(parts.to_vec()), rg)
    }

    /// out[i, :] = x[idx[i], :]; used for token unpooling.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Tensor {
        let a = self.0.data.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), a.ncols()));
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).assign(&a.row(src));
        }
        let rg = self.0.requires_grad;
        Tensor::build(out.into_dyn(), self.0.dtype, Op::GatherRows(self.clone(), idx), rg)
    }

    /// out[g, :] = mean of the rows in groups[g]; used for token pooling.
    pub fn group_mean_rows(&self, groups: Rc<Vec<Vec<usize>>>) -> Tensor {
        let a = self.0.data.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::<f64>::zeros((groups.len(), a.ncols()));
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty pooling group {g}");
            let mut acc = out.row_mut(g);
            for &r in rows {
                acc += &a.row(r);
            }
            acc /= rows.len() as f64;
        }
        let rg = self.0.requires_grad;
        Tensor::build(
            out.into_dyn(),
            self.0.dtype,
            Op::GroupMeanRows(self.clone(), groups),
            rg,
        )
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&self) -> Tensor {
        let mut data = self.0.data.clone();
        let last = Axis(data.ndim() - 1);
        for mut lane in data.lanes_mut(last) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - m).exp());
            let s: f64 = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::Softmax(self.clone()), rg)
    }

    /// Per-lane normalization over the last dimension (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let mut data = self.0.data.clone();
        let last = Axis(data.ndim() - 1);
        for mut lane in data.lanes_mut(last) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|x| (x - mean) * rstd);
        }
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::LayerNorm(self.clone(), eps), rg)
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.0.data.sum();
        let data = ArrayD::from_elem(ndarray::IxDyn(&[1]), s);
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::SumAll(self.clone()), rg)
    }

    /// sum(x * w) with constant quadrature-style weights.
    pub fn weighted_sum_all(&self, weights: Rc<ArrayD<f64>>) -> Tensor {
        assert_eq!(self.shape(), weights.shape(), "weighted_sum_all shape mismatch");
        let s = self
            .0
            .data
            .iter()
            .zip(weights.iter())
            .map(|(x, w)| x * w)
            .sum::<f64>();
        let data = ArrayD::from_elem(ndarray::IxDyn(&[1]), s);
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::WeightedSumAll(self.clone(), weights), rg)
    }

    /// Broadcast a scalar tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.len(), 1, "expand_scalar on non-scalar {:?}", self.shape());
        let v = *self.0.data.iter().next().unwrap();
        let data = ArrayD::from_elem(ndarray::IxDyn(shape), v);
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::ExpandScalar(self.clone()), rg)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.0.data.mapv(|x| x * c);
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::Scale(self.clone(), c), rg)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let data = self.0.data.mapv(|x| x + c);
        let rg = self.0.requires_grad;
        Tensor::build(data, self.0.dtype, Op::AddConst(self.clone(), c), rg)
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        let rg = self.0.requires_grad;
        Tensor::build(self.0.data.clone(), dtype, Op::Cast(self.clone()), rg)
    }

    /// Attach a caller-computed forward value with a custom backward rule.
    pub fn from_custom(
        inputs: Vec<Tensor>,
        value: ArrayD<f64>,
        dtype: DType,
        op: Rc<dyn CustomOp>,
    ) -> Tensor {
        let rg = inputs.iter().any(|t| t.0.requires_grad);
        Tensor::build(value, dtype, Op::Custom(inputs, op), rg)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.len() as f64)
    }
}

/// tanh-form GeLU; smooth, with the matching derivative used by the VJP.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Numerically stable ln(1 + e^x).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
