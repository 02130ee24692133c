//! Primitive differentiable ops. Tensors are channels-last throughout:
//! sequences are `[B, T, C]`, images `[N, H, W, C]`.

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn};

use super::tape::{Backward, Tape, Var};
use super::Scalar;

/// Push an op node; drops the backward closure when no parent needs a
/// gradient so dead branches cost nothing in the reverse walk.
pub(crate) fn push_op<'t, F: Scalar>(
    tape: &'t Tape<F>,
    value: ArrayD<F>,
    parents: Vec<usize>,
    op: Box<dyn Backward<F>>,
) -> Var<'t, F> {
    let needs = {
        let nodes = tape.nodes.borrow();
        parents.iter().any(|&p| nodes[p].needs_grad)
    };
    tape.push(value, parents, needs.then_some(op), needs)
}

pub(crate) fn accum<F: Scalar>(slot: &mut Option<ArrayD<F>>, delta: ArrayD<F>) {
    match slot {
        None => {
            // Gradients are consumed by backwards that flat-reshape them,
            // so they must be stored in standard layout.
            let delta = if delta.is_standard_layout() {
                delta
            } else {
                delta.as_standard_layout().to_owned()
            };
            *slot = Some(delta);
        }
        Some(acc) => acc.zip_mut_with(&delta, |a, &b| *a += b),
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Swish,
}

impl Unary {
    fn apply<F: Scalar>(self, x: F) -> F {
        let one = F::one();
        match self {
            Unary::Neg => -x,
            Unary::Relu => {
                if x > F::zero() {
                    x
                } else {
                    F::zero()
                }
            }
            Unary::Sigmoid => one / (one + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Swish => x / (one + (-x).exp()),
        }
    }

    /// dy/dx from input `x` and output `y`.
    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        let one = F::one();
        match self {
            Unary::Neg => -one,
            Unary::Relu => {
                if x > F::zero() {
                    one
                } else {
                    F::zero()
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Exp => y,
            Unary::Ln => one / x,
            Unary::Sqrt => F::of(0.5) / y,
            Unary::Abs => {
                if x >= F::zero() {
                    one
                } else {
                    -one
                }
            }
            Unary::Swish => {
                let s = one / (one + (-x).exp());
                s + x * s * (one - s)
            }
        }
    }
}

struct UnaryOp(Unary);

impl<F: Scalar> Backward<F> for UnaryOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut d = grad.clone();
        ndarray::Zip::from(&mut d)
            .and(parents[0])
            .and(output)
            .for_each(|g, &x, &y| *g = *g * self.0.derivative(x, y));
        accum(&mut parent_grads[0], d);
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp(BinaryKind);

impl<F: Scalar> Backward<F> for BinaryOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let (a, b) = (parents[0], parents[1]);
        match self.0 {
            BinaryKind::Add => {
                if needs[0] {
                    accum(&mut parent_grads[0], grad.clone());
                }
                if needs[1] {
                    accum(&mut parent_grads[1], grad.clone());
                }
            }
            BinaryKind::Sub => {
                if needs[0] {
                    accum(&mut parent_grads[0], grad.clone());
                }
                if needs[1] {
                    accum(&mut parent_grads[1], grad.mapv(|g| -g));
                }
            }
            BinaryKind::Mul => {
                if needs[0] {
                    accum(&mut parent_grads[0], grad * b);
                }
                if needs[1] {
                    accum(&mut parent_grads[1], grad * a);
                }
            }
            BinaryKind::Div => {
                if needs[0] {
                    accum(&mut parent_grads[0], grad / b);
                }
                if needs[1] {
                    let mut d = grad * a;
                    d.zip_mut_with(b, |g, &bv| *g = -*g / (bv * bv));
                    accum(&mut parent_grads[1], d);
                }
            }
        }
    }
}

struct ScaleOp<F>(F);

impl<F: Scalar> Backward<F> for ScaleOp<F> {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        accum(&mut parent_grads[0], grad.mapv(|g| g * self.0));
    }
}

struct AddScalarOp;

impl<F: Scalar> Backward<F> for AddScalarOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        accum(&mut parent_grads[0], grad.clone());
    }
}

/// Bias add over the last axis: `x [.., C] + b [C]`.
struct AddBiasOp;

impl<F: Scalar> Backward<F> for AddBiasOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        if needs[0] {
            accum(&mut parent_grads[0], grad.clone());
        }
        if needs[1] {
            let c = parents[1].len();
            let flat = grad.view().into_shape_with_order((grad.len() / c, c)).unwrap();
            accum(&mut parent_grads[1], flat.sum_axis(Axis(0)).into_dyn());
        }
    }
}

/// Multiply by a constant array broadcastable to the input shape.
struct MulConstOp<F>(ArrayD<F>);

impl<F: Scalar> Backward<F> for MulConstOp<F> {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        accum(&mut parent_grads[0], grad * &self.0);
    }
}

struct MatmulOp;

impl<F: Scalar> Backward<F> for MatmulOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let a = parents[0].view().into_dimensionality::<Ix2>().unwrap();
        let b = parents[1].view().into_dimensionality::<Ix2>().unwrap();
        if needs[0] {
            accum(&mut parent_grads[0], g.dot(&b.t()).into_dyn());
        }
        if needs[1] {
            accum(&mut parent_grads[1], a.t().dot(&g).into_dyn());
        }
    }
}

struct BmmOp;

impl<F: Scalar> Backward<F> for BmmOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let (a, b) = (parents[0], parents[1]);
        let nb = a.shape()[0];
        let mut da = needs[0].then(|| ArrayD::zeros(a.raw_dim()));
        let mut db = needs[1].then(|| ArrayD::zeros(b.raw_dim()));
        for i in 0..nb {
            let gi = grad.index_axis(Axis(0), i);
            let gi = gi.view().into_dimensionality::<Ix2>().unwrap();
            let ai = a.index_axis(Axis(0), i);
            let ai = ai.view().into_dimensionality::<Ix2>().unwrap();
            let bi = b.index_axis(Axis(0), i);
            let bi = bi.view().into_dimensionality::<Ix2>().unwrap();
            if let Some(da) = da.as_mut() {
                let mut slot = da.index_axis_mut(Axis(0), i);
                slot.assign(&gi.dot(&bi.t()));
            }
            if let Some(db) = db.as_mut() {
                let mut slot = db.index_axis_mut(Axis(0), i);
                slot.assign(&ai.t().dot(&gi));
            }
        }
        if let Some(da) = da {
            accum(&mut parent_grads[0], da);
        }
        if let Some(db) = db {
            accum(&mut parent_grads[1], db);
        }
    }
}

struct ReshapeOp {
    from: Vec<usize>,
}

impl<F: Scalar> Backward<F> for ReshapeOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        // Upstream ops may hand over gradients with permuted strides.
        let g = grad
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&self.from))
            .expect("reshape backward");
        accum(&mut parent_grads[0], g);
    }
}

struct PermuteOp {
    perm: Vec<usize>,
}

impl<F: Scalar> Backward<F> for PermuteOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut inverse = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inverse[p] = i;
        }
        let g = grad.view().permuted_axes(IxDyn(&inverse));
        accum(&mut parent_grads[0], g.as_standard_layout().to_owned());
    }
}

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}

impl<F: Scalar> Backward<F> for ConcatOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut start = 0;
        for (i, &len) in self.sizes.iter().enumerate() {
            if needs[i] {
                let g = grad
                    .slice_axis(Axis(self.axis), ndarray::Slice::from(start..start + len))
                    .to_owned();
                accum(&mut parent_grads[i], g);
            }
            start += len;
        }
    }
}

struct SliceAxisOp {
    axis: usize,
    start: usize,
    len: usize,
}

impl<F: Scalar> Backward<F> for SliceAxisOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut dx = ArrayD::zeros(parents[0].raw_dim());
        dx.slice_axis_mut(
            Axis(self.axis),
            ndarray::Slice::from(self.start..self.start + self.len),
        )
        .assign(grad);
        accum(&mut parent_grads[0], dx);
    }
}

struct RepeatInterleaveOp {
    axis: usize,
    k: usize,
}

impl<F: Scalar> Backward<F> for RepeatInterleaveOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut dx = ArrayD::<F>::zeros(parents[0].raw_dim());
        for i in 0..grad.shape()[self.axis] {
            let gi = grad.index_axis(Axis(self.axis), i);
            let mut slot = dx.index_axis_mut(Axis(self.axis), i / self.k);
            slot.zip_mut_with(&gi, |a, &b| *a += b);
        }
        accum(&mut parent_grads[0], dx);
    }
}

/// Gather time steps: `x [B, T, D]`, `idx [B, L]` -> `[B, L, D]`.
struct GatherAxis1Op {
    idx: ndarray::Array2<usize>,
}

impl<F: Scalar> Backward<F> for GatherAxis1Op {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut dx = ArrayD::<F>::zeros(parents[0].raw_dim());
        let (b, l) = self.idx.dim();
        for bi in 0..b {
            for li in 0..l {
                let g = grad
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), li)
                    .to_owned();
                let mut slot = dx.index_axis_mut(Axis(0), bi);
                let mut slot = slot.index_axis_mut(Axis(0), self.idx[[bi, li]]);
                slot.zip_mut_with(&g, |a, &v| *a += v);
            }
        }
        accum(&mut parent_grads[0], dx);
    }
}

struct SumAllOp;

impl<F: Scalar> Backward<F> for SumAllOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let g = grad.iter().next().copied().unwrap();
        accum(&mut parent_grads[0], ArrayD::from_elem(parents[0].raw_dim(), g));
    }
}

struct SumAxisOp {
    axis: usize,
}

impl<F: Scalar> Backward<F> for SumAxisOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let mut dx = ArrayD::<F>::zeros(parents[0].raw_dim());
        for i in 0..parents[0].shape()[self.axis] {
            dx.index_axis_mut(Axis(self.axis), i).assign(grad);
        }
        accum(&mut parent_grads[0], dx);
    }
}

/// Layer normalization over the last axis with learned scale and shift.
/// Statistics are recomputed in the backward pass instead of stashed.
struct LayerNormOp<F> {
    eps: F,
}

impl<F: Scalar> Backward<F> for LayerNormOp<F> {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let x = parents[0];
        let gamma = parents[1];
        let c = x.shape()[x.ndim() - 1];
        let rows = x.len() / c;
        let xf = x.view().into_shape_with_order((rows, c)).unwrap();
        let gf = grad.view().into_shape_with_order((rows, c)).unwrap();
        let gammaf = gamma.view().into_shape_with_order(c).unwrap();

        let mut dx = ndarray::Array2::<F>::zeros((rows, c));
        let mut dgamma = ndarray::Array1::<F>::zeros(c);
        let mut dbeta = ndarray::Array1::<F>::zeros(c);
        let n = F::of(c as f64);

        for r in 0..rows {
            let xr = xf.row(r);
            let gr = gf.row(r);
            let mean = xr.sum() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv_std = F::one() / (var + self.eps).sqrt();

            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for i in 0..c {
                let xhat = (xr[i] - mean) * inv_std;
                let dxhat = gr[i] * gammaf[i];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
                if needs[1] {
                    dgamma[i] += gr[i] * xhat;
                }
                if needs[2] {
                    dbeta[i] += gr[i];
                }
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            if needs[0] {
                for i in 0..c {
                    let xhat = (xr[i] - mean) * inv_std;
                    let dxhat = gr[i] * gammaf[i];
                    dx[[r, i]] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                }
            }
        }
        if needs[0] {
            accum(
                &mut parent_grads[0],
                dx.into_shape_with_order(x.raw_dim()).unwrap(),
            );
        }
        if needs[1] {
            accum(&mut parent_grads[1], dgamma.into_dyn());
        }
        if needs[2] {
            accum(&mut parent_grads[2], dbeta.into_dyn());
        }
    }
}

struct SoftmaxLastOp;

impl<F: Scalar> Backward<F> for SoftmaxLastOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let c = output.shape()[output.ndim() - 1];
        let rows = output.len() / c;
        let y = output.view().into_shape_with_order((rows, c)).unwrap();
        let g = grad.view().into_shape_with_order((rows, c)).unwrap();
        let mut dx = ndarray::Array2::<F>::zeros((rows, c));
        for r in 0..rows {
            let dot = y.row(r).iter().zip(g.row(r)).map(|(&yv, &gv)| yv * gv).sum::<F>();
            for i in 0..c {
                dx[[r, i]] = y[[r, i]] * (g[[r, i]] - dot);
            }
        }
        accum(
            &mut parent_grads[0],
            dx.into_shape_with_order(output.raw_dim()).unwrap(),
        );
    }
}

struct LogSoftmaxLastOp;

impl<F: Scalar> Backward<F> for LogSoftmaxLastOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let c = output.shape()[output.ndim() - 1];
        let rows = output.len() / c;
        let y = output.view().into_shape_with_order((rows, c)).unwrap();
        let g = grad.view().into_shape_with_order((rows, c)).unwrap();
        let mut dx = ndarray::Array2::<F>::zeros((rows, c));
        for r in 0..rows {
            let gsum = g.row(r).sum();
            for i in 0..c {
                dx[[r, i]] = g[[r, i]] - y[[r, i]].exp() * gsum;
            }
        }
        accum(
            &mut parent_grads[0],
            dx.into_shape_with_order(output.raw_dim()).unwrap(),
        );
    }
}

/// Identity-Jacobian pass-through: forward emits the stored constant,
/// backward hands the gradient to the (continuous) input unchanged.
struct StraightThroughOp;

impl<F: Scalar> Backward<F> for StraightThroughOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        _parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        accum(&mut parent_grads[0], grad.clone());
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    fn unary(self, kind: Unary) -> Var<'t, F> {
        let value = self.with_value(|x| x.mapv(|v| kind.apply(v)));
        push_op(self.tape, value, vec![self.id], Box::new(UnaryOp(kind)))
    }

    pub fn neg(self) -> Var<'t, F> {
        self.unary(Unary::Neg)
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t, F> {
        self.unary(Unary::Ln)
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.unary(Unary::Sqrt)
    }

    pub fn abs(self) -> Var<'t, F> {
        self.unary(Unary::Abs)
    }

    pub fn swish(self) -> Var<'t, F> {
        self.unary(Unary::Swish)
    }

    pub fn scale(self, c: f64) -> Var<'t, F> {
        let c = F::of(c);
        let value = self.with_value(|x| x.mapv(|v| v * c));
        push_op(self.tape, value, vec![self.id], Box::new(ScaleOp(c)))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, F> {
        let c = F::of(c);
        let value = self.with_value(|x| x.mapv(|v| v + c));
        push_op(self.tape, value, vec![self.id], Box::new(AddScalarOp))
    }

    fn binary(self, other: Var<'t, F>, kind: BinaryKind) -> Var<'t, F> {
        let value = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(a.shape(), b.shape(), "binary op shape mismatch");
                match kind {
                    BinaryKind::Add => a + b,
                    BinaryKind::Sub => a - b,
                    BinaryKind::Mul => a * b,
                    BinaryKind::Div => a / b,
                }
            })
        });
        push_op(self.tape, value, vec![self.id, other.id], Box::new(BinaryOp(kind)))
    }

    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, BinaryKind::Div)
    }

    /// `x [.., C] + b [C]`.
    pub fn add_bias(self, bias: Var<'t, F>) -> Var<'t, F> {
        let value = self.with_value(|x| {
            bias.with_value(|b| {
                assert_eq!(b.ndim(), 1);
                assert_eq!(x.shape()[x.ndim() - 1], b.len(), "bias length mismatch");
                x + &b.view()
            })
        });
        push_op(self.tape, value, vec![self.id, bias.id], Box::new(AddBiasOp))
    }

    /// Multiply by a constant array broadcastable to this shape (masks,
    /// dropout keeps, fixed positional patterns).
    pub fn mul_const(self, c: &ArrayD<F>) -> Var<'t, F> {
        let value = self.with_value(|x| x * c);
        push_op(self.tape, value, vec![self.id], Box::new(MulConstOp(c.clone())))
    }

    /// 2-D matrix product `[M, K] x [K, N]`.
    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = self.with_value(|a| {
            other.with_value(|b| {
                let a = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
                let b = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
                a.dot(&b).into_dyn()
            })
        });
        push_op(self.tape, value, vec![self.id, other.id], Box::new(MatmulOp))
    }

    /// Batched matrix product `[B, M, K] x [B, K, N]`.
    pub fn bmm(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(a.ndim(), 3);
                assert_eq!(b.ndim(), 3);
                assert_eq!(a.shape()[0], b.shape()[0]);
                let (nb, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
                let mut out = ndarray::Array3::<F>::zeros((nb, m, n));
                for i in 0..nb {
                    let ai = a.index_axis(Axis(0), i);
                    let ai = ai.view().into_dimensionality::<Ix2>().unwrap();
                    let bi = b.index_axis(Axis(0), i);
                    let bi = bi.view().into_dimensionality::<Ix2>().unwrap();
                    out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
                }
                out.into_dyn()
            })
        });
        push_op(self.tape, value, vec![self.id, other.id], Box::new(BmmOp))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let from = self.shape();
        let value = self.with_value(|x| {
            x.to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        });
        push_op(self.tape, value, vec![self.id], Box::new(ReshapeOp { from }))
    }

    /// Axis permutation producing a standard-layout copy.
    pub fn permute(self, perm: &[usize]) -> Var<'t, F> {
        let value = self.with_value(|x| {
            x.view().permuted_axes(IxDyn(perm)).as_standard_layout().to_owned()
        });
        push_op(
            self.tape,
            value,
            vec![self.id],
            Box::new(PermuteOp { perm: perm.to_vec() }),
        )
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Var<'t, F> {
        let value = self.with_value(|x| {
            x.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .as_standard_layout()
                .to_owned()
        });
        push_op(
            self.tape,
            value,
            vec![self.id],
            Box::new(SliceAxisOp { axis, start, len }),
        )
    }

    /// Repeat each index along `axis` `k` times (nearest-neighbor upsample).
    pub fn repeat_interleave(self, axis: usize, k: usize) -> Var<'t, F> {
        let value = self.with_value(|x| {
            let mut shape = x.shape().to_vec();
            shape[axis] *= k;
            let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
            for i in 0..shape[axis] {
                out.index_axis_mut(Axis(axis), i)
                    .assign(&x.index_axis(Axis(axis), i / k));
            }
            out
        });
        push_op(
            self.tape,
            value,
            vec![self.id],
            Box::new(RepeatInterleaveOp { axis, k }),
        )
    }

    /// `x [B, T, D]` gathered at `idx [B, L]` -> `[B, L, D]`.
    pub fn gather_axis1(self, idx: &ndarray::Array2<usize>) -> Var<'t, F> {
        let value = self.with_value(|x| {
            assert_eq!(x.ndim(), 3);
            assert_eq!(x.shape()[0], idx.shape()[0]);
            let (b, l) = idx.dim();
            let d = x.shape()[2];
            let mut out = ndarray::Array3::<F>::zeros((b, l, d));
            for bi in 0..b {
                for li in 0..l {
                    let t = idx[[bi, li]];
                    assert!(t < x.shape()[1], "gather index out of range");
                    out.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), li)
                        .assign(&x.index_axis(Axis(0), bi).index_axis(Axis(0), t));
                }
            }
            out.into_dyn()
        });
        push_op(
            self.tape,
            value,
            vec![self.id],
            Box::new(GatherAxis1Op { idx: idx.clone() }),
        )
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let value = self.with_value(|x| ArrayD::from_elem(IxDyn(&[]), x.sum()));
        push_op(self.tape, value, vec![self.id], Box::new(SumAllOp))
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let n = self.with_value(|x| x.len());
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn sum_axis(self, axis: usize) -> Var<'t, F> {
        let value = self.with_value(|x| x.sum_axis(Axis(axis)));
        push_op(self.tape, value, vec![self.id], Box::new(SumAxisOp { axis }))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t, F> {
        let n = self.with_value(|x| x.shape()[axis]);
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: f64) -> Var<'t, F> {
        let eps = F::of(eps);
        let value = self.with_value(|x| {
            gamma.with_value(|gm| {
                beta.with_value(|bt| {
                    let c = x.shape()[x.ndim() - 1];
                    assert_eq!(gm.len(), c);
                    assert_eq!(bt.len(), c);
                    let rows = x.len() / c;
                    let xf = x.view().into_shape_with_order((rows, c)).unwrap();
                    let gmf = gm.view().into_shape_with_order(c).unwrap();
                    let btf = bt.view().into_shape_with_order(c).unwrap();
                    let mut out = ndarray::Array2::<F>::zeros((rows, c));
                    let n = F::of(c as f64);
                    for r in 0..rows {
                        let xr = xf.row(r);
                        let mean = xr.sum() / n;
                        let var =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                        let inv_std = F::one() / (var + eps).sqrt();
                        for i in 0..c {
                            out[[r, i]] = (xr[i] - mean) * inv_std * gmf[i] + btf[i];
                        }
                    }
                    out.into_shape_with_order(x.raw_dim()).unwrap()
                })
            })
        });
        push_op(
            self.tape,
            value,
            vec![self.id, gamma.id, beta.id],
            Box::new(LayerNormOp { eps }),
        )
    }

    pub fn softmax_last(self) -> Var<'t, F> {
        let value = self.with_value(|x| softmax_rows(x, false));
        push_op(self.tape, value, vec![self.id], Box::new(SoftmaxLastOp))
    }

    pub fn log_softmax_last(self) -> Var<'t, F> {
        let value = self.with_value(|x| softmax_rows(x, true));
        push_op(self.tape, value, vec![self.id], Box::new(LogSoftmaxLastOp))
    }

    /// Straight-through estimator: emits `target` in the forward pass while
    /// routing gradients to `self` with an identity Jacobian.
    pub fn straight_through(self, target: &ArrayD<F>) -> Var<'t, F> {
        self.with_value(|x| assert_eq!(x.shape(), target.shape()));
        push_op(
            self.tape,
            target.clone(),
            vec![self.id],
            Box::new(StraightThroughOp),
        )
    }
}

fn softmax_rows<F: Scalar>(x: &ArrayD<F>, log: bool) -> ArrayD<F> {
    let c = x.shape()[x.ndim() - 1];
    let rows = x.len() / c;
    let xf = x.view().into_shape_with_order((rows, c)).unwrap();
    let mut out = ndarray::Array2::<F>::zeros((rows, c));
    for r in 0..rows {
        let xr = xf.row(r);
        let max = xr.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut denom = F::zero();
        for &v in xr {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        for i in 0..c {
            out[[r, i]] = if log {
                xr[i] - max - log_denom
            } else {
                (xr[i] - max - log_denom).exp()
            };
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

/// Affine map over the last axis: `x.w + b` with `x [.., Cin]`,
/// `w [Cin, Cout]`, `b [Cout]`. Leading axes are preserved.
pub fn linear<'t, F: Scalar>(x: Var<'t, F>, w: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
    let shape = x.shape();
    assert!(!shape.is_empty(), "linear input needs at least one axis");
    let cin = *shape.last().unwrap();
    assert_eq!(w.shape()[0], cin, "linear width mismatch");
    let cout = w.shape()[1];
    if shape.len() == 2 {
        return x.matmul(w).add_bias(b);
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = cout;
    x.reshape(&[rows, cin]).matmul(w).add_bias(b).reshape(&out_shape)
}

/// Concatenate along `axis`.
pub fn concat<'t, F: Scalar>(axis: usize, parts: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let (value, sizes) = {
        let nodes = tape.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes");
        // `concatenate` does not promise standard layout; downstream
        // reshapes rely on it.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        (value, sizes)
    };
    push_op(
        tape,
        value,
        parts.iter().map(|p| p.id).collect(),
        Box::new(ConcatOp { axis, sizes }),
    )
}
