//! Convolution ops. All are channels-last; the 1-D and 2-D convolutions are
//! im2col + GEMM with the column matrix rebuilt during backward (never
//! stashed), which bounds memory at the cost of one extra im2col pass.

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

use super::ops::{accum, push_op};
use super::tape::{Backward, Var};
use super::Scalar;

/// Zero-padded 1-D convolution: `x [B, T, Cin]`, `w [K, Cin, Cout]`,
/// `b [Cout]` -> `[B, T_out, Cout]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
}

fn conv1d_cols<F: Scalar>(x: &ArrayViewD<'_, F>, k: usize, spec: &Conv1dSpec) -> Array2<F> {
    let (b, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t_out = (t + 2 * spec.padding - k) / spec.stride + 1;
    let mut cols = Array2::<F>::zeros((b * t_out, k * cin));
    for bi in 0..b {
        for to in 0..t_out {
            let row = bi * t_out + to;
            for ki in 0..k {
                let ti = (to * spec.stride + ki) as isize - spec.padding as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                for ci in 0..cin {
                    cols[[row, ki * cin + ci]] = x[[bi, ti as usize, ci]];
                }
            }
        }
    }
    cols
}

struct Conv1dOp {
    spec: Conv1dSpec,
}

impl<F: Scalar> Backward<F> for Conv1dOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let (x, w) = (parents[0], parents[1]);
        let (b, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout) = (w.shape()[0], w.shape()[2]);
        let t_out = grad.shape()[1];
        let gf = grad.view().into_shape_with_order((b * t_out, cout)).unwrap();

        if needs[2] {
            accum(&mut parent_grads[2], gf.sum_axis(Axis(0)).into_dyn());
        }
        if needs[1] {
            let cols = conv1d_cols(&x.view(), k, &self.spec);
            let dw = cols.t().dot(&gf);
            accum(
                &mut parent_grads[1],
                dw.into_shape_with_order(IxDyn(&[k, cin, cout])).unwrap(),
            );
        }
        if needs[0] {
            let wf = w.view().into_shape_with_order((k * cin, cout)).unwrap();
            let dcols = gf.dot(&wf.t());
            let mut dx = ArrayD::<F>::zeros(x.raw_dim());
            for bi in 0..b {
                for to in 0..t_out {
                    let row = bi * t_out + to;
                    for ki in 0..k {
                        let ti = (to * self.spec.stride + ki) as isize
                            - self.spec.padding as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            dx[[bi, ti as usize, ci]] += dcols[[row, ki * cin + ci]];
                        }
                    }
                }
            }
            accum(&mut parent_grads[0], dx);
        }
    }
}

pub fn conv1d<'t, F: Scalar>(
    x: Var<'t, F>,
    w: Var<'t, F>,
    b: Var<'t, F>,
    spec: Conv1dSpec,
) -> Var<'t, F> {
    let value = x.with_value(|xv| {
        w.with_value(|wv| {
            b.with_value(|bv| {
                assert_eq!(xv.ndim(), 3, "conv1d input [B, T, Cin]");
                assert_eq!(wv.ndim(), 3, "conv1d weight [K, Cin, Cout]");
                let (k, cin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                assert_eq!(xv.shape()[2], cin);
                assert_eq!(bv.len(), cout);
                let (bn, t) = (xv.shape()[0], xv.shape()[1]);
                assert!(t + 2 * spec.padding >= k, "conv1d input shorter than kernel");
                let t_out = (t + 2 * spec.padding - k) / spec.stride + 1;
                let cols = conv1d_cols(&xv.view(), k, &spec);
                let wf = wv.view().into_shape_with_order((k * cin, cout)).unwrap();
                let bf = bv.view().into_shape_with_order(cout).unwrap();
                let mut y = cols.dot(&wf);
                y += &bf;
                y.into_shape_with_order(IxDyn(&[bn, t_out, cout])).unwrap()
            })
        })
    });
    push_op(
        x.tape,
        value,
        vec![x.id, w.id, b.id],
        Box::new(Conv1dOp { spec }),
    )
}

/// Same-padded depthwise 1-D convolution: `x [B, T, C]`, `w [K, C]` with odd
/// `K`, stride 1.
struct DepthwiseConv1dOp;

impl<F: Scalar> Backward<F> for DepthwiseConv1dOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let (x, w) = (parents[0], parents[1]);
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[0];
        let pad = k / 2;
        let mut dx = needs[0].then(|| ArrayD::<F>::zeros(x.raw_dim()));
        let mut dw = needs[1].then(|| Array2::<F>::zeros((k, c)));
        let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
        for bi in 0..b {
            for to in 0..t {
                for ki in 0..k {
                    let ti = (to + ki) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let ti = ti as usize;
                    for ci in 0..c {
                        let g = grad[[bi, to, ci]];
                        if let Some(dx) = dx.as_mut() {
                            dx[[bi, ti, ci]] += g * w2[[ki, ci]];
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[[ki, ci]] += g * x[[bi, ti, ci]];
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            accum(&mut parent_grads[0], dx);
        }
        if let Some(dw) = dw {
            accum(&mut parent_grads[1], dw.into_dyn());
        }
    }
}

pub fn depthwise_conv1d<'t, F: Scalar>(x: Var<'t, F>, w: Var<'t, F>) -> Var<'t, F> {
    let value = x.with_value(|xv| {
        w.with_value(|wv| {
            assert_eq!(xv.ndim(), 3);
            assert_eq!(wv.ndim(), 2, "depthwise weight [K, C]");
            let (b, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let k = wv.shape()[0];
            assert_eq!(wv.shape()[1], c);
            assert_eq!(k % 2, 1, "depthwise kernel must be odd for same padding");
            let pad = k / 2;
            let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
            let mut y = ArrayD::<F>::zeros(IxDyn(&[b, t, c]));
            for bi in 0..b {
                for to in 0..t {
                    for ki in 0..k {
                        let ti = (to + ki) as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..c {
                            y[[bi, to, ci]] += xv[[bi, ti, ci]] * w2[[ki, ci]];
                        }
                    }
                }
            }
            y
        })
    });
    push_op(x.tape, value, vec![x.id, w.id], Box::new(DepthwiseConv1dOp))
}

/// Zero-padded 2-D convolution: `x [N, H, W, Cin]`, `w [Kh, Kw, Cin, Cout]`,
/// `b [Cout]`, square stride/padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Images per im2col chunk, sized so the column matrix stays tens of MB.
fn conv2d_chunk(ho: usize, wo: usize, patch: usize) -> usize {
    let per_image = ho * wo * patch;
    (4_000_000 / per_image.max(1)).max(1)
}

fn conv2d_cols<F: Scalar>(
    x: &ArrayViewD<'_, F>,
    n0: usize,
    n1: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
) -> Array2<F> {
    let (h, w, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
    let mut cols = Array2::<F>::zeros(((n1 - n0) * ho * wo, kh * kw * cin));
    for n in n0..n1 {
        for yo in 0..ho {
            for xo in 0..wo {
                let row = ((n - n0) * ho + yo) * wo + xo;
                for ky in 0..kh {
                    let yi = (yo * spec.stride + ky) as isize - spec.padding as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let xi = (xo * spec.stride + kx) as isize - spec.padding as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            cols[[row, (ky * kw + kx) * cin + ci]] =
                                x[[n, yi as usize, xi as usize, ci]];
                        }
                    }
                }
            }
        }
    }
    cols
}

struct Conv2dOp {
    spec: Conv2dSpec,
}

impl<F: Scalar> Backward<F> for Conv2dOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let (x, w) = (parents[0], parents[1]);
        let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let (ho, wo) = (grad.shape()[1], grad.shape()[2]);
        let patch = kh * kw * cin;
        let wf = w.view().into_shape_with_order((patch, cout)).unwrap();

        if needs[2] {
            let gf = grad.view().into_shape_with_order((n * ho * wo, cout)).unwrap();
            accum(&mut parent_grads[2], gf.sum_axis(Axis(0)).into_dyn());
        }

        let mut dw = needs[1].then(|| Array2::<F>::zeros((patch, cout)));
        let mut dx = needs[0].then(|| ArrayD::<F>::zeros(x.raw_dim()));
        let chunk = conv2d_chunk(ho, wo, patch);
        let mut n0 = 0;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let rows = (n1 - n0) * ho * wo;
            let gslice = grad
                .slice_axis(Axis(0), ndarray::Slice::from(n0..n1))
                .into_shape_with_order((rows, cout))
                .unwrap()
                .to_owned();
            if let Some(dw) = dw.as_mut() {
                let cols = conv2d_cols(&x.view(), n0, n1, kh, kw, &self.spec);
                *dw += &cols.t().dot(&gslice);
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = gslice.dot(&wf.t());
                for n in n0..n1 {
                    for yo in 0..ho {
                        for xo in 0..wo {
                            let row = ((n - n0) * ho + yo) * wo + xo;
                            for ky in 0..kh {
                                let yi = (yo * self.spec.stride + ky) as isize
                                    - self.spec.padding as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let xi = (xo * self.spec.stride + kx) as isize
                                        - self.spec.padding as isize;
                                    if xi < 0 || xi >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        dx[[n, yi as usize, xi as usize, ci]] +=
                                            dcols[[row, (ky * kw + kx) * cin + ci]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            n0 = n1;
        }
        if let Some(dw) = dw {
            accum(
                &mut parent_grads[1],
                dw.into_shape_with_order(IxDyn(&[kh, kw, cin, cout])).unwrap(),
            );
        }
        if let Some(dx) = dx {
            accum(&mut parent_grads[0], dx);
        }
    }
}

pub fn conv2d<'t, F: Scalar>(
    x: Var<'t, F>,
    w: Var<'t, F>,
    b: Var<'t, F>,
    spec: Conv2dSpec,
) -> Var<'t, F> {
    let value = x.with_value(|xv| {
        w.with_value(|wv| {
            b.with_value(|bv| {
                assert_eq!(xv.ndim(), 4, "conv2d input [N, H, W, Cin]");
                assert_eq!(wv.ndim(), 4, "conv2d weight [Kh, Kw, Cin, Cout]");
                let (kh, kw, cin, cout) =
                    (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                assert_eq!(xv.shape()[3], cin);
                assert_eq!(bv.len(), cout);
                let (n, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
                let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
                let patch = kh * kw * cin;
                let wf = wv.view().into_shape_with_order((patch, cout)).unwrap();
                let bf = bv.view().into_shape_with_order(cout).unwrap();
                let mut y = ArrayD::<F>::zeros(IxDyn(&[n, ho, wo, cout]));
                let chunk = conv2d_chunk(ho, wo, patch);
                let mut n0 = 0;
                while n0 < n {
                    let n1 = (n0 + chunk).min(n);
                    let cols = conv2d_cols(&xv.view(), n0, n1, kh, kw, &spec);
                    let mut yc = cols.dot(&wf);
                    yc += &bf;
                    y.slice_axis_mut(Axis(0), ndarray::Slice::from(n0..n1)).assign(
                        &yc.into_shape_with_order(IxDyn(&[n1 - n0, ho, wo, cout])).unwrap(),
                    );
                    n0 = n1;
                }
                y
            })
        })
    });
    push_op(
        x.tape,
        value,
        vec![x.id, w.id, b.id],
        Box::new(Conv2dOp { spec }),
    )
}

/// Max pooling over `[N, H, W, C]` with argmax routing in the backward pass.
struct MaxPool2dOp {
    argmax: Vec<u32>,
}

impl<F: Scalar> Backward<F> for MaxPool2dOp {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        _needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let x = parents[0];
        let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut dx = ArrayD::<F>::zeros(x.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        for (i, &g) in grad.iter().enumerate() {
            let n = i / (grad.len() / x.shape()[0]);
            let hw = self.argmax[i] as usize;
            let ci = i % c;
            dxs[((n * h * w) + hw) * c + ci] += g;
        }
        accum(&mut parent_grads[0], dx);
    }
}

pub fn maxpool2d<F: Scalar>(x: Var<'_, F>, k: usize, stride: usize, padding: usize) -> Var<'_, F> {
    let (value, argmax) = x.with_value(|xv| {
        assert_eq!(xv.ndim(), 4);
        let (n, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let mut y = ArrayD::<F>::zeros(IxDyn(&[n, ho, wo, c]));
        let mut argmax = vec![0u32; n * ho * wo * c];
        for ni in 0..n {
            for yo in 0..ho {
                for xo in 0..wo {
                    for ci in 0..c {
                        let mut best = F::neg_infinity();
                        let mut best_pos = 0u32;
                        for ky in 0..k {
                            let yi = (yo * stride + ky) as isize - padding as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xi = (xo * stride + kx) as isize - padding as isize;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let v = xv[[ni, yi as usize, xi as usize, ci]];
                                if v > best {
                                    best = v;
                                    best_pos = (yi as usize * w + xi as usize) as u32;
                                }
                            }
                        }
                        y[[ni, yo, xo, ci]] = best;
                        argmax[((ni * ho + yo) * wo + xo) * c + ci] = best_pos;
                    }
                }
            }
        }
        (y, argmax)
    });
    push_op(x.tape, value, vec![x.id], Box::new(MaxPool2dOp { argmax }))
}

/// Global average pool over the two spatial axes of `[N, H, W, C]`.
pub fn global_avg_pool2d<'t, F: Scalar>(x: Var<'t, F>) -> Var<'t, F> {
    x.mean_axis(1).mean_axis(1)
}
