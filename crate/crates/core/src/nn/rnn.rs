//! GRU as a single composite op with hand-rolled BPTT. Gate activations are
//! stashed at forward time so the backward walk is a pure replay.
//!
//! Gate math (reset gate applied to the previous state before the recurrent
//! product):
//!
//! ```text
//! z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
//! r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
//! n_t = tanh  (x_t Wn + (r_t * h_{t-1}) Un + bn)
//! h_t = (1 - z_t) * n_t + z_t * h_{t-1}
//! ```
//!
//! Weight layout: `w [Cin, 3H]`, `u [H, 3H]`, `b [3H]`, gate order `z, r, n`.

use ndarray::{s, Array2, Array3, ArrayD, Ix2};

use super::ops::{accum, push_op};
use super::tape::{Backward, Var};
use super::Scalar;

struct GruOp<F> {
    /// Stashed per-step activations, each `[T, B, H]`.
    z: Array3<F>,
    r: Array3<F>,
    n: Array3<F>,
    h: Array3<F>,
}

impl<F: Scalar> Backward<F> for GruOp<F> {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        _output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    ) {
        let (x, w, u) = (parents[0], parents[1], parents[2]);
        let (b, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hid = self.h.shape()[2];
        let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
        let u2 = u.view().into_dimensionality::<Ix2>().unwrap();

        let mut dx = needs[0].then(|| Array3::<F>::zeros((b, t, cin)));
        let mut dw = needs[1].then(|| Array2::<F>::zeros((cin, 3 * hid)));
        let mut du = needs[2].then(|| Array2::<F>::zeros((hid, 3 * hid)));
        let mut db = needs[3].then(|| ndarray::Array1::<F>::zeros(3 * hid));

        let one = F::one();
        let mut dh = Array2::<F>::zeros((b, hid));
        for ti in (0..t).rev() {
            for bi in 0..b {
                for hi in 0..hid {
                    dh[[bi, hi]] += grad[[bi, ti, hi]];
                }
            }
            let z = self.z.index_axis(ndarray::Axis(0), ti);
            let r = self.r.index_axis(ndarray::Axis(0), ti);
            let n = self.n.index_axis(ndarray::Axis(0), ti);
            let h_prev: Array2<F> = if ti == 0 {
                Array2::zeros((b, hid))
            } else {
                self.h.index_axis(ndarray::Axis(0), ti - 1).to_owned()
            };

            // Gate pre-activation gradients, concatenated [B, 3H].
            let mut da = Array2::<F>::zeros((b, 3 * hid));
            let mut dh_prev = Array2::<F>::zeros((b, hid));
            for bi in 0..b {
                for hi in 0..hid {
                    let dhv = dh[[bi, hi]];
                    let zv = z[[bi, hi]];
                    let nv = n[[bi, hi]];
                    let dz = dhv * (h_prev[[bi, hi]] - nv);
                    let dn = dhv * (one - zv);
                    da[[bi, hi]] = dz * zv * (one - zv);
                    da[[bi, 2 * hid + hi]] = dn * (one - nv * nv);
                    dh_prev[[bi, hi]] = dhv * zv;
                }
            }
            // Reset-gate path needs da_n first: d(r*h) = da_n Un^T.
            let da_n = da.slice(s![.., 2 * hid..]).to_owned();
            let d_rh = da_n.dot(&u2.slice(s![.., 2 * hid..]).t());
            for bi in 0..b {
                for hi in 0..hid {
                    let rv = r[[bi, hi]];
                    let dr = d_rh[[bi, hi]] * h_prev[[bi, hi]];
                    da[[bi, hid + hi]] = dr * rv * (one - rv);
                    dh_prev[[bi, hi]] += d_rh[[bi, hi]] * rv;
                }
            }
            dh_prev += &da.slice(s![.., ..2 * hid]).dot(&u2.slice(s![.., ..2 * hid]).t());

            let xt = x
                .index_axis(ndarray::Axis(1), ti)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            if let Some(dx) = dx.as_mut() {
                let dxt = da.dot(&w2.t());
                dx.index_axis_mut(ndarray::Axis(1), ti).assign(&dxt);
            }
            if let Some(dw) = dw.as_mut() {
                *dw += &xt.t().dot(&da);
            }
            if let Some(du) = du.as_mut() {
                let mut du_zr = du.slice_mut(s![.., ..2 * hid]);
                du_zr += &h_prev.t().dot(&da.slice(s![.., ..2 * hid]));
                let rh = &r.to_owned() * &h_prev;
                let mut du_n = du.slice_mut(s![.., 2 * hid..]);
                du_n += &rh.t().dot(&da_n);
            }
            if let Some(db) = db.as_mut() {
                *db += &da.sum_axis(ndarray::Axis(0));
            }
            dh = dh_prev;
        }

        if let Some(dx) = dx {
            accum(&mut parent_grads[0], dx.into_dyn());
        }
        if let Some(dw) = dw {
            accum(&mut parent_grads[1], dw.into_dyn());
        }
        if let Some(du) = du {
            accum(&mut parent_grads[2], du.into_dyn());
        }
        if let Some(db) = db {
            accum(&mut parent_grads[3], db.into_dyn());
        }
    }
}

/// Runs a GRU over `x [B, T, Cin]`, returning all hidden states `[B, T, H]`.
pub fn gru<'t, F: Scalar>(
    x: Var<'t, F>,
    w: Var<'t, F>,
    u: Var<'t, F>,
    b: Var<'t, F>,
) -> Var<'t, F> {
    let (value, op) = x.with_value(|xv| {
        w.with_value(|wv| {
            u.with_value(|uv| {
                b.with_value(|bv| {
                    assert_eq!(xv.ndim(), 3, "gru input [B, T, Cin]");
                    let (bn, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let hid = uv.shape()[0];
                    assert_eq!(wv.shape(), [cin, 3 * hid]);
                    assert_eq!(uv.shape(), [hid, 3 * hid]);
                    assert_eq!(bv.shape(), [3 * hid]);
                    let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                    let u2 = uv.view().into_dimensionality::<Ix2>().unwrap();
                    let b1 = bv.view().into_shape_with_order(3 * hid).unwrap();

                    // Input projections for every step in one product.
                    let xf = xv.view().into_shape_with_order((bn * t, cin)).unwrap();
                    let xw = xf.dot(&w2);

                    let mut z = Array3::<F>::zeros((t, bn, hid));
                    let mut r = Array3::<F>::zeros((t, bn, hid));
                    let mut n = Array3::<F>::zeros((t, bn, hid));
                    let mut h = Array3::<F>::zeros((t, bn, hid));
                    let mut h_prev = Array2::<F>::zeros((bn, hid));
                    let one = F::one();
                    for ti in 0..t {
                        let hu = h_prev.dot(&u2.slice(s![.., ..2 * hid]));
                        for bi in 0..bn {
                            for hi in 0..hid {
                                let row = bi * t + ti;
                                let az = xw[[row, hi]] + hu[[bi, hi]] + b1[hi];
                                let ar = xw[[row, hid + hi]] + hu[[bi, hid + hi]] + b1[hid + hi];
                                z[[ti, bi, hi]] = one / (one + (-az).exp());
                                r[[ti, bi, hi]] = one / (one + (-ar).exp());
                            }
                        }
                        let rh = &r.index_axis(ndarray::Axis(0), ti).to_owned() * &h_prev;
                        let rhu = rh.dot(&u2.slice(s![.., 2 * hid..]));
                        for bi in 0..bn {
                            for hi in 0..hid {
                                let row = bi * t + ti;
                                let an = xw[[row, 2 * hid + hi]] + rhu[[bi, hi]] + b1[2 * hid + hi];
                                let nv = an.tanh();
                                n[[ti, bi, hi]] = nv;
                                let zv = z[[ti, bi, hi]];
                                let hv = (one - zv) * nv + zv * h_prev[[bi, hi]];
                                h[[ti, bi, hi]] = hv;
                            }
                        }
                        h_prev.assign(&h.index_axis(ndarray::Axis(0), ti));
                    }

                    let mut out = Array3::<F>::zeros((bn, t, hid));
                    for ti in 0..t {
                        for bi in 0..bn {
                            for hi in 0..hid {
                                out[[bi, ti, hi]] = h[[ti, bi, hi]];
                            }
                        }
                    }
                    (out.into_dyn(), GruOp { z, r, n, h })
                })
            })
        })
    });
    push_op(
        x.tape,
        value,
        vec![x.id, w.id, u.id, b.id],
        Box::new(op),
    )
}
