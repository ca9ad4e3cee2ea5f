//! Differentiable operations recorded on the [`Tape`].
//!
//! Shape mismatches inside the graph are programming errors and panic;
//! user-facing validation happens at model boundaries.

use super::kernels::{
    binomial_taps, blur_backward, blur_forward, conv2d_backward, conv2d_forward,
    convt2d_backward, convt2d_forward, Pad,
};
use super::{accumulate, BackFn, Tape, Var};
use crate::fourier;
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn, s};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn view4<S: Scalar>(a: &ArrayD<S>) -> ArrayView4<'_, S> {
    a.view()
        .into_dimensionality()
        .expect("expected a rank-4 tensor")
}

fn view3<S: Scalar>(a: &ArrayD<S>) -> ArrayView3<'_, S> {
    a.view()
        .into_dimensionality()
        .expect("expected a rank-3 tensor")
}

fn view2<S: Scalar>(a: &ArrayD<S>) -> ArrayView2<'_, S> {
    a.view()
        .into_dimensionality()
        .expect("expected a rank-2 tensor")
}

fn view1<S: Scalar>(a: &ArrayD<S>) -> ArrayView1<'_, S> {
    a.view()
        .into_dimensionality()
        .expect("expected a rank-1 tensor")
}

fn scalar_of<S: Scalar>(a: &ArrayD<S>) -> S {
    debug_assert_eq!(a.len(), 1);
    *a.iter().next().expect("scalar node is non-empty")
}

/// Twiddle matrices for a half-plane 2-D DFT of `H×W` planes, shared by the
/// forward op and its backward closure.
#[derive(Clone)]
pub struct DftPlan<S: Scalar> {
    pub h: usize,
    pub w: usize,
    /// `[H, H]` row cosines / sines.
    pub ch: Arc<Array2<S>>,
    pub sh: Arc<Array2<S>>,
    /// `[W/2+1, W]` column cosines / sines (half plane).
    pub cw: Arc<Array2<S>>,
    pub sw: Arc<Array2<S>>,
}

impl<S: Scalar> DftPlan<S> {
    pub fn new(h: usize, w: usize) -> Self {
        let (ch, sh) = fourier::full_twiddles::<S>(h);
        let (cw, sw) = fourier::half_twiddles::<S>(w);
        DftPlan {
            h,
            w,
            ch: Arc::new(ch),
            sh: Arc::new(sh),
            cw: Arc::new(cw),
            sw: Arc::new(sw),
        }
    }

    /// Retained column frequencies: `W/2 + 1`.
    pub fn cols(&self) -> usize {
        self.w / 2 + 1
    }
}

impl<S: Scalar> Tape<S> {
    // ----- elementwise arithmetic -------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| av + bv));
        let ng = self.any_needs_grad(&[a, b]);
        let back: Option<BackFn<S>> = if ng {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            Some(Box::new(move |g, _vals, grads| {
                if na {
                    accumulate(grads, a.id(), g.clone());
                }
                if nb {
                    accumulate(grads, b.id(), g.clone());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| av - bv));
        let ng = self.any_needs_grad(&[a, b]);
        let back: Option<BackFn<S>> = if ng {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            Some(Box::new(move |g, _vals, grads| {
                if na {
                    accumulate(grads, a.id(), g.clone());
                }
                if nb {
                    accumulate(grads, b.id(), g.mapv(|v| -v));
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| self.with_value(b, |bv| av * bv));
        let ng = self.any_needs_grad(&[a, b]);
        let back: Option<BackFn<S>> = if ng {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            Some(Box::new(move |g, vals, grads| {
                if na {
                    accumulate(grads, a.id(), g * &vals[b.id()]);
                }
                if nb {
                    accumulate(grads, b.id(), g * &vals[a.id()]);
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// `y = scale * x + shift` with scalar constants.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let (sc, sh) = (S::from_f64(scale), S::from_f64(shift));
        let out = self.with_value(x, |xv| xv.mapv(|v| sc * v + sh));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, _vals, grads| {
                accumulate(grads, x.id(), g.mapv(|v| v * sc));
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Elementwise product with a constant array (e.g. a fixed mask).
    pub fn mul_const(&self, x: Var, c: ArrayD<S>) -> Var {
        let out = self.with_value(x, |xv| xv * &c);
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, _vals, grads| {
                accumulate(grads, x.id(), g * &c);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// `y = x / s` for a scalar node `s` (spectral normalization divide).
    /// Gradients flow into both the tensor and the divisor.
    pub fn scale_recip(&self, x: Var, s_var: Var) -> Var {
        let sv = self.with_value(s_var, scalar_of);
        let out = self.with_value(x, |xv| xv.mapv(|v| v / sv));
        let ng = self.any_needs_grad(&[x, s_var]);
        let back: Option<BackFn<S>> = if ng {
            let (nx, ns) = (self.needs_grad(x), self.needs_grad(s_var));
            Some(Box::new(move |g, vals, grads| {
                if nx {
                    accumulate(grads, x.id(), g.mapv(|v| v / sv));
                }
                if ns {
                    let xv = &vals[x.id()];
                    let dot = g
                        .iter()
                        .zip(xv.iter())
                        .fold(S::zero(), |acc, (&gv, &xvv)| acc + gv * xvv);
                    let ds = -dot / (sv * sv);
                    accumulate(grads, s_var.id(), ArrayD::from_elem(IxDyn(&[]), ds));
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    // ----- elementwise nonlinearities ---------------------------------------

    pub fn abs(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(|v| v.abs()));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let xv = &vals[x.id()];
                let mut dx = g.clone();
                // sign(0) = 0: the subgradient convention the loss contracts pin.
                dx.zip_mut_with(xv, |gv, &v| {
                    *gv = if v > S::zero() {
                        *gv
                    } else if v < S::zero() {
                        -*gv
                    } else {
                        S::zero()
                    }
                });
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn square(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(|v| v * v));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let two = S::from_f64(2.0);
            Some(Box::new(move |g, vals, grads| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[x.id()], |gv, &v| *gv = *gv * two * v);
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// `sqrt(max(x, 0))` with gradient forced to zero at `x <= 0`, so
    /// amplitude terms stay finite at spectrum zeros.
    pub fn sqrt_guard(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(|v| v.max(S::zero()).sqrt()));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let out_id_pending = self.len(); // id this node will get
            let half = S::from_f64(0.5);
            Some(Box::new(move |g, vals, grads| {
                let yv = &vals[out_id_pending];
                let mut dx = g.clone();
                dx.zip_mut_with(yv, |gv, &y| {
                    *gv = if y > S::zero() { *gv * half / y } else { S::zero() }
                });
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(|v| v.tanh()));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let out_id = self.len();
            Some(Box::new(move |g, vals, grads| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[out_id], |gv, &y| *gv = *gv * (S::one() - y * y));
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let a = S::from_f64(slope);
        let out = self.with_value(x, |xv| {
            xv.mapv(|v| if v > S::zero() { v } else { a * v })
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[x.id()], |gv, &v| {
                    if v <= S::zero() {
                        *gv = *gv * a;
                    }
                });
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `x * sigmoid(x)` (SiLU / swish).
    pub fn silu(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| xv.mapv(|v| v * stable_sigmoid(v)));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[x.id()], |gv, &v| {
                    let sig = stable_sigmoid(v);
                    *gv = *gv * (sig * (S::one() + v * (S::one() - sig)));
                });
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Numerically stable `ln(1 + exp(x)) = max(x, 0) + ln(1 + exp(-|x|))`.
    pub fn softplus(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| {
            xv.mapv(|v| v.max(S::zero()) + (S::one() + (-v.abs()).exp()).ln())
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let mut dx = g.clone();
                dx.zip_mut_with(&vals[x.id()], |gv, &v| *gv = *gv * stable_sigmoid(v));
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Wraps angles to `(-π, π]`: `x - 2π·round(x / 2π)`. The correction is
    /// piecewise constant, so the gradient passes through unchanged.
    pub fn wrap_angle(&self, x: Var) -> Var {
        let two_pi = S::from_f64(2.0 * std::f64::consts::PI);
        let out = self.with_value(x, |xv| {
            xv.mapv(|v| v - two_pi * (v / two_pi).round())
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, _vals, grads| {
                accumulate(grads, x.id(), g.clone());
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Elementwise `atan2(y_im, x_re)` with gradient pinned to zero at the
    /// origin (where the true derivative is undefined).
    pub fn atan2(&self, im: Var, re: Var) -> Var {
        let out = self.with_value(im, |iv| {
            self.with_value(re, |rv| {
                let mut o = iv.clone();
                o.zip_mut_with(rv, |a, &b| *a = a.atan2(b));
                o
            })
        });
        let ng = self.any_needs_grad(&[im, re]);
        let back: Option<BackFn<S>> = if ng {
            let (ni, nr) = (self.needs_grad(im), self.needs_grad(re));
            Some(Box::new(move |g, vals, grads| {
                let iv = &vals[im.id()];
                let rv = &vals[re.id()];
                if ni {
                    let mut di = g.clone();
                    let mut it = rv.iter().zip(iv.iter());
                    di.map_inplace(|gv| {
                        let (&r, &i) = it.next().expect("same length");
                        let den = r * r + i * i;
                        *gv = if den > S::zero() { *gv * r / den } else { S::zero() };
                    });
                    accumulate(grads, im.id(), di);
                }
                if nr {
                    let mut dr = g.clone();
                    let mut it = rv.iter().zip(iv.iter());
                    dr.map_inplace(|gv| {
                        let (&r, &i) = it.next().expect("same length");
                        let den = r * r + i * i;
                        *gv = if den > S::zero() { -*gv * i / den } else { S::zero() };
                    });
                    accumulate(grads, re.id(), dr);
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    // ----- reductions -------------------------------------------------------

    pub fn sum_all(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| ArrayD::from_elem(IxDyn(&[]), xv.sum()));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let gv = scalar_of(g);
                accumulate(
                    grads,
                    x.id(),
                    ArrayD::from_elem(vals[x.id()].raw_dim(), gv),
                );
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.with_value(x, |xv| xv.len());
        let out = self.with_value(x, |xv| {
            ArrayD::from_elem(IxDyn(&[]), xv.sum() / S::from_f64(n as f64))
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let gv = scalar_of(g) / S::from_f64(n as f64);
                accumulate(
                    grads,
                    x.id(),
                    ArrayD::from_elem(vals[x.id()].raw_dim(), gv),
                );
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Per-sample flattened L2 norm: `[N, ...] → [N]`. Gradient is zero for a
    /// sample whose norm is exactly zero.
    pub fn l2_norm_rows(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| {
            let n = xv.shape()[0];
            let flat = xv.view().into_shape_with_order((n, xv.len() / n)).unwrap();
            let mut o = ArrayD::zeros(IxDyn(&[n]));
            for (i, row) in flat.outer_iter().enumerate() {
                o[[i]] = row.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
            }
            o
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let out_id = self.len();
            Some(Box::new(move |g, vals, grads| {
                let xv = &vals[x.id()];
                let yv = &vals[out_id];
                let n = xv.shape()[0];
                let m = xv.len() / n;
                let mut dx = ArrayD::zeros(xv.raw_dim());
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let xs = xv.as_slice().expect("standard layout");
                    for i in 0..n {
                        let norm = yv[[i]];
                        if norm > S::zero() {
                            let scale = g[[i]] / norm;
                            for j in 0..m {
                                dxs[i * m + j] = xs[i * m + j] * scale;
                            }
                        }
                    }
                }
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    // ----- shape ops --------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = self.with_value(x, |xv| {
            debug_assert_eq!(xv.len(), shape.iter().product::<usize>());
            xv.clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: values are standard layout")
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let dx = g
                    .clone()
                    .into_shape_with_order(vals[x.id()].raw_dim())
                    .expect("reshape backward");
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// `[B, M, N] → [B, N, M]`.
    pub fn transpose_last2(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| {
            let v = view3(xv);
            let t = v.permuted_axes([0, 2, 1]);
            t.as_standard_layout().to_owned().into_dyn()
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, _vals, grads| {
                let gv = view3(g);
                let t = gv.permuted_axes([0, 2, 1]);
                accumulate(grads, x.id(), t.as_standard_layout().to_owned().into_dyn());
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let out = {
            let inner_parts: Vec<ArrayD<S>> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = inner_parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_channels shape mismatch")
        };
        let ng = self.any_needs_grad(parts);
        let back: Option<BackFn<S>> = if ng {
            let parts: Vec<Var> = parts.to_vec();
            let needs: Vec<bool> = parts.iter().map(|&p| self.needs_grad(p)).collect();
            Some(Box::new(move |g, vals, grads| {
                let mut c0 = 0usize;
                for (p, need) in parts.iter().zip(needs.iter()) {
                    let c = vals[p.id()].shape()[1];
                    if *need {
                        let gp = g
                            .slice_axis(Axis(1), ndarray::Slice::from(c0..c0 + c))
                            .to_owned();
                        accumulate(grads, p.id(), gp);
                    }
                    c0 += c;
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn slice_channels(&self, x: Var, c0: usize, c1: usize) -> Var {
        let out = self.with_value(x, |xv| {
            xv.slice_axis(Axis(1), ndarray::Slice::from(c0..c1)).to_owned()
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let mut dx = ArrayD::zeros(vals[x.id()].raw_dim());
                dx.slice_axis_mut(Axis(1), ndarray::Slice::from(c0..c1))
                    .assign(g);
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Spatial crop of a `[N, C, H, W]` tensor.
    pub fn slice_hw(&self, x: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Var {
        let out = self.with_value(x, |xv| {
            view4(xv).slice(s![.., .., r0..r1, c0..c1]).to_owned().into_dyn()
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, vals, grads| {
                let mut dx = ArrayD::<S>::zeros(vals[x.id()].raw_dim());
                {
                    let mut dx4 = dx
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("rank-4");
                    dx4.slice_mut(s![.., .., r0..r1, c0..c1]).assign(&view4(g));
                }
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    // ----- linear algebra ---------------------------------------------------

    /// `y = x·w + b` for `x: [N, F]`, `w: [F, G]`, `b: [G]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let out = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    let x2 = view2(xv);
                    let w2 = view2(wv);
                    let b1 = view1(bv);
                    let mut y = x2.dot(&w2);
                    for mut row in y.rows_mut() {
                        row += &b1;
                    }
                    y.into_dyn()
                })
            })
        });
        let ng = self.any_needs_grad(&[x, w, b]);
        let back: Option<BackFn<S>> = if ng {
            let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
            Some(Box::new(move |g, vals, grads| {
                let g2 = view2(g);
                if nx {
                    let w2 = view2(&vals[w.id()]);
                    accumulate(grads, x.id(), g2.dot(&w2.t()).into_dyn());
                }
                if nw {
                    let x2 = view2(&vals[x.id()]);
                    accumulate(grads, w.id(), x2.t().dot(&g2).into_dyn());
                }
                if nb {
                    accumulate(grads, b.id(), g2.sum_axis(Axis(0)).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Batched matmul: `[B, M, K] · [B, K, N] → [B, M, N]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let out = self.with_value(a, |av| {
            self.with_value(b, |bv| {
                let a3 = view3(av);
                let b3 = view3(bv);
                let (bs, m, _k) = a3.dim();
                let n = b3.dim().2;
                let mut y = ndarray::Array3::<S>::zeros((bs, m, n));
                for i in 0..bs {
                    let mut yi = y.index_axis_mut(Axis(0), i);
                    general_mat_mul(
                        S::one(),
                        &a3.index_axis(Axis(0), i),
                        &b3.index_axis(Axis(0), i),
                        S::zero(),
                        &mut yi,
                    );
                }
                y.into_dyn()
            })
        });
        let ng = self.any_needs_grad(&[a, b]);
        let back: Option<BackFn<S>> = if ng {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            Some(Box::new(move |g, vals, grads| {
                let g3 = view3(g);
                let a3 = view3(&vals[a.id()]);
                let b3 = view3(&vals[b.id()]);
                let bs = g3.dim().0;
                if na {
                    let mut da = ndarray::Array3::<S>::zeros(a3.dim());
                    for i in 0..bs {
                        let mut di = da.index_axis_mut(Axis(0), i);
                        general_mat_mul(
                            S::one(),
                            &g3.index_axis(Axis(0), i),
                            &b3.index_axis(Axis(0), i).t(),
                            S::zero(),
                            &mut di,
                        );
                    }
                    accumulate(grads, a.id(), da.into_dyn());
                }
                if nb {
                    let mut db = ndarray::Array3::<S>::zeros(b3.dim());
                    for i in 0..bs {
                        let mut di = db.index_axis_mut(Axis(0), i);
                        general_mat_mul(
                            S::one(),
                            &a3.index_axis(Axis(0), i).t(),
                            &g3.index_axis(Axis(0), i),
                            S::zero(),
                            &mut di,
                        );
                    }
                    accumulate(grads, b.id(), db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let out = self.with_value(x, |xv| {
            let l = *xv.shape().last().expect("non-scalar");
            let mut y = xv.clone();
            for lane in y.as_slice_mut().unwrap().chunks_exact_mut(l) {
                let mx = lane.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                let mut sum = S::zero();
                for v in lane.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in lane.iter_mut() {
                    *v = *v / sum;
                }
            }
            y
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let out_id = self.len();
            Some(Box::new(move |g, vals, grads| {
                let yv = &vals[out_id];
                let l = *yv.shape().last().unwrap();
                let mut dx = g.clone();
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let ys = yv.as_slice().unwrap();
                    for (dl, yl) in dxs.chunks_exact_mut(l).zip(ys.chunks_exact(l)) {
                        let dot = dl
                            .iter()
                            .zip(yl.iter())
                            .fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                        for (d, &y) in dl.iter_mut().zip(yl.iter()) {
                            *d = y * (*d - dot);
                        }
                    }
                }
                accumulate(grads, x.id(), dx);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    // ----- neural-net layers ------------------------------------------------

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: Pad) -> Var {
        let out = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    conv2d_forward(&view4(xv), &view4(wv), &view1(bv), stride, pad).into_dyn()
                })
            })
        });
        let ng = self.any_needs_grad(&[x, w, b]);
        let back: Option<BackFn<S>> = if ng {
            let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
            Some(Box::new(move |g, vals, grads| {
                let (dx, dw, db) = conv2d_backward(
                    &view4(g),
                    &view4(&vals[x.id()]),
                    &view4(&vals[w.id()]),
                    stride,
                    pad,
                    nx,
                    nw,
                );
                if let (true, Some(dx)) = (nx, dx) {
                    accumulate(grads, x.id(), dx.into_dyn());
                }
                if let (true, Some(dw)) = (nw, dw) {
                    accumulate(grads, w.id(), dw.into_dyn());
                }
                if nb {
                    accumulate(grads, b.id(), db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Var, stride: usize, p: usize) -> Var {
        let out = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    convt2d_forward(&view4(xv), &view4(wv), &view1(bv), stride, p).into_dyn()
                })
            })
        });
        let ng = self.any_needs_grad(&[x, w, b]);
        let back: Option<BackFn<S>> = if ng {
            let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
            Some(Box::new(move |g, vals, grads| {
                let (dx, dw, db) = convt2d_backward(
                    &view4(g),
                    &view4(&vals[x.id()]),
                    &view4(&vals[w.id()]),
                    stride,
                    p,
                    nx,
                    nw,
                );
                if let (true, Some(dx)) = (nx, dx) {
                    accumulate(grads, x.id(), dx.into_dyn());
                }
                if let (true, Some(dw)) = (nw, dw) {
                    accumulate(grads, w.id(), dw.into_dyn());
                }
                if nb {
                    accumulate(grads, b.id(), db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Anti-aliased downsampling: reflect pad, separable binomial taps,
    /// stride `s`. The taps are fixed, not learned.
    pub fn blurpool(&self, x: Var, kernel_size: usize, stride: usize) -> Var {
        let taps: Vec<S> = binomial_taps(kernel_size);
        let (in_h, in_w) = self.with_value(x, |xv| {
            let d = xv.shape();
            (d[2], d[3])
        });
        let out = self.with_value(x, |xv| {
            blur_forward(&view4(xv), &taps, stride).into_dyn()
        });
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, _vals, grads| {
                let dx = blur_backward(&view4(g), in_h, in_w, &taps, stride);
                accumulate(grads, x.id(), dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Instance normalization over spatial dims with learnable per-channel
    /// scale and shift.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let epss = S::from_f64(eps);
        let (out, mean, istd) = self.with_value(x, |xv| {
            self.with_value(gamma, |gv| {
                self.with_value(beta, |bv| {
                    let x4 = view4(xv);
                    let (n, c, h, w) = x4.dim();
                    let m = S::from_f64((h * w) as f64);
                    let mut y = ndarray::Array4::<S>::zeros((n, c, h, w));
                    let mut mean = Array2::<S>::zeros((n, c));
                    let mut istd = Array2::<S>::zeros((n, c));
                    for ni in 0..n {
                        for ci in 0..c {
                            let plane = x4.index_axis(Axis(0), ni);
                            let plane = plane.index_axis(Axis(0), ci);
                            let mu = plane.sum() / m;
                            let var = plane
                                .iter()
                                .fold(S::zero(), |acc, &v| acc + (v - mu) * (v - mu))
                                / m;
                            let is = S::one() / (var + epss).sqrt();
                            mean[[ni, ci]] = mu;
                            istd[[ni, ci]] = is;
                            let (ga, be) = (view1(gv)[ci], view1(bv)[ci]);
                            let mut out_plane = y.index_axis_mut(Axis(0), ni);
                            let mut out_plane = out_plane.index_axis_mut(Axis(0), ci);
                            for (o, &v) in out_plane.iter_mut().zip(plane.iter()) {
                                *o = ga * (v - mu) * is + be;
                            }
                        }
                    }
                    (y.into_dyn(), mean, istd)
                })
            })
        });
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        let back: Option<BackFn<S>> = if ng {
            let (nx, ngam, nbet) = (
                self.needs_grad(x),
                self.needs_grad(gamma),
                self.needs_grad(beta),
            );
            Some(Box::new(move |g, vals, grads| {
                let g4 = view4(g);
                let x4 = view4(&vals[x.id()]);
                let gam = view1(&vals[gamma.id()]);
                let (n, c, h, w) = x4.dim();
                let m = S::from_f64((h * w) as f64);
                let mut dx = ndarray::Array4::<S>::zeros((n, c, h, w));
                let mut dgam = ndarray::Array1::<S>::zeros(c);
                let mut dbet = ndarray::Array1::<S>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g4.index_axis(Axis(0), ni);
                        let gp = gp.index_axis(Axis(0), ci);
                        let xp = x4.index_axis(Axis(0), ni);
                        let xp = xp.index_axis(Axis(0), ci);
                        let (mu, is) = (mean[[ni, ci]], istd[[ni, ci]]);
                        let mut gsum = S::zero();
                        let mut gxhat = S::zero();
                        for (&gv, &xv) in gp.iter().zip(xp.iter()) {
                            let xhat = (xv - mu) * is;
                            gsum += gv;
                            gxhat += gv * xhat;
                        }
                        if nbet {
                            dbet[ci] += gsum;
                        }
                        if ngam {
                            dgam[ci] += gxhat;
                        }
                        if nx {
                            let ga = gam[ci];
                            let mut dp = dx.index_axis_mut(Axis(0), ni);
                            let mut dp = dp.index_axis_mut(Axis(0), ci);
                            for ((d, &gv), &xv) in
                                dp.iter_mut().zip(gp.iter()).zip(xp.iter())
                            {
                                let xhat = (xv - mu) * is;
                                *d = ga * is * (gv - gsum / m - xhat * gxhat / m);
                            }
                        }
                    }
                }
                if nx {
                    accumulate(grads, x.id(), dx.into_dyn());
                }
                if ngam {
                    accumulate(grads, gamma.id(), dgam.into_dyn());
                }
                if nbet {
                    accumulate(grads, beta.id(), dbet.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Inverted dropout with a mask drawn from `rng` at record time.
    /// Identity when `p == 0`.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        if p == 0.0 {
            return x;
        }
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        let scale = S::from_f64(1.0 / (1.0 - p));
        let mask = self.with_value(x, |xv| {
            ArrayD::from_shape_simple_fn(xv.raw_dim(), || {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    scale
                }
            })
        });
        let out = self.with_value(x, |xv| xv * &mask);
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            Some(Box::new(move |g, _vals, grads| {
                accumulate(grads, x.id(), g * &mask);
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Adds a per-(sample, channel) vector to every spatial position:
    /// `y[n,c,h,w] = x[n,c,h,w] + e[n,c]`.
    pub fn add_chan_vec(&self, x: Var, e: Var) -> Var {
        let out = self.with_value(x, |xv| {
            self.with_value(e, |ev| {
                let x4 = view4(xv);
                let e2 = view2(ev);
                let (n, c, h, w) = x4.dim();
                let mut y = x4.to_owned();
                for ni in 0..n {
                    for ci in 0..c {
                        let add = e2[[ni, ci]];
                        let mut plane = y.index_axis_mut(Axis(0), ni);
                        let mut plane = plane.index_axis_mut(Axis(0), ci);
                        plane.mapv_inplace(|v| v + add);
                        let _ = (h, w);
                    }
                }
                y.into_dyn()
            })
        });
        let ng = self.any_needs_grad(&[x, e]);
        let back: Option<BackFn<S>> = if ng {
            let (nx, ne) = (self.needs_grad(x), self.needs_grad(e));
            Some(Box::new(move |g, _vals, grads| {
                if nx {
                    accumulate(grads, x.id(), g.clone());
                }
                if ne {
                    let g4 = view4(g);
                    let (n, c, _, _) = g4.dim();
                    let mut de = Array2::<S>::zeros((n, c));
                    for ni in 0..n {
                        for ci in 0..c {
                            de[[ni, ci]] = g4
                                .index_axis(Axis(0), ni)
                                .index_axis(Axis(0), ci)
                                .sum();
                        }
                    }
                    accumulate(grads, e.id(), de.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    // ----- Fourier ops ------------------------------------------------------

    /// Real part of the half-plane 2-D DFT of each `[H, W]` plane:
    /// `[N, C, H, W] → [N, C, H, W/2+1]`.
    pub fn dft_re(&self, x: Var, plan: &DftPlan<S>) -> Var {
        let plan = plan.clone();
        let out = self.with_value(x, |xv| dft_planes(xv, &plan, DftPart::Re));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let plan = plan.clone();
            Some(Box::new(move |g, _vals, grads| {
                accumulate(grads, x.id(), dft_planes_adjoint(g, &plan, DftPart::Re));
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }

    /// Imaginary part of the half-plane 2-D DFT of each plane.
    pub fn dft_im(&self, x: Var, plan: &DftPlan<S>) -> Var {
        let plan = plan.clone();
        let out = self.with_value(x, |xv| dft_planes(xv, &plan, DftPart::Im));
        let ng = self.needs_grad(x);
        let back: Option<BackFn<S>> = if ng {
            let plan = plan.clone();
            Some(Box::new(move |g, _vals, grads| {
                accumulate(grads, x.id(), dft_planes_adjoint(g, &plan, DftPart::Im));
            }))
        } else {
            None
        };
        self.push(out, ng, back)
    }
}

#[inline]
fn stable_sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

#[derive(Clone, Copy)]
enum DftPart {
    Re,
    Im,
}

/// Applies `Re/Im(C_H · plane · C_Wᵀ ...)` to every `[H, W]` plane of a
/// `[N, C, H, W]` tensor.
fn dft_planes<S: Scalar>(x: &ArrayD<S>, plan: &DftPlan<S>, part: DftPart) -> ArrayD<S> {
    let x4 = view4(x);
    let (n, c, h, w) = x4.dim();
    debug_assert_eq!((h, w), (plan.h, plan.w), "DFT plan dims");
    let wr = plan.cols();
    let mut out = ndarray::Array4::<S>::zeros((n, c, h, wr));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x4.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let xc = plane.dot(&plan.cw.t()); // [H, Wr]
            let xs = plane.dot(&plan.sw.t());
            let res = match part {
                DftPart::Re => plan.ch.dot(&xc) - plan.sh.dot(&xs),
                DftPart::Im => -(plan.ch.dot(&xs) + plan.sh.dot(&xc)),
            };
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .assign(&res);
        }
    }
    out.into_dyn()
}

/// Adjoints: `Re: dx = C_Hᵀ g C_W − S_Hᵀ g S_W`, `Im: dx = −(C_Hᵀ g S_W +
/// S_Hᵀ g C_W)`.
fn dft_planes_adjoint<S: Scalar>(g: &ArrayD<S>, plan: &DftPlan<S>, part: DftPart) -> ArrayD<S> {
    let g4 = view4(g);
    let (n, c, h, _wr) = g4.dim();
    debug_assert_eq!(h, plan.h);
    let mut out = ndarray::Array4::<S>::zeros((n, c, plan.h, plan.w));
    for ni in 0..n {
        for ci in 0..c {
            let gp = g4.index_axis(Axis(0), ni);
            let gp = gp.index_axis(Axis(0), ci);
            let chg = plan.ch.t().dot(&gp); // [H, Wr]
            let shg = plan.sh.t().dot(&gp);
            let res = match part {
                DftPart::Re => chg.dot(&*plan.cw) - shg.dot(&*plan.sw),
                DftPart::Im => -(chg.dot(&*plan.sw) + shg.dot(&*plan.cw)),
            };
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .assign(&res);
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, grads_close, Tape};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `f` (a scalar-valued graph builder) against
    /// central finite differences.
    fn check_grad<F>(build: F, x0: &ArrayD<f64>, rtol: f64)
    where
        F: Fn(&Tape<f64>, Var) -> Var,
    {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let mut grads = tape.backward(y);
        let analytic = grads.take(x).expect("gradient must exist");
        let numeric = finite_diff(
            |xv| {
                let t = Tape::<f64>::new();
                let xr = t.leaf(xv.clone());
                let yr = build(&t, xr);
                t.scalar_value(yr)
            },
            x0,
            1e-5,
        );
        assert!(
            grads_close(&analytic, &numeric, rtol, 1e-8),
            "gradient mismatch:\nanalytic {analytic:?}\nnumeric  {numeric:?}"
        );
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let x = randn(&[2, 3], 1);
        check_grad(|t, x| t.mean_all(t.square(x)), &x, 1e-6);
        check_grad(|t, x| t.mean_all(t.tanh(x)), &x, 1e-6);
        check_grad(|t, x| t.mean_all(t.softplus(x)), &x, 1e-6);
        check_grad(|t, x| t.mean_all(t.silu(x)), &x, 1e-6);
        check_grad(|t, x| t.sum_all(t.leaky_relu(x, 0.2)), &x, 1e-6);
        check_grad(
            |t, x| {
                let y = t.affine(x, 1.7, -0.3);
                t.mean_all(t.mul(y, x))
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn abs_grad_matches_fd_away_from_zero() {
        // Keep samples away from the kink so FD is valid.
        let x = randn(&[7], 2).mapv(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
        check_grad(|t, x| t.mean_all(t.abs(x)), &x, 1e-6);
    }

    #[test]
    fn sqrt_guard_zero_input_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[3])));
        let y = tape.sum_all(tape.sqrt_guard(x));
        let mut g = tape.backward(y);
        let dx = g.take(x).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn atan2_grads_match_fd() {
        let im0 = randn(&[5], 3).mapv(|v| v + 2.0); // keep away from origin
        let re0 = randn(&[5], 4).mapv(|v| v + 2.0);
        // d/d im
        let tape = Tape::<f64>::new();
        let im = tape.leaf(im0.clone());
        let re = tape.leaf(re0.clone());
        let y = tape.mean_all(tape.atan2(im, re));
        let mut g = tape.backward(y);
        let d_im = g.take(im).unwrap();
        let d_re = g.take(re).unwrap();
        let nim = finite_diff(
            |v| {
                let t = Tape::<f64>::new();
                let i = t.leaf(v.clone());
                let r = t.constant(re0.clone());
                t.scalar_value(t.mean_all(t.atan2(i, r)))
            },
            &im0,
            1e-5,
        );
        let nre = finite_diff(
            |v| {
                let t = Tape::<f64>::new();
                let i = t.constant(im0.clone());
                let r = t.leaf(v.clone());
                t.scalar_value(t.mean_all(t.atan2(i, r)))
            },
            &re0,
            1e-5,
        );
        assert!(grads_close(&d_im, &nim, 1e-6, 1e-9));
        assert!(grads_close(&d_re, &nre, 1e-6, 1e-9));
    }

    #[test]
    fn atan2_origin_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let im = tape.leaf(ArrayD::zeros(IxDyn(&[2])));
        let re = tape.leaf(ArrayD::zeros(IxDyn(&[2])));
        let y = tape.sum_all(tape.atan2(im, re));
        let mut g = tape.backward(y);
        assert!(g.take(im).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.take(re).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ops_grads_match_fd() {
        let x = randn(&[1, 2, 5, 5], 5);
        check_grad(
            |t, x| {
                let w = t.constant(randn(&[3, 2, 4, 4], 6));
                let b = t.constant(randn(&[3], 7));
                t.mean_all(t.conv2d(x, w, b, 1, Pad::same(4)))
            },
            &x,
            1e-4,
        );
        // Weight gradient.
        let w0 = randn(&[3, 2, 4, 4], 8);
        check_grad(
            |t, w| {
                let x = t.constant(randn(&[1, 2, 5, 5], 9));
                let b = t.constant(randn(&[3], 10));
                let y = t.conv2d(x, w, b, 2, Pad::symmetric(1));
                t.mean_all(t.square(y))
            },
            &w0,
            1e-4,
        );
        // Transposed conv, input + weight.
        let xt = randn(&[1, 3, 4, 4], 11);
        check_grad(
            |t, x| {
                let w = t.constant(randn(&[3, 2, 4, 4], 12));
                let b = t.constant(randn(&[2], 13));
                let y = t.conv_transpose2d(x, w, b, 2, 1);
                t.mean_all(t.square(y))
            },
            &xt,
            1e-4,
        );
        let wt0 = randn(&[3, 2, 4, 4], 14);
        check_grad(
            |t, w| {
                let x = t.constant(randn(&[1, 3, 4, 4], 15));
                let b = t.constant(randn(&[2], 16));
                let y = t.conv_transpose2d(x, w, b, 2, 1);
                t.mean_all(t.square(y))
            },
            &wt0,
            1e-4,
        );
    }

    #[test]
    fn blur_and_norm_grads_match_fd() {
        let x = randn(&[1, 2, 6, 6], 17);
        check_grad(
            |t, x| t.mean_all(t.square(t.blurpool(x, 3, 2))),
            &x,
            1e-5,
        );
        check_grad(
            |t, x| {
                let g = t.constant(randn(&[2], 18).mapv(|v| v + 2.0));
                let b = t.constant(randn(&[2], 19));
                t.mean_all(t.square(t.instance_norm(x, g, b, 1e-5)))
            },
            &x,
            1e-3,
        );
        // Gamma/beta gradients.
        let g0 = randn(&[2], 20).mapv(|v| v + 2.0);
        check_grad(
            |t, g| {
                let x = t.constant(randn(&[1, 2, 6, 6], 21));
                let b = t.constant(randn(&[2], 22));
                t.mean_all(t.square(t.instance_norm(x, g, b, 1e-5)))
            },
            &g0,
            1e-5,
        );
    }

    #[test]
    fn shape_ops_grads_match_fd() {
        let x = randn(&[2, 3, 4, 4], 23);
        check_grad(
            |t, x| {
                let a = t.slice_channels(x, 0, 2);
                let b = t.slice_channels(x, 1, 3);
                let c = t.concat_channels(&[a, b]);
                let d = t.slice_hw(c, 1, 3, 0, 2);
                t.mean_all(t.square(d))
            },
            &x,
            1e-6,
        );
        check_grad(
            |t, x| {
                let r = t.reshape(x, &[2, 3, 16]);
                let tr = t.transpose_last2(r);
                t.mean_all(t.square(tr))
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn matmul_ops_grads_match_fd() {
        let a = randn(&[2, 3, 4], 24);
        check_grad(
            |t, a| {
                let b = t.constant(randn(&[2, 4, 5], 25));
                t.mean_all(t.square(t.bmm(a, b)))
            },
            &a,
            1e-5,
        );
        let b0 = randn(&[2, 4, 5], 26);
        check_grad(
            |t, b| {
                let a = t.constant(randn(&[2, 3, 4], 27));
                t.mean_all(t.square(t.bmm(a, b)))
            },
            &b0,
            1e-5,
        );
        let x = randn(&[3, 4], 28);
        check_grad(
            |t, x| {
                let w = t.constant(randn(&[4, 2], 29));
                let b = t.constant(randn(&[2], 30));
                t.mean_all(t.square(t.linear(x, w, b)))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn softmax_grad_matches_fd() {
        let x = randn(&[2, 3, 4], 31);
        check_grad(
            |t, x| {
                let y = t.softmax_last(x);
                let c = t.constant(randn(&[2, 3, 4], 32));
                t.mean_all(t.mul(y, c))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn l2_norm_rows_grad_matches_fd() {
        let x = randn(&[3, 4], 33).mapv(|v| v + 0.1);
        check_grad(|t, x| t.mean_all(t.l2_norm_rows(x)), &x, 1e-5);
    }

    #[test]
    fn l2_norm_rows_zero_row_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 5])));
        let y = tape.sum_all(tape.l2_norm_rows(x));
        let mut g = tape.backward(y);
        assert!(g.take(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dft_ops_grads_match_fd() {
        let x = randn(&[1, 1, 4, 4], 34);
        let plan = DftPlan::<f64>::new(4, 4);
        let p2 = plan.clone();
        check_grad(
            move |t, x| {
                let re = t.dft_re(x, &p2);
                t.mean_all(t.square(re))
            },
            &x,
            1e-5,
        );
        let p3 = plan.clone();
        check_grad(
            move |t, x| {
                let im = t.dft_im(x, &p3);
                t.mean_all(t.square(im))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn dft_ops_match_plain_fourier() {
        let x = randn(&[1, 1, 6, 8], 35);
        let plan = DftPlan::<f64>::new(6, 8);
        let tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let re = tape.value(tape.dft_re(xv, &plan));
        let im = tape.value(tape.dft_im(xv, &plan));
        let plane = x
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned();
        let (rre, rim) = crate::fourier::rdft2(&plane);
        for ((a, b), (c, d)) in re
            .iter()
            .zip(rre.iter())
            .zip(im.iter().zip(rim.iter()))
        {
            assert!((a - b).abs() < 1e-10);
            assert!((c - d).abs() < 1e-10);
        }
    }

    #[test]
    fn dropout_scales_and_masks() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1000]), 1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, 0.5, &mut rng);
        let yv = tape.value(y);
        let kept = yv.iter().filter(|&&v| v != 0.0).count();
        assert!(yv.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!((kept as f64 - 500.0).abs() < 60.0);
        // Backward respects the same mask.
        let s = tape.sum_all(y);
        let mut g = tape.backward(s);
        let dx = g.take(x).unwrap();
        for (a, b) in dx.iter().zip(yv.iter()) {
            assert_eq!(*a != 0.0, *b != 0.0);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[3], 40));
        let c = tape.constant(randn(&[3], 41));
        let y = tape.mean_all(tape.mul(x, c));
        let mut g = tape.backward(y);
        assert!(g.take(x).is_some());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn grad_accumulates_across_branches() {
        // y = mean(x*x + x*x) over 4 elements → dy/dx_i = 4 x_i / 4 = x_i.
        let x0 = randn(&[4], 42);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let a = tape.mul(x, x);
        let b = tape.mul(x, x);
        let y = tape.mean_all(tape.add(a, b));
        let mut g = tape.backward(y);
        let dx = g.take(x).unwrap();
        for (d, v) in dx.iter().zip(x0.iter()) {
            assert!((d - v).abs() < 1e-12);
        }
    }
}
