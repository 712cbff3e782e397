//! Elementwise, linear-algebra and structural operations on the tape.
//!
//! Shape conventions are documented per operation; there is no implicit
//! broadcasting. Binary elementwise ops require identical shapes.

use std::sync::Arc;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice};

use super::tape::{BackFn, Tape, Var};

/// Owned standard-layout copy of a view.
pub(crate) fn std_owned(a: ArrayViewD<'_, f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a.to_owned()
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
                x + y
            },
            Box::new(|args| vec![args.grad.clone(), args.grad.clone()]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
                x - y
            },
            Box::new(|args| vec![args.grad.clone(), args.grad.mapv(|g| -g)]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
                x * y
            },
            Box::new(|args| {
                vec![args.grad * args.inputs[1], args.grad * args.inputs[0]]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v * k),
            Box::new(move |args| vec![args.grad.mapv(|g| g * k)]),
        )
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v + k),
            Box::new(|args| vec![args.grad.clone()]),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v.max(0.0)),
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                vec![g]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| if v >= 0.0 { v } else { slope * v }),
            Box::new(move |args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    if x < 0.0 {
                        *gv *= slope
                    }
                });
                vec![g]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.out, |gv, &y| *gv *= y * (1.0 - y));
                vec![g]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::tanh),
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.out, |gv, &y| *gv *= 1.0 - y * y);
                vec![g]
            }),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            a,
            |x| x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh())),
            Box::new(|args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * x * x);
                    *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                vec![g]
            }),
        )
    }

    /// Hard clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v.clamp(lo, hi)),
            Box::new(move |args| {
                let mut g = args.grad.clone();
                g.zip_mut_with(args.inputs[0], |gv, &x| {
                    if x < lo || x > hi {
                        *gv = 0.0
                    }
                });
                vec![g]
            }),
        )
    }

    /// `a [M, K] x b [K, N] -> [M, N]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                let x2 = x.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
                let y2 = y.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
                x2.dot(&y2).into_dyn()
            },
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix2>().unwrap();
                let x = args.inputs[0].view().into_dimensionality::<Ix2>().unwrap();
                let y = args.inputs[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g.dot(&y.t()).into_dyn(), x.t().dot(&g).into_dyn()]
            }),
        )
    }

    /// Batched matmul, `a [B, M, K] x b [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                let x3 = x.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-d");
                let y3 = y.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-d");
                let (bsz, m, _k) = x3.dim();
                let n = y3.dim().2;
                let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
                for i in 0..bsz {
                    out.index_axis_mut(Axis(0), i)
                        .assign(&x3.index_axis(Axis(0), i).dot(&y3.index_axis(Axis(0), i)));
                }
                out.into_dyn()
            },
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let x = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let y = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let (bsz, m, k) = x.dim();
                let n = y.dim().2;
                let mut gx = ndarray::Array3::<f64>::zeros((bsz, m, k));
                let mut gy = ndarray::Array3::<f64>::zeros((bsz, k, n));
                for i in 0..bsz {
                    let gi = g.index_axis(Axis(0), i);
                    gx.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&y.index_axis(Axis(0), i).t()));
                    gy.index_axis_mut(Axis(0), i)
                        .assign(&x.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![gx.into_dyn(), gy.into_dyn()]
            }),
        )
    }

    /// Batched matmul with transposed rhs, `a [B, M, K] x b [B, N, K] -> [B, M, N]`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                let x3 = x.view().into_dimensionality::<Ix3>().expect("bmm_nt lhs 3-d");
                let y3 = y.view().into_dimensionality::<Ix3>().expect("bmm_nt rhs 3-d");
                let (bsz, m, _k) = x3.dim();
                let n = y3.dim().1;
                let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
                for i in 0..bsz {
                    out.index_axis_mut(Axis(0), i).assign(
                        &x3.index_axis(Axis(0), i)
                            .dot(&y3.index_axis(Axis(0), i).t()),
                    );
                }
                out.into_dyn()
            },
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let x = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let y = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let (bsz, m, k) = x.dim();
                let n = y.dim().1;
                let mut gx = ndarray::Array3::<f64>::zeros((bsz, m, k));
                let mut gy = ndarray::Array3::<f64>::zeros((bsz, n, k));
                for i in 0..bsz {
                    let gi = g.index_axis(Axis(0), i);
                    gx.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&y.index_axis(Axis(0), i)));
                    gy.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&x.index_axis(Axis(0), i)));
                }
                vec![gx.into_dyn(), gy.into_dyn()]
            }),
        )
    }

    /// Add a bias vector along the last axis: `x [..., D] + b [D]`.
    pub fn add_bias_last(&self, x: Var, b: Var) -> Var {
        self.binary(
            x,
            b,
            |x, b| {
                let d = *x.shape().last().expect("add_bias_last: empty shape");
                assert_eq!(b.len(), d, "add_bias_last: bias length mismatch");
                let mut out = x.clone();
                let bs = b.as_slice().unwrap();
                for (i, v) in out.as_slice_mut().unwrap().iter_mut().enumerate() {
                    *v += bs[i % d];
                }
                out
            },
            Box::new(|args| {
                let d = *args.inputs[0].shape().last().unwrap();
                let mut gb = vec![0.0; d];
                for (i, g) in args.grad.as_slice().unwrap().iter().enumerate() {
                    gb[i % d] += g;
                }
                vec![
                    args.grad.clone(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), gb).unwrap(),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let d = *x.shape().last().expect("softmax_last: empty shape");
                let mut out = x.clone();
                for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                out
            },
            Box::new(|args| {
                let d = *args.out.shape().last().unwrap();
                let mut gx = args.grad.clone();
                let y = args.out.as_slice().unwrap();
                for (row_idx, grow) in gx.as_slice_mut().unwrap().chunks_mut(d).enumerate() {
                    let yrow = &y[row_idx * d..(row_idx + 1) * d];
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (g, &yv) in grow.iter_mut().zip(yrow) {
                        *g = yv * (*g - dot);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Sum of all elements; returns a 0-d node.
    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| ndarray::arr0(x.sum()).into_dyn(),
            Box::new(|args| {
                let g = args.grad.first().copied().unwrap_or(0.0);
                vec![ArrayD::from_elem(args.inputs[0].raw_dim(), g)]
            }),
        )
    }

    /// Mean of all elements; returns a 0-d node.
    pub fn mean_all(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| ndarray::arr0(x.sum() / x.len() as f64).into_dyn(),
            Box::new(|args| {
                let n = args.inputs[0].len() as f64;
                let g = args.grad.first().copied().unwrap_or(0.0) / n;
                vec![ArrayD::from_elem(args.inputs[0].raw_dim(), g)]
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        self.unary(
            a,
            |x| {
                assert_eq!(
                    x.len(),
                    shape.iter().product::<usize>(),
                    "reshape: element count mismatch"
                );
                x.clone().into_shape(IxDyn(&shape)).unwrap()
            },
            Box::new(|args| {
                vec![args
                    .grad
                    .clone()
                    .into_shape(args.inputs[0].raw_dim())
                    .unwrap()]
            }),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let axes_v = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.unary(
            a,
            move |x| std_owned(x.view().permuted_axes(IxDyn(&axes_v))),
            Box::new(move |args| {
                vec![std_owned(args.grad.view().permuted_axes(IxDyn(&inverse)))]
            }),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        self.nary(
            parts,
            |vals| {
                let views: Vec<ArrayViewD<f64>> = vals.iter().map(|v| v.view()).collect();
                std_owned(ndarray::concatenate(Axis(axis), &views).unwrap().view())
            },
            Box::new(move |args| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    let sl = args.grad.slice_axis(
                        Axis(axis),
                        Slice::new(start, Some(start + s as isize), 1),
                    );
                    out.push(std_owned(sl));
                    start += s as isize;
                }
                out
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| {
                std_owned(x.slice_axis(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                ))
            },
            Box::new(move |args| {
                let mut gx = ArrayD::zeros(args.inputs[0].raw_dim());
                gx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(args.grad);
                vec![gx]
            }),
        )
    }

    /// Gather flat elements: `out.flat[i] = x.flat[idx[i]]`.
    ///
    /// `idx` need not be a bijection; backward scatter-adds, which also
    /// handles index maps that repeat source positions (e.g. reflection
    /// padding).
    pub fn gather(&self, a: Var, idx: Arc<Vec<u32>>, out_shape: &[usize]) -> Var {
        let shape = out_shape.to_vec();
        assert_eq!(
            idx.len(),
            shape.iter().product::<usize>(),
            "gather: index length must match output size"
        );
        let idx_b = idx.clone();
        self.unary(
            a,
            move |x| {
                let xs = x.as_slice().unwrap();
                let data: Vec<f64> = idx.iter().map(|&i| xs[i as usize]).collect();
                ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
            },
            Box::new(move |args| {
                let mut gx = ArrayD::zeros(args.inputs[0].raw_dim());
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for (&i, &g) in idx_b.iter().zip(args.grad.as_slice().unwrap()) {
                        gxs[i as usize] += g;
                    }
                }
                vec![gx]
            }),
        )
    }
}
