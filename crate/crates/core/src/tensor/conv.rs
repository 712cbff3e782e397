//! 2D convolution via im2col + GEMM. Stride 1; square kernels; zero padding.

use ndarray::{Array2, ArrayD, Ix3, Ix4, IxDyn};

use super::tape::{Tape, Var};

/// Lower a `[C, H, W]` image into columns `[C*k*k, Hout*Wout]`.
fn im2col(x: &ArrayD<f64>, k: usize, pad: usize) -> Array2<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("im2col: 3-d input");
    let (c, h, w) = x3.dim();
    let hout = h + 2 * pad + 1 - k;
    let wout = w + 2 * pad + 1 - k;
    let mut cols = Array2::<f64>::zeros((c * k * k, hout * wout));
    let xs = x.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let base = row * hout * wout;
                for r in 0..hout {
                    let sy = (r + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = ch * h * w + sy as usize * w;
                    let dst_row = base + r * wout;
                    for cc in 0..wout {
                        let sx = (cc + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cs[dst_row + cc] = xs[src_row + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter columns `[C*k*k, Hout*Wout]` back into a `[C, H, W]` image.
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> ArrayD<f64> {
    let hout = h + 2 * pad + 1 - k;
    let wout = w + 2 * pad + 1 - k;
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let base = row * hout * wout;
                for r in 0..hout {
                    let sy = (r + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = ch * h * w + sy as usize * w;
                    let src_row = base + r * wout;
                    for cc in 0..wout {
                        let sx = (cc + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        xs[dst_row + sx as usize] += cs[src_row + cc];
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// `x [Cin, H, W]` * `w [Cout, Cin, k, k]` + `b [Cout]`, stride 1.
    ///
    /// `pad` is typically `(k - 1) / 2` for shape-preserving convolutions.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        self.nary(
            &[x, w, b],
            |vals| {
                let (xv, wv, bv) = (vals[0], vals[1], vals[2]);
                let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d: 4-d weight");
                let (cout, cin, kh, kw) = w4.dim();
                assert_eq!(kh, kw, "conv2d: square kernels only");
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("conv2d: 3-d input");
                let (c, h, ww_) = x3.dim();
                assert_eq!(c, cin, "conv2d: channel mismatch");
                assert_eq!(bv.len(), cout, "conv2d: bias length mismatch");
                let hout = h + 2 * pad + 1 - kh;
                let wout = ww_ + 2 * pad + 1 - kh;
                let cols = im2col(xv, kh, pad);
                let wmat = wv
                    .view()
                    .into_shape((cout, cin * kh * kh))
                    .unwrap();
                let mut out = wmat.dot(&cols); // [Cout, Hout*Wout]
                let bs = bv.as_slice().unwrap();
                for (co, mut row) in out.rows_mut().into_iter().enumerate() {
                    row += bs[co];
                }
                out.into_shape((cout, hout, wout)).unwrap().into_dyn()
            },
            Box::new(move |args| {
                let (xv, wv) = (args.inputs[0], args.inputs[1]);
                let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
                let (cout, cin, k, _) = w4.dim();
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let (_, h, w_) = x3.dim();
                let hw = args.grad.len() / cout;
                let gmat = args.grad.view().into_shape((cout, hw)).unwrap();

                let cols = im2col(xv, k, pad);
                let gw = gmat.dot(&cols.t()); // [Cout, Cin*k*k]
                let gb: Vec<f64> = gmat.rows().into_iter().map(|r| r.sum()).collect();

                let wmat = wv.view().into_shape((cout, cin * k * k)).unwrap();
                let gcols = wmat.t().dot(&gmat); // [Cin*k*k, Hout*Wout]
                let gx = col2im(&gcols, cin, h, w_, k, pad);

                vec![
                    gx,
                    gw.into_shape((cout, cin, k, k)).unwrap().into_dyn(),
                    ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap(),
                ]
            }),
        )
    }
}
