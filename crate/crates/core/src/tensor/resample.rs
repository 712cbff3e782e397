//! Spatial resampling: pooling, bilinear upsampling and flow-field warping.

use ndarray::{ArrayD, Ix3, IxDyn};

use super::tape::{Tape, Var};

impl Tape {
    /// 2x2 max pooling with stride 2 on `[C, H, W]`.
    ///
    /// Odd spatial dims are handled by replicating the last row/column,
    /// which is neutral for the max.
    pub fn max_pool2(&self, x: Var) -> Var {
        self.unary(
            x,
            |xv| {
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("max_pool2: 3-d input");
                let (c, h, w) = x3.dim();
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
                let xs = xv.as_slice().unwrap();
                let os = out.as_slice_mut().unwrap();
                for ch in 0..c {
                    for r in 0..ho {
                        let (r0, r1) = (2 * r, (2 * r + 1).min(h - 1));
                        for cc in 0..wo {
                            let (c0, c1) = (2 * cc, (2 * cc + 1).min(w - 1));
                            let base = ch * h * w;
                            let m = xs[base + r0 * w + c0]
                                .max(xs[base + r0 * w + c1])
                                .max(xs[base + r1 * w + c0])
                                .max(xs[base + r1 * w + c1]);
                            os[(ch * ho + r) * wo + cc] = m;
                        }
                    }
                }
                out
            },
            Box::new(|args| {
                let x3 = args.inputs[0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (c, h, w) = x3.dim();
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let xs = args.inputs[0].as_slice().unwrap();
                let gs = args.grad.as_slice().unwrap();
                let mut gx = ArrayD::<f64>::zeros(args.inputs[0].raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                for ch in 0..c {
                    for r in 0..ho {
                        let (r0, r1) = (2 * r, (2 * r + 1).min(h - 1));
                        for cc in 0..wo {
                            let (c0, c1) = (2 * cc, (2 * cc + 1).min(w - 1));
                            let base = ch * h * w;
                            // First occurrence in scan order wins ties.
                            let cands = [
                                base + r0 * w + c0,
                                base + r0 * w + c1,
                                base + r1 * w + c0,
                                base + r1 * w + c1,
                            ];
                            let mut best = cands[0];
                            for &i in &cands[1..] {
                                if xs[i] > xs[best] {
                                    best = i;
                                }
                            }
                            gxs[best] += gs[(ch * ho + r) * wo + cc];
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 on `[C, H, W]`; requires even dims.
    pub fn avg_pool2(&self, x: Var) -> Var {
        self.unary(
            x,
            |xv| {
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("avg_pool2: 3-d input");
                let (c, h, w) = x3.dim();
                assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: even dims required");
                let (ho, wo) = (h / 2, w / 2);
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
                let xs = xv.as_slice().unwrap();
                let os = out.as_slice_mut().unwrap();
                for ch in 0..c {
                    for r in 0..ho {
                        for cc in 0..wo {
                            let base = ch * h * w + 2 * r * w + 2 * cc;
                            os[(ch * ho + r) * wo + cc] =
                                0.25 * (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]);
                        }
                    }
                }
                out
            },
            Box::new(|args| {
                let x3 = args.inputs[0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (c, h, w) = x3.dim();
                let (ho, wo) = (h / 2, w / 2);
                let gs = args.grad.as_slice().unwrap();
                let mut gx = ArrayD::<f64>::zeros(args.inputs[0].raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                for ch in 0..c {
                    for r in 0..ho {
                        for cc in 0..wo {
                            let g = 0.25 * gs[(ch * ho + r) * wo + cc];
                            let base = ch * h * w + 2 * r * w + 2 * cc;
                            gxs[base] += g;
                            gxs[base + 1] += g;
                            gxs[base + w] += g;
                            gxs[base + w + 1] += g;
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// 2x bilinear upsampling on `[C, H, W]`, align-corners disabled,
    /// edges clamped. All interpolation weights are exact dyadics
    /// (0.25/0.75), so constants are preserved bit-exactly.
    pub fn upsample2(&self, x: Var) -> Var {
        self.unary(
            x,
            |xv| {
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("upsample2: 3-d input");
                let (c, h, w) = x3.dim();
                let (ho, wo) = (2 * h, 2 * w);
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
                let xs = xv.as_slice().unwrap();
                let os = out.as_slice_mut().unwrap();
                for ch in 0..c {
                    for r in 0..ho {
                        let (y0, y1, ty) = src_coords(r, h);
                        for cc in 0..wo {
                            let (x0, x1, tx) = src_coords(cc, w);
                            let base = ch * h * w;
                            let v = (1.0 - ty)
                                * ((1.0 - tx) * xs[base + y0 * w + x0]
                                    + tx * xs[base + y0 * w + x1])
                                + ty * ((1.0 - tx) * xs[base + y1 * w + x0]
                                    + tx * xs[base + y1 * w + x1]);
                            os[(ch * ho + r) * wo + cc] = v;
                        }
                    }
                }
                out
            },
            Box::new(|args| {
                let x3 = args.inputs[0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (c, h, w) = x3.dim();
                let (ho, wo) = (2 * h, 2 * w);
                let gs = args.grad.as_slice().unwrap();
                let mut gx = ArrayD::<f64>::zeros(args.inputs[0].raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                for ch in 0..c {
                    for r in 0..ho {
                        let (y0, y1, ty) = src_coords(r, h);
                        for cc in 0..wo {
                            let (x0, x1, tx) = src_coords(cc, w);
                            let g = gs[(ch * ho + r) * wo + cc];
                            let base = ch * h * w;
                            gxs[base + y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                            gxs[base + y0 * w + x1] += (1.0 - ty) * tx * g;
                            gxs[base + y1 * w + x0] += ty * (1.0 - tx) * g;
                            gxs[base + y1 * w + x1] += ty * tx * g;
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Backward warp `x [C, H, W]` by `flow [2, H, W]` with bilinear
    /// sampling. Component 0 of the flow is the horizontal displacement,
    /// component 1 the vertical one, in pixels. Samples falling outside
    /// the image use zero padding; integer-grid samples are copied
    /// directly, making zero flow a bit-exact identity.
    pub fn warp(&self, x: Var, flow: Var) -> Var {
        self.binary(
            x,
            flow,
            |xv, fv| {
                let x3 = xv.view().into_dimensionality::<Ix3>().expect("warp: 3-d input");
                let (c, h, w) = x3.dim();
                let fdim = fv.shape();
                assert_eq!(fdim, &[2, h, w], "warp: flow must be [2, H, W]");
                let xs = xv.as_slice().unwrap();
                let fs = fv.as_slice().unwrap();
                let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                let os = out.as_slice_mut().unwrap();
                for r in 0..h {
                    for cc in 0..w {
                        let p = r * w + cc;
                        let sx = cc as f64 + fs[p];
                        let sy = r as f64 + fs[h * w + p];
                        sample_all_channels(xs, os, c, h, w, p, sy, sx);
                    }
                }
                out
            },
            Box::new(|args| {
                let x3 = args.inputs[0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (c, h, w) = x3.dim();
                let xs = args.inputs[0].as_slice().unwrap();
                let fs = args.inputs[1].as_slice().unwrap();
                let gs = args.grad.as_slice().unwrap();
                let mut gx = ArrayD::<f64>::zeros(args.inputs[0].raw_dim());
                let mut gf = ArrayD::<f64>::zeros(args.inputs[1].raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                let gfs = gf.as_slice_mut().unwrap();
                for r in 0..h {
                    for cc in 0..w {
                        let p = r * w + cc;
                        let sx = cc as f64 + fs[p];
                        let sy = r as f64 + fs[h * w + p];
                        let y0 = sy.floor();
                        let x0 = sx.floor();
                        let ty = sy - y0;
                        let tx = sx - x0;
                        let (y0i, x0i) = (y0 as isize, x0 as isize);
                        let corners = [
                            (y0i, x0i, (1.0 - ty) * (1.0 - tx)),
                            (y0i, x0i + 1, (1.0 - ty) * tx),
                            (y0i + 1, x0i, ty * (1.0 - tx)),
                            (y0i + 1, x0i + 1, ty * tx),
                        ];
                        let mut dfy = 0.0;
                        let mut dfx = 0.0;
                        for ch in 0..c {
                            let g = gs[ch * h * w + p];
                            if g == 0.0 {
                                continue;
                            }
                            let base = ch * h * w;
                            let mut v = [0.0f64; 4]; // v00 v01 v10 v11
                            for (k, &(yy, xx, wgt)) in corners.iter().enumerate() {
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    let idx = base + yy as usize * w + xx as usize;
                                    v[k] = xs[idx];
                                    gxs[idx] += g * wgt;
                                }
                            }
                            // d(sample)/d(flow): one-sided at integer grids.
                            dfy += g * ((1.0 - tx) * (v[2] - v[0]) + tx * (v[3] - v[1]));
                            dfx += g * ((1.0 - ty) * (v[1] - v[0]) + ty * (v[3] - v[2]));
                        }
                        gfs[p] += dfx;
                        gfs[h * w + p] += dfy;
                    }
                }
                vec![gx, gf]
            }),
        )
    }
}

/// Source indices and interpolation weight for 2x upsampling output index `i`.
#[inline]
fn src_coords(i: usize, n: usize) -> (usize, usize, f64) {
    // align_corners = false: src = (i + 0.5) / 2 - 0.5
    let src = 0.5 * (i as f64 + 0.5) - 0.5;
    let f = src.floor();
    let t = src - f;
    let y0 = (f.max(0.0)) as usize;
    let y1 = (y0 + 1).min(n - 1);
    let y0 = y0.min(n - 1);
    (y0, y1, t)
}

/// Bilinear sample at (`sy`, `sx`) for every channel; integer in-bounds
/// positions are copied bit-exactly.
#[inline]
fn sample_all_channels(
    xs: &[f64],
    os: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    sy: f64,
    sx: f64,
) {
    let hw = h * w;
    if sy.fract() == 0.0 && sx.fract() == 0.0 {
        let (yy, xx) = (sy as isize, sx as isize);
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            let idx = yy as usize * w + xx as usize;
            for ch in 0..c {
                os[ch * hw + p] = xs[ch * hw + idx];
            }
        }
        return;
    }
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ty = sy - y0;
    let tx = sx - x0;
    let (y0i, x0i) = (y0 as isize, x0 as isize);
    let corners = [
        (y0i, x0i, (1.0 - ty) * (1.0 - tx)),
        (y0i, x0i + 1, (1.0 - ty) * tx),
        (y0i + 1, x0i, ty * (1.0 - tx)),
        (y0i + 1, x0i + 1, ty * tx),
    ];
    for ch in 0..c {
        let base = ch * hw;
        let mut acc = 0.0;
        for &(yy, xx, wgt) in &corners {
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                acc += wgt * xs[base + yy as usize * w + xx as usize];
            }
        }
        os[base + p] = acc;
    }
}
