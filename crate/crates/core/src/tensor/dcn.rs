//! Modulated deformable convolution (learned per-tap offsets plus a
//! multiplicative gate per sampling position).
//!
//! Layout conventions, with `K` the kernel size, `G` the number of offset
//! groups and tap index `t = ky * K + kx`:
//!
//! - `offsets [2*K*K*G, H, W]`: channel `(g*K*K + t)*2 + 0` holds the
//!   horizontal displacement, `+ 1` the vertical one (matching the flow
//!   field convention).
//! - `mask [K*K*G, H, W]`: channel `g*K*K + t`, expected in (0, 1).
//! - Input channels are split into `G` contiguous groups sharing offsets;
//!   the convolution weight itself is dense over all input channels.
//!
//! With zero offsets and unit mask this reduces exactly to a standard
//! stride-1 convolution with zero padding.

use ndarray::{Array2, ArrayD, Ix3, Ix4, IxDyn};

use super::tape::{Tape, Var};

struct DcnDims {
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    h: usize,
    w: usize,
    pad: usize,
}

/// Sample the deformed columns `[Cin*K*K, H*W]`. When `raw` is true the
/// modulation mask is not applied (needed for the mask gradient).
fn deform_cols(
    xs: &[f64],
    offs: &[f64],
    mask: &[f64],
    d: &DcnDims,
    raw: bool,
) -> Array2<f64> {
    let (h, w, k) = (d.h, d.w, d.k);
    let hw = h * w;
    let k2 = k * k;
    let ch_per_group = d.cin / d.groups;
    let mut cols = Array2::<f64>::zeros((d.cin * k2, hw));
    let cs = cols.as_slice_mut().unwrap();
    for ch in 0..d.cin {
        let g = ch / ch_per_group;
        let base_x = ch * hw;
        for t in 0..k2 {
            let (ky, kx) = (t / k, t % k);
            let off_x_base = ((g * k2 + t) * 2) * hw;
            let off_y_base = ((g * k2 + t) * 2 + 1) * hw;
            let mask_base = (g * k2 + t) * hw;
            let row_base = (ch * k2 + t) * hw;
            for r in 0..h {
                for cc in 0..w {
                    let p = r * w + cc;
                    let sy = r as f64 - d.pad as f64 + ky as f64 + offs[off_y_base + p];
                    let sx = cc as f64 - d.pad as f64 + kx as f64 + offs[off_x_base + p];
                    let v = bilinear_zero(xs, base_x, h, w, sy, sx);
                    cs[row_base + p] = if raw { v } else { v * mask[mask_base + p] };
                }
            }
        }
    }
    cols
}

#[inline]
fn bilinear_zero(xs: &[f64], base: usize, h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    if sy.fract() == 0.0 && sx.fract() == 0.0 {
        let (yy, xx) = (sy as isize, sx as isize);
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            return xs[base + yy as usize * w + xx as usize];
        }
        return 0.0;
    }
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ty = sy - y0;
    let tx = sx - x0;
    let (y0i, x0i) = (y0 as isize, x0 as isize);
    let mut acc = 0.0;
    for (yy, xx, wgt) in [
        (y0i, x0i, (1.0 - ty) * (1.0 - tx)),
        (y0i, x0i + 1, (1.0 - ty) * tx),
        (y0i + 1, x0i, ty * (1.0 - tx)),
        (y0i + 1, x0i + 1, ty * tx),
    ] {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            acc += wgt * xs[base + yy as usize * w + xx as usize];
        }
    }
    acc
}

impl Tape {
    /// Modulated deformable convolution, stride 1, padding `(k-1)/2`.
    ///
    /// `x [Cin, H, W]`, `offsets [2*K*K*G, H, W]`, `mask [K*K*G, H, W]`,
    /// `w [Cout, Cin, K, K]`, `b [Cout]` -> `[Cout, H, W]`.
    pub fn deform_conv2d(&self, x: Var, offsets: Var, mask: Var, w: Var, b: Var, groups: usize) -> Var {
        self.nary(
            &[x, offsets, mask, w, b],
            |vals| {
                let d = dims(vals[0], vals[1], vals[2], vals[3], groups);
                let cols = deform_cols(
                    vals[0].as_slice().unwrap(),
                    vals[1].as_slice().unwrap(),
                    vals[2].as_slice().unwrap(),
                    &d,
                    false,
                );
                let wmat = vals[3]
                    .view()
                    .into_shape((d.cout, d.cin * d.k * d.k))
                    .unwrap();
                let mut out = wmat.dot(&cols);
                let bs = vals[4].as_slice().unwrap();
                for (co, mut row) in out.rows_mut().into_iter().enumerate() {
                    row += bs[co];
                }
                out.into_shape((d.cout, d.h, d.w)).unwrap().into_dyn()
            },
            Box::new(move |args| {
                let d = dims(
                    args.inputs[0],
                    args.inputs[1],
                    args.inputs[2],
                    args.inputs[3],
                    groups,
                );
                let (h, w, k) = (d.h, d.w, d.k);
                let hw = h * w;
                let k2 = k * k;
                let ch_per_group = d.cin / d.groups;
                let xs = args.inputs[0].as_slice().unwrap();
                let offs = args.inputs[1].as_slice().unwrap();
                let ms = args.inputs[2].as_slice().unwrap();
                let gmat = args.grad.view().into_shape((d.cout, hw)).unwrap();

                // Weight and bias gradients via the (modulated) columns.
                let cols = deform_cols(xs, offs, ms, &d, false);
                let gw = gmat.dot(&cols.t());
                let gb: Vec<f64> = gmat.rows().into_iter().map(|r| r.sum()).collect();

                // Gradient w.r.t. the columns.
                let wmat = args.inputs[3]
                    .view()
                    .into_shape((d.cout, d.cin * k2))
                    .unwrap();
                let gcols = wmat.t().dot(&gmat); // [Cin*K*K, H*W]
                let gcs = gcols.as_slice().unwrap();

                let mut gx = ArrayD::<f64>::zeros(args.inputs[0].raw_dim());
                let mut goff = ArrayD::<f64>::zeros(args.inputs[1].raw_dim());
                let mut gmask = ArrayD::<f64>::zeros(args.inputs[2].raw_dim());
                let gxs = gx.as_slice_mut().unwrap();
                let gos = goff.as_slice_mut().unwrap();
                let gms = gmask.as_slice_mut().unwrap();

                for ch in 0..d.cin {
                    let g = ch / ch_per_group;
                    let base_x = ch * hw;
                    for t in 0..k2 {
                        let (ky, kx) = (t / k, t % k);
                        let off_x_base = ((g * k2 + t) * 2) * hw;
                        let off_y_base = ((g * k2 + t) * 2 + 1) * hw;
                        let mask_base = (g * k2 + t) * hw;
                        let row_base = (ch * k2 + t) * hw;
                        for r in 0..h {
                            for cc in 0..w {
                                let p = r * w + cc;
                                let gc = gcs[row_base + p];
                                if gc == 0.0 {
                                    continue;
                                }
                                let sy =
                                    r as f64 - d.pad as f64 + ky as f64 + offs[off_y_base + p];
                                let sx =
                                    cc as f64 - d.pad as f64 + kx as f64 + offs[off_x_base + p];
                                let mv = ms[mask_base + p];
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
                                let mut v = [0.0f64; 4];
                                let gcm = gc * mv;
                                let mut raw = 0.0;
                                for (idx, &(yy, xx, wgt)) in corners.iter().enumerate() {
                                    if yy >= 0
                                        && yy < h as isize
                                        && xx >= 0
                                        && xx < w as isize
                                    {
                                        let xi = base_x + yy as usize * w + xx as usize;
                                        v[idx] = xs[xi];
                                        raw += wgt * v[idx];
                                        gxs[xi] += gcm * wgt;
                                    }
                                }
                                gms[mask_base + p] += gc * raw;
                                gos[off_y_base + p] +=
                                    gcm * ((1.0 - tx) * (v[2] - v[0]) + tx * (v[3] - v[1]));
                                gos[off_x_base + p] +=
                                    gcm * ((1.0 - ty) * (v[1] - v[0]) + ty * (v[3] - v[2]));
                            }
                        }
                    }
                }

                vec![
                    gx,
                    goff,
                    gmask,
                    gw.into_shape((d.cout, d.cin, k, k)).unwrap().into_dyn(),
                    ArrayD::from_shape_vec(IxDyn(&[d.cout]), gb).unwrap(),
                ]
            }),
        )
    }
}

fn dims(
    x: &ArrayD<f64>,
    offsets: &ArrayD<f64>,
    mask: &ArrayD<f64>,
    w: &ArrayD<f64>,
    groups: usize,
) -> DcnDims {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("deform_conv2d: 3-d input");
    let (cin, h, ww) = x3.dim();
    let w4 = w.view().into_dimensionality::<Ix4>().expect("deform_conv2d: 4-d weight");
    let (cout, wcin, k, k2) = w4.dim();
    assert_eq!(k, k2, "deform_conv2d: square kernels only");
    assert_eq!(wcin, cin, "deform_conv2d: weight channel mismatch");
    assert_eq!(cin % groups, 0, "deform_conv2d: channels must divide groups");
    assert_eq!(
        offsets.shape(),
        &[2 * k * k * groups, h, ww],
        "deform_conv2d: offset shape"
    );
    assert_eq!(
        mask.shape(),
        &[k * k * groups, h, ww],
        "deform_conv2d: mask shape"
    );
    DcnDims {
        cin,
        cout,
        k,
        groups,
        h,
        w: ww,
        pad: (k - 1) / 2,
    }
}
