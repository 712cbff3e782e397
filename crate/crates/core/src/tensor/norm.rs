//! Normalization layers with hand-derived backward passes.

use ndarray::{ArrayD, Ix3, IxDyn};

use super::tape::{Tape, Var};

const EPS: f64 = 1e-5;

impl Tape {
    /// Group normalization over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        self.nary(
            &[x, gamma, beta],
            |vals| {
                let x3 = vals[0].view().into_dimensionality::<Ix3>().expect("group_norm: 3-d");
                let (c, h, w) = x3.dim();
                assert_eq!(c % groups, 0, "group_norm: channels must divide groups");
                let (gs, bs) = (vals[1].as_slice().unwrap(), vals[2].as_slice().unwrap());
                assert_eq!(gs.len(), c, "group_norm: gamma length");
                assert_eq!(bs.len(), c, "group_norm: beta length");
                let xs = vals[0].as_slice().unwrap();
                let mut out = vec![0.0f64; xs.len()];
                let cg = c / groups;
                let glen = cg * h * w;
                for g in 0..groups {
                    let seg = &xs[g * glen..(g + 1) * glen];
                    let mean = seg.iter().sum::<f64>() / glen as f64;
                    let var =
                        seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    for (i, &v) in seg.iter().enumerate() {
                        let ch = g * cg + i / (h * w);
                        out[g * glen + i] = gs[ch] * (v - mean) * inv + bs[ch];
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
            },
            Box::new(move |args| {
                let x3 = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x3.dim();
                let xs = args.inputs[0].as_slice().unwrap();
                let gs = args.inputs[1].as_slice().unwrap();
                let dy = args.grad.as_slice().unwrap();
                let cg = c / groups;
                let glen = cg * h * w;
                let mut gx = vec![0.0f64; xs.len()];
                let mut ggamma = vec![0.0f64; c];
                let mut gbeta = vec![0.0f64; c];
                for g in 0..groups {
                    let seg = &xs[g * glen..(g + 1) * glen];
                    let dseg = &dy[g * glen..(g + 1) * glen];
                    let mean = seg.iter().sum::<f64>() / glen as f64;
                    let var =
                        seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    // dxhat, and the two means needed for dx
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for (i, (&v, &d)) in seg.iter().zip(dseg).enumerate() {
                        let ch = g * cg + i / (h * w);
                        let xhat = (v - mean) * inv;
                        let dxhat = d * gs[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma[ch] += d * xhat;
                        gbeta[ch] += d;
                    }
                    let m_dxhat = sum_dxhat / glen as f64;
                    let m_dxhat_xhat = sum_dxhat_xhat / glen as f64;
                    for (i, (&v, &d)) in seg.iter().zip(dseg).enumerate() {
                        let ch = g * cg + i / (h * w);
                        let xhat = (v - mean) * inv;
                        let dxhat = d * gs[ch];
                        gx[g * glen + i] = inv * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                    }
                }
                vec![
                    ArrayD::from_shape_vec(args.inputs[0].raw_dim(), gx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
                ]
            }),
        )
    }

    /// Layer normalization over the last axis of `[..., C]` with affine.
    pub fn layer_norm_last(&self, x: Var, gamma: Var, beta: Var) -> Var {
        self.nary(
            &[x, gamma, beta],
            |vals| {
                let d = *vals[0].shape().last().expect("layer_norm: empty shape");
                let (gs, bs) = (vals[1].as_slice().unwrap(), vals[2].as_slice().unwrap());
                assert_eq!(gs.len(), d, "layer_norm: gamma length");
                let mut out = vals[0].clone();
                for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = gs[j] * (*v - mean) * inv + bs[j];
                    }
                }
                out
            },
            Box::new(|args| {
                let d = *args.inputs[0].shape().last().unwrap();
                let xs = args.inputs[0].as_slice().unwrap();
                let gs = args.inputs[1].as_slice().unwrap();
                let dy = args.grad.as_slice().unwrap();
                let mut gx = vec![0.0f64; xs.len()];
                let mut ggamma = vec![0.0f64; d];
                let mut gbeta = vec![0.0f64; d];
                for (row_i, (xrow, drow)) in xs.chunks(d).zip(dy.chunks(d)).enumerate() {
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var =
                        xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv;
                        let dxhat = drow[j] * gs[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma[j] += drow[j] * xhat;
                        gbeta[j] += drow[j];
                    }
                    let m1 = sum_dxhat / d as f64;
                    let m2 = sum_dxhat_xhat / d as f64;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv;
                        let dxhat = drow[j] * gs[j];
                        gx[row_i * d + j] = inv * (dxhat - m1 - xhat * m2);
                    }
                }
                vec![
                    ArrayD::from_shape_vec(args.inputs[0].raw_dim(), gx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), ggamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), gbeta).unwrap(),
                ]
            }),
        )
    }
}
