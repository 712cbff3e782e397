//! Window partitioning for windowed self-attention, plus reflection
//! padding. Both are expressed as flat gather index maps so the generic
//! gather/scatter machinery provides the backward pass.

use std::sync::Arc;

use super::tape::{Tape, Var};

/// `x [C, H, W]` -> `[nWin, ws*ws, C]` with an optional cyclic shift of
/// `shift` pixels applied (up and left) before partitioning. Windows and
/// tokens scan row-major; channels go last so the result feeds token-wise
/// attention directly.
pub fn window_partition_idx(
    c: usize,
    h: usize,
    w: usize,
    ws: usize,
    shift: usize,
) -> (Vec<u32>, Vec<usize>) {
    assert!(h % ws == 0 && w % ws == 0, "window size must divide dims");
    let (nh, nw) = (h / ws, w / ws);
    let mut idx = Vec::with_capacity(nh * nw * ws * ws * c);
    for wy in 0..nh {
        for wx in 0..nw {
            for ty in 0..ws {
                for tx in 0..ws {
                    let r = (wy * ws + ty + shift) % h;
                    let cc = (wx * ws + tx + shift) % w;
                    for ch in 0..c {
                        idx.push((ch * h * w + r * w + cc) as u32);
                    }
                }
            }
        }
    }
    (idx, vec![nh * nw, ws * ws, c])
}

/// Inverse of [`window_partition_idx`]: `[nWin, ws*ws, C]` -> `[C, H, W]`.
pub fn window_merge_idx(
    c: usize,
    h: usize,
    w: usize,
    ws: usize,
    shift: usize,
) -> (Vec<u32>, Vec<usize>) {
    let (fwd, _) = window_partition_idx(c, h, w, ws, shift);
    let mut inv = vec![0u32; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src as usize] = dst as u32;
    }
    (inv, vec![c, h, w])
}

/// Reflection padding (mirror without repeating the edge sample) for
/// `[C, H, W]`; pads must be smaller than the corresponding dimension.
pub fn reflect_pad_idx(
    c: usize,
    h: usize,
    w: usize,
    pads: (usize, usize, usize, usize), // top, bottom, left, right
) -> (Vec<u32>, Vec<usize>) {
    let (pt, pb, pl, pr) = pads;
    assert!(pt < h && pb < h && pl < w && pr < w, "reflect pad too large");
    let (ho, wo) = (h + pt + pb, w + pl + pr);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i as usize
    };
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for r in 0..ho {
            let sr = reflect(r as isize - pt as isize, h);
            for cc in 0..wo {
                let sc = reflect(cc as isize - pl as isize, w);
                idx.push((ch * h * w + sr * w + sc) as u32);
            }
        }
    }
    (idx, vec![c, ho, wo])
}

impl Tape {
    pub fn window_partition(&self, x: Var, ws: usize, shift: usize) -> Var {
        let s = self.shape(x);
        let (idx, out_shape) = window_partition_idx(s[0], s[1], s[2], ws, shift);
        self.gather(x, Arc::new(idx), &out_shape)
    }

    pub fn window_merge(&self, x: Var, ws: usize, shift: usize, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        let c = s[2];
        let (idx, out_shape) = window_merge_idx(c, h, w, ws, shift);
        self.gather(x, Arc::new(idx), &out_shape)
    }

    pub fn reflect_pad2(&self, x: Var, pads: (usize, usize, usize, usize)) -> Var {
        let s = self.shape(x);
        let (idx, out_shape) = reflect_pad_idx(s[0], s[1], s[2], pads);
        self.gather(x, Arc::new(idx), &out_shape)
    }

    /// Crop spatial dims of `[C, H, W]` to `h x w` starting at `(top, left)`.
    pub fn crop2(&self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let y = self.narrow(x, 1, top, h);
        self.narrow(y, 2, left, w)
    }
}
