//! Orthonormal 2-D Haar transform used for down- and upsampling.
//!
//! Per 2x2 block `(a, b; c, d)`:
//! `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`,
//! `HH = (a-b-c+d)/2`. Subbands are stacked on channels as
//! `[LL, LH, HL, HH]`, each block holding all `C` input channels.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `[N, C, H, W] -> [N, 4C, H/2, W/2]`.
pub fn haar_dwt2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("haar_dwt2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("haar_dwt2", format!("extent {h}x{w} is not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let src = x.data();
    let mut out = Tensor::zeros(&[n, 4 * c, oh, ow]);
    let band = c * oh * ow;
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let at = |di: usize, dj: usize| src[plane + (2 * i + di) * w + 2 * j + dj];
                    let (p, q, r, s) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                    let o = b * 4 * band + (ch * oh + i) * ow + j;
                    dst[o] = (p + q + r + s) * half;
                    dst[o + band] = (p - q + r - s) * half;
                    dst[o + 2 * band] = (p + q - r - s) * half;
                    dst[o + 3 * band] = (p - q - r + s) * half;
                }
            }
        }
    }
    Ok(out)
}

/// `[N, 4C, H, W] -> [N, C, 2H, 2W]`, the exact inverse of [`haar_dwt2`].
pub fn haar_idwt2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, h, w) = x.dims4("haar_idwt2")?;
    if c4 % 4 != 0 {
        return Err(Error::invalid("haar_idwt2", format!("{c4} channels not divisible by 4")));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let half = T::lit(0.5);
    let src = x.data();
    let band = c * h * w;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * oh * ow;
            for i in 0..h {
                for j in 0..w {
                    let o = b * 4 * band + (ch * h + i) * w + j;
                    let (ll, lh, hl, hh) = (src[o], src[o + band], src[o + 2 * band], src[o + 3 * band]);
                    dst[plane + 2 * i * ow + 2 * j] = (ll + lh + hl + hh) * half;
                    dst[plane + 2 * i * ow + 2 * j + 1] = (ll - lh + hl - hh) * half;
                    dst[plane + (2 * i + 1) * ow + 2 * j] = (ll + lh - hl - hh) * half;
                    dst[plane + (2 * i + 1) * ow + 2 * j + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    Ok(out)
}

// The transform is orthogonal, so each direction back-propagates through the other.

pub fn haar_dwt2_var<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let y = haar_dwt2(g.value(x))?;
    g.record("haar_dwt2", y, &[x], Box::new(|a| Ok(vec![Some(haar_idwt2(a.grad)?)])))
}

pub fn haar_idwt2_var<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let y = haar_idwt2(g.value(x))?;
    g.record("haar_idwt2", y, &[x], Box::new(|a| Ok(vec![Some(haar_dwt2(a.grad)?)])))
}
