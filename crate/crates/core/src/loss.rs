//! MS²-Loss terms and full-reference quality metrics.
//!
//! Every norm is a mean so the weights do not depend on resolution.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Term weights and the two shape coefficients of the smoothness and
/// artifact terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Edge-awareness of the illumination smoothness term.
    pub lambda_smooth: f64,
    /// Total-variation weight inside the artifact term.
    pub delta_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 0.1,
            lambda4: 0.05,
            lambda5: 1e-4,
            lambda_smooth: 10.0,
            delta_tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda_smooth,
            self.delta_tv,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights", "all weights must be finite and >= 0"));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }
}

/// Per-term values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub sparse: f64,
    pub smooth: f64,
    pub artifact: f64,
    pub reg: f64,
    pub total: f64,
}

/// Weighted sum of the five terms `[recon, sparse, smooth, artifact, reg]`.
pub fn ms2_total(terms: [f64; 5], w: &LossWeights) -> LossBreakdown {
    let total = terms.iter().zip(w.as_array()).map(|(t, l)| t * l).sum();
    LossBreakdown {
        recon: terms[0],
        sparse: terms[1],
        smooth: terms[2],
        artifact: terms[3],
        reg: terms[4],
        total,
    }
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?}", g.shape(a)), g.shape(b)));
    }
    Ok(())
}

/// Mean absolute difference between the reference and the enhanced image.
pub fn l_recon<T: Real>(g: &mut Graph<T>, target: Var, enhanced: Var) -> Result<Var> {
    same_shape(g, "l_recon", target, enhanced)?;
    let d = g.sub(target, enhanced)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Mean `|E|`.
pub fn l_sparse<T: Real>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    let a = g.abs(e)?;
    g.mean(a)
}

/// Edge-aware smoothness of the `[N, 1, H, W]` illumination against the
/// `[N, 3, H, W]` image: mean over pixels and both directions of
/// `|∇L| · exp(-λ |∇ luma(I)|)`.
pub fn l_smooth<T: Real>(g: &mut Graph<T>, l: Var, img: Var, lambda: f64) -> Result<Var> {
    let (ls, is) = (g.shape(l).to_vec(), g.shape(img).to_vec());
    if ls.len() != 4 || is.len() != 4 || ls[1] != 1 || ls[0] != is[0] || ls[2..] != is[2..] {
        return Err(Error::shape("l_smooth", format!("L [N, 1, H, W] matching image {is:?}"), &ls));
    }
    let luma = g.sum_axis(img, 1)?;
    let luma = g.scale(luma, 1.0 / is[1] as f64)?;
    let mut parts = Vec::with_capacity(2);
    for axis in [2, 3] {
        let dl = g.forward_diff(l, axis)?;
        let dl = g.abs(dl)?;
        let di = g.forward_diff(luma, axis)?;
        let di = g.abs(di)?;
        let wgt = g.scale(di, -lambda)?;
        let wgt = g.exp(wgt)?;
        let term = g.mul(dl, wgt)?;
        parts.push(g.sum(term)?);
    }
    let total = g.add(parts[0], parts[1])?;
    let count: usize = ls.iter().product();
    g.scale(total, 1.0 / (2 * count) as f64)
}

/// Anisotropic total variation `mean(|∇_h S| + |∇_w S|)`.
pub fn total_variation<T: Real>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let dh = g.forward_diff(s, 2)?;
    let dh = g.abs(dh)?;
    let dw = g.forward_diff(s, 3)?;
    let dw = g.abs(dw)?;
    let sum = g.add(dh, dw)?;
    g.mean(sum)
}

/// `mean|S| + δ · TV(S)`.
pub fn l_artifact<T: Real>(g: &mut Graph<T>, s: Var, delta_tv: f64) -> Result<Var> {
    let energy = l_sparse(g, s)?;
    let tv = total_variation(g, s)?;
    let tv = g.scale(tv, delta_tv)?;
    g.add(energy, tv)
}

/// `α² + β² + γ²`.
pub fn l_reg<T: Real>(g: &mut Graph<T>, alpha: Var, beta: Var, gamma: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for v in [alpha, beta, gamma] {
        let sq = g.square(v)?;
        let sq = g.sum(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc.expect("three terms"))
}

/// Handles of the five terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub sparse: Var,
    pub smooth: Var,
    pub artifact: Var,
    pub reg: Var,
}

impl LossTerms {
    fn as_array(&self) -> [Var; 5] {
        [self.recon, self.sparse, self.smooth, self.artifact, self.reg]
    }

    /// Differentiable weighted total.
    pub fn total<T: Real>(&self, g: &mut Graph<T>, w: &LossWeights) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (v, l) in self.as_array().into_iter().zip(w.as_array()) {
            let t = g.scale(v, l)?;
            acc = Some(match acc {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
        Ok(acc.expect("five terms"))
    }

    /// Reads the current term values.
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, w: &LossWeights) -> Result<LossBreakdown> {
        let mut vals = [0.0; 5];
        for (o, v) in vals.iter_mut().zip(self.as_array()) {
            *o = g.value(v).item()?.as_f64();
        }
        Ok(ms2_total(vals, w))
    }
}

/// Largest reported PSNR, used for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if a.numel() == 0 {
        return Err(Error::invalid("psnr", "empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over the valid region of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| win[j] * plane[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| win[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5),
/// dynamic range 1, averaged over channels. Accepts `[C, H, W]` or
/// `[N, C, H, W]` (all planes averaged).
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::shape("ssim", "[C, H, W] image", shape));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let planes = a.numel() / plane;
    let mut acc = 0.0;
    for p in 0..planes {
        let x: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(s, t)| s * t).collect() };
        let mx = filter_valid(&x, h, w, &win);
        let my = filter_valid(&y, h, w, &win);
        let sxx = filter_valid(&prod(&x, &x), h, w, &win);
        let syy = filter_valid(&prod(&y, &y), h, w, &win);
        let sxy = filter_valid(&prod(&x, &y), h, w, &win);
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        acc += sum / n as f64;
    }
    Ok(acc / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn value(inputs: &[&Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
        let y = f(&mut g, &vars).unwrap();
        g.value(y).item().unwrap()
    }

    #[test]
    fn recon_cases() {
        let mut r = rng(1);
        let a = Tensor::<f64>::uniform(&[1, 3, 4, 5], 0.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform(&[1, 3, 4, 5], 0.0, 1.0, &mut r);
        assert_eq!(value(&[&a, &a], |g, v| l_recon(g, v[0], v[1])), 0.0);
        let shifted = a.map(|x| x + 0.5);
        assert!((value(&[&a, &shifted], |g, v| l_recon(g, v[0], v[1])) - 0.5).abs() < 1e-12);
        let mut oracle = 0.0;
        for i in 0..a.numel() {
            oracle += (a.data()[i] - b.data()[i]).abs();
        }
        oracle /= a.numel() as f64;
        assert!((value(&[&a, &b], |g, v| l_recon(g, v[0], v[1])) - oracle).abs() < 1e-12);
        let mut g = Graph::<f64>::inference();
        let (x, y) = (g.constant(a.clone()), g.constant(Tensor::zeros(&[1, 3, 4, 4])));
        assert!(l_recon(&mut g, x, y).is_err());
    }

    #[test]
    fn sparse_cases() {
        let s = |t: Tensor<f64>| value(&[&t], |g, v| l_sparse(g, v[0]));
        assert_eq!(s(Tensor::zeros(&[1, 3, 2, 2])), 0.0);
        assert_eq!(s(Tensor::from_fn(&[1, 3, 2, 2], |i| if i % 2 == 0 { 1.0 } else { -1.0 })), 1.0);
        let half = Tensor::from_fn(&[1, 3, 2, 2], |i| [0.2, -0.2, 0.0, 0.0][i % 4]);
        assert!((s(half) - 0.1).abs() < 1e-15);
    }

    fn smooth(l: &Tensor<f64>, i: &Tensor<f64>, lambda: f64) -> f64 {
        value(&[l, i], |g, v| l_smooth(g, v[0], v[1], lambda))
    }

    #[test]
    fn smooth_cases() {
        let mut r = rng(2);
        let img = Tensor::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut r);
        assert_eq!(smooth(&Tensor::full(&[1, 1, 4, 4], 0.7), &img, 10.0), 0.0);

        // Unit step in L aligned with a step of height g in the image.
        let step = 0.3;
        let l = Tensor::new(&[1, 1, 1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let i = Tensor::from_fn(&[1, 3, 1, 4], |k| if k % 4 >= 2 { step } else { 0.0 });
        let plain = smooth(&l, &i, 0.0);
        assert!((plain - 1.0 / 8.0).abs() < 1e-15);
        let lambda = 10.0;
        assert!((smooth(&l, &i, lambda) / plain - (-lambda * step).exp()).abs() < 1e-12);

        let l = Tensor::<f64>::uniform(&[1, 1, 4, 4], 0.0, 2.0, &mut r);
        let mut mean_grad = 0.0;
        for row in 0..4 {
            for col in 0..4 {
                let at = |rr: usize, cc: usize| l.data()[rr * 4 + cc];
                if row < 3 {
                    mean_grad += (at(row + 1, col) - at(row, col)).abs();
                }
                if col < 3 {
                    mean_grad += (at(row, col + 1) - at(row, col)).abs();
                }
            }
        }
        mean_grad /= 32.0;
        assert!((smooth(&l, &img, 0.0) - mean_grad).abs() < 1e-12);
    }

    #[test]
    fn artifact_cases() {
        let a = |t: &Tensor<f64>, d: f64| value(&[t], |g, v| l_artifact(g, v[0], d));
        assert_eq!(a(&Tensor::zeros(&[1, 3, 3, 3]), 1.0), 0.0);
        assert!((a(&Tensor::full(&[1, 3, 3, 3], 0.4), 1.0) - 0.4).abs() < 1e-15);
        // 3x3 checkerboard ±c: 6 horizontal and 6 vertical differences of 2c
        // per channel, over 9 pixels.
        let c = 0.25;
        let board = Tensor::from_fn(&[1, 3, 3, 3], |i| {
            let (r, col) = ((i % 9) / 3, i % 3);
            if (r + col) % 2 == 0 {
                c
            } else {
                -c
            }
        });
        let tv = 12.0 * 2.0 * c / 9.0;
        for delta in [0.5, 1.0, 2.0] {
            assert!((a(&board, delta) - (c + delta * tv)).abs() < 1e-14);
        }
    }

    #[test]
    fn reg_and_total() {
        let t = |v: f64| Tensor::full(&[1], v);
        let (a, b, c) = (t(1.0), t(2.0), t(3.0));
        assert_eq!(value(&[&a, &b, &c], |g, v| l_reg(g, v[0], v[1], v[2])), 14.0);
        let z = t(0.0);
        assert_eq!(value(&[&z, &z, &z], |g, v| l_reg(g, v[0], v[1], v[2])), 0.0);

        let w = LossWeights::default();
        assert!((ms2_total([1.0; 5], &w).total - 1.1601).abs() < 1e-12);
        assert_eq!(ms2_total([0.0; 5], &w).total, 0.0);
        let base = ms2_total([0.3, 0.2, 0.1, 0.4, 0.5], &w).total;
        let scaled = ms2_total([0.9, 0.2, 0.1, 0.4, 0.5], &w).total;
        assert!((scaled - base - 0.6 * w.lambda1).abs() < 1e-12);
        assert!(LossWeights { lambda2: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn graph_total_matches_breakdown() {
        let mut r = rng(3);
        let mut g = Graph::<f64>::inference();
        let vals: Vec<Var> = (0..5).map(|_| g.constant(Tensor::uniform(&[1], 0.0, 2.0, &mut r))).collect();
        let terms = LossTerms {
            recon: vals[0],
            sparse: vals[1],
            smooth: vals[2],
            artifact: vals[3],
            reg: vals[4],
        };
        let w = LossWeights::default();
        let total = terms.total(&mut g, &w).unwrap();
        let bd = terms.breakdown(&g, &w).unwrap();
        assert!((g.value(total).item().unwrap() - bd.total).abs() < 1e-7);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng(4);
        let shape = [1, 3, 4, 5];
        let other = Tensor::<f64>::uniform(&shape, 0.0, 1.0, &mut r);
        let img = Tensor::<f64>::uniform(&shape, 0.0, 1.0, &mut r);
        let x = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut r);
        let l = Tensor::<f64>::uniform(&[1, 1, 4, 5], 0.1, 1.9, &mut r);
        let abg = Tensor::<f64>::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        type Check<'a> = (&'a str, Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a>, &'a Tensor<f64>);
        let checks: Vec<Check> = vec![
            ("recon", Box::new(|g, v| {
                let o = g.constant(other.clone());
                l_recon(g, o, v)
            }), &x),
            ("sparse", Box::new(l_sparse), &x),
            ("smooth_l", Box::new(|g, v| {
                let i = g.constant(img.clone());
                l_smooth(g, v, i, 10.0)
            }), &l),
            ("smooth_i", Box::new(|g, v| {
                let lv = g.constant(l.clone());
                l_smooth(g, lv, v, 10.0)
            }), &img),
            ("artifact", Box::new(|g, v| l_artifact(g, v, 0.7)), &x),
            ("reg", Box::new(|g, v| {
                let r = g.reshape(v, &[1, 3, 1, 1])?;
                let parts: Vec<Var> = (0..3).map(|i| g.narrow_channels(r, i, 1)).collect::<Result<_>>()?;
                l_reg(g, parts[0], parts[1], parts[2])
            }), &abg),
        ];
        for (name, f, point) in checks {
            let err = finite_diff_check(f, point, 1e-6).unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let zero = Tensor::<f64>::zeros(&[3, 4, 4]);
        let one = Tensor::<f64>::ones(&[3, 4, 4]);
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut r = rng(5);
        let clean = Tensor::<f64>::uniform(&[3, 16, 16], 0.2, 0.8, &mut r);
        let noise = Tensor::<f64>::randn(&[3, 16, 16], 1.0, &mut r);
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = clean.zip_map(&noise, "t", |c, n| c + amp * n).unwrap();
            let p = psnr(&clean, &noisy).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_cases() {
        let mut r = rng(6);
        let x = Tensor::<f64>::uniform(&[3, 16, 16], 0.0, 1.0, &mut r);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);

        let binary = x.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let inverted = binary.map(|v| 1.0 - v);
        assert!(ssim(&binary, &inverted).unwrap() < 0.0);

        let flat = Tensor::<f64>::full(&[3, 16, 16], 0.5);
        let jitter = Tensor::<f64>::randn(&[3, 16, 16], 1e-3, &mut r);
        let noisy = flat.zip_map(&jitter, "t", |a, b| a + b).unwrap();
        assert!(ssim(&flat, &noisy).unwrap() > 0.99);

        assert!(ssim(&Tensor::<f64>::zeros(&[3, 10, 16]), &Tensor::zeros(&[3, 10, 16])).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Unseparated window statistics at one location.
        let mut r = rng(7);
        let x = Tensor::<f64>::uniform(&[1, 11, 11], 0.0, 1.0, &mut r);
        let y = Tensor::<f64>::uniform(&[1, 11, 11], 0.0, 1.0, &mut r);
        let mut wsum = 0.0;
        let mut wts = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
                wts[i * 11 + j] = (-d2).exp();
                wsum += wts[i * 11 + j];
            }
        }
        let e = |f: &dyn Fn(usize) -> f64| (0..121).map(|k| wts[k] / wsum * f(k)).sum::<f64>();
        let (xd, yd) = (x.data(), y.data());
        let (ux, uy) = (e(&|k| xd[k]), e(&|k| yd[k]));
        let vx = e(&|k| xd[k] * xd[k]) - ux * ux;
        let vy = e(&|k| yd[k] * yd[k]) - uy * uy;
        let cxy = e(&|k| xd[k] * yd[k]) - ux * uy;
        let (c1, c2) = (1e-4, 9e-4);
        let want = (2.0 * ux * uy + c1) * (2.0 * cxy + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut r = rng(seed);
            let a = Tensor::<f64>::uniform(&[3, 12, 13], 0.0, 1.0, &mut r);
            let b = Tensor::<f64>::uniform(&[3, 12, 13], 0.0, 1.0, &mut r);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn smooth_ignores_constant_offsets(seed in any::<u64>(), offset in -1.0f64..1.0) {
            let mut r = rng(seed);
            let l = Tensor::<f64>::uniform(&[1, 1, 5, 4], 0.0, 2.0, &mut r);
            let i = Tensor::<f64>::uniform(&[1, 3, 5, 4], 0.0, 1.0, &mut r);
            let shifted = l.map(|v| v + offset);
            prop_assert!((smooth(&l, &i, 10.0) - smooth(&shifted, &i, 10.0)).abs() < 1e-12);
        }

        #[test]
        fn terms_are_nonnegative(seed in any::<u64>()) {
            let mut r = rng(seed);
            let x = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut r);
            let y = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut r);
            let l = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut r);
            prop_assert!(value(&[&x, &y], |g, v| l_recon(g, v[0], v[1])) >= 0.0);
            prop_assert!(value(&[&x], |g, v| l_sparse(g, v[0])) >= 0.0);
            prop_assert!(value(&[&l, &y], |g, v| l_smooth(g, v[0], v[1], 10.0)) >= 0.0);
            prop_assert!(value(&[&x], |g, v| l_artifact(g, v[0], 1.0)) >= 0.0);
        }
    }
}
