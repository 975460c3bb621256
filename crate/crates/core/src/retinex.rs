//! Light preprocessing (gray-world prior, S/L/N estimation, reflectance
//! restoration) and Global Edge Retinex recomposition.
//!
//! The image model is `I = (R + αE) ⊙ L + βN + γS` with reflectance `R`,
//! single-channel illumination `L ∈ (0, 2)`, noise `N ∈ (-1, 1)`, artifact
//! `S ∈ (0, 1)` and a learned edge map `E ∈ (-1, 1)`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{Bound, ParamStore};
use crate::layers::{depthwise, init_depthwise, init_pointwise, pointwise};
use crate::tensor::{Real, Tensor};

/// Added to every `L` before dividing.
pub const RETINEX_EPS: f64 = 1e-4;
/// Guards the gray-world gains on black images.
pub const GRAY_WORLD_EPS: f64 = 1e-6;
/// Feature width of the preprocessing backbone.
pub const PREPROCESS_WIDTH: usize = 16;
pub const PREPROCESS_STAGES: usize = 3;
/// Backbone input: image, gray-world corrected image, mean luma.
pub const PREPROCESS_INPUT: usize = 7;
/// Initial value of α, β and γ.
pub const GER_INIT: f64 = 0.1;

/// Decomposition bundle for one image batch, all NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct GerComponents<T = f32> {
    /// Reflectance, 3 channels, in `[0, 1]`.
    pub r: Tensor<T>,
    /// Illumination, 1 channel, in `(0, 2)`.
    pub l: Tensor<T>,
    /// Noise, 3 channels, in `(-1, 1)`.
    pub n: Tensor<T>,
    /// Artifact, 3 channels, in `(0, 1)`.
    pub s: Tensor<T>,
    /// Edge feature, 3 channels, in `(-1, 1)`.
    pub e: Tensor<T>,
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
}

/// Gray-world white balance of a `[3, H, W]` or `[N, 3, H, W]` image:
/// channel `c` is scaled by `mean(channel means) / max(mean_c, 1e-6)`.
pub fn gray_world<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = img.shape();
    let (batch, h, w) = match *shape {
        [3, h, w] => (1, h, w),
        [n, 3, h, w] => (n, h, w),
        _ => return Err(Error::shape("gray_world", "[3, H, W] or [N, 3, H, W]", shape)),
    };
    let plane = h * w;
    let mut out = img.clone();
    for b in 0..batch {
        let base = b * 3 * plane;
        let means: Vec<f64> = (0..3)
            .map(|c| {
                let s: f64 = img.data()[base + c * plane..base + (c + 1) * plane].iter().map(|v| v.as_f64()).sum();
                s / plane as f64
            })
            .collect();
        let gray = means.iter().sum::<f64>() / 3.0;
        for (c, mean) in means.iter().enumerate() {
            let gain = gray / mean.max(GRAY_WORLD_EPS);
            for v in &mut out.data_mut()[base + c * plane..base + (c + 1) * plane] {
                *v = T::lit(v.as_f64() * gain);
            }
        }
    }
    Ok(out)
}

pub fn init_light_preprocess<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<()> {
    let mut cin = PREPROCESS_INPUT;
    for stage in 0..PREPROCESS_STAGES {
        init_depthwise(s, &format!("{prefix}.stage{stage}.dw"), cin, 3, rng)?;
        init_pointwise(s, &format!("{prefix}.stage{stage}.pw"), PREPROCESS_WIDTH, cin, rng)?;
        cin = PREPROCESS_WIDTH;
    }
    init_pointwise(s, &format!("{prefix}.head_s"), 3, PREPROCESS_WIDTH, rng)?;
    init_pointwise(s, &format!("{prefix}.head_l"), 1, PREPROCESS_WIDTH, rng)?;
    init_pointwise(s, &format!("{prefix}.head_n"), 3, PREPROCESS_WIDTH, rng)
}

/// Estimated `S`, `L`, `N` handles.
#[derive(Clone, Copy, Debug)]
pub struct Estimates {
    pub s: Var,
    pub l: Var,
    pub n: Var,
}

/// Runs the preprocessing backbone on an `[N, 3, H, W]` image in `[0, 1]`.
pub fn estimate_components<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, img: Var) -> Result<Estimates> {
    let shape = g.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("estimate_components", "[N, 3, H, W]", &shape));
    }
    let prior = gray_world(g.value(img))?;
    let prior = g.constant(prior);
    let luma = g.sum_axis(img, 1)?;
    let luma = g.scale(luma, 1.0 / 3.0)?;
    let mut x = g.concat_channels(&[img, prior, luma])?;
    for stage in 0..PREPROCESS_STAGES {
        x = depthwise(g, b, &format!("{prefix}.stage{stage}.dw"), x)?;
        x = pointwise(g, b, &format!("{prefix}.stage{stage}.pw"), x)?;
        x = g.relu(x)?;
    }
    let s = pointwise(g, b, &format!("{prefix}.head_s"), x)?;
    let s = g.sigmoid(s)?;
    let l = pointwise(g, b, &format!("{prefix}.head_l"), x)?;
    let l = g.sigmoid(l)?;
    let l = g.scale(l, 2.0)?;
    let n = pointwise(g, b, &format!("{prefix}.head_n"), x)?;
    let n = g.tanh(n)?;
    Ok(Estimates { s, l, n })
}

/// `clamp(I ⊙ (I - N) / (L + eps), 0, 1)`.
pub fn reflectance_restore<T: Real>(g: &mut Graph<T>, img: Var, n: Var, l: Var, eps: f64) -> Result<Var> {
    let diff = g.sub(img, n)?;
    let den = g.add_scalar(l, eps)?;
    let r = g.div(diff, den)?;
    let out = g.mul(img, r)?;
    g.clamp(out, 0.0, 1.0)
}

/// Learnable recomposition weights.
#[derive(Clone, Copy, Debug)]
pub struct GerParams {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub eps: f64,
}

impl GerParams {
    pub fn bind<T: Real>(b: &Bound<T>, prefix: &str, eps: f64) -> Result<Self> {
        Ok(Self {
            alpha: b.var(&format!("{prefix}.alpha"))?,
            beta: b.var(&format!("{prefix}.beta"))?,
            gamma: b.var(&format!("{prefix}.gamma"))?,
            eps,
        })
    }
}

pub fn init_ger<T: Real>(s: &mut ParamStore<T>, prefix: &str) -> Result<()> {
    for name in ["alpha", "beta", "gamma"] {
        s.insert(format!("{prefix}.{name}"), Tensor::full(&[1], T::lit(GER_INIT)), true)?;
    }
    Ok(())
}

/// Recomposition result.
#[derive(Clone, Copy, Debug)]
pub struct Recomposed {
    pub enhanced: Var,
    pub reflectance: Var,
}

/// `R = clamp((X - N) / (L + eps), 0, 1)`, then
/// `clamp((R + αE) ⊙ (L + eps) + βN + γS, 0, 1)`.
///
/// Scaling by `L + eps` rather than `L` makes the recomposition the exact
/// inverse of the division when the correction terms vanish.
pub fn ger_recompose<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    e: Var,
    n: Var,
    l: Var,
    s: Var,
    p: &GerParams,
) -> Result<Recomposed> {
    let den = g.add_scalar(l, p.eps)?;
    let diff = g.sub(x, n)?;
    let r = g.div(diff, den)?;
    let r = g.clamp(r, 0.0, 1.0)?;
    let edge = g.mul(e, p.alpha)?;
    let r_enh = g.add(r, edge)?;
    let lit = g.mul(r_enh, den)?;
    let noise = g.mul(n, p.beta)?;
    let art = g.mul(s, p.gamma)?;
    let out = g.add(lit, noise)?;
    let out = g.add(out, art)?;
    let enhanced = g.clamp(out, 0.0, 1.0)?;
    Ok(Recomposed { enhanced, reflectance: r })
}
