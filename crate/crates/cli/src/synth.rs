//! Procedural clean scenes and their simulated low-light counterparts.

use drwkv::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// `low = clamp(scale · clean^gamma + N(0, sigma²), 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub gamma: f64,
    pub scale: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            scale: 0.4,
            sigma: 0.01,
            seed: 42,
        }
    }
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "synth_pair", msg });
        if !(self.gamma.is_finite() && self.gamma >= 1.0) {
            return bad(format!("gamma {} must be >= 1", self.gamma));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale {} must lie in (0, 1]", self.scale));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma {} must be >= 0", self.sigma));
        }
        Ok(())
    }
}

/// Darkens `clean` (any shape, values in `[0, 1]`). Returns `(low, clean)`.
pub fn synth_pair(clean: &Tensor<f32>, spec: &SyntheticPairSpec) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidArgument {
        op: "synth_pair",
        msg: e.to_string(),
    })?;
    let mut low = clean.clone();
    for v in low.data_mut() {
        let n: f64 = noise.sample(&mut rng);
        let x = spec.scale * f64::from(*v).powf(spec.gamma) + n;
        *v = x.clamp(0.0, 1.0) as f32;
    }
    Ok((low, clean.clone()))
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// A `[3, H, W]` scene: a tilted colour gradient, a few discs and boxes, and
/// faint stripes for texture.
pub fn clean_scene<R: Rng>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let base = color(rng, 0.25, 0.75);
    let tilt = color(rng, -0.3, 0.3);
    let stripe_freq = rng.gen_range(0.2f32..0.9);
    let stripe_amp = rng.gen_range(0.0f32..0.06);
    let (hf, wf) = (h as f32, w as f32);
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let r = rng.gen_range(0.1..0.3) * hf.min(wf);
            (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf), r, color(rng, 0.0, 1.0))
        })
        .collect();
    let boxes: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..rng.gen_range(0..=2))
        .map(|_| {
            let (y0, x0) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
            let (bh, bw) = (rng.gen_range(0.15..0.4) * hf, rng.gen_range(0.15..0.4) * wf);
            (y0, x0, y0 + bh, x0 + bw, color(rng, 0.0, 1.0))
        })
        .collect();
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / plane, ((i % plane) / w) as f32, (i % w) as f32);
        let mut v = base[c] + tilt[c] * (x / wf - 0.5) + stripe_amp * (stripe_freq * (x + y)).sin();
        for &(y0, x0, y1, x1, col) in &boxes {
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                v = col[c];
            }
        }
        for &(cy, cx, r, col) in &discs {
            if (y - cy).hypot(x - cx) < r {
                v = col[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// `n` scene/low-light pairs stacked as `[n, 3, H, W]` batches `(low, clean)`.
/// Scene `i` and its noise both derive from `spec.seed`.
pub fn synthetic_pairs(n: usize, h: usize, w: usize, spec: &SyntheticPairSpec) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument {
            op: "synthetic_pairs",
            msg: format!("need at least one {h}x{w} pair, got {n}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut lows, mut cleans) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let clean = clean_scene(h, w, &mut rng);
        let pair_spec = SyntheticPairSpec { seed: rng.gen(), ..*spec };
        let (low, clean) = synth_pair(&clean, &pair_spec)?;
        lows.push(low);
        cleans.push(clean);
    }
    Ok((Tensor::stack(&lows)?, Tensor::stack(&cleans)?))
}
