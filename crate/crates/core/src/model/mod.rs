//! The assembled enhancement network.
//!
//! Light preprocessing estimates `S`, `L`, `N` and a restored image `Î₀`.
//! A wavelet UNet of ES-RWKV groups refines `Î₀` (channels
//! `C -> 2C -> 4C -> 2C -> C` for two levels), Bi-SAB fuses each encoder
//! skip with the upsampled decoder features, and two heads produce the edge
//! map `E` and a residual correction. GER recomposition gives the output.

mod cost;
mod haar;
mod weights;

use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cost::{bi_sab as bi_sab_cost, count_params_flops, es_rwkv_block as es_rwkv_block_cost, Cost, MAC_CONVENTIONS};
pub use haar::{haar_dwt2, haar_dwt2_var, haar_idwt2, haar_idwt2_var};
pub use weights::{load_weights, save_weights, DrwkvWeights, Manifest, ManifestEntry, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::autograd::{Graph, Var};
use crate::bisab::{bi_sab, init_bi_sab};
use crate::error::{Error, Result};
use crate::init::{Bound, ParamStore};
use crate::layers::{conv, init_conv, init_pointwise, pointwise};
use crate::ops::NormMode;
use crate::retinex::{
    estimate_components, ger_recompose, init_ger, init_light_preprocess, reflectance_restore, GerComponents, GerParams,
    RETINEX_EPS,
};
use crate::scan::{all_spiral_paths, ScanPath};
use crate::tensor::{Real, Tensor};
use crate::wkv::{es_rwkv_block, init_es_rwkv_block};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels after the stem; doubled at every level.
    pub base_channels: usize,
    /// ES-RWKV blocks on each side of the UNet, split evenly over levels.
    pub n1: usize,
    /// ES-RWKV blocks at the bottleneck.
    pub n2: usize,
    pub levels: usize,
    pub n_heads: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n1: 4,
            n2: 8,
            levels: 2,
            n_heads: 4,
            eps: RETINEX_EPS,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        let c = self.base_channels;
        if c == 0 || !c.is_multiple_of(4) {
            return bad(format!("base_channels {c} must be a positive multiple of 4"));
        }
        if self.n_heads == 0 || !c.is_multiple_of(self.n_heads) {
            return bad(format!("base_channels {c} not divisible by n_heads {}", self.n_heads));
        }
        if self.levels == 0 || self.levels > 6 {
            return bad(format!("levels {} outside 1..=6", self.levels));
        }
        if !self.n1.is_multiple_of(self.levels) {
            return bad(format!("n1 {} cannot be split evenly over {} levels", self.n1, self.levels));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn factor(&self) -> usize {
        1 << self.levels
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn blocks_per_level(&self) -> usize {
        self.n1 / self.levels
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::invalid(
                "forward",
                format!("height and width must be divisible by {f}, got {h}x{w}"),
            ));
        }
        Ok(())
    }
}

fn enc_block(level: usize, i: usize) -> String {
    format!("enc{level}.block{i}")
}

fn dec_block(level: usize, i: usize) -> String {
    format!("dec{level}.block{i}")
}

/// Draws every parameter from `cfg.seed`.
pub fn init_weights<T: Real>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let s = &mut store;
    let c0 = cfg.base_channels;
    init_light_preprocess(s, "pre", rng)?;
    init_conv(s, "stem", c0, 3, 3, rng)?;
    for level in 0..cfg.levels {
        let c = cfg.width(level);
        for i in 0..cfg.blocks_per_level() {
            init_es_rwkv_block(s, &enc_block(level, i), c, rng)?;
        }
        init_pointwise(s, &format!("down{level}"), 2 * c, 4 * c, rng)?;
    }
    for i in 0..cfg.n2 {
        init_es_rwkv_block(s, &format!("mid.block{i}"), cfg.width(cfg.levels), rng)?;
    }
    for level in (0..cfg.levels).rev() {
        let c = cfg.width(level);
        init_pointwise(s, &format!("up{level}"), 4 * c, 2 * c, rng)?;
        init_bi_sab(s, &format!("fuse{level}"), c, cfg.n_heads, rng)?;
        for i in 0..cfg.blocks_per_level() {
            init_es_rwkv_block(s, &dec_block(level, i), c, rng)?;
        }
    }
    init_conv(s, "edge_head", 3, c0, 3, rng)?;
    init_conv(s, "refine_head", 3, c0, 3, rng)?;
    init_ger(s, "ger")?;
    Ok(store)
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub enhanced: Var,
    pub edge: Var,
    pub reflectance: Var,
    pub illumination: Var,
    pub noise: Var,
    pub artifact: Var,
    /// Preprocessing output `Î₀`.
    pub restored: Var,
    /// `clamp(Î₀ + residual, 0, 1)`, the recomposition input.
    pub refined: Var,
    pub ger: GerParams,
    /// Feature maps after the stem, each encoder level, the bottleneck and
    /// each decoder level.
    pub features: IndexMap<String, Var>,
}

/// Full network on an `[N, 3, H, W]` batch in `[0, 1]`.
pub fn forward<T: Real>(g: &mut Graph<T>, b: &Bound<T>, cfg: &ModelConfig, img: Var, mode: NormMode) -> Result<ForwardVars> {
    cfg.validate()?;
    let shape = g.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("forward", "[N, 3, H, W]", &shape));
    }
    let (h, w) = (shape[2], shape[3]);
    cfg.check_extent(h, w)?;
    let paths: Vec<Arc<[ScanPath]>> = (0..=cfg.levels)
        .map(|l| all_spiral_paths(h >> l, w >> l).map(Arc::from))
        .collect::<Result<_>>()?;
    let mut features = IndexMap::new();

    let est = estimate_components(g, b, "pre", img)?;
    let restored = reflectance_restore(g, img, est.n, est.l, cfg.eps)?;

    let mut x = conv(g, b, "stem", restored)?;
    features.insert("stem".to_string(), x);
    let mut skips = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        for i in 0..cfg.blocks_per_level() {
            x = es_rwkv_block(g, b, &enc_block(level, i), x, &paths[level])?;
        }
        features.insert(format!("enc{level}"), x);
        skips.push(x);
        x = haar_dwt2_var(g, x)?;
        x = pointwise(g, b, &format!("down{level}"), x)?;
    }
    for i in 0..cfg.n2 {
        x = es_rwkv_block(g, b, &format!("mid.block{i}"), x, &paths[cfg.levels])?;
    }
    features.insert("mid".to_string(), x);
    for level in (0..cfg.levels).rev() {
        x = pointwise(g, b, &format!("up{level}"), x)?;
        x = haar_idwt2_var(g, x)?;
        x = bi_sab(g, b, &format!("fuse{level}"), skips[level], x, cfg.n_heads, mode)?;
        for i in 0..cfg.blocks_per_level() {
            x = es_rwkv_block(g, b, &dec_block(level, i), x, &paths[level])?;
        }
        features.insert(format!("dec{level}"), x);
    }

    let edge = conv(g, b, "edge_head", x)?;
    let edge = g.tanh(edge)?;
    let residual = conv(g, b, "refine_head", x)?;
    let refined = g.add(restored, residual)?;
    let refined = g.clamp(refined, 0.0, 1.0)?;
    let ger = GerParams::bind(b, "ger", cfg.eps)?;
    let rec = ger_recompose(g, refined, edge, est.n, est.l, est.s, &ger)?;
    Ok(ForwardVars {
        enhanced: rec.enhanced,
        edge,
        reflectance: rec.reflectance,
        illumination: est.l,
        noise: est.n,
        artifact: est.s,
        restored,
        refined,
        ger,
        features,
    })
}

/// Inference result for a single `[3, H, W]` image.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T = f32> {
    pub enhanced: Tensor<T>,
    pub edge: Tensor<T>,
    pub components: GerComponents<T>,
    pub restored: Tensor<T>,
    pub intermediate: IndexMap<String, Tensor<T>>,
}

/// Runs [`forward`] without recording gradients, batch norm in eval mode.
pub fn enhance<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, img: &Tensor<T>) -> Result<ForwardOutput<T>> {
    if img.ndim() != 3 {
        return Err(Error::shape("enhance", "[3, H, W]", img.shape()));
    }
    let g = &mut Graph::inference();
    let b = params.bind(g)?;
    let x = g.constant(img.clone().unsqueeze0());
    let out = forward(g, &b, cfg, x, NormMode::Eval)?;
    let take = |v: Var| g.value(v).index0(0);
    let scalar = |v: Var| -> Result<T> { g.value(v).data().first().copied().ok_or_else(|| Error::invalid("enhance", "empty GER weight")) };
    let components = GerComponents {
        r: take(out.reflectance)?,
        l: take(out.illumination)?,
        n: take(out.noise)?,
        s: take(out.artifact)?,
        e: take(out.edge)?,
        alpha: scalar(out.ger.alpha)?,
        beta: scalar(out.ger.beta)?,
        gamma: scalar(out.ger.gamma)?,
    };
    let intermediate = out
        .features
        .iter()
        .map(|(k, v)| Ok((k.clone(), take(*v)?)))
        .collect::<Result<_>>()?;
    Ok(ForwardOutput {
        enhanced: take(out.enhanced)?,
        edge: take(out.edge)?,
        components,
        restored: take(out.restored)?,
        intermediate,
    })
}
