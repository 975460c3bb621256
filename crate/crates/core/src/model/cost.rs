//! Analytic parameter and FLOP accounting.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use super::ModelConfig;
use crate::error::Result;
use crate::retinex::{PREPROCESS_INPUT, PREPROCESS_STAGES, PREPROCESS_WIDTH};
use crate::scan::SPIRAL_DIRECTIONS;

/// Counting rules used by [`count_params_flops`].
pub const MAC_CONVENTIONS: &str = "FLOPs = 2 x MACs. Convolution: Cout*(Cin/groups)*k*k*H*W MACs, bias adds not counted. \
WKV scan: 12 FLOPs per step per channel, for each of the 8 spiral paths. \
Channel attention: two batched products of n_heads*c_h*c_h*H*W MACs each. \
Element-wise work (activations, normalization, shifts, clamps) is not counted. \
Fixed Scharr stencils count toward FLOPs but not parameters.";

/// FLOPs per token per channel of one WKV scan direction.
pub const WKV_FLOPS_PER_STEP: u64 = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    /// `k x k` convolution with bias on `hw` output positions.
    pub fn conv(cout: usize, cin: usize, k: usize, groups: usize, hw: usize) -> Self {
        let macs = (cout * (cin / groups) * k * k) as u64;
        Self {
            params: macs + cout as u64,
            flops: 2 * macs * hw as u64,
        }
    }

    pub fn pointwise(cout: usize, cin: usize, hw: usize) -> Self {
        Self::conv(cout, cin, 1, 1, hw)
    }

    pub fn depthwise(c: usize, k: usize, hw: usize) -> Self {
        Self::conv(c, c, k, c, hw)
    }

    /// Bias-free `[cout, cin]` projection.
    pub fn matrix(cout: usize, cin: usize, hw: usize) -> Self {
        Self {
            params: (cout * cin) as u64,
            flops: 2 * (cout * cin * hw) as u64,
        }
    }

    /// Fixed stencil: compute only.
    pub fn fixed_conv(cout: usize, cin: usize, k: usize, groups: usize, hw: usize) -> Self {
        Self {
            params: 0,
            ..Self::conv(cout, cin, k, groups, hw)
        }
    }

    /// Per-channel vectors such as Q-Shift ratios or norm affines.
    pub fn vector(n: usize) -> Self {
        Self {
            params: n as u64,
            flops: 0,
        }
    }

    /// Multi-path WKV over `hw` tokens, plus its decay and bonus vectors.
    pub fn wkv(c: usize, hw: usize) -> Self {
        Self {
            params: 2 * c as u64,
            flops: WKV_FLOPS_PER_STEP * (hw * c * SPIRAL_DIRECTIONS.len()) as u64,
        }
    }

    /// Channel attention matmuls.
    pub fn attention(n_heads: usize, c_h: usize, hw: usize) -> Self {
        Self {
            params: 0,
            flops: 2 * 2 * (n_heads * c_h * c_h * hw) as u64,
        }
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// `"X.XXX M params, Y.YYY GFLOPs"`.
    pub fn summary(&self) -> String {
        format!("{:.3} M params, {:.3} GFLOPs", self.mparams(), self.gflops())
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

fn light_preprocess(hw: usize) -> Cost {
    let mut total = Cost::default();
    let mut cin = PREPROCESS_INPUT;
    for _ in 0..PREPROCESS_STAGES {
        total += Cost::depthwise(cin, 3, hw) + Cost::pointwise(PREPROCESS_WIDTH, cin, hw);
        cin = PREPROCESS_WIDTH;
    }
    total + Cost::pointwise(3, cin, hw) + Cost::pointwise(1, cin, hw) + Cost::pointwise(3, cin, hw)
}

pub fn es_rwkv_block(c: usize, hw: usize) -> Cost {
    let spatial = Cost::vector(3 * c) + Cost::matrix(c, c, hw) * 4 + Cost::vector(2 * c) + Cost::wkv(c, hw);
    let channel = Cost::vector(2 * c) + Cost::matrix(c, c, hw) * 4 + Cost::vector(2 * c);
    spatial + channel
}

pub fn bi_sab(c: usize, n_heads: usize, hw: usize) -> Cost {
    let qkv = Cost::conv(c, c, 3, 1, hw) * 3;
    let ca = Cost::pointwise(c, c, hw)
        + Cost::depthwise(c, 3, hw)
        + Cost::pointwise(2 * c, c, hw)
        + Cost::depthwise(2 * c, 3, hw)
        + Cost::attention(n_heads, c / n_heads, hw)
        + Cost::pointwise(c, c, hw)
        + Cost::vector(1);
    let ln = Cost::vector(2 * c);
    let sae = Cost::pointwise(2 * c, c, hw)
        + Cost::depthwise(2 * c, 3, hw)
        + Cost::depthwise(c, 3, hw) * 2
        + Cost::pointwise(c, c, hw);
    let see = Cost::fixed_conv(c, c, 3, c, hw) * 2
        + Cost::vector(2 * c)
        + Cost::pointwise(c / 2, c, hw)
        + Cost::conv(c, c / 2, 3, 1, hw);
    qkv + ca + ln + sae + see
}

impl std::ops::Mul<usize> for Cost {
    type Output = Cost;
    fn mul(self, k: usize) -> Cost {
        Cost {
            params: self.params * k as u64,
            flops: self.flops * k as u64,
        }
    }
}

/// Trainable parameter count and FLOPs of one `h x w` forward pass.
pub fn count_params_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<Cost> {
    cfg.validate()?;
    cfg.check_extent(h, w)?;
    let hw = |level: usize| (h >> level) * (w >> level);
    let per_level = cfg.blocks_per_level();
    let c0 = cfg.base_channels;
    let mut total = light_preprocess(hw(0)) + Cost::conv(c0, 3, 3, 1, hw(0));
    for level in 0..cfg.levels {
        let c = cfg.width(level);
        total += es_rwkv_block(c, hw(level)) * per_level;
        total += Cost::pointwise(2 * c, 4 * c, hw(level + 1));
    }
    let cb = cfg.width(cfg.levels);
    total += es_rwkv_block(cb, hw(cfg.levels)) * cfg.n2;
    for level in (0..cfg.levels).rev() {
        let c = cfg.width(level);
        total += Cost::pointwise(4 * c, 2 * c, hw(level + 1));
        total += bi_sab(c, cfg.n_heads, hw(level));
        total += es_rwkv_block(c, hw(level)) * per_level;
    }
    total += Cost::conv(3, c0, 3, 1, hw(0)) * 2;
    Ok(total + Cost::vector(3))
}
