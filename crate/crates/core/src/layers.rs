//! Convolution layers stored as `{prefix}.weight` / `{prefix}.bias`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::init::{fan_in_uniform, Bound, ParamStore};
use crate::ops::Conv2dSpec;
use crate::tensor::Real;

/// `k x k` convolution with "same" padding, weight `[cout, cin, k, k]`.
pub fn init_conv<T: Real, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = cin * k * k;
    s.insert(format!("{prefix}.weight"), fan_in_uniform(&[cout, cin, k, k], fan_in, rng), true)?;
    s.insert(format!("{prefix}.bias"), fan_in_uniform(&[cout], fan_in, rng), true)
}

/// Depthwise `k x k` convolution, weight `[c, 1, k, k]`.
pub fn init_depthwise<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, c: usize, k: usize, rng: &mut R) -> Result<()> {
    init_conv(s, prefix, c, 1, k, rng)
}

/// 1x1 convolution, weight `[cout, cin]`.
pub fn init_pointwise<T: Real, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    prefix: &str,
    cout: usize,
    cin: usize,
    rng: &mut R,
) -> Result<()> {
    s.insert(format!("{prefix}.weight"), fan_in_uniform(&[cout, cin], cin, rng), true)?;
    s.insert(format!("{prefix}.bias"), fan_in_uniform(&[cout], cin, rng), true)
}

fn weight_bias<T: Real>(b: &Bound<T>, prefix: &str) -> Result<(Var, Var)> {
    Ok((b.var(&format!("{prefix}.weight"))?, b.var(&format!("{prefix}.bias"))?))
}

pub fn conv<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let (w, bias) = weight_bias(b, prefix)?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(bias), Conv2dSpec::same(k))
}

pub fn depthwise<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let (w, bias) = weight_bias(b, prefix)?;
    g.depthwise_conv2d(x, w, Some(bias))
}

pub fn pointwise<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let (w, bias) = weight_bias(b, prefix)?;
    g.pointwise(x, w, Some(bias))
}
