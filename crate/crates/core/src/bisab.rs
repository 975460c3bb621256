//! Bilateral spectrum aligner: fuses a skip feature `F1` with the upsampled
//! decoder feature `F1'`.
//!
//! ```text
//! F_Q = conv3(F1), F_K = conv3(F1'), F_V = conv3(F1')
//! F_attn = CA(F_Q, F_K)
//! DA_out = F_attn ⊙ F_Q + (0.2 · F_attn ⊙ F_K + F_V)
//! out = SAE(LN(DA_out)) + SEE(F1)
//! ```

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{Bound, ParamStore};
use crate::layers::{conv, depthwise, init_conv, init_depthwise, init_pointwise, pointwise};
use crate::ops::{Conv2dSpec, NormMode, NORM_EPS};
use crate::tensor::{Real, Tensor};

/// Weight of the attention-key product in the feature difference adjustment.
pub const FDA_LAMBDA: f64 = 0.2;

/// Horizontal Scharr stencil; the vertical one is its transpose.
pub const SCHARR_X: [[f64; 3]; 3] = [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]];

/// Floor on token-axis norms before normalizing queries and keys.
const L2_EPS: f64 = 1e-12;

/// `[c, 1, 3, 3]` depthwise kernel repeating `SCHARR_X` (or its transpose).
pub fn scharr_kernel<T: Real>(c: usize, transpose: bool) -> Tensor<T> {
    Tensor::from_fn(&[c, 1, 3, 3], |i| {
        let (r, col) = ((i % 9) / 3, i % 3);
        T::lit(if transpose { SCHARR_X[col][r] } else { SCHARR_X[r][col] })
    })
}

pub fn init_cross_attention<T: Real, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    n_heads: usize,
    rng: &mut R,
) -> Result<()> {
    check_heads(c, n_heads)?;
    init_pointwise(s, &format!("{prefix}.q_proj"), c, c, rng)?;
    init_depthwise(s, &format!("{prefix}.q_dw"), c, 3, rng)?;
    init_pointwise(s, &format!("{prefix}.kv_proj"), 2 * c, c, rng)?;
    init_depthwise(s, &format!("{prefix}.kv_dw"), 2 * c, 3, rng)?;
    init_pointwise(s, &format!("{prefix}.out_proj"), c, c, rng)?;
    let head = (c / n_heads) as f64;
    s.insert(format!("{prefix}.tau"), Tensor::full(&[1], T::lit(head.sqrt())), true)
}

pub fn init_sae<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    init_pointwise(s, &format!("{prefix}.expand"), 2 * c, c, rng)?;
    init_depthwise(s, &format!("{prefix}.expand_dw"), 2 * c, 3, rng)?;
    init_depthwise(s, &format!("{prefix}.branch1"), c, 3, rng)?;
    init_depthwise(s, &format!("{prefix}.branch2"), c, 3, rng)?;
    init_pointwise(s, &format!("{prefix}.fuse"), c, c, rng)
}

pub fn init_see<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    if c < 2 {
        return Err(Error::invalid("see", "needs at least 2 channels"));
    }
    s.insert(format!("{prefix}.scharr_x"), scharr_kernel(c, false), false)?;
    s.insert(format!("{prefix}.scharr_y"), scharr_kernel(c, true), false)?;
    s.insert(format!("{prefix}.bn.scale"), Tensor::ones(&[c]), true)?;
    s.insert(format!("{prefix}.bn.shift"), Tensor::zeros(&[c]), true)?;
    s.insert(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c]), false)?;
    s.insert(format!("{prefix}.bn.running_var"), Tensor::ones(&[c]), false)?;
    init_pointwise(s, &format!("{prefix}.squeeze"), c / 2, c, rng)?;
    init_conv(s, &format!("{prefix}.restore"), c, c / 2, 3, rng)
}

pub fn init_bi_sab<T: Real, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    n_heads: usize,
    rng: &mut R,
) -> Result<()> {
    for name in ["q_conv", "k_conv", "v_conv"] {
        init_conv(s, &format!("{prefix}.{name}"), c, c, 3, rng)?;
    }
    init_cross_attention(s, &format!("{prefix}.ca"), c, n_heads, rng)?;
    s.insert(format!("{prefix}.ln.gamma"), Tensor::ones(&[c]), true)?;
    s.insert(format!("{prefix}.ln.beta"), Tensor::zeros(&[c]), true)?;
    init_sae(s, &format!("{prefix}.sae"), c, rng)?;
    init_see(s, &format!("{prefix}.see"), c, rng)
}

fn check_heads(c: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || !c.is_multiple_of(n_heads) {
        return Err(Error::invalid(
            "cross_attention",
            format!("{c} channels not divisible into {n_heads} heads"),
        ));
    }
    Ok(())
}

/// Cross-attention output and its `[N·heads, c_h, c_h]` attention maps.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub attn: Var,
}

/// Channel (transposed) attention: queries from `x`, keys and values from
/// `y`, L2-normalized over tokens, temperature `τ`.
pub fn cross_attention<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var, y: Var, n_heads: usize) -> Result<Attention> {
    let shape = g.shape(x).to_vec();
    if g.shape(y) != shape.as_slice() {
        return Err(Error::shape("cross_attention", format!("{shape:?}"), g.shape(y)));
    }
    let (n, c, h, w) = g.value(x).dims4("cross_attention")?;
    check_heads(c, n_heads)?;
    let ch = c / n_heads;
    let q = pointwise(g, b, &format!("{prefix}.q_proj"), x)?;
    let q = depthwise(g, b, &format!("{prefix}.q_dw"), q)?;
    let kv = pointwise(g, b, &format!("{prefix}.kv_proj"), y)?;
    let kv = depthwise(g, b, &format!("{prefix}.kv_dw"), kv)?;
    let k = g.narrow_channels(kv, 0, c)?;
    let v = g.narrow_channels(kv, c, c)?;
    let heads = [n * n_heads, ch, h * w];
    let q = g.reshape(q, &heads)?;
    let k = g.reshape(k, &heads)?;
    let v = g.reshape(v, &heads)?;
    let q = g.l2_normalize_last(q, L2_EPS)?;
    let k = g.l2_normalize_last(k, L2_EPS)?;
    let kt = g.transpose_last2(k)?;
    let logits = g.bmm(q, kt)?;
    let logits = g.div(logits, b.var(&format!("{prefix}.tau"))?)?;
    let attn = g.softmax_last(logits)?;
    let out = g.bmm(attn, v)?;
    let out = g.reshape(out, &[n, c, h, w])?;
    let output = pointwise(g, b, &format!("{prefix}.out_proj"), out)?;
    Ok(Attention { output, attn })
}

/// `F_attn ⊙ F_Q + (λ · F_attn ⊙ F_K + F_V)` with `λ = 0.2`.
pub fn fda<T: Real>(g: &mut Graph<T>, f_attn: Var, f_q: Var, f_k: Var, f_v: Var) -> Result<Var> {
    let shape = g.shape(f_attn).to_vec();
    for v in [f_q, f_k, f_v] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::shape("fda", format!("{shape:?}"), g.shape(v)));
        }
    }
    let att_out = g.mul(f_attn, f_k)?;
    let att_out = g.scale(att_out, FDA_LAMBDA)?;
    let f_da = g.add(att_out, f_v)?;
    let direct = g.mul(f_attn, f_q)?;
    g.add(direct, f_da)
}

/// Expand, split, enhance each half with a tanh residual, multiply, fuse.
pub fn sae<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, f: Var) -> Result<Var> {
    let c = g.shape(f)[1];
    let e = pointwise(g, b, &format!("{prefix}.expand"), f)?;
    let e = depthwise(g, b, &format!("{prefix}.expand_dw"), e)?;
    let mut halves = [g.narrow_channels(e, 0, c)?, g.narrow_channels(e, c, c)?];
    for (i, part) in halves.iter_mut().enumerate() {
        let t = depthwise(g, b, &format!("{prefix}.branch{}", i + 1), *part)?;
        let t = g.tanh(t)?;
        *part = g.add(*part, t)?;
    }
    let prod = g.mul(halves[0], halves[1])?;
    pointwise(g, b, &format!("{prefix}.fuse"), prod)
}

/// `|Wx * F| + |Wy * F|` with replicated borders, so constant regions give
/// zero response everywhere, borders included.
pub fn scharr_magnitude<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, f: Var) -> Result<Var> {
    let c = g.shape(f)[1];
    let padded = g.replicate_pad(f, 1)?;
    let spec = Conv2dSpec {
        stride: 1,
        padding: 0,
        groups: c,
    };
    let ex = g.conv2d(padded, b.var(&format!("{prefix}.scharr_x"))?, None, spec)?;
    let ey = g.conv2d(padded, b.var(&format!("{prefix}.scharr_y"))?, None, spec)?;
    let ex = g.abs(ex)?;
    let ey = g.abs(ey)?;
    g.add(ex, ey)
}

/// Scharr edge enhancement: `conv3(SiLU(conv1(F + BN(E_scharr))))`.
pub fn see<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, f: Var, mode: NormMode) -> Result<Var> {
    let edges = scharr_magnitude(g, b, prefix, f)?;
    let bn = format!("{prefix}.bn");
    let normed = g.batch_norm(
        edges,
        b.var(&format!("{bn}.scale"))?,
        b.var(&format!("{bn}.shift"))?,
        &b.running_stats(&bn),
        mode,
        &bn,
    )?;
    let fused = g.add(f, normed)?;
    let s = pointwise(g, b, &format!("{prefix}.squeeze"), fused)?;
    let s = g.silu(s)?;
    conv(g, b, &format!("{prefix}.restore"), s)
}

/// Full block on NCHW features `f1` (skip) and `f1p` (decoder).
pub fn bi_sab<T: Real>(
    g: &mut Graph<T>,
    b: &Bound<T>,
    prefix: &str,
    f1: Var,
    f1p: Var,
    n_heads: usize,
    mode: NormMode,
) -> Result<Var> {
    if g.shape(f1) != g.shape(f1p) {
        return Err(Error::shape("bi_sab", format!("{:?}", g.shape(f1)), g.shape(f1p)));
    }
    let f_q = conv(g, b, &format!("{prefix}.q_conv"), f1)?;
    let f_k = conv(g, b, &format!("{prefix}.k_conv"), f1p)?;
    let f_v = conv(g, b, &format!("{prefix}.v_conv"), f1p)?;
    let f_attn = cross_attention(g, b, &format!("{prefix}.ca"), f_q, f_k, n_heads)?.output;
    let da = fda(g, f_attn, f_q, f_k, f_v)?;
    let normed = g.layer_norm(
        da,
        b.var(&format!("{prefix}.ln.gamma"))?,
        b.var(&format!("{prefix}.ln.beta"))?,
        NORM_EPS,
    )?;
    let refined = sae(g, b, &format!("{prefix}.sae"), normed)?;
    let edges = see(g, b, &format!("{prefix}.see"), f1, mode)?;
    g.add(refined, edges)
}
