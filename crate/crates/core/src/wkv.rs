//! Bidirectional WKV attention along scan paths, and the spatial/channel
//! mixing blocks built on it.
//!
//! For a sequence of length `T`, channel-wise,
//!
//! ```text
//! wkv_t = (Σ_{i≠t} e^{-(|t-i|-1)/T·w + k_i} v_i + e^{u+k_t} v_t)
//!       / (Σ_{i≠t} e^{-(|t-i|-1)/T·w + k_i}     + e^{u+k_t})
//! ```
//!
//! with decay `w = softplus(w_raw)`. [`bi_wkv_scan`] evaluates this in
//! `O(T·C)` with one forward and one backward decayed accumulation.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{orthogonal, Bound, ParamStore};
use crate::ops::{self, NORM_EPS};
use crate::scan::{qshift_var, ScanPath};
use crate::tensor::{Real, Tensor};

/// Per-channel decay and bonus.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams<T = f32> {
    pub w_raw: Tensor<T>,
    pub u: Tensor<T>,
}

impl<T: Real> WkvParams<T> {
    pub fn new(w_raw: Tensor<T>, u: Tensor<T>) -> Result<Self> {
        if w_raw.ndim() != 1 || w_raw.shape() != u.shape() {
            return Err(Error::shape("wkv params", format!("[C] for both, w_raw {:?}", w_raw.shape()), u.shape()));
        }
        Ok(Self { w_raw, u })
    }

    pub fn channels(&self) -> usize {
        self.w_raw.numel()
    }

    /// Effective decay `softplus(w_raw)`.
    pub fn decay(&self) -> Vec<T> {
        self.w_raw.data().iter().map(|&v| ops::softplus_scalar(v)).collect()
    }
}

fn max_exponent<T: Real>(k: &[T], u: T) -> T {
    k.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) + u.max(T::zero())
}

/// Direct `O(T²)` evaluation of one channel.
fn seq_naive<T: Real>(k: &[T], v: &[T], w: T, u: T, y: &mut [T]) {
    let n = k.len();
    let nf = T::lit(n as f64);
    let m = max_exponent(k, u);
    for t in 0..n {
        let (mut num, mut den) = (T::zero(), T::zero());
        for i in 0..n {
            let e = if i == t {
                (u + k[t] - m).exp()
            } else {
                let dist = T::lit((t.abs_diff(i) - 1) as f64);
                (-(dist / nf) * w + k[i] - m).exp()
            };
            num += e * v[i];
            den += e;
        }
        y[t] = num / den;
    }
}

/// Sequences scanned in lockstep by the multi-path kernels.
const LANES: usize = 8;

/// Constants for `L` interleaved sequences of equal length: element `t` of
/// lane `p` sits at `t * L + p`. Holds the shifted key weights
/// `e = exp(k - m)`, `exp(u)` and the per-step decay `λ`. Independent lanes
/// let the recurrences overlap instead of waiting on one dependency chain.
struct Lanes<'a, T> {
    e: &'a [T],
    eu: T,
    lam: T,
}

impl<'a, T: Real> Lanes<'a, T> {
    fn new<const L: usize>(e: &'a [T], w: T, u: T) -> Self {
        debug_assert!(e.len().is_multiple_of(L));
        let n = T::lit((e.len() / L) as f64);
        Self {
            e,
            eu: u.exp(),
            lam: (-w / n).exp(),
        }
    }
}

#[inline(always)]
fn lane<T, const L: usize>(x: &[T], t: usize) -> &[T; L] {
    x[t * L..t * L + L].try_into().expect("lane chunk")
}

#[inline(always)]
fn lane_mut<T, const L: usize>(x: &mut [T], t: usize) -> &mut [T; L] {
    (&mut x[t * L..t * L + L]).try_into().expect("lane chunk")
}

/// Linear-time evaluation; also returns the normalizers.
fn seq_forward<T: Real, const L: usize>(p: &Lanes<T>, v: &[T], y: &mut [T], den: &mut [T]) {
    let (lam, n) = (p.lam, v.len() / L);
    let z = [T::zero(); L];
    let (mut a, mut b) = (z, z);
    for t in 0..n {
        let (et, vt) = (lane::<T, L>(p.e, t), lane::<T, L>(v, t));
        let (yt, dt) = (lane_mut::<T, L>(y, t), lane_mut::<T, L>(den, t));
        for l in 0..L {
            yt[l] = a[l];
            dt[l] = b[l];
            a[l] = lam * a[l] + et[l] * vt[l];
            b[l] = lam * b[l] + et[l];
        }
    }
    let (mut c, mut d) = (z, z);
    for t in (0..n).rev() {
        let (et, vt) = (lane::<T, L>(p.e, t), lane::<T, L>(v, t));
        let (yt, dt) = (lane_mut::<T, L>(y, t), lane_mut::<T, L>(den, t));
        for l in 0..L {
            let bonus = p.eu * et[l];
            let total = dt[l] + d[l] + bonus;
            yt[l] = (yt[l] + c[l] + bonus * vt[l]) / total;
            dt[l] = total;
            c[l] = lam * c[l] + et[l] * vt[l];
            d[l] = lam * d[l] + et[l];
        }
    }
}

/// Vector-Jacobian product of [`seq_forward`]. Writes `dk`, `dv` and
/// returns `(d/dw, d/du)` for the effective decay, summed over lanes.
#[allow(clippy::too_many_arguments)]
fn seq_backward<T: Real, const L: usize>(
    p: &Lanes<T>,
    v: &[T],
    y: &[T],
    den: &[T],
    g: &[T],
    dk: &mut [T],
    dv: &mut [T],
) -> (T, T) {
    let n = v.len() / L;
    let nf = T::lit(n as f64);
    let lam = p.lam;
    let z = [T::zero(); L];

    // Forward sweep: prefix sums of the upstream coefficients (for dk, dv)
    // and of distance-weighted terms (for dw).
    let (mut pa, mut pb) = (z, z);
    let (mut sa, mut sb, mut sa1, mut sb1) = (z, z, z, z);
    let mut dw = z;
    for t in 0..n {
        let (et, vt) = (lane::<T, L>(p.e, t), lane::<T, L>(v, t));
        let (yt, dent, gt) = (lane::<T, L>(y, t), lane::<T, L>(den, t), lane::<T, L>(g, t));
        let dvt = lane_mut::<T, L>(dv, t);
        dvt.copy_from_slice(&pa);
        let dkt = lane_mut::<T, L>(dk, t);
        for l in 0..L {
            let at = gt[l] / dent[l];
            let bt = -at * yt[l];
            dkt[l] = pb[l];
            dw[l] += at * sa1[l] + bt * sb1[l];
            pa[l] = lam * pa[l] + at;
            pb[l] = lam * pb[l] + bt;
            sa1[l] = lam * (sa1[l] + sa[l]);
            sb1[l] = lam * (sb1[l] + sb[l]);
            sa[l] = lam * sa[l] + et[l] * vt[l];
            sb[l] = lam * sb[l] + et[l];
        }
    }

    let (mut pa, mut pb) = (z, z);
    let (mut sa, mut sb, mut sa1, mut sb1) = (z, z, z, z);
    let mut du = z;
    for t in (0..n).rev() {
        let (et, vt) = (lane::<T, L>(p.e, t), lane::<T, L>(v, t));
        let (yt, dent, gt) = (lane::<T, L>(y, t), lane::<T, L>(den, t), lane::<T, L>(g, t));
        let mut pp = z;
        let dvt = lane_mut::<T, L>(dv, t);
        for l in 0..L {
            pp[l] = dvt[l] + pa[l];
        }
        let dkt = lane_mut::<T, L>(dk, t);
        let mut new_dv = z;
        for l in 0..L {
            let at = gt[l] / dent[l];
            let bt = -at * yt[l];
            let q = dkt[l] + pb[l];
            dw[l] += at * sa1[l] + bt * sb1[l];
            let bonus = p.eu * et[l];
            let self_term = bonus * (at * vt[l] + bt);
            du[l] += self_term;
            new_dv[l] = et[l] * pp[l] + bonus * at;
            dkt[l] = et[l] * (vt[l] * pp[l] + q) + self_term;
            pa[l] = lam * pa[l] + at;
            pb[l] = lam * pb[l] + bt;
            sa1[l] = lam * (sa1[l] + sa[l]);
            sb1[l] = lam * (sb1[l] + sb[l]);
            sa[l] = lam * sa[l] + et[l] * vt[l];
            sb[l] = lam * sb[l] + et[l];
        }
        *lane_mut::<T, L>(dv, t) = new_dv;
    }
    let sum = |x: [T; L]| x.iter().fold(T::zero(), |acc, &v| acc + v);
    (-sum(dw) / nf, sum(du))
}

fn check_seq_inputs<T: Real>(op: &'static str, k: &Tensor<T>, v: &Tensor<T>, p: &WkvParams<T>) -> Result<(usize, usize)> {
    let (t, c) = match *k.shape() {
        [t, c] => (t, c),
        _ => return Err(Error::shape(op, "[T, C]", k.shape())),
    };
    k.expect_same_shape(v, op)?;
    if t == 0 {
        return Err(Error::invalid(op, "empty sequence"));
    }
    if p.channels() != c {
        return Err(Error::shape(op, format!("{c} channels in params"), p.w_raw.shape()));
    }
    Ok((t, c))
}

fn per_channel<T: Real>(
    op: &'static str,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &WkvParams<T>,
    mut kernel: impl FnMut(&[T], &[T], T, T, &mut [T]),
) -> Result<Tensor<T>> {
    let (t, c) = check_seq_inputs(op, k, v, p)?;
    let decay = p.decay();
    let mut out = Tensor::zeros(&[t, c]);
    let (mut ks, mut vs, mut ys) = (vec![T::zero(); t], vec![T::zero(); t], vec![T::zero(); t]);
    for ch in 0..c {
        for i in 0..t {
            ks[i] = k.data()[i * c + ch];
            vs[i] = v.data()[i * c + ch];
        }
        kernel(&ks, &vs, decay[ch], p.u.data()[ch], &mut ys);
        for i in 0..t {
            out.data_mut()[i * c + ch] = ys[i];
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(out)
}

/// Reference `O(T²·C)` Bi-WKV over `[T, C]` sequences.
pub fn bi_wkv_naive<T: Real>(k: &Tensor<T>, v: &Tensor<T>, p: &WkvParams<T>) -> Result<Tensor<T>> {
    per_channel("bi_wkv_naive", k, v, p, seq_naive)
}

/// Linear-time Bi-WKV over `[T, C]` sequences.
pub fn bi_wkv_scan<T: Real>(k: &Tensor<T>, v: &Tensor<T>, p: &WkvParams<T>) -> Result<Tensor<T>> {
    let mut den = Vec::new();
    per_channel("bi_wkv_scan", k, v, p, |ks, vs, w, u, ys| {
        den.resize(ks.len(), T::zero());
        let m = max_exponent(ks, u);
        let e: Vec<T> = ks.iter().map(|&x| (x - m).exp()).collect();
        seq_forward::<T, 1>(&Lanes::new::<1>(&e, w, u), vs, ys, &mut den);
    })
}

fn check_paths<T: Real>(op: &'static str, x: &Tensor<T>, paths: &[ScanPath]) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    if paths.is_empty() {
        return Err(Error::invalid(op, "no scan paths"));
    }
    for p in paths {
        if p.height() != h || p.width() != w {
            return Err(Error::shape(op, format!("paths for {h}x{w}"), &[p.height(), p.width()]));
        }
    }
    Ok((n, c, h, w))
}

/// Bi-WKV applied along each path (gather, scan, scatter) and averaged
/// over paths. Inputs are NCHW; `decay` is the effective decay per channel.
fn ev_forward<T: Real>(k: &Tensor<T>, v: &Tensor<T>, decay: &[T], u: &[T], paths: &[ScanPath]) -> Result<Tensor<T>> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was checked just above.
        return unsafe { ev_forward_avx2(k, v, decay, u, paths) };
    }
    ev_forward_kernel(k, v, decay, u, paths)
}

// Same kernels with 8-wide vectors; no FMA, so rounding is unchanged.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn ev_forward_avx2<T: Real>(k: &Tensor<T>, v: &Tensor<T>, decay: &[T], u: &[T], paths: &[ScanPath]) -> Result<Tensor<T>> {
    ev_forward_kernel(k, v, decay, u, paths)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn ev_backward_avx2<T: Real>(k: &Tensor<T>, v: &Tensor<T>, decay: &[T], u: &[T], paths: &[ScanPath], gout: &Tensor<T>) -> EvGrads<T> {
    ev_backward_kernel(k, v, decay, u, paths, gout)
}

fn ev_backward<T: Real>(k: &Tensor<T>, v: &Tensor<T>, decay: &[T], u: &[T], paths: &[ScanPath], gout: &Tensor<T>) -> EvGrads<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was checked just above.
        return unsafe { ev_backward_avx2(k, v, decay, u, paths, gout) };
    }
    ev_backward_kernel(k, v, decay, u, paths, gout)
}

#[inline(always)]
fn ev_forward_kernel<T: Real>(k: &Tensor<T>, v: &Tensor<T>, decay: &[T], u: &[T], paths: &[ScanPath]) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_paths("ev_wkv", k, paths)?;
    k.expect_same_shape(v, "ev_wkv")?;
    if decay.len() != c || u.len() != c {
        return Err(Error::shape("ev_wkv", format!("{c} channels in params"), &[decay.len()]));
    }
    let plane = h * w;
    let scale = T::one() / T::lit(paths.len() as f64);
    let mut out = Tensor::zeros(k.shape());
    let groups = LaneGroup::build(paths);
    let buf = || vec![T::zero(); plane * LANES];
    let (mut es, mut vs, mut ys, mut den) = (buf(), buf(), buf(), buf());
    for img in 0..n * c {
        let ch = img % c;
        let base = img * plane;
        let keys = plane_weights(&k.data()[base..base + plane], u[ch]);
        let vplane = &v.data()[base..base + plane];
        for group in &groups {
            let len = group.cells.len();
            group.gather(&keys, &mut es[..len]);
            group.gather(vplane, &mut vs[..len]);
            let (ys, den) = (&mut ys[..len], &mut den[..len]);
            if group.lanes == LANES {
                seq_forward::<T, LANES>(&Lanes::new::<LANES>(&es[..len], decay[ch], u[ch]), &vs[..len], ys, den);
            } else {
                seq_forward::<T, 1>(&Lanes::new::<1>(&es[..len], decay[ch], u[ch]), &vs[..len], ys, den);
            }
            group.scatter_add(ys, scale, &mut out.data_mut()[base..base + plane]);
        }
    }
    Ok(out)
}

/// Interleaved gather table for a group of paths: entry `t * lanes + p`
/// holds the flat cell visited by path `p` at step `t`.
struct LaneGroup {
    lanes: usize,
    cells: Vec<usize>,
}

impl LaneGroup {
    /// Full groups of [`LANES`] paths, then single paths.
    fn build(paths: &[ScanPath]) -> Vec<Self> {
        let full = paths.len() - paths.len() % LANES;
        paths[..full]
            .chunks(LANES)
            .chain(paths[full..].chunks(1))
            .map(|group| {
                let lanes = group.len();
                let mut cells = vec![0; lanes * group[0].len()];
                for (p, path) in group.iter().enumerate() {
                    for (t, &cell) in path.order().iter().enumerate() {
                        cells[t * lanes + p] = cell;
                    }
                }
                Self { lanes, cells }
            })
            .collect()
    }

    fn gather<T: Real>(&self, plane: &[T], dst: &mut [T]) {
        for (d, &cell) in dst.iter_mut().zip(&self.cells) {
            *d = plane[cell];
        }
    }

    fn scatter_add<T: Real>(&self, src: &[T], scale: T, plane: &mut [T]) {
        for (&s, &cell) in src.iter().zip(&self.cells) {
            plane[cell] += s * scale;
        }
    }
}

/// `exp(k - m)` for one plane; `m` does not depend on the scan order.
fn plane_weights<T: Real>(k: &[T], u: T) -> Vec<T> {
    let m = max_exponent(k, u);
    k.iter().map(|&x| (x - m).exp()).collect()
}

struct EvGrads<T> {
    dk: Tensor<T>,
    dv: Tensor<T>,
    ddecay: Vec<T>,
    du: Vec<T>,
}

#[inline(always)]
fn ev_backward_kernel<T: Real>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    decay: &[T],
    u: &[T],
    paths: &[ScanPath],
    gout: &Tensor<T>,
) -> EvGrads<T> {
    let (n, c, h, w) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let plane = h * w;
    let scale = T::one() / T::lit(paths.len() as f64);
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(k.shape());
    let mut ddecay = vec![T::zero(); c];
    let mut du = vec![T::zero(); c];
    let groups = LaneGroup::build(paths);
    let buf = || vec![T::zero(); plane * LANES];
    let (mut es, mut vs, mut gs, mut ys, mut den, mut dks, mut dvs) = (buf(), buf(), buf(), buf(), buf(), buf(), buf());
    for img in 0..n * c {
        let ch = img % c;
        let base = img * plane;
        let keys = plane_weights(&k.data()[base..base + plane], u[ch]);
        for group in &groups {
            let len = group.cells.len();
            group.gather(&keys, &mut es[..len]);
            group.gather(&v.data()[base..base + plane], &mut vs[..len]);
            group.gather(&gout.data()[base..base + plane], &mut gs[..len]);
            let (e, vg, gg) = (&es[..len], &vs[..len], &gs[..len]);
            let (ys, den, dkg, dvg) = (&mut ys[..len], &mut den[..len], &mut dks[..len], &mut dvs[..len]);
            let (dw, dus) = if group.lanes == LANES {
                let lanes = Lanes::new::<LANES>(e, decay[ch], u[ch]);
                seq_forward::<T, LANES>(&lanes, vg, ys, den);
                seq_backward::<T, LANES>(&lanes, vg, ys, den, gg, dkg, dvg)
            } else {
                let lanes = Lanes::new::<1>(e, decay[ch], u[ch]);
                seq_forward::<T, 1>(&lanes, vg, ys, den);
                seq_backward::<T, 1>(&lanes, vg, ys, den, gg, dkg, dvg)
            };
            ddecay[ch] += dw * scale;
            du[ch] += dus * scale;
            group.scatter_add(dkg, scale, &mut dk.data_mut()[base..base + plane]);
            group.scatter_add(dvg, scale, &mut dv.data_mut()[base..base + plane]);
        }
    }
    EvGrads { dk, dv, ddecay, du }
}

/// Bi-WKV along every path in `paths`, averaged. Passing a single path gives
/// the one-direction diagnostic.
pub fn ev_wkv<T: Real>(k: &Tensor<T>, v: &Tensor<T>, p: &WkvParams<T>, paths: &[ScanPath]) -> Result<Tensor<T>> {
    let out = ev_forward(k, v, &p.decay(), p.u.data(), paths)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "ev_wkv" });
    }
    Ok(out)
}

/// Differentiable [`ev_wkv`] over `k`, `v`, `w_raw` and `u`.
pub fn ev_wkv_var<T: Real>(g: &mut Graph<T>, k: Var, v: Var, w_raw: Var, u: Var, paths: Arc<[ScanPath]>) -> Result<Var> {
    let decay: Vec<T> = g.value(w_raw).data().iter().map(|&x| ops::softplus_scalar(x)).collect();
    let value = ev_forward(g.value(k), g.value(v), &decay, g.value(u).data(), &paths)?;
    g.record(
        "ev_wkv",
        value,
        &[k, v, w_raw, u],
        Box::new(move |a| {
            let w_raw = a.inputs[2];
            let decay: Vec<T> = w_raw.data().iter().map(|&x| ops::softplus_scalar(x)).collect();
            let gr = ev_backward(a.inputs[0], a.inputs[1], &decay, a.inputs[3].data(), &paths, a.grad);
            let dw_raw: Vec<T> = gr
                .ddecay
                .iter()
                .zip(w_raw.data())
                .map(|(&d, &x)| d * ops::sigmoid_scalar(x))
                .collect();
            let c = decay.len();
            Ok(vec![
                Some(gr.dk),
                Some(gr.dv),
                Some(Tensor::new(&[c], dw_raw)?),
                Some(Tensor::new(&[c], gr.du)?),
            ])
        }),
    )
}

/// Spatial mix: Q-Shifted projections into R, K, V, multi-path WKV gated by
/// `σ(R)`, output projection, layer norm, residual.
pub fn spatial_mix<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var, paths: &Arc<[ScanPath]>) -> Result<Var> {
    let p = |s: &str| b.var(&format!("{prefix}.{s}"));
    let proj = |g: &mut Graph<T>, mu: Var, w: Var| -> Result<Var> {
        let shifted = qshift_var(g, x, mu)?;
        g.pointwise(shifted, w, None)
    };
    let r = proj(g, p("mu_r")?, p("w_r")?)?;
    let k = proj(g, p("mu_k")?, p("w_k")?)?;
    let v = proj(g, p("mu_v")?, p("w_v")?)?;
    let wkv = ev_wkv_var(g, k, v, p("wkv.w_raw")?, p("wkv.u")?, paths.clone())?;
    let gate = g.sigmoid(r)?;
    let gated = g.mul(gate, wkv)?;
    let o = g.pointwise(gated, p("w_o")?, None)?;
    let normed = g.layer_norm(o, p("ln.gamma")?, p("ln.beta")?, NORM_EPS)?;
    g.add(x, normed)
}

/// Channel mix: gated squared-ReLU feed-forward with layer norm and residual.
pub fn channel_mix<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let p = |s: &str| b.var(&format!("{prefix}.{s}"));
    let xr = qshift_var(g, x, p("mu_r")?)?;
    let r = g.pointwise(xr, p("w_r")?, None)?;
    let xk = qshift_var(g, x, p("mu_k")?)?;
    let k = g.pointwise(xk, p("w_k")?, None)?;
    let k = g.squared_relu(k)?;
    let v = g.pointwise(k, p("w_v")?, None)?;
    let gate = g.sigmoid(r)?;
    let gated = g.mul(gate, v)?;
    let o = g.pointwise(gated, p("w_o")?, None)?;
    let normed = g.layer_norm(o, p("ln.gamma")?, p("ln.beta")?, NORM_EPS)?;
    g.add(x, normed)
}

/// Spatial mix followed by channel mix.
pub fn es_rwkv_block<T: Real>(g: &mut Graph<T>, b: &Bound<T>, prefix: &str, x: Var, paths: &Arc<[ScanPath]>) -> Result<Var> {
    let y = spatial_mix(g, b, &format!("{prefix}.spatial"), x, paths)?;
    channel_mix(g, b, &format!("{prefix}.channel"), y)
}

/// Projection scale for the orthogonal init of every mixing matrix.
pub const MIX_INIT_SCALE: f64 = 0.1;

fn init_layer_norm<T: Real>(s: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    s.insert(format!("{prefix}.ln.gamma"), Tensor::ones(&[c]), true)?;
    s.insert(format!("{prefix}.ln.beta"), Tensor::zeros(&[c]), true)
}

pub fn init_spatial_mix<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    for name in ["mu_r", "mu_k", "mu_v"] {
        s.insert(format!("{prefix}.{name}"), Tensor::uniform(&[c], 0.0, 1.0, rng), true)?;
    }
    for name in ["w_r", "w_k", "w_v", "w_o"] {
        s.insert(format!("{prefix}.{name}"), orthogonal(c, MIX_INIT_SCALE, rng), true)?;
    }
    init_layer_norm(s, prefix, c)?;
    s.insert(format!("{prefix}.wkv.w_raw"), Tensor::zeros(&[c]), true)?;
    s.insert(format!("{prefix}.wkv.u"), Tensor::zeros(&[c]), true)
}

pub fn init_channel_mix<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    for name in ["mu_r", "mu_k"] {
        s.insert(format!("{prefix}.{name}"), Tensor::uniform(&[c], 0.0, 1.0, rng), true)?;
    }
    for name in ["w_r", "w_k", "w_v", "w_o"] {
        s.insert(format!("{prefix}.{name}"), orthogonal(c, MIX_INIT_SCALE, rng), true)?;
    }
    init_layer_norm(s, prefix, c)
}

pub fn init_es_rwkv_block<T: Real, R: Rng + ?Sized>(s: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    if !c.is_multiple_of(4) {
        return Err(Error::invalid("es_rwkv_block", format!("channels {c} not divisible by 4")));
    }
    init_spatial_mix(s, &format!("{prefix}.spatial"), c, rng)?;
    init_channel_mix(s, &format!("{prefix}.channel"), c, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check;
    use crate::scan::{all_spiral_paths, spiral_path, Corner, Rotation};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(c: usize, r: &mut ChaCha8Rng) -> WkvParams<f64> {
        WkvParams::new(Tensor::randn(&[c], 1.0, r), Tensor::randn(&[c], 1.0, r)).unwrap()
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / (y.abs() + 1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_token_returns_value() {
        let mut r = rng(1);
        let p = params(3, &mut r);
        let k = Tensor::randn(&[1, 3], 1.0, &mut r);
        let v = Tensor::randn(&[1, 3], 1.0, &mut r);
        assert!(bi_wkv_naive(&k, &v, &p).unwrap().max_abs_diff(&v).unwrap() < 1e-15);
        assert!(bi_wkv_scan(&k, &v, &p).unwrap().max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn constant_values_pass_through() {
        let mut r = rng(2);
        let p = params(2, &mut r);
        let k = Tensor::full(&[5, 2], 0.3);
        let v = Tensor::full(&[5, 2], 1.7);
        for out in [bi_wkv_naive(&k, &v, &p).unwrap(), bi_wkv_scan(&k, &v, &p).unwrap()] {
            assert!(out.max_abs_diff(&v).unwrap() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_three_tokens() {
        // w_raw chosen so that softplus(w_raw) = 1, u = 0.
        let w_raw = (1f64.exp() - 1.0).ln();
        let p = WkvParams::new(Tensor::full(&[1], w_raw), Tensor::zeros(&[1])).unwrap();
        let k = Tensor::zeros(&[3, 1]);
        let v = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        // Distance 1 weighs e^0, distance 2 weighs e^{-1/3}, self weighs e^u = 1.
        let d2 = (-1.0f64 / 3.0).exp();
        let want = [
            (1.0 + 2.0 + d2 * 3.0) / (2.0 + d2),
            (1.0 + 2.0 + 3.0) / 3.0,
            (d2 * 1.0 + 2.0 + 3.0) / (2.0 + d2),
        ];
        for out in [bi_wkv_naive(&k, &v, &p).unwrap(), bi_wkv_scan(&k, &v, &p).unwrap()] {
            for (o, w) in out.data().iter().zip(want) {
                assert!((o - w).abs() < 1e-14, "{o} vs {w}");
            }
        }
    }

    #[test]
    fn zero_decay_is_plain_mean() {
        let p = WkvParams::<f64>::new(Tensor::full(&[1], -80.0), Tensor::zeros(&[1])).unwrap();
        let k = Tensor::zeros(&[3, 1]);
        let v = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let out = bi_wkv_scan(&k, &v, &p).unwrap();
        assert!(out.data().iter().all(|&o| (o - 2.0).abs() < 1e-12));
    }

    #[test]
    fn scan_is_stable_for_large_keys() {
        let p = WkvParams::new(Tensor::zeros(&[1]), Tensor::zeros(&[1])).unwrap();
        let k = Tensor::new(&[4, 1], vec![500.0f32, 0.0, -500.0, 480.0]).unwrap();
        let v = Tensor::new(&[4, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = bi_wkv_scan(&k, &v, &p).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn shape_errors() {
        let p = WkvParams::<f64>::new(Tensor::zeros(&[2]), Tensor::zeros(&[2])).unwrap();
        assert!(bi_wkv_scan(&Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3, 3]), &p).is_err());
        assert!(bi_wkv_scan(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2]), &p).is_err());
        assert!(WkvParams::<f64>::new(Tensor::zeros(&[2]), Tensor::zeros(&[3])).is_err());
        let paths = all_spiral_paths(2, 2).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        assert!(ev_wkv(&x, &x, &p, &paths).is_err());
        assert!(ev_wkv(&x, &x, &p, &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scan_matches_naive(t in 1usize..=64, c in 1usize..=8, seed in any::<u64>()) {
            let mut r = rng(seed);
            let p = params(c, &mut r);
            let k = Tensor::randn(&[t, c], 1.0, &mut r);
            let v = Tensor::randn(&[t, c], 1.0, &mut r);
            let a = bi_wkv_scan(&k, &v, &p).unwrap();
            let b = bi_wkv_naive(&k, &v, &p).unwrap();
            prop_assert!(rel_err(&a, &b) < 1e-9);
        }

        #[test]
        fn output_is_convex_combination(t in 1usize..=32, seed in any::<u64>()) {
            let mut r = rng(seed);
            let p = params(1, &mut r);
            let k = Tensor::randn(&[t, 1], 2.0, &mut r);
            let v = Tensor::randn(&[t, 1], 1.0, &mut r);
            let out = bi_wkv_scan(&k, &v, &p).unwrap();
            let lo = v.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &o in out.data() {
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }

        #[test]
        fn reversal_equivariance(t in 1usize..=40, c in 1usize..=4, seed in any::<u64>()) {
            let mut r = rng(seed);
            let p = params(c, &mut r);
            let k = Tensor::randn(&[t, c], 1.0, &mut r);
            let v = Tensor::randn(&[t, c], 1.0, &mut r);
            let rev = |x: &Tensor<f64>| Tensor::from_fn(&[t, c], |i| x.data()[(t - 1 - i / c) * c + i % c]);
            let a = bi_wkv_scan(&rev(&k), &rev(&v), &p).unwrap();
            let b = rev(&bi_wkv_scan(&k, &v, &p).unwrap());
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn multi_path_degenerate_cases() {
        let mut r = rng(3);
        let p = params(2, &mut r);
        let paths = all_spiral_paths(1, 1).unwrap();
        let k = Tensor::randn(&[2, 2, 1, 1], 1.0, &mut r);
        let v = Tensor::randn(&[2, 2, 1, 1], 1.0, &mut r);
        assert!(ev_wkv(&k, &v, &p, &paths).unwrap().max_abs_diff(&v).unwrap() < 1e-15);

        let paths = all_spiral_paths(3, 5).unwrap();
        let k = Tensor::randn(&[1, 2, 3, 5], 1.0, &mut r);
        let v = Tensor::full(&[1, 2, 3, 5], -0.4);
        assert!(ev_wkv(&k, &v, &p, &paths).unwrap().max_abs_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn single_path_equals_manual_composition() {
        let mut r = rng(4);
        let p = params(1, &mut r);
        let path = spiral_path(2, 2, Corner::TopLeft, Rotation::Clockwise).unwrap();
        let k = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut r);
        let v = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut r);
        // TL-CW on 2x2 visits flat indices 0, 1, 3, 2.
        let order = [0usize, 1, 3, 2];
        let seq = |x: &Tensor<f64>| Tensor::new(&[4, 1], order.iter().map(|&i| x.data()[i]).collect()).unwrap();
        let y = bi_wkv_naive(&seq(&k), &seq(&v), &p).unwrap();
        let mut want = [0.0; 4];
        for (t, &i) in order.iter().enumerate() {
            want[i] = y.data()[t];
        }
        let got = ev_wkv(&k, &v, &p, std::slice::from_ref(&path)).unwrap();
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn path_order_does_not_matter() {
        let mut r = rng(5);
        let p = params(3, &mut r);
        let paths = all_spiral_paths(4, 3).unwrap();
        let mut shuffled = paths.clone();
        shuffled.reverse();
        shuffled.swap(1, 5);
        let k = Tensor::randn(&[1, 3, 4, 3], 1.0, &mut r);
        let v = Tensor::randn(&[1, 3, 4, 3], 1.0, &mut r);
        let a = ev_wkv(&k, &v, &p, &paths).unwrap();
        let b = ev_wkv(&k, &v, &p, &shuffled).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    fn ev_check(which: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let paths: Arc<[ScanPath]> = all_spiral_paths(3, 4).unwrap().into();
        let k = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[2], 1.0, &mut r);
        let u = Tensor::<f64>::randn(&[2], 1.0, &mut r);
        let weight = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut r);
        let inputs = [k, v, w, u];
        let point = inputs[which].clone();
        finite_diff_check(
            |g, x| {
                let mut vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                vars[which] = x;
                let y = ev_wkv_var(g, vars[0], vars[1], vars[2], vars[3], paths.clone())?;
                let wt = g.constant(weight.clone());
                let y = g.mul(y, wt)?;
                g.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn ev_wkv_gradients_match_finite_differences() {
        for which in 0..4 {
            let err = ev_check(which, 10 + which as u64);
            assert!(err < 1e-6, "input {which}: {err}");
        }
    }

    fn mixing_store(c: usize, seed: u64) -> ParamStore<f64> {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        init_es_rwkv_block(&mut s, "blk", c, &mut r).unwrap();
        // Non-trivial decay, bonus and norm affine.
        for name in ["blk.spatial.wkv.w_raw", "blk.spatial.wkv.u", "blk.spatial.ln.beta", "blk.channel.ln.beta"] {
            s.set(name, Tensor::randn(&[c], 0.5, &mut r)).unwrap();
        }
        for p in s.iter_mut() {
            if p.name.contains(".w_") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut r);
            }
        }
        s
    }

    fn run_block(s: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, &Bound<f64>, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::inference();
        let b = s.bind(&mut g).unwrap();
        let xv = g.constant(x.clone());
        let y = f(&mut g, &b, xv).unwrap();
        g.value(y).clone()
    }

    /// Plain-loop transcription of the spatial mix for one image.
    fn scripted_spatial(s: &ParamStore<f64>, x: &Tensor<f64>, prefix: &str) -> Tensor<f64> {
        let (_, c, h, w) = x.dims4("t").unwrap();
        let t = |n: &str| s.tensor(&format!("{prefix}.{n}")).unwrap().data().to_vec();
        let at = |ch: usize, r: isize, col: isize| -> f64 {
            if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                0.0
            } else {
                x.data()[(ch * h + r as usize) * w + col as usize]
            }
        };
        let shifted = |mu: &[f64]| -> Vec<f64> {
            let q = c / 4;
            let mut out = vec![0.0; c * h * w];
            for ch in 0..c {
                let (dr, dc) = [(-1, 0), (1, 0), (0, -1), (0, 1)][ch / q];
                for r in 0..h {
                    for col in 0..w {
                        let (ri, ci) = (r as isize, col as isize);
                        out[(ch * h + r) * w + col] = at(ch, ri, ci) + (1.0 - mu[ch]) * at(ch, ri + dr, ci + dc);
                    }
                }
            }
            out
        };
        let matmul = |wt: &[f64], src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; c * h * w];
            for o in 0..c {
                for i in 0..c {
                    for px in 0..h * w {
                        out[o * h * w + px] += wt[o * c + i] * src[i * h * w + px];
                    }
                }
            }
            out
        };
        let r = matmul(&t("w_r"), &shifted(&t("mu_r")));
        let k = matmul(&t("w_k"), &shifted(&t("mu_k")));
        let v = matmul(&t("w_v"), &shifted(&t("mu_v")));
        let p = WkvParams::new(
            s.tensor(&format!("{prefix}.wkv.w_raw")).unwrap().clone(),
            s.tensor(&format!("{prefix}.wkv.u")).unwrap().clone(),
        )
        .unwrap();
        let paths = all_spiral_paths(h, w).unwrap();
        let mut wkv = vec![0.0; c * h * w];
        for path in &paths {
            let seq = |m: &[f64]| Tensor::from_fn(&[h * w, c], |i| m[(i % c) * h * w + path.order()[i / c]]);
            let y = bi_wkv_naive(&seq(&k), &seq(&v), &p).unwrap();
            for tt in 0..h * w {
                for ch in 0..c {
                    wkv[ch * h * w + path.order()[tt]] += y.data()[tt * c + ch] / paths.len() as f64;
                }
            }
        }
        let gated: Vec<f64> = r.iter().zip(&wkv).map(|(a, b)| b / (1.0 + (-a).exp())).collect();
        let o = matmul(&t("w_o"), &gated);
        layer_norm_residual(x.data(), &o, &t("ln.gamma"), &t("ln.beta"), c, h * w)
    }

    fn layer_norm_residual(x: &[f64], o: &[f64], gamma: &[f64], beta: &[f64], c: usize, plane: usize) -> Tensor<f64> {
        let mut out = x.to_vec();
        for px in 0..plane {
            let vals: Vec<f64> = (0..c).map(|ch| o[ch * plane + px]).collect();
            let mean = vals.iter().sum::<f64>() / c as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                out[ch * plane + px] += gamma[ch] * (vals[ch] - mean) / (var + 1e-5).sqrt() + beta[ch];
            }
        }
        Tensor::new(&[1, c, plane], out).unwrap()
    }

    fn scripted_channel(s: &ParamStore<f64>, x: &Tensor<f64>, prefix: &str) -> Tensor<f64> {
        let (_, c, h, w) = x.dims4("t").unwrap();
        let t = |n: &str| s.tensor(&format!("{prefix}.{n}")).unwrap().clone();
        let xr = crate::scan::qshift(x, &t("mu_r")).unwrap();
        let xk = crate::scan::qshift(x, &t("mu_k")).unwrap();
        let plane = h * w;
        let matmul = |wt: &Tensor<f64>, src: &[f64]| -> Vec<f64> {
            (0..c * plane)
                .map(|i| (0..c).map(|j| wt.data()[(i / plane) * c + j] * src[j * plane + i % plane]).sum())
                .collect()
        };
        let r = matmul(&t("w_r"), xr.data());
        let k: Vec<f64> = matmul(&t("w_k"), xk.data()).iter().map(|v| v.max(0.0).powi(2)).collect();
        let v = matmul(&t("w_v"), &k);
        let gated: Vec<f64> = r.iter().zip(&v).map(|(a, b)| b / (1.0 + (-a).exp())).collect();
        let o = matmul(&t("w_o"), &gated);
        layer_norm_residual(x.data(), &o, t("ln.gamma").data(), t("ln.beta").data(), c, plane)
    }

    #[test]
    fn spatial_mix_matches_hand_composed_ops() {
        let s = mixing_store(4, 20);
        let mut r = rng(21);
        let x = Tensor::<f64>::randn(&[1, 4, 2, 2], 1.0, &mut r);
        let paths: Arc<[ScanPath]> = all_spiral_paths(2, 2).unwrap().into();
        let got = run_block(&s, &x, |g, b, xv| spatial_mix(g, b, "blk.spatial", xv, &paths));
        let want = scripted_spatial(&s, &x, "blk.spatial");
        assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn channel_mix_matches_hand_composed_ops() {
        let s = mixing_store(8, 22);
        let mut r = rng(23);
        let x = Tensor::<f64>::randn(&[1, 8, 3, 2], 1.0, &mut r);
        let got = run_block(&s, &x, |g, b, xv| channel_mix(g, b, "blk.channel", xv));
        let want = scripted_channel(&s, &x, "blk.channel");
        assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn block_is_composition_of_mixes() {
        let s = mixing_store(4, 24);
        let mut r = rng(25);
        let x = Tensor::<f64>::randn(&[1, 4, 3, 3], 1.0, &mut r);
        let paths: Arc<[ScanPath]> = all_spiral_paths(3, 3).unwrap().into();
        let got = run_block(&s, &x, |g, b, xv| es_rwkv_block(g, b, "blk", xv, &paths));
        let mid = scripted_spatial(&s, &x, "blk.spatial").reshape(&[1, 4, 3, 3]).unwrap();
        let want = scripted_channel(&s, &mid, "blk.channel");
        assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut s = mixing_store(4, 26);
        s.set("blk.spatial.w_o", Tensor::zeros(&[4, 4])).unwrap();
        s.set("blk.channel.w_o", Tensor::zeros(&[4, 4])).unwrap();
        s.set("blk.spatial.ln.beta", Tensor::zeros(&[4])).unwrap();
        s.set("blk.channel.ln.beta", Tensor::zeros(&[4])).unwrap();
        let mut r = rng(27);
        let x = Tensor::<f64>::randn(&[2, 4, 5, 3], 1.0, &mut r);
        let paths: Arc<[ScanPath]> = all_spiral_paths(5, 3).unwrap().into();
        let got = run_block(&s, &x, |g, b, xv| es_rwkv_block(g, b, "blk", xv, &paths));
        assert_eq!(got.shape(), x.shape());
        assert!(got.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn dead_squared_relu_branch_is_identity() {
        let mut s = mixing_store(4, 28);
        s.set("blk.channel.ln.beta", Tensor::zeros(&[4])).unwrap();
        // Non-negative input through a negative key projection gives k <= 0.
        s.set("blk.channel.w_k", Tensor::full(&[4, 4], -1.0)).unwrap();
        s.set("blk.channel.mu_k", Tensor::ones(&[4])).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 4, 2, 2], |i| 0.1 + i as f64 * 0.05);
        let got = run_block(&s, &x, |g, b, xv| channel_mix(g, b, "blk.channel", xv));
        assert!(got.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn block_parameter_gradients_match_finite_differences() {
        let s = mixing_store(4, 30);
        let mut r = rng(31);
        let x = Tensor::<f64>::randn(&[1, 4, 2, 3], 1.0, &mut r);
        let weight = Tensor::<f64>::randn(&[1, 4, 2, 3], 1.0, &mut r);
        let paths: Arc<[ScanPath]> = all_spiral_paths(2, 3).unwrap().into();
        for name in s.names().map(str::to_owned).collect::<Vec<_>>() {
            let point = s.tensor(&name).unwrap().clone();
            let err = finite_diff_check(
                |g, pv| {
                    let mut local = s.clone();
                    local.get_mut(&name).unwrap().requires_grad = false;
                    let b = local.bind(g)?;
                    let b = b.with_override(&name, pv);
                    let xv = g.constant(x.clone());
                    let y = es_rwkv_block(g, &b, "blk", xv, &paths)?;
                    let wt = g.constant(weight.clone());
                    let y = g.mul(y, wt)?;
                    g.sum(y)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
