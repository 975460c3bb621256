//! Forward and adjoint kernels for the differentiable op set.
//!
//! Everything here is a pure function of its inputs. The autodiff graph in
//! [`crate::autograd`] wires these kernels together.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Epsilon inside layer-norm and batch-norm variance denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    /// Stride 1 with "same" padding for an odd kernel of size `k`.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        }
    }

    /// Depthwise variant of [`Conv2dSpec::same`].
    pub fn depthwise(k: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(k)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, k: &Tensor<T>, spec: Conv2dSpec) -> Result<Self> {
        let (n, cin, h, w) = x.dims4("conv2d input")?;
        let (cout, cin_g, kh, kw) = k.dims4("conv2d kernel")?;
        let Conv2dSpec {
            stride,
            padding: pad,
            groups,
        } = spec;
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d kernel", "odd kernel extents", k.shape()));
        }
        if cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(Error::shape(
                "conv2d kernel",
                format!("[{cout}, {}, kh, kw] for {cin} input channels in {groups} groups", cin / groups.max(1)),
                k.shape(),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d input",
                format!("spatial extent >= kernel {kh}x{kw} after padding {pad}"),
                x.shape(),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / groups,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn is_dense_1x1(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.cin_g == self.cin
    }

    /// Output columns `ox` whose input column `ox*stride + j - pad` is in range.
    #[inline]
    fn valid_range(&self, tap: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= in_len - 1
        let hi_incl = (in_len as isize - 1 - off).div_euclid(s);
        let lo = lo.min(out_len as isize);
        let hi = (hi_incl + 1).clamp(lo, out_len as isize);
        (lo as usize, hi as usize)
    }

    #[inline]
    fn in_row(&self, oy: usize, i: usize) -> Option<usize> {
        let iy = (oy * self.stride + i) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// `out += a * x`.
#[inline]
pub fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight fixed-order partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// `out[m, n] += a[m, k] · b[k, n]`, all row-major.
///
/// On x86-64 with AVX2 the same kernel is compiled with wider vectors. No
/// FMA is enabled, so every product and sum is rounded as in the portable
/// build and results do not depend on the host.
pub fn gemm_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was checked just above.
        unsafe { gemm_acc_avx2(out, a, b, m, k, n) };
        return;
    }
    gemm_kernel(out, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn gemm_acc_avx2<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_kernel(out, a, b, m, k, n);
}

#[inline(always)]
fn gemm_kernel<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert!(out.len() == m * n && a.len() == m * k && b.len() == k * n);
    let full_cols = n - n % TILE_COLS;
    let full_rows = m - m % TILE_ROWS;
    for row in (0..full_rows).step_by(TILE_ROWS) {
        for col in (0..full_cols).step_by(TILE_COLS) {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for kk in 0..k {
                let bv: &[T; TILE_COLS] = b[kk * n + col..][..TILE_COLS].try_into().expect("tile");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(row + r) * k + kk];
                    for l in 0..TILE_COLS {
                        acc_r[l] += av * bv[l];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                for (o, &v) in out[(row + r) * n + col..][..TILE_COLS].iter_mut().zip(acc_r) {
                    *o += v;
                }
            }
        }
    }
    // Edges: leftover rows over all columns, leftover columns over full rows.
    for row in full_rows..m {
        for kk in 0..k {
            axpy(&mut out[row * n..][..n], a[row * k + kk], &b[kk * n..][..n]);
        }
    }
    if full_cols < n {
        for row in 0..full_rows {
            for kk in 0..k {
                let av = a[row * k + kk];
                axpy(&mut out[row * n + full_cols..][..n - full_cols], av, &b[kk * n + full_cols..][..n - full_cols]);
            }
        }
    }
}

/// `out[m, k] += a[m, n] · b[k, n]ᵀ`, one row-by-row dot product per entry.
///
/// Every entry is summed in eight lanes (lane `l` takes the positions
/// `p ≡ l mod 8`), reduced in the same order as [`dot`]. On x86-64 with AVX
/// the f32 case runs the same lane layout in vector registers, so both paths
/// agree bit for bit.
pub fn gemm_nt_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert!(out.len() == m * k && a.len() == m * n && b.len() == k * n);
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && std::arch::is_x86_feature_detected!("avx") {
        let cast = |x: &[T]| {
            // SAFETY: T is f32, checked above.
            unsafe { std::slice::from_raw_parts(x.as_ptr().cast::<f32>(), x.len()) }
        };
        // SAFETY: T is f32, checked above.
        let out = unsafe { std::slice::from_raw_parts_mut(out.as_mut_ptr().cast::<f32>(), out.len()) };
        gemm_nt_rows(out, cast(a), cast(b), k, n, |r, col, full| {
            // SAFETY: AVX support was checked above.
            unsafe { nt_lanes_avx(r, col, full) }
        });
        return;
    }
    gemm_nt_rows(out, a, b, k, n, nt_lanes);
}

/// Drives `lanes` over blocks of four rows of `a` against each row of `b`,
/// then finishes the tails and the final reduction.
#[inline(always)]
fn gemm_nt_rows<T: Real>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    k: usize,
    n: usize,
    lanes: impl Fn([&[T]; TILE_ROWS], &[T], usize) -> [[T; 8]; TILE_ROWS],
) {
    let full = n - n % 8;
    let mut rows = a.chunks_exact(TILE_ROWS * n);
    let mut outs = out.chunks_exact_mut(TILE_ROWS * k);
    for (block, o) in rows.by_ref().zip(outs.by_ref()) {
        let r: [&[T]; TILE_ROWS] = std::array::from_fn(|i| &block[i * n..(i + 1) * n]);
        for (j, col) in b.chunks_exact(n).enumerate() {
            let acc = lanes(r, col, full);
            for (i, acc_i) in acc.iter().enumerate() {
                let tail: T = r[i][full..].iter().zip(&col[full..]).map(|(&x, &y)| x * y).sum();
                let s = ((acc_i[0] + acc_i[4]) + (acc_i[1] + acc_i[5])) + ((acc_i[2] + acc_i[6]) + (acc_i[3] + acc_i[7])) + tail;
                o[i * k + j] += s;
            }
        }
    }
    for (row, o) in rows.remainder().chunks_exact(n).zip(outs.into_remainder().chunks_exact_mut(k)) {
        for (ov, col) in o.iter_mut().zip(b.chunks_exact(n)) {
            *ov += dot(row, col);
        }
    }
}

fn nt_lanes<T: Real>(r: [&[T]; TILE_ROWS], col: &[T], full: usize) -> [[T; 8]; TILE_ROWS] {
    let mut acc = [[T::zero(); 8]; TILE_ROWS];
    for p in (0..full).step_by(8) {
        for (acc_i, ri) in acc.iter_mut().zip(&r) {
            for l in 0..8 {
                acc_i[l] += ri[p + l] * col[p + l];
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
fn nt_lanes_avx(r: [&[f32]; TILE_ROWS], col: &[f32], full: usize) -> [[f32; 8]; TILE_ROWS] {
    use std::arch::x86_64::{__m256, _mm256_add_ps, _mm256_mul_ps, _mm256_setzero_ps};
    // Values move through [f32; 8] arrays, which compile to plain unaligned
    // vector moves.
    let vec = |x: &[f32]| -> __m256 {
        let lane: [f32; 8] = x.try_into().expect("eight lanes");
        // SAFETY: [f32; 8] and __m256 have the same size and no invalid bit patterns.
        unsafe { std::mem::transmute(lane) }
    };
    let mut acc: [__m256; TILE_ROWS] = [_mm256_setzero_ps(); TILE_ROWS];
    let [r0, r1, r2, r3] = r.map(|ri| ri[..full].chunks_exact(8));
    for ((((c, x0), x1), x2), x3) in col[..full].chunks_exact(8).zip(r0).zip(r1).zip(r2).zip(r3) {
        let c = vec(c);
        acc[0] = _mm256_add_ps(acc[0], _mm256_mul_ps(vec(x0), c));
        acc[1] = _mm256_add_ps(acc[1], _mm256_mul_ps(vec(x1), c));
        acc[2] = _mm256_add_ps(acc[2], _mm256_mul_ps(vec(x2), c));
        acc[3] = _mm256_add_ps(acc[3], _mm256_mul_ps(vec(x3), c));
    }
    // SAFETY: as above, in the other direction.
    acc.map(|v| unsafe { std::mem::transmute::<__m256, [f32; 8]>(v) })
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

impl ConvGeom {
    /// Stride-1 dense convolution, computed through [`im2col`].
    fn is_dense_unit_stride(&self) -> bool {
        self.stride == 1 && self.cin_g == self.cin
    }
}

/// `[cin·kh·kw, oh·ow]` patch matrix of one image (stride 1).
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * plane_out];
    for ci in 0..g.cin {
        let i_plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((ci * g.kh + i) * g.kw + j) * plane_out..][..plane_out];
                let (lo, hi) = g.valid_range(j, g.ow, g.w);
                for oy in 0..g.oh {
                    let Some(iy) = g.in_row(oy, i) else { continue };
                    let shift = lo + j - g.pad;
                    row[oy * g.ow + lo..oy * g.ow + hi].copy_from_slice(&i_plane[iy * g.w + shift..][..hi - lo]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients into `gx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let plane_out = g.oh * g.ow;
    for ci in 0..g.cin {
        let i_plane = &mut gx[ci * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((ci * g.kh + i) * g.kw + j) * plane_out..][..plane_out];
                let (lo, hi) = g.valid_range(j, g.ow, g.w);
                for oy in 0..g.oh {
                    let Some(iy) = g.in_row(oy, i) else { continue };
                    let shift = lo + j - g.pad;
                    for (o, &v) in i_plane[iy * g.w + shift..][..hi - lo].iter_mut().zip(&row[oy * g.ow + lo..oy * g.ow + hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation with zero padding.
///
/// `kernel` is `[Cout, Cin/groups, kh, kw]`; `bias` when present is `[Cout]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", format!("[{}]", g.cout), b.shape()));
        }
    }
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let (xd, kd) = (x.data(), kernel.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let od = out.data_mut();
    if g.is_dense_1x1() {
        for b in 0..g.n {
            let o = &mut od[b * g.cout * plane_out..][..g.cout * plane_out];
            if let Some(bias) = bias {
                for (plane, &bv) in o.chunks_mut(plane_out).zip(bias.data()) {
                    plane.fill(bv);
                }
            }
            gemm_acc(o, kd, &xd[b * g.cin * plane_in..][..g.cin * plane_in], g.cout, g.cin, plane_in);
        }
        return Ok(out);
    }
    if g.is_dense_unit_stride() {
        let patch = g.cin * g.kh * g.kw;
        for b in 0..g.n {
            let o = &mut od[b * g.cout * plane_out..][..g.cout * plane_out];
            if let Some(bias) = bias {
                for (plane, &bv) in o.chunks_mut(plane_out).zip(bias.data()) {
                    plane.fill(bv);
                }
            }
            let cols = im2col(&xd[b * g.cin * plane_in..][..g.cin * plane_in], &g);
            gemm_acc(o, kd, &cols, g.cout, patch, plane_out);
        }
        return Ok(out);
    }
    for b in 0..g.n {
        for co in 0..g.cout {
            let grp = co / g.cout_g;
            let o_plane = &mut od[(b * g.cout + co) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                o_plane.fill(bias.data()[co]);
            }
            for cl in 0..g.cin_g {
                let ci = grp * g.cin_g + cl;
                let i_plane = &xd[(b * g.cin + ci) * plane_in..][..plane_in];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = kd[((co * g.cin_g + cl) * g.kh + i) * g.kw + j];
                        let (lo, hi) = g.valid_range(j, g.ow, g.w);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, i) else { continue };
                            let row_in = &i_plane[iy * g.w..(iy + 1) * g.w];
                            let row_out = &mut o_plane[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let shift = lo + j - g.pad;
                                axpy(&mut row_out[lo..hi], wv, &row_in[shift..shift + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    row_out[ox] += wv * row_in[ox * g.stride + j - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
    need: [bool; 3],
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(x, kernel, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d backward",
            format!("[{}, {}, {}, {}]", g.n, g.cout, g.oh, g.ow),
            grad_out.shape(),
        ));
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut gk = need[1].then(|| Tensor::zeros(kernel.shape()));
    if g.is_dense_1x1() {
        let kt = transpose(kd, g.cout, g.cin);
        for b in 0..g.n {
            let gb = &gd[b * g.cout * plane_out..][..g.cout * plane_out];
            let xb = &xd[b * g.cin * plane_in..][..g.cin * plane_in];
            if let Some(gx) = gx.as_mut() {
                gemm_acc(&mut gx.data_mut()[b * g.cin * plane_in..][..g.cin * plane_in], &kt, gb, g.cin, g.cout, plane_in);
            }
            if let Some(gk) = gk.as_mut() {
                gemm_nt_acc(gk.data_mut(), gb, xb, g.cout, g.cin, plane_in);
            }
        }
    } else if g.is_dense_unit_stride() {
        let patch = g.cin * g.kh * g.kw;
        let kt = transpose(kd, g.cout, patch);
        for b in 0..g.n {
            let gb = &gd[b * g.cout * plane_out..][..g.cout * plane_out];
            let cols = im2col(&xd[b * g.cin * plane_in..][..g.cin * plane_in], &g);
            if let Some(gx) = gx.as_mut() {
                let mut gcols = vec![T::zero(); patch * plane_out];
                gemm_acc(&mut gcols, &kt, gb, patch, g.cout, plane_out);
                col2im(&gcols, &g, &mut gx.data_mut()[b * g.cin * plane_in..][..g.cin * plane_in]);
            }
            if let Some(gk) = gk.as_mut() {
                gemm_nt_acc(gk.data_mut(), gb, &cols, g.cout, patch, plane_out);
            }
        }
    } else {
        for b in 0..g.n {
            for co in 0..g.cout {
                let grp = co / g.cout_g;
                let g_plane = &gd[(b * g.cout + co) * plane_out..][..plane_out];
                for cl in 0..g.cin_g {
                    let ci = grp * g.cin_g + cl;
                    let base_in = (b * g.cin + ci) * plane_in;
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let widx = ((co * g.cin_g + cl) * g.kh + i) * g.kw + j;
                            let wv = kd[widx];
                            let (lo, hi) = g.valid_range(j, g.ow, g.w);
                            let mut acc = T::zero();
                            for oy in 0..g.oh {
                                let Some(iy) = g.in_row(oy, i) else { continue };
                                let row_g = &g_plane[oy * g.ow..(oy + 1) * g.ow];
                                if g.stride == 1 {
                                    let shift = lo + j - g.pad;
                                    if let Some(gx) = gx.as_mut() {
                                        let row = &mut gx.data_mut()[base_in + iy * g.w..][..g.w];
                                        axpy(&mut row[shift..shift + hi - lo], wv, &row_g[lo..hi]);
                                    }
                                    if gk.is_some() {
                                        let row = &xd[base_in + iy * g.w..][..g.w];
                                        acc += dot(&row_g[lo..hi], &row[shift..shift + hi - lo]);
                                    }
                                    continue;
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let row = &mut gx.data_mut()[base_in + iy * g.w..][..g.w];
                                    for ox in lo..hi {
                                        row[ox * g.stride + j - g.pad] += wv * row_g[ox];
                                    }
                                }
                                if gk.is_some() {
                                    let row = &xd[base_in + iy * g.w..][..g.w];
                                    for ox in lo..hi {
                                        acc += row_g[ox] * row[ox * g.stride + j - g.pad];
                                    }
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk.data_mut()[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let gb = need[2].then(|| {
        let mut gb = Tensor::zeros(&[g.cout]);
        for b in 0..g.n {
            for co in 0..g.cout {
                gb.data_mut()[co] += gd[(b * g.cout + co) * plane_out..][..plane_out]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        gb
    });
    Ok(Conv2dGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// Depthwise convolution: `kernel` is `[C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4("depthwise_conv2d")?;
    let (_, _, kh, _) = kernel.dims4("depthwise_conv2d kernel")?;
    conv2d(x, kernel, bias, Conv2dSpec::depthwise(kh, c))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn squared_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let r = v.max(T::zero());
        r * r
    })
}

#[inline]
pub fn softplus_scalar<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &last = x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", "rank >= 1", x.shape()))?;
    let mut out = x.clone();
    if last == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(last) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub fn softmax_last_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().unwrap_or(&1);
    let mut gx = grad.clone();
    for (gr, yr) in gx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
        let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
        for (g, &y) in gr.iter_mut().zip(yr) {
            *g = y * (*g - dot);
        }
    }
    gx
}

/// `(outer, channels, inner)` view with the normalized axis at position 1.
fn channel_view(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, "rank >= 2 with channels on axis 1", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine<T: Real>(t: &Tensor<T>, c: usize, op: &'static str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(op, format!("[{c}]"), t.shape()));
    }
    Ok(())
}

/// Saved state of a layer-norm forward pass.
pub struct LayerNormCache<T> {
    /// Normalized values before the affine map (zero for degenerate tokens).
    pub xhat: Tensor<T>,
    /// `1/sqrt(var + eps)` per token, zero where the token was degenerate.
    pub inv_std: Vec<T>,
}

/// Layer norm over axis 1 for every position of the remaining axes.
///
/// Constant tokens normalize to exactly zero; there is no cut-off below
/// `eps`, so small but non-constant tokens keep their gradient.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (outer, c, inner) = channel_view(x.shape(), "layer_norm")?;
    check_affine(gamma, c, "layer_norm gamma")?;
    check_affine(beta, c, "layer_norm beta")?;
    let eps_t = T::lit(eps);
    let inv_c = T::lit(1.0 / c as f64);
    let xd = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for s in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + s;
            let mean = (0..c).map(|ch| xd[idx(ch)]).sum::<T>() * inv_c;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[idx(ch)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_c;
            let r = T::one() / (var + eps_t).sqrt();
            inv_std[o * inner + s] = r;
            for ch in 0..c {
                let xh = (xd[idx(ch)] - mean) * r;
                xhat.data_mut()[idx(ch)] = xh;
                out.data_mut()[idx(ch)] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad.shape();
    let (outer, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let inv_c = T::lit(1.0 / c as f64);
    let (gd, xh) = (grad.data(), cache.xhat.data());
    let mut gx = Tensor::zeros(shape);
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for o in 0..outer {
        for s in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + s;
            let r = cache.inv_std[o * inner + s];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for ch in 0..c {
                let g = gd[idx(ch)];
                gg.data_mut()[ch] += g * xh[idx(ch)];
                gb.data_mut()[ch] += g;
                let d = g * gamma.data()[ch];
                mean_d += d;
                mean_dx += d * xh[idx(ch)];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for ch in 0..c {
                let d = gd[idx(ch)] * gamma.data()[ch];
                gx.data_mut()[idx(ch)] = r * (d - mean_d - xh[idx(ch)] * mean_dx);
            }
        }
    }
    (gx, gg, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running mean/variance for batch norm. `None` means never initialized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Option<Tensor<T>>,
    pub var: Option<Tensor<T>>,
}

impl<T: Real> RunningStats<T> {
    pub fn initialized(c: usize) -> Self {
        Self {
            mean: Some(Tensor::zeros(&[c])),
            var: Some(Tensor::ones(&[c])),
        }
    }
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Updated running statistics (train mode only).
    pub updated: Option<RunningStats<T>>,
}

/// Batch norm over axis 1, statistics pooled over all other axes.
///
/// Train mode normalizes with batch statistics and returns the momentum
/// update of the running statistics (unbiased variance, as in common
/// frameworks). Eval mode uses the running statistics.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: NormMode,
) -> Result<BatchNormOutput<T>> {
    let (outer, c, inner) = channel_view(x.shape(), "batch_norm")?;
    check_affine(scale, c, "batch_norm scale")?;
    check_affine(shift, c, "batch_norm shift")?;
    let eps = T::lit(NORM_EPS);
    let count = outer * inner;
    let xd = x.data();
    let channel_values =
        |ch: usize| (0..outer).flat_map(move |o| (0..inner).map(move |s| (o * c + ch) * inner + s));
    let (means, vars, updated) = match mode {
        NormMode::Train => {
            let inv_n = T::lit(1.0 / count as f64);
            let mut means = Vec::with_capacity(c);
            let mut vars = Vec::with_capacity(c);
            for ch in 0..c {
                let m = channel_values(ch).map(|i| xd[i]).sum::<T>() * inv_n;
                let v = channel_values(ch)
                    .map(|i| (xd[i] - m) * (xd[i] - m))
                    .sum::<T>()
                    * inv_n;
                means.push(m);
                vars.push(v);
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let new_mean = Tensor::from_fn(&[c], |ch| match &stats.mean {
                Some(rm) => (T::one() - mom) * rm.data()[ch] + mom * means[ch],
                None => means[ch],
            });
            let new_var = Tensor::from_fn(&[c], |ch| match &stats.var {
                Some(rv) => (T::one() - mom) * rv.data()[ch] + mom * vars[ch] * unbias,
                None => vars[ch] * unbias,
            });
            let updated = RunningStats {
                mean: Some(new_mean),
                var: Some(new_var),
            };
            (means, vars, Some(updated))
        }
        NormMode::Eval => {
            let (Some(rm), Some(rv)) = (&stats.mean, &stats.var) else {
                return Err(Error::MissingRunningStats);
            };
            check_affine(rm, c, "batch_norm running mean")?;
            check_affine(rv, c, "batch_norm running var")?;
            (rm.data().to_vec(), rv.data().to_vec(), None)
        }
    };
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut output = Tensor::zeros(x.shape());
    for ch in 0..c {
        for i in channel_values(ch) {
            let xh = (xd[i] - means[ch]) * inv_std[ch];
            xhat.data_mut()[i] = xh;
            output.data_mut()[i] = scale.data()[ch] * xh + shift.data()[ch];
        }
    }
    Ok(BatchNormOutput {
        output,
        xhat,
        inv_std,
        updated,
    })
}

pub fn batch_norm_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    scale: &Tensor<T>,
    grad: &Tensor<T>,
    mode: NormMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad.shape();
    let (outer, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let count = outer * inner;
    let (gd, xh) = (grad.data(), xhat.data());
    let mut gx = Tensor::zeros(shape);
    let mut gs = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ch in 0..c {
        let idx: Vec<usize> = (0..outer)
            .flat_map(|o| (0..inner).map(move |s| (o * c + ch) * inner + s))
            .collect();
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for &i in &idx {
            sum_g += gd[i];
            sum_gx += gd[i] * xh[i];
        }
        gs.data_mut()[ch] = sum_gx;
        gb.data_mut()[ch] = sum_g;
        let k = scale.data()[ch] * inv_std[ch];
        match mode {
            NormMode::Eval => {
                for &i in &idx {
                    gx.data_mut()[i] = k * gd[i];
                }
            }
            NormMode::Train => {
                let inv_n = T::lit(1.0 / count as f64);
                let mg = sum_g * inv_n;
                let mgx = sum_gx * inv_n;
                for &i in &idx {
                    gx.data_mut()[i] = k * (gd[i] - mg - xh[i] * mgx);
                }
            }
        }
    }
    (gx, gs, gb)
}
