//! Built-in verification suites: oracle equivalences, invariants and
//! closed forms, runnable outside the test harness.
//!
//! Every suite is seeded, so two runs produce identical reports.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_check, Graph, Var};
use crate::bisab::{bi_sab, init_bi_sab, init_see, scharr_magnitude};
use crate::error::Result;
use crate::init::ParamStore;
use crate::loss::{l_artifact, l_recon, l_reg, l_smooth, l_sparse, ms2_total, psnr, ssim, LossWeights};
use crate::model::{haar_dwt2, haar_idwt2};
use crate::ops::NormMode;
use crate::retinex::{estimate_components, ger_recompose, gray_world, init_ger, init_light_preprocess, GerParams, RETINEX_EPS};
use crate::scan::{all_spiral_paths, spiral_path, topology_violation_rate, Corner, Rotation, ScanPath, TopologyThresholds};
use crate::tensor::Tensor;
use crate::wkv::{bi_wkv_naive, bi_wkv_scan, es_rwkv_block, init_es_rwkv_block, WkvParams};

pub const WKV_INSTANCES: usize = 200;
pub const WKV_MAX_T: usize = 64;
pub const WKV_MAX_C: usize = 8;
pub const WKV_REL_TOL: f64 = 1e-5;
pub const SCAN_MAX_EXTENT: usize = 32;
pub const TOPOLOGY: TopologyThresholds = TopologyThresholds { delta: 1.5, tau: 3 };
pub const TOPOLOGY_SIZES: std::ops::RangeInclusive<usize> = 4..=16;
pub const BLOCK_GRAD_TOL: f64 = 1e-3;
pub const LOSS_GRAD_TOL: f64 = 1e-5;
pub const HAAR_MAX_EXTENT: usize = 64;
pub const HAAR_RECON_TOL: f64 = 1e-6;
pub const HAAR_PARSEVAL_TOL: f64 = 1e-5;
pub const GRAY_WORLD_TOL: f64 = 1e-6;

/// One measured quantity inside a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub label: String,
    pub value: f64,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value < limit`.
    fn below(label: &str, value: f64, limit: f64) -> Self {
        Self {
            label: label.into(),
            value,
            ok: value < limit,
            detail: format!("{value:.3e} (limit {limit:.0e})"),
        }
    }

    /// Passes when `|value - want| <= tol`.
    fn near(label: &str, value: f64, want: f64, tol: f64) -> Self {
        Self {
            label: label.into(),
            value,
            ok: (value - want).abs() <= tol,
            detail: format!("{value} (want {want} ± {tol:.0e})"),
        }
    }

    fn flag(label: &str, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            value: if ok { 1.0 } else { 0.0 },
            ok,
            detail: detail.into(),
        }
    }

    fn error(label: &str, err: impl fmt::Display) -> Self {
        Self::flag(label, false, format!("error: {err}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.ok)
    }

    pub fn check(&self, label: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.label == label)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", if self.passed() { "PASS" } else { "FAIL" }, self.name)?;
        for c in &self.checks {
            write!(f, "\n    {} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.label, c.detail)?;
        }
        Ok(())
    }
}

/// Deliberate corruptions for checking that the suites catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The centre-row weight of the horizontal Scharr stencil becomes 9.
    ScharrConstant,
}

pub const SUITES: [&str; 8] = [
    "wkv-oracle",
    "scan-paths",
    "scan-topology",
    "gradients",
    "haar",
    "retinex",
    "closed-forms",
    "scharr-stencil",
];

pub fn run_suite(name: &str, fault: Option<Fault>) -> Option<SuiteReport> {
    Some(match name {
        "wkv-oracle" => wkv_oracle(),
        "scan-paths" => scan_paths(),
        "scan-topology" => scan_topology(),
        "gradients" => gradients(),
        "haar" => haar(),
        "retinex" => retinex(),
        "closed-forms" => closed_forms(),
        "scharr-stencil" => scharr_stencil(fault),
        _ => return None,
    })
}

pub fn run_all(fault: Option<Fault>) -> Vec<SuiteReport> {
    SUITES.iter().filter_map(|s| run_suite(s, fault)).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scan against the quadratic-time definition on random sequences.
pub fn wkv_oracle() -> SuiteReport {
    let mut r = rng(1001);
    let mut worst = 0.0f64;
    for _ in 0..WKV_INSTANCES {
        let t = r.gen_range(1..=WKV_MAX_T);
        let c = r.gen_range(1..=WKV_MAX_C);
        let p = match WkvParams::new(Tensor::randn(&[c], 1.0, &mut r), Tensor::randn(&[c], 1.0, &mut r)) {
            Ok(p) => p,
            Err(e) => return report("wkv-oracle", vec![Check::error("max relative error", e)]),
        };
        let k = Tensor::<f64>::randn(&[t, c], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[t, c], 1.0, &mut r);
        match (bi_wkv_scan(&k, &v, &p), bi_wkv_naive(&k, &v, &p)) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    worst = worst.max((x - y).abs() / (y.abs() + 1e-12));
                }
            }
            (Err(e), _) | (_, Err(e)) => return report("wkv-oracle", vec![Check::error("max relative error", e)]),
        }
    }
    report("wkv-oracle", vec![Check::below("max relative error", worst, WKV_REL_TOL)])
}

fn report(name: &'static str, checks: Vec<Check>) -> SuiteReport {
    SuiteReport { name, checks }
}

fn path_defect(p: &ScanPath) -> Option<String> {
    let mut seen = vec![false; p.len()];
    for &cell in p.order() {
        if cell >= p.len() || std::mem::replace(&mut seen[cell], true) {
            return Some(format!("cell {cell} repeated or out of range"));
        }
    }
    for t in 1..p.len() {
        let (a, b) = (p.coord(t - 1), p.coord(t));
        if a.0.abs_diff(b.0) + a.1.abs_diff(b.1) != 1 {
            return Some(format!("step {t} jumps from {a:?} to {b:?}"));
        }
    }
    None
}

/// Bijection and 4-adjacency for every extent, plus the hand-derived 3x3 walk.
pub fn scan_paths() -> SuiteReport {
    let mut failures = Vec::new();
    let mut count = 0;
    for h in 1..=SCAN_MAX_EXTENT {
        for w in 1..=SCAN_MAX_EXTENT {
            match all_spiral_paths(h, w) {
                Ok(paths) => {
                    for p in &paths {
                        count += 1;
                        if let Some(d) = path_defect(p) {
                            failures.push(format!("{h}x{w} {}: {d}", p.kind()));
                        }
                    }
                }
                Err(e) => failures.push(format!("{h}x{w}: {e}")),
            }
        }
    }
    let detail = match failures.first() {
        None => format!("{count} paths"),
        Some(f) => format!("{} failures, first {f}", failures.len()),
    };
    let bijective = Check::flag("adjacent bijections", failures.is_empty(), detail);

    // Outer ring clockwise from the top-left, then the centre.
    let ring = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0), (1, 1)];
    let walk = match spiral_path(3, 3, Corner::TopLeft, Rotation::Clockwise) {
        Ok(p) => {
            let got: Vec<_> = (0..p.len()).map(|t| p.coord(t)).collect();
            Check::flag("3x3 top-left clockwise", got == ring, format!("{got:?}"))
        }
        Err(e) => Check::error("3x3 top-left clockwise", e),
    };
    report("scan-paths", vec![bijective, walk])
}

/// Every spiral keeps at most the raster's share of broken neighbourhoods.
pub fn scan_topology() -> SuiteReport {
    let mut worst_margin = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for n in TOPOLOGY_SIZES {
        let raster = topology_violation_rate(&ScanPath::raster(n, n), TOPOLOGY);
        let paths = match all_spiral_paths(n, n) {
            Ok(p) => p,
            Err(e) => return report("scan-topology", vec![Check::error("spiral <= raster", e)]),
        };
        for p in &paths {
            let rate = topology_violation_rate(p, TOPOLOGY);
            worst_margin = worst_margin.max(rate - raster);
            if rate > raster {
                failures.push(format!("{n}x{n} {}: {rate:.4} > {raster:.4}", p.kind()));
            }
        }
    }
    let detail = match failures.first() {
        None => format!("largest spiral - raster gap {worst_margin:.4}"),
        Some(f) => format!("{} failures, first {f}", failures.len()),
    };
    report("scan-topology", vec![Check::flag("spiral <= raster", failures.is_empty(), detail)])
}

type Scalar<'a> = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a>;

fn fd(label: &str, f: Scalar<'_>, point: &Tensor<f64>, step: f64, tol: f64) -> Check {
    match finite_diff_check(f, point, step) {
        Ok(err) => Check::below(label, err, tol),
        Err(e) => Check::error(label, e),
    }
}

type BlockFn<'a> = dyn Fn(&mut Graph<f64>, &crate::init::Bound<f64>) -> Result<Var> + 'a;

/// Gradient of `sum(weight ⊙ block(params))` for each trainable tensor.
fn block_checks(
    block: &str,
    store: &ParamStore<f64>,
    weight: &Tensor<f64>,
    run: &BlockFn,
    out: &mut Vec<Check>,
) {
    let mut worst = 0.0f64;
    let mut failure = None;
    let mut count = 0;
    for p in store.iter().filter(|p| p.requires_grad) {
        count += 1;
        let name = p.name.clone();
        let mut local = store.clone();
        if let Ok(q) = local.get_mut(&name) {
            q.requires_grad = false;
        }
        let res = finite_diff_check(
            |g, v| {
                let b = local.bind(g)?.with_override(&name, v);
                let y = run(g, &b)?;
                let w = g.constant(weight.clone());
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &p.value,
            1e-5,
        );
        match res {
            Ok(err) => {
                if err >= BLOCK_GRAD_TOL && failure.is_none() {
                    failure = Some(format!("{name}: {err:.3e}"));
                }
                worst = worst.max(err);
            }
            Err(e) => {
                failure.get_or_insert(format!("{name}: {e}"));
            }
        }
    }
    let ok = failure.is_none() && count > 0;
    let detail = match failure {
        None => format!("{count} tensors, worst {worst:.3e} (limit {BLOCK_GRAD_TOL:.0e})"),
        Some(f) => format!("{f} (limit {BLOCK_GRAD_TOL:.0e})"),
    };
    out.push(Check {
        label: block.into(),
        value: worst,
        ok,
        detail,
    });
}

/// Central differences at 64-bit for every loss term and block.
pub fn gradients() -> SuiteReport {
    let mut r = rng(1004);
    let mut checks = Vec::new();
    let img = Tensor::<f64>::uniform(&[1, 3, 6, 6], 0.05, 0.95, &mut r);
    let other = Tensor::<f64>::uniform(&[1, 3, 6, 6], 0.05, 0.95, &mut r);
    let lmap = Tensor::<f64>::uniform(&[1, 1, 6, 6], 0.1, 1.9, &mut r);
    let signed = Tensor::<f64>::uniform(&[1, 3, 6, 6], -0.9, 0.9, &mut r);

    checks.push(fd(
        "l_recon",
        Box::new(|g, x| {
            let t = g.constant(other.clone());
            l_recon(g, t, x)
        }),
        &img,
        1e-6,
        LOSS_GRAD_TOL,
    ));
    checks.push(fd("l_sparse", Box::new(l_sparse), &signed, 1e-6, LOSS_GRAD_TOL));
    checks.push(fd(
        "l_smooth (illumination)",
        Box::new(|g, l| {
            let i = g.constant(img.clone());
            l_smooth(g, l, i, 10.0)
        }),
        &lmap,
        1e-6,
        LOSS_GRAD_TOL,
    ));
    checks.push(fd(
        "l_smooth (image)",
        Box::new(|g, i| {
            let l = g.constant(lmap.clone());
            l_smooth(g, l, i, 10.0)
        }),
        &img,
        1e-6,
        LOSS_GRAD_TOL,
    ));
    checks.push(fd(
        "l_artifact",
        Box::new(|g, s| l_artifact(g, s, 0.7)),
        &signed,
        1e-6,
        LOSS_GRAD_TOL,
    ));
    let abg = Tensor::<f64>::new(&[3], vec![0.3, -1.7, 2.2]).expect("3 values");
    checks.push(fd(
        "l_reg",
        Box::new(|g, v| {
            let v = g.reshape(v, &[1, 3, 1, 1])?;
            let a = g.narrow_channels(v, 0, 1)?;
            let b = g.narrow_channels(v, 1, 1)?;
            let c = g.narrow_channels(v, 2, 1)?;
            l_reg(g, a, b, c)
        }),
        &abg,
        1e-6,
        LOSS_GRAD_TOL,
    ));

    // ES-RWKV block on a 2x3 grid with non-trivial decay and bonus.
    let c = 4;
    let mut s = ParamStore::new();
    let built = init_es_rwkv_block(&mut s, "blk", c, &mut r).and_then(|_| {
        for name in ["blk.spatial.wkv.w_raw", "blk.spatial.wkv.u", "blk.spatial.ln.beta", "blk.channel.ln.beta"] {
            s.set(name, Tensor::randn(&[c], 0.5, &mut r))?;
        }
        all_spiral_paths(2, 3)
    });
    match built {
        Ok(paths) => {
            let paths: Arc<[ScanPath]> = paths.into();
            let x = Tensor::<f64>::randn(&[1, c, 2, 3], 1.0, &mut r);
            let weight = Tensor::<f64>::randn(&[1, c, 2, 3], 1.0, &mut r);
            let run = |g: &mut Graph<f64>, b: &crate::init::Bound<f64>| {
                let xv = g.constant(x.clone());
                es_rwkv_block(g, b, "blk", xv, &paths)
            };
            block_checks("es_rwkv_block", &s, &weight, &run, &mut checks);
        }
        Err(e) => checks.push(Check::error("es_rwkv_block", e)),
    }

    // Bi-SAB on 4x4 features, batch statistics in the edge branch.
    let mut s = ParamStore::new();
    match init_bi_sab(&mut s, "sab", c, 2, &mut r).and_then(|_| {
        s.set("sab.ln.beta", Tensor::randn(&[c], 0.3, &mut r))?;
        s.set("sab.see.bn.shift", Tensor::randn(&[c], 0.3, &mut r))
    }) {
        Ok(()) => {
            let f1 = Tensor::<f64>::randn(&[1, c, 4, 4], 1.0, &mut r);
            let f1p = Tensor::<f64>::randn(&[1, c, 4, 4], 1.0, &mut r);
            let weight = Tensor::<f64>::randn(&[1, c, 4, 4], 1.0, &mut r);
            let run = |g: &mut Graph<f64>, b: &crate::init::Bound<f64>| {
                let (a, d) = (g.constant(f1.clone()), g.constant(f1p.clone()));
                bi_sab(g, b, "sab", a, d, 2, NormMode::Train)
            };
            block_checks("bi_sab", &s, &weight, &run, &mut checks);
        }
        Err(e) => checks.push(Check::error("bi_sab", e)),
    }

    // Light preprocessing: all three heads feed the scalar.
    let mut s = ParamStore::new();
    match init_light_preprocess(&mut s, "pre", &mut r) {
        Ok(()) => {
            let x = Tensor::<f64>::uniform(&[1, 3, 4, 4], 0.05, 0.95, &mut r);
            let weight = Tensor::<f64>::randn(&[1, 7, 4, 4], 1.0, &mut r);
            let run = |g: &mut Graph<f64>, b: &crate::init::Bound<f64>| {
                let xv = g.constant(x.clone());
                let est = estimate_components(g, b, "pre", xv)?;
                g.concat_channels(&[est.s, est.l, est.n])
            };
            block_checks("light_preprocess", &s, &weight, &run, &mut checks);
        }
        Err(e) => checks.push(Check::error("light_preprocess", e)),
    }

    // GER coefficients with inputs kept inside the clamp range.
    let mut s = ParamStore::new();
    match init_ger(&mut s, "ger") {
        Ok(()) => {
            let x = Tensor::<f64>::uniform(&[1, 3, 4, 4], 0.3, 0.6, &mut r);
            let e = Tensor::<f64>::uniform(&[1, 3, 4, 4], -0.1, 0.1, &mut r);
            let n = Tensor::<f64>::uniform(&[1, 3, 4, 4], -0.05, 0.05, &mut r);
            let l = Tensor::<f64>::uniform(&[1, 1, 4, 4], 0.8, 1.2, &mut r);
            let sv = Tensor::<f64>::uniform(&[1, 3, 4, 4], 0.0, 0.1, &mut r);
            let weight = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut r);
            let run = |g: &mut Graph<f64>, b: &crate::init::Bound<f64>| {
                let p = GerParams::bind(b, "ger", RETINEX_EPS)?;
                let v: Vec<Var> = [&x, &e, &n, &l, &sv].iter().map(|t| g.constant((*t).clone())).collect();
                Ok(ger_recompose(g, v[0], v[1], v[2], v[3], v[4], &p)?.enhanced)
            };
            block_checks("ger_recompose", &s, &weight, &run, &mut checks);
        }
        Err(e) => checks.push(Check::error("ger_recompose", e)),
    }

    report("gradients", checks)
}

/// Perfect reconstruction and energy preservation on random tensors.
pub fn haar() -> SuiteReport {
    let mut r = rng(1005);
    let (mut recon, mut parseval) = (0.0f64, 0.0f64);
    let mut sizes: Vec<(usize, usize)> = vec![(2, 2), (HAAR_MAX_EXTENT, HAAR_MAX_EXTENT)];
    for _ in 0..18 {
        sizes.push((2 * r.gen_range(1..=HAAR_MAX_EXTENT / 2), 2 * r.gen_range(1..=HAAR_MAX_EXTENT / 2)));
    }
    for (h, w) in sizes {
        let c = r.gen_range(1..=3);
        let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut r);
        let y = match haar_dwt2(&x) {
            Ok(y) => y,
            Err(e) => return report("haar", vec![Check::error("reconstruction", e)]),
        };
        match haar_idwt2(&y).and_then(|back| back.max_abs_diff(&x)) {
            Ok(d) => recon = recon.max(d),
            Err(e) => return report("haar", vec![Check::error("reconstruction", e)]),
        }
        let energy = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((energy(&x) - energy(&y)).abs() / energy(&x).max(1e-300));
    }
    report(
        "haar",
        vec![
            Check::below("reconstruction", recon, HAAR_RECON_TOL),
            Check::below("parseval", parseval, HAAR_PARSEVAL_TOL),
        ],
    )
}

/// Identity recomposition and gray-world balancing.
pub fn retinex() -> SuiteReport {
    let mut r = rng(1006);
    let mut checks = Vec::new();
    let shape = [2, 3, 8, 8];
    let x = Tensor::<f64>::uniform(&shape, -0.3, 1.3, &mut r);
    let e = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut r);
    let s = Tensor::<f64>::uniform(&shape, 0.0, 1.0, &mut r);
    let round_trip = (|| -> Result<f64> {
        let mut st = ParamStore::new();
        init_ger(&mut st, "ger")?;
        for name in ["ger.alpha", "ger.beta", "ger.gamma"] {
            st.set(name, Tensor::zeros(&[1]))?;
        }
        let g = &mut Graph::inference();
        let b = st.bind(g)?;
        let p = GerParams::bind(&b, "ger", RETINEX_EPS)?;
        let xv = g.constant(x.clone());
        let ev = g.constant(e.clone());
        let nv = g.constant(Tensor::zeros(&shape));
        let lv = g.constant(Tensor::ones(&[2, 1, 8, 8]));
        let sv = g.constant(s.clone());
        let out = ger_recompose(g, xv, ev, nv, lv, sv, &p)?;
        g.value(out.enhanced).max_abs_diff(&x.map(|v| v.clamp(0.0, 1.0)))
    })();
    checks.push(match round_trip {
        Ok(d) => Check::below("identity recomposition", d, 1e-12),
        Err(err) => Check::error("identity recomposition", err),
    });

    let img = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |i| {
        let c = (i / 64) % 3;
        let gain = [0.4, 1.0, 1.7][c];
        (gain * (0.2 + 0.3 * ((i * 7919) % 97) as f64 / 97.0)).min(1.0)
    });
    let balanced = gray_world(&img).map(|out| {
        let mut spread = 0.0f64;
        for b in 0..2 {
            let means: Vec<f64> = (0..3)
                .map(|c| {
                    let base = (b * 3 + c) * 64;
                    out.data()[base..base + 64].iter().sum::<f64>() / 64.0
                })
                .collect();
            let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            spread = spread.max(hi - lo);
        }
        spread
    });
    checks.push(match balanced {
        Ok(d) => Check::below("gray-world channel means", d, GRAY_WORLD_TOL),
        Err(err) => Check::error("gray-world channel means", err),
    });
    report("retinex", checks)
}

/// Hand-evaluated values of the losses and metrics.
pub fn closed_forms() -> SuiteReport {
    let mut checks = Vec::new();
    let reg = (|| -> Result<f64> {
        let g = &mut Graph::<f64>::inference();
        let [a, b, c] = [1.0, 2.0, 3.0].map(|v| g.constant(Tensor::full(&[1], v)));
        let y = l_reg(g, a, b, c)?;
        g.value(y).item()
    })();
    checks.push(match reg {
        Ok(v) => Check::near("l_reg(1, 2, 3)", v, 14.0, 1e-12),
        Err(e) => Check::error("l_reg(1, 2, 3)", e),
    });
    let total = ms2_total([1.0; 5], &LossWeights::default()).total;
    checks.push(Check::near("weighted total of unit terms", total, 1.1601, 1e-12));

    let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| 0.2 + 0.5 * ((i * 31) % 17) as f64 / 17.0);
    let b = a.map(|v| v + 0.1);
    checks.push(match psnr(&a, &b) {
        Ok(v) => Check::near("psnr at mse 0.01", v, 20.0, 0.005),
        Err(e) => Check::error("psnr at mse 0.01", e),
    });
    checks.push(match ssim(&a, &a) {
        Ok(v) => Check::near("ssim(x, x)", v, 1.0, 1e-9),
        Err(e) => Check::error("ssim(x, x)", e),
    });
    report("closed-forms", checks)
}

/// The edge branch's stencils against the separable derivative oracle, and
/// their response to a horizontal ramp.
pub fn scharr_stencil(fault: Option<Fault>) -> SuiteReport {
    let c = 2;
    let mut s = ParamStore::<f64>::new();
    if let Err(e) = init_see(&mut s, "see", c, &mut rng(1008)) {
        return report("scharr-stencil", vec![Check::error("kernels", e)]);
    }
    if fault == Some(Fault::ScharrConstant) {
        if let Ok(p) = s.get_mut("see.scharr_x") {
            for ch in 0..c {
                p.value.data_mut()[ch * 9 + 5] = 9.0;
            }
        }
    }
    // Smoothing [3, 10, 3] across the derivative [-1, 0, 1].
    let smooth = [3.0, 10.0, 3.0];
    let diff = [-1.0, 0.0, 1.0];
    let mut worst = 0.0f64;
    for (name, transpose) in [("see.scharr_x", false), ("see.scharr_y", true)] {
        let Ok(k) = s.tensor(name) else {
            return report("scharr-stencil", vec![Check::error("kernels", format!("missing {name}"))]);
        };
        for (i, v) in k.data().iter().enumerate() {
            let (row, col) = ((i % 9) / 3, i % 3);
            let want = if transpose { diff[row] * smooth[col] } else { smooth[row] * diff[col] };
            worst = worst.max((v - want).abs());
        }
    }
    let kernels = Check::below("kernels vs separable oracle", worst, 1e-12);

    // f(y, x) = slope * x gives |Gx| = 32 * slope away from the border, Gy = 0.
    let slope = 0.25;
    let (h, w) = (5, 6);
    let ramp = Tensor::<f64>::from_fn(&[1, c, h, w], |i| slope * (i % w) as f64);
    let response = (|| -> Result<f64> {
        let g = &mut Graph::inference();
        let b = s.bind(g)?;
        let x = g.constant(ramp.clone());
        let m = scharr_magnitude(g, &b, "see", x)?;
        let m = g.value(m);
        let mut dev = 0.0f64;
        for ch in 0..c {
            for y in 0..h {
                for xx in 1..w - 1 {
                    dev = dev.max((m.data()[(ch * h + y) * w + xx] - 32.0 * slope).abs());
                }
            }
        }
        Ok(dev)
    })();
    let ramp_check = match response {
        Ok(d) => Check::below("ramp response", d, 1e-12),
        Err(e) => Check::error("ramp response", e),
    };
    report("scharr-stencil", vec![kernels, ramp_check])
}
