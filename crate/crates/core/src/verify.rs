//! Cross-module verification suites.
//!
//! Each suite draws its cases from a ChaCha8 stream derived from one seed, so
//! a report is reproducible byte for byte. The oracles here are written
//! independently of the kernels they check (plain nested loops over `f64`).

use std::fmt::Write as _;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    gqa_forward, mha_backward, mha_forward, mqa_forward, reuse_backward, reuse_forward, AttentionConfig,
    AttentionParams, Mechanism,
};
use crate::error::{Error, Result};
use crate::memory::{
    display_bytes, model_total_bytes, ByteUnit, reduction_fraction, reduction_percent, traffic_mha, traffic_reuse,
    PresetCatalog, TrafficBreakdown, REFERENCE_TOTALS,
};
use crate::tensor::{finite_difference_grad, Tensor};
use crate::traffic::TrafficRecorder;

pub const SUITES: [&str; 5] = [
    "traffic-equivalence",
    "gradient-check",
    "mechanism-equivalence",
    "table2",
    "reduction-identity",
];

/// Relative error bound for analytic vs finite-difference gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Absolute bound for the mechanism-equivalence oracles.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;
/// Tolerance on displayed two-decimal values.
pub const DISPLAY_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random configurations per randomized suite; the reduction identity
    /// runs twenty times as many triples.
    pub trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 42, trials: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Description of the first failing case.
    pub first_failure: Option<String>,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        SuiteResult {
            name,
            cases: 0,
            failures: 0,
            first_failure: None,
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }

    fn error(&mut self, context: String, e: Error) {
        self.check(false, || format!("{context}: {e}"));
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> usize {
        self.suites.iter().map(|s| s.failures).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "verify seed={} trials={}", self.options.seed, self.options.trials);
        for s in &self.suites {
            let _ = writeln!(out, "{:<22} {:>6} cases {:>4} failures", s.name, s.cases, s.failures);
            if let Some(f) = &s.first_failure {
                let _ = writeln!(out, "  first counterexample: {f}");
            }
        }
        let _ = writeln!(out, "{} suites, {} failures", self.suites.len(), self.failures());
        out
    }
}

/// Runs every suite.
pub fn run_all(opts: VerifyOptions) -> Result<VerifyReport> {
    if opts.trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    let s = opts.seed;
    Ok(VerifyReport {
        options: opts,
        suites: vec![
            traffic_equivalence(s, opts.trials),
            gradient_check(s.wrapping_add(1), opts.trials),
            mechanism_equivalence(s.wrapping_add(2), opts.trials),
            table2(),
            reduction_identity(s.wrapping_add(4), opts.trials * 20),
        ],
    })
}

/// A random reuse config with `N <= max_side^2`, `d <= max_d`, `h <= max_h`.
pub fn random_reuse_config(rng: &mut impl Rng, max_side: usize, max_d: usize, max_h: usize) -> AttentionConfig<f64> {
    let grid = (rng.random_range(1..=max_side), rng.random_range(1..=max_side));
    let d = rng.random_range(1..=max_d);
    let h = rng.random_range(1..=max_h);
    AttentionConfig::reuse(grid.0 * grid.1, d * h, h, grid).expect("valid random config")
}

fn breakdown_mismatch(what: &str, observed: &TrafficBreakdown, expected: &TrafficBreakdown) -> String {
    let mut s = what.to_string();
    for ((phase, o), (_, e)) in observed.phases().iter().zip(expected.phases()) {
        if *o != e {
            let _ = write!(
                s,
                "; {phase}: observed loads={} stores={}, expected loads={} stores={}",
                o.loads, o.stores, e.loads, e.stores
            );
        }
    }
    s
}

/// Recorder counts from real forward passes against the closed-form
/// per-phase traffic, for random `N <= 64, d <= 16, h <= 8`.
pub fn traffic_equivalence(seed: u64, trials: usize) -> SuiteResult {
    let mut suite = SuiteResult::new(SUITES[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let cfg = random_reuse_config(&mut rng, 8, 16, 8);
        let (n, d, h) = (cfg.tokens(), cfg.head_dim(), cfg.heads());
        let tag = format!("N={n} d={d} h={h} grid={:?}", cfg.grid());
        let x = Tensor::uniform(&[n, d * h], 1.0, &mut rng);

        let params = AttentionParams::init(&cfg, &mut rng);
        let mut rec = TrafficRecorder::new();
        match reuse_forward(&x, &params, &cfg, Some(&mut rec)) {
            Ok(_) => {
                let observed = TrafficBreakdown::from_recorder(&rec);
                let expected = traffic_reuse(n as u64, d as u64, h as u64).expect("positive");
                suite.check(observed == expected, || {
                    breakdown_mismatch(&format!("reuse {tag}"), &observed, &expected)
                });
            }
            Err(e) => suite.error(format!("reuse {tag}"), e),
        }

        let mcfg = AttentionConfig::multi_head(n, d * h, h).expect("valid");
        let mparams = AttentionParams::init(&mcfg, &mut rng);
        let mut rec = TrafficRecorder::new();
        match mha_forward(&x, &mparams, &mcfg, Some(&mut rec)) {
            Ok(_) => {
                let observed = TrafficBreakdown::from_recorder(&rec);
                let expected = traffic_mha(n as u64, d as u64, h as u64).expect("positive");
                suite.check(observed == expected, || {
                    breakdown_mismatch(&format!("multi-head {tag}"), &observed, &expected)
                });
            }
            Err(e) => suite.error(format!("multi-head {tag}"), e),
        }
    }
    suite
}

/// Norm-wise relative error `max|a - n| / max(max|a|, max|n|, 1e-12)`.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff = analytic.max_abs_diff(numeric).unwrap_or(f64::INFINITY);
    let scale = |t: &Tensor<f64>| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale(analytic).max(scale(numeric)).max(1e-12)
}

const FD_EPS: f64 = 1e-6;

/// Largest relative error between analytic and finite-difference gradients
/// of `L = sum(out * R)` for one attention layer, over the input and every
/// weight tensor. Handles reuse and multi-head configs.
pub fn attention_gradient_error(cfg: &AttentionConfig<f64>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dim) = (cfg.tokens(), cfg.dim());
    let x = Tensor::uniform(&[n, dim], 1.0, &mut rng);
    let params = AttentionParams::init(cfg, &mut rng);
    let r = Tensor::uniform(&[n, dim], 1.0, &mut rng);
    let reuse = cfg.mechanism() == Mechanism::Reuse;

    let forward = |x: &Tensor<f64>, p: &AttentionParams<f64>| -> Result<Tensor<f64>> {
        if reuse {
            Ok(reuse_forward(x, p, cfg, None)?.0)
        } else {
            Ok(mha_forward(x, p, cfg, None)?.0)
        }
    };
    let loss = |out: Tensor<f64>| out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

    let grads = if reuse {
        let (_, cache) = reuse_forward(&x, &params, cfg, None)?;
        reuse_backward(&cache, &params, &r, cfg)?
    } else {
        let (_, cache) = mha_forward(&x, &params, cfg, None)?;
        mha_backward(&cache, &params, &r, cfg)?
    };

    let numeric_x = finite_difference_grad(|xp| Ok(loss(forward(xp, &params)?)), &x, FD_EPS)?;
    let mut worst = relative_error(&grads.x, &numeric_x);
    let analytic: Vec<Tensor<f64>> = grads.params.tensors().into_iter().cloned().collect();
    for (i, a) in analytic.iter().enumerate() {
        let base = params.tensors()[i].clone();
        let numeric = finite_difference_grad(
            |t| {
                let mut p = params.clone();
                *p.tensors_mut()[i] = t.clone();
                Ok(loss(forward(&x, &p)?))
            },
            &base,
            FD_EPS,
        )?;
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(worst)
}

/// Analytic backward of reuse and multi-head attention against central
/// differences on random `N <= 8, D <= 8` configs.
pub fn gradient_check(seed: u64, trials: usize) -> SuiteResult {
    let mut suite = SuiteResult::new(SUITES[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let h = rng.random_range(1..=4usize);
        let d = rng.random_range(1..=8 / h);
        let gh = rng.random_range(1..=3usize);
        let gw = rng.random_range(1..=8 / gh);
        let n = gh * gw;
        let configs = [
            AttentionConfig::reuse(n, d * h, h, (gh, gw)),
            AttentionConfig::multi_head(n, d * h, h),
        ];
        for cfg in configs {
            let cfg = cfg.expect("valid config");
            let tag = format!("{} N={n} d={d} h={h} grid={gh}x{gw}", cfg.mechanism().name());
            match attention_gradient_error(&cfg, seed.wrapping_mul(31).wrapping_add(t as u64)) {
                Ok(err) => suite.check(err <= GRADIENT_TOLERANCE, || {
                    format!("{tag}: relative error {err:.3e} > {GRADIENT_TOLERANCE:e}")
                }),
                Err(e) => suite.error(tag, e),
            }
        }
    }
    suite
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, _) = t.dims2("oracle").expect("matrix");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for (p, bp) in b.iter().enumerate().take(k) {
                out[i][j] += a[i][p] * bp[j];
            }
        }
    }
    out
}

/// Reference Reuse Attention that recomputes `softmax(Q K^T / sqrt(D))` for
/// every head and convolves each value map with explicit loops.
pub fn naive_reuse(x: &Tensor<f64>, params: &AttentionParams<f64>, cfg: &AttentionConfig<f64>) -> Tensor<f64> {
    let (n, dim, d) = (cfg.tokens(), cfg.dim(), cfg.head_dim());
    let (gh, gw) = cfg.grid();
    let xm = to_mat(x);
    let q = naive_matmul(&xm, &to_mat(&params.w_q));
    let k = naive_matmul(&xm, &to_mat(&params.w_k));
    let mut out = vec![vec![0.0; dim]; n];
    for head in 0..cfg.heads() {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..dim).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dim as f64).sqrt();
            }
            let m = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a[i].iter().map(|v| (v - m).exp()).sum();
            for v in a[i].iter_mut() {
                *v = (*v - m).exp() / z;
            }
        }
        let chunk: Mat = xm.iter().map(|row| row[head * d..(head + 1) * d].to_vec()).collect();
        let proj = naive_matmul(&chunk, &to_mat(&params.w_v[head]));
        let ks = cfg.kernel_sizes()[head];
        let kern = params.dw_kernels[head].data();
        let r = (ks / 2) as isize;
        let mut v = vec![vec![0.0; d]; n];
        for y in 0..gh as isize {
            for xx in 0..gw as isize {
                for c in 0..d {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sx < 0 || sy >= gh as isize || sx >= gw as isize {
                                continue;
                            }
                            let kidx = (((dy + r) as usize * ks) + (dx + r) as usize) * d + c;
                            acc += kern[kidx] * proj[(sy as usize) * gw + sx as usize][c];
                        }
                    }
                    v[y as usize * gw + xx as usize][c] = acc;
                }
            }
        }
        let o = naive_matmul(&a, &v);
        for i in 0..n {
            out[i][head * d..(head + 1) * d].copy_from_slice(&o[i]);
        }
    }
    Tensor::new(&[n, dim], out.concat()).expect("finite oracle output")
}

/// Reuse with one head and a `1x1` unit kernel against single-head
/// multi-head attention with `W_O = I`; reuse with any head count against
/// [`naive_reuse`]; grouped-query against its multi-head and multi-query
/// limits.
pub fn mechanism_equivalence(seed: u64, trials: usize) -> SuiteResult {
    let mut suite = SuiteResult::new(SUITES[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let gh = rng.random_range(1..=4usize);
        let gw = rng.random_range(1..=4usize);
        let n = gh * gw;
        let dim = rng.random_range(1..=8usize);
        let tag = format!("N={n} D={dim} grid={gh}x{gw}");
        if let Err(e) = single_head_collapse(&mut rng, n, dim, (gh, gw), &mut suite) {
            suite.error(format!("single-head {tag}"), e);
        }

        let cfg = random_reuse_config(&mut rng, 4, 4, 6);
        let x = Tensor::uniform(&[cfg.tokens(), cfg.dim()], 1.0, &mut rng);
        let params = AttentionParams::init(&cfg, &mut rng);
        let tag = format!("N={} d={} h={}", cfg.tokens(), cfg.head_dim(), cfg.heads());
        match reuse_forward(&x, &params, &cfg, None) {
            Ok((out, _)) => {
                let diff = out.max_abs_diff(&naive_reuse(&x, &params, &cfg)).unwrap_or(f64::INFINITY);
                suite.check(diff < EQUIVALENCE_TOLERANCE, || {
                    format!("naive oracle {tag}: max abs diff {diff:.3e}")
                });
            }
            Err(e) => suite.error(format!("naive oracle {tag}"), e),
        }

        let h = cfg.heads();
        let n = cfg.tokens();
        let dim = cfg.dim();
        if let Err(e) = grouped_limits(&mut rng, n, dim, h, &mut suite) {
            suite.error(format!("grouped N={n} D={dim} h={h}"), e);
        }
    }
    suite
}

fn single_head_collapse(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    grid: (usize, usize),
    suite: &mut SuiteResult,
) -> Result<()> {
    let rcfg = AttentionConfig::reuse(n, dim, 1, grid)?.with_kernel_sizes(vec![1])?;
    let mcfg = AttentionConfig::multi_head(n, dim, 1)?;
    let x = Tensor::uniform(&[n, dim], 1.0, rng);
    let mut rp = AttentionParams::init(&rcfg, rng);
    rp.dw_kernels[0] = Tensor::full(&[1, 1, dim], 1.0);
    let mp = AttentionParams {
        w_q: rp.w_q.clone(),
        w_k: rp.w_k.clone(),
        w_v: rp.w_v.clone(),
        dw_kernels: Vec::new(),
        w_o: Some(Tensor::eye(dim)),
    };
    let (ro, rc) = reuse_forward(&x, &rp, &rcfg, None)?;
    let (mo, mc) = mha_forward(&x, &mp, &mcfg, None)?;
    let diff = ro.max_abs_diff(&mo)?;
    suite.check(diff < EQUIVALENCE_TOLERANCE, || {
        format!("single-head N={n} D={dim}: outputs differ by {diff:.3e}")
    });

    let d_out = Tensor::uniform(&[n, dim], 1.0, rng);
    let rg = reuse_backward(&rc, &rp, &d_out, &rcfg)?;
    let mg = mha_backward(&mc, &mp, &d_out, &mcfg)?;
    let pairs = [
        ("x", &rg.x, &mg.x),
        ("w_q", &rg.params.w_q, &mg.params.w_q),
        ("w_k", &rg.params.w_k, &mg.params.w_k),
        ("w_v", &rg.params.w_v[0], &mg.params.w_v[0]),
    ];
    let (name, diff) = pairs
        .iter()
        .map(|(name, a, b)| (*name, a.max_abs_diff(b).unwrap_or(f64::INFINITY)))
        .fold(("", 0.0), |acc, p| if p.1 > acc.1 { p } else { acc });
    suite.check(diff < EQUIVALENCE_TOLERANCE, || {
        format!("single-head N={n} D={dim}: gradient of {name} differs by {diff:.3e}")
    });
    Ok(())
}

fn grouped_limits(rng: &mut ChaCha8Rng, n: usize, dim: usize, h: usize, suite: &mut SuiteResult) -> Result<()> {
    let x: Tensor<f64> = Tensor::uniform(&[n, dim], 1.0, rng);
    let mcfg = AttentionConfig::multi_head(n, dim, h)?;
    let p = AttentionParams::init(&mcfg, rng);
    let full = gqa_forward(&x, &p, &AttentionConfig::grouped_query(n, dim, h, h)?)?;
    let mha = mha_forward(&x, &p, &mcfg, None)?.0;
    suite.check(full == mha, || format!("GQA(g=h) != MHA at N={n} D={dim} h={h}"));

    let qcfg = AttentionConfig::multi_query(n, dim, h)?;
    let q = AttentionParams::init(&qcfg, rng);
    let one = gqa_forward(&x, &q, &AttentionConfig::grouped_query(n, dim, h, 1)?)?;
    let mqa = mqa_forward(&x, &q, &qcfg)?;
    suite.check(one == mqa, || format!("GQA(g=1) != MQA at N={n} D={dim} h={h}"));
    Ok(())
}

/// Built-in catalog totals against the published two-decimal values.
pub fn table2() -> SuiteResult {
    let mut suite = SuiteResult::new(SUITES[3]);
    let catalog = PresetCatalog::builtin();
    for row in REFERENCE_TOTALS {
        let result = (|| -> Result<_> {
            let p = catalog.lookup(row.name)?;
            let mha = model_total_bytes(p, Mechanism::MultiHead)?;
            let reuse = model_total_bytes(p, Mechanism::Reuse)?;
            Ok((mha, reuse, reduction_percent(p.tokens, p.head_dim, p.heads)?))
        })();
        let (mha, reuse, pct) = match result {
            Ok(v) => v,
            Err(e) => {
                suite.error(row.name.to_string(), e);
                continue;
            }
        };
        let close = |bytes: u64, want: (f64, ByteUnit)| {
            let (v, unit) = display_bytes(bytes);
            unit == want.1 && (v - want.0).abs() <= DISPLAY_TOLERANCE
        };
        let ok = close(mha, row.mha) && close(reuse, row.reuse) && (pct - row.reduction).abs() <= DISPLAY_TOLERANCE;
        suite.check(ok, || {
            let (mv, mu) = display_bytes(mha);
            let (rv, ru) = display_bytes(reuse);
            format!(
                "{}: observed {mv:.4} {} / {rv:.4} {} / {pct:.4}%, expected {} {} / {} {} / {}%",
                row.name,
                mu.symbol(),
                ru.symbol(),
                row.mha.0,
                row.mha.1.symbol(),
                row.reuse.0,
                row.reuse.1.symbol(),
                row.reduction
            )
        });
    }
    suite
}

/// `reduction_fraction`, `1 - (N + d h) / (h (N + d))` and
/// `1 - reuse_total / mha_total` agree as exact rationals, and
/// `reduction_percent` is their decimal value.
pub fn reduction_identity(seed: u64, count: usize) -> SuiteResult {
    let mut suite = SuiteResult::new(SUITES[4]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        let n = rng.random_range(1..=100_000u64);
        let d = rng.random_range(1..=512u64);
        let h = rng.random_range(1..=128u64);
        let tag = format!("N={n} d={d} h={h}");
        let result = (|| -> Result<_> {
            let frac = reduction_fraction(n, d, h)?;
            let pct = reduction_percent(n, d, h)?;
            let mha = traffic_mha(n, d, h)?.total_elements() as u128;
            let reuse = traffic_reuse(n, d, h)?.total_elements() as u128;
            Ok((frac, pct, mha, reuse))
        })();
        match result {
            Ok((frac, pct, mha, reuse)) => {
                let (nn, dd, hh) = (n as u128, d as u128, h as u128);
                let closed = Ratio::from_integer(1u128) - Ratio::new(nn + dd * hh, hh * (nn + dd));
                let totals = Ratio::from_integer(1u128) - Ratio::new(reuse, mha);
                let decimal = 100.0 * (1.0 - reuse as f64 / mha as f64);
                let ok = frac == closed && frac == totals && (pct - decimal).abs() <= 1e-9;
                suite.check(ok, || {
                    format!("{tag}: fraction {frac}, closed form {closed}, totals {totals}, percent {pct} vs {decimal}")
                });
            }
            Err(e) => suite.error(tag, e),
        }
    }
    suite
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_and_is_deterministic() {
        let opts = VerifyOptions { seed: 7, trials: 5 };
        let a = run_all(opts).unwrap();
        assert!(a.passed(), "{}", a.render());
        assert_eq!(a.suites.len(), 5);
        assert!(a.render().ends_with("5 suites, 0 failures\n"));
        assert_eq!(a.render(), run_all(opts).unwrap().render());
    }

    #[test]
    fn zero_trials_is_rejected() {
        assert!(matches!(run_all(VerifyOptions { seed: 1, trials: 0 }), Err(Error::Parameter(_))));
    }

    #[test]
    fn failures_keep_the_first_counterexample() {
        let mut s = SuiteResult::new("x");
        s.check(true, || unreachable!());
        s.check(false, || "first".into());
        s.check(false, || "second".into());
        assert_eq!((s.cases, s.failures), (3, 2));
        assert_eq!(s.first_failure.as_deref(), Some("first"));
        let report = VerifyReport {
            options: VerifyOptions::default(),
            suites: vec![s],
        };
        assert!(report.render().contains("first counterexample: first"));
        assert!(report.render().ends_with("1 suites, 2 failures\n"));
    }

    #[test]
    fn naive_oracle_catches_a_perturbed_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::reuse(9, 4, 2, (3, 3)).unwrap();
        let x = Tensor::uniform(&[9, 4], 1.0, &mut rng);
        let mut p = AttentionParams::init(&cfg, &mut rng);
        let out = reuse_forward(&x, &p, &cfg, None).unwrap().0;
        assert!(out.max_abs_diff(&naive_reuse(&x, &p, &cfg)).unwrap() < 1e-12);
        p.dw_kernels[1].data_mut()[0] += 0.5;
        assert!(out.max_abs_diff(&naive_reuse(&x, &p, &cfg)).unwrap() > 1e-6);
    }
}
