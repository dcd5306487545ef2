//! Acceptance criteria, one line each. Runs as a plain binary so the
//! report is printed whether or not output capture is on.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use reuse_attn::attention::Mechanism;
use reuse_attn::backbone::{synthetic_images, UniFormConfig, UniFormModel, VARIANTS};
use reuse_attn::memory::{
    model_total_bytes, roofline_time_bound, search_layer_config, traffic_reuse, DeviceCatalog, PresetCatalog,
    SearchSpace, SearchTarget, UNCATALOGED_REFERENCE,
};
use reuse_attn::verify::{self, SuiteResult};

const SEED: u64 = 42;

struct Outcome {
    ok: bool,
    detail: String,
}

fn from_suite(s: SuiteResult) -> Outcome {
    Outcome {
        ok: s.passed(),
        detail: match s.first_failure {
            Some(f) => format!("{}/{} cases failed; first: {f}", s.failures, s.cases),
            None => format!("{} cases", s.cases),
        },
    }
}

fn table2() -> Outcome {
    let out = from_suite(verify::table2());
    let target = SearchTarget {
        mha: UNCATALOGED_REFERENCE.mha,
        reuse: UNCATALOGED_REFERENCE.reuse,
        reduction: UNCATALOGED_REFERENCE.reduction,
    };
    println!("  {} excluded from the catalog; configuration search:", UNCATALOGED_REFERENCE.name);
    match search_layer_config(&target, &SearchSpace::default(), 3) {
        Ok(hits) => {
            for h in hits {
                println!(
                    "    L={} N={} d={} h={}: {} B / {} B / {:.3}%{}",
                    h.preset.layers,
                    h.preset.tokens,
                    h.preset.head_dim,
                    h.preset.heads,
                    h.mha_bytes,
                    h.reuse_bytes,
                    h.reduction,
                    if h.reproduces { " (matches every displayed value)" } else { "" }
                );
            }
        }
        Err(e) => println!("    search failed: {e}"),
    }
    out
}

fn backbone() -> Outcome {
    let expected = [
        ("tiny", [64, 128, 192], [1, 2, 2], [4, 4, 4]),
        ("small", [128, 144, 192], [1, 2, 2], [4, 4, 4]),
        ("medium", [128, 240, 320], [1, 2, 3], [4, 3, 4]),
        ("large", [192, 288, 384], [1, 2, 3], [3, 3, 4]),
    ];
    let mut notes = Vec::new();
    let mut worst_row = 0.0f64;
    for (name, (want, channels, depths, heads)) in VARIANTS.iter().zip(expected) {
        let fail = |msg: String| Outcome { ok: false, detail: format!("{name}: {msg}") };
        assert_eq!(*name, want);
        let cfg = match UniFormConfig::variant(name) {
            Ok(c) => c,
            Err(e) => return fail(e.to_string()),
        };
        if (cfg.channels, cfg.depths, cfg.heads) != (channels, depths, heads) {
            return fail(format!("config {:?}/{:?}/{:?}", cfg.channels, cfg.depths, cfg.heads));
        }
        let model = match UniFormModel::<f64>::build(&cfg, SEED) {
            Ok(m) => m,
            Err(e) => return fail(e.to_string()),
        };
        let (logits, probe) = match model.forward_probed(&synthetic_images(1, 224, SEED)) {
            Ok(v) => v,
            Err(e) => return fail(e.to_string()),
        };
        if logits.shape() != [1, 1000] || !logits.is_finite() {
            return fail(format!("logits {:?}", logits.shape()));
        }
        for stage in 1..=3 {
            let blocks: Vec<_> = probe.blocks.iter().filter(|b| b.stage == stage).collect();
            let observed: u64 = blocks.iter().map(|b| b.traffic.total()).sum();
            let b = blocks[0];
            let predicted = traffic_reuse(b.tokens as u64, b.head_dim as u64, b.heads as u64)
                .map(|t| t.total_elements() * blocks.len() as u64)
                .unwrap_or(0);
            if observed != predicted {
                return fail(format!("stage {stage} traffic {observed} != {predicted}"));
            }
        }
        if probe.max_row_sum_error() > 1e-12 || probe.min_entry() < 0.0 {
            return fail(format!("row-sum error {:e}", probe.max_row_sum_error()));
        }
        worst_row = worst_row.max(probe.max_row_sum_error());
        notes.push(format!("{name} {} params", model.count_params()));
    }
    Outcome {
        ok: true,
        detail: format!("{}; max row-sum error {worst_row:.1e}", notes.join(", ")),
    }
}

fn roofline() -> Outcome {
    let preset = PresetCatalog::builtin().lookup("Llama2-7B").unwrap().clone();
    let devices = DeviceCatalog::builtin();
    let bytes = model_total_bytes(&preset, Mechanism::MultiHead).unwrap() as f64;
    let bound = |name: &str| roofline_time_bound(bytes, 0.0, devices.lookup(name).unwrap()).unwrap();
    let (h100, rpi) = (bound("H100"), bound("RPi3B"));
    let ratio = rpi / h100;
    Outcome {
        ok: (196.0..=198.0).contains(&ratio),
        detail: format!("RPi3B {rpi:.3} s / H100 {h100:.4} s = {ratio:.2}"),
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, Duration, Box<dyn Fn() -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        ("table2-reproduction", Duration::from_secs(1), Box::new(table2)),
        (
            "table1-instrumentation",
            Duration::from_secs(30),
            Box::new(|| from_suite(verify::traffic_equivalence(SEED, 60))),
        ),
        (
            "gradient-correctness",
            Duration::from_secs(60),
            Box::new(|| from_suite(verify::gradient_check(SEED, 20))),
        ),
        (
            "mechanism-equivalence",
            Duration::from_secs(60),
            Box::new(|| from_suite(verify::mechanism_equivalence(SEED, 30))),
        ),
        (
            "reduction-identity",
            Duration::from_secs(30),
            Box::new(|| from_suite(verify::reduction_identity(SEED, 1000))),
        ),
        ("backbone-invariants", Duration::from_secs(120), Box::new(backbone)),
        ("roofline-sanity", Duration::from_secs(1), Box::new(roofline)),
    ];

    let mut failed = 0;
    for (name, limit, run) in &criteria {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let ok = out.ok && took <= *limit;
        if !ok {
            failed += 1;
        }
        let timing = if took <= *limit { String::new() } else { format!(" [over {limit:?} limit]") };
        println!(
            "{} {name}: {} ({:.3} s){timing}",
            if ok { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
