//! Closed-form memory movement, FLOPs, arithmetic intensity and roofline
//! bounds for multi-head and Reuse Attention.
//!
//! Per layer, in elements (`D = d * h`):
//!
//! | phase       | multi-head loads | multi-head stores | reuse loads    | reuse stores |
//! |-------------|------------------|-------------------|----------------|--------------|
//! | `S = QK^T`  | `2 N d h`        | `N^2 h`           | `2 N D`        | `N^2`        |
//! | `P = sm(S)` | `N^2 h`          | `N^2 h`           | `N^2`          | `N^2`        |
//! | `O = PV`    | `(N^2 + N d) h`  | `N d h`           | `N^2 + N d h`  | `N d h`      |

mod catalog;
mod search;

pub use catalog::{
    parse_devices, parse_presets, DeviceCatalog, DeviceSpec, ModelPreset, PresetCatalog,
    ReferenceRow, REFERENCE_TOTALS, UNCATALOGED_REFERENCE,
};
pub use search::{search_layer_config, SearchHit, SearchSpace, SearchTarget};

use num_rational::Ratio;

use crate::attention::Mechanism;
use crate::error::{Error, Result};
use crate::traffic::{TrafficRecorder, PHASE_AGGREGATE, PHASE_NORMALIZE, PHASE_SCORE};

/// Softmax cost charged per attention-matrix element: max, subtract, exp,
/// sum, divide.
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTraffic {
    pub loads: u64,
    pub stores: u64,
}

impl PhaseTraffic {
    pub fn total(&self) -> u64 {
        self.loads + self.stores
    }
}

/// Per-phase loads and stores of one attention layer, in elements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficBreakdown {
    pub score: PhaseTraffic,
    pub normalize: PhaseTraffic,
    pub aggregate: PhaseTraffic,
}

impl TrafficBreakdown {
    pub fn phases(&self) -> [(&'static str, PhaseTraffic); 3] {
        [
            (PHASE_SCORE, self.score),
            (PHASE_NORMALIZE, self.normalize),
            (PHASE_AGGREGATE, self.aggregate),
        ]
    }

    pub fn total_loads(&self) -> u64 {
        self.score.loads + self.normalize.loads + self.aggregate.loads
    }

    pub fn total_stores(&self) -> u64 {
        self.score.stores + self.normalize.stores + self.aggregate.stores
    }

    pub fn total_elements(&self) -> u64 {
        self.total_loads() + self.total_stores()
    }

    pub fn total_bytes(&self, bytes_per_element: u64) -> u64 {
        self.total_elements() * bytes_per_element
    }

    /// Phase-wise sum of two breakdowns.
    pub fn plus(&self, other: &TrafficBreakdown) -> TrafficBreakdown {
        let add = |a: PhaseTraffic, b: PhaseTraffic| PhaseTraffic {
            loads: a.loads + b.loads,
            stores: a.stores + b.stores,
        };
        TrafficBreakdown {
            score: add(self.score, other.score),
            normalize: add(self.normalize, other.normalize),
            aggregate: add(self.aggregate, other.aggregate),
        }
    }

    /// Scales every count by `k` (e.g. a layer count).
    pub fn times(&self, k: u64) -> TrafficBreakdown {
        let mul = |p: PhaseTraffic| PhaseTraffic {
            loads: p.loads * k,
            stores: p.stores * k,
        };
        TrafficBreakdown {
            score: mul(self.score),
            normalize: mul(self.normalize),
            aggregate: mul(self.aggregate),
        }
    }

    /// The three attention phases as seen by an instrumented forward pass.
    pub fn from_recorder(rec: &TrafficRecorder) -> TrafficBreakdown {
        let phase = |p: &str| PhaseTraffic {
            loads: rec.loads(p),
            stores: rec.stores(p),
        };
        TrafficBreakdown {
            score: phase(PHASE_SCORE),
            normalize: phase(PHASE_NORMALIZE),
            aggregate: phase(PHASE_AGGREGATE),
        }
    }
}

fn check_positive(vals: &[(&str, u64)]) -> Result<()> {
    match vals.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::Parameter(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

/// Multi-head attention traffic for one layer; total `4 h (N^2 + N d)`.
pub fn traffic_mha(n: u64, d: u64, h: u64) -> Result<TrafficBreakdown> {
    check_positive(&[("N", n), ("d", d), ("h", h)])?;
    Ok(TrafficBreakdown {
        score: PhaseTraffic {
            loads: 2 * n * d * h,
            stores: n * n * h,
        },
        normalize: PhaseTraffic {
            loads: n * n * h,
            stores: n * n * h,
        },
        aggregate: PhaseTraffic {
            loads: (n * n + n * d) * h,
            stores: n * d * h,
        },
    })
}

/// Reuse Attention traffic for one layer; total `4 (N^2 + N d h)`.
pub fn traffic_reuse(n: u64, d: u64, h: u64) -> Result<TrafficBreakdown> {
    check_positive(&[("N", n), ("d", d), ("h", h)])?;
    let dim = d * h;
    Ok(TrafficBreakdown {
        score: PhaseTraffic {
            loads: 2 * n * dim,
            stores: n * n,
        },
        normalize: PhaseTraffic {
            loads: n * n,
            stores: n * n,
        },
        aggregate: PhaseTraffic {
            loads: n * n + n * dim,
            stores: n * dim,
        },
    })
}

pub fn traffic(mechanism: Mechanism, n: u64, d: u64, h: u64) -> Result<TrafficBreakdown> {
    match mechanism {
        Mechanism::MultiHead => traffic_mha(n, d, h),
        Mechanism::Reuse => traffic_reuse(n, d, h),
        other => Err(Error::Parameter(format!(
            "no traffic model for mechanism {}",
            other.name()
        ))),
    }
}

/// Exact fractional saving `1 - (N + d h) / (h (N + d))`.
pub fn reduction_fraction(n: u64, d: u64, h: u64) -> Result<Ratio<u128>> {
    check_positive(&[("N", n), ("d", d), ("h", h)])?;
    let (n, d, h) = (n as u128, d as u128, h as u128);
    Ok(Ratio::from_integer(1) - Ratio::new(n + d * h, h * (n + d)))
}

/// Percentage of per-layer traffic saved by Reuse Attention.
pub fn reduction_percent(n: u64, d: u64, h: u64) -> Result<f64> {
    let r = reduction_fraction(n, d, h)?;
    Ok(100.0 * (*r.numer() as f64) / (*r.denom() as f64))
}

/// Whole-model traffic in bytes: per-layer total x layers x bytes/element.
pub fn model_total_bytes(preset: &ModelPreset, mechanism: Mechanism) -> Result<u64> {
    preset.validate()?;
    let per_layer = traffic(mechanism, preset.tokens, preset.head_dim, preset.heads)?;
    Ok(per_layer.total_elements() * preset.layers * preset.bytes_per_element)
}

/// Attention FLOPs for one layer: `2 N^2 D` for scores, `2 N^2 D` for
/// aggregation, plus softmax at five operations per element of every
/// attention matrix (`h` of them for multi-head, one for reuse).
pub fn attention_flops(n: u64, d: u64, h: u64, mechanism: Mechanism) -> Result<u64> {
    check_positive(&[("N", n), ("d", d), ("h", h)])?;
    let dim = d * h;
    let matrices = match mechanism {
        Mechanism::MultiHead => h,
        Mechanism::Reuse => 1,
        other => {
            return Err(Error::Parameter(format!(
                "no FLOP model for mechanism {}",
                other.name()
            )))
        }
    };
    Ok(4 * n * n * dim + SOFTMAX_FLOPS_PER_ELEMENT * n * n * matrices)
}

/// FLOPs per byte moved.
pub fn arithmetic_intensity(
    n: u64,
    d: u64,
    h: u64,
    mechanism: Mechanism,
    bytes_per_element: u64,
) -> Result<f64> {
    check_positive(&[("bytes_per_element", bytes_per_element)])?;
    let flops = attention_flops(n, d, h, mechanism)?;
    let bytes = traffic(mechanism, n, d, h)?.total_bytes(bytes_per_element);
    Ok(flops as f64 / bytes as f64)
}

/// Roofline lower bound on execution time in seconds:
/// `max(bytes / bandwidth, flops / peak)`, memory term only when the device
/// has no peak compute figure.
pub fn roofline_time_bound(bytes: f64, flops: f64, device: &DeviceSpec) -> Result<f64> {
    device.validate()?;
    if !(bytes >= 0.0 && flops >= 0.0) {
        return Err(Error::Parameter("bytes and flops must be non-negative".into()));
    }
    let memory = bytes / device.bandwidth;
    Ok(match device.peak_flops {
        Some(peak) => memory.max(flops / peak),
        None => memory,
    })
}

/// Decimal display unit for a byte count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteUnit {
    B,
    KB,
    MB,
    GB,
    TB,
}

impl ByteUnit {
    pub fn for_bytes(bytes: f64) -> ByteUnit {
        match bytes {
            b if b >= 1e12 => ByteUnit::TB,
            b if b >= 1e9 => ByteUnit::GB,
            b if b >= 1e6 => ByteUnit::MB,
            b if b >= 1e3 => ByteUnit::KB,
            _ => ByteUnit::B,
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            ByteUnit::B => 1.0,
            ByteUnit::KB => 1e3,
            ByteUnit::MB => 1e6,
            ByteUnit::GB => 1e9,
            ByteUnit::TB => 1e12,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            ByteUnit::B => "B",
            ByteUnit::KB => "KB",
            ByteUnit::MB => "MB",
            ByteUnit::GB => "GB",
            ByteUnit::TB => "TB",
        }
    }

    pub fn parse(s: &str) -> Option<ByteUnit> {
        Some(match s {
            "B" => ByteUnit::B,
            "KB" => ByteUnit::KB,
            "MB" => ByteUnit::MB,
            "GB" => ByteUnit::GB,
            "TB" => ByteUnit::TB,
            _ => return None,
        })
    }
}

/// Byte count scaled to its decimal display unit.
pub fn display_bytes(bytes: u64) -> (f64, ByteUnit) {
    let unit = ByteUnit::for_bytes(bytes as f64);
    (bytes as f64 / unit.factor(), unit)
}

/// `"141.73 GB"` style rendering, two decimals.
pub fn format_bytes(bytes: u64) -> String {
    let (v, unit) = display_bytes(bytes);
    format!("{v:.2} {}", unit.symbol())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mha_table_values() {
        let t = traffic_mha(512, 64, 16).unwrap();
        assert_eq!(t.total_elements(), 18_874_368);
        assert_eq!(t.score.loads, 1_048_576);
        assert_eq!(t.score.stores, 4_194_304);
        let one = traffic_mha(1, 1, 1).unwrap();
        assert_eq!((one.score.loads, one.score.stores), (2, 1));
        assert_eq!((one.normalize.loads, one.normalize.stores), (1, 1));
        assert_eq!((one.aggregate.loads, one.aggregate.stores), (2, 1));
    }

    #[test]
    fn reuse_table_values() {
        assert_eq!(traffic_reuse(512, 64, 16).unwrap().total_elements(), 3_145_728);
        assert_eq!(traffic_reuse(4096, 128, 32).unwrap().total_elements(), 134_217_728);
        assert_eq!(traffic_reuse(1, 1, 1).unwrap(), traffic_mha(1, 1, 1).unwrap());
        for (n, d) in [(7, 3), (64, 64), (197, 64)] {
            let m = traffic_mha(n, d, 1).unwrap();
            assert_eq!(m, traffic_reuse(n, d, 1).unwrap());
            assert_eq!(m.total_elements(), 4 * (n * n + n * d));
        }
    }

    #[test]
    fn zero_inputs_rejected() {
        assert!(matches!(traffic_mha(0, 1, 1), Err(Error::Parameter(_))));
        assert!(matches!(traffic_reuse(1, 0, 1), Err(Error::Parameter(_))));
        assert!(matches!(reduction_percent(1, 1, 0), Err(Error::Parameter(_))));
        assert!(matches!(
            traffic(Mechanism::MultiQuery, 1, 1, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(format!("{:.2}", reduction_percent(512, 64, 16).unwrap()), "83.33");
        assert_eq!(format!("{:.2}", reduction_percent(4096, 128, 32).unwrap()), "93.94");
        assert_eq!(reduction_percent(300, 17, 1).unwrap(), 0.0);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(attention_flops(2, 1, 1, Mechanism::MultiHead).unwrap(), 36);
        assert_eq!(attention_flops(2, 1, 1, Mechanism::Reuse).unwrap(), 36);
        let m = attention_flops(64, 16, 4, Mechanism::MultiHead).unwrap() - 5 * 64 * 64 * 4;
        let r = attention_flops(64, 16, 4, Mechanism::Reuse).unwrap() - 5 * 64 * 64;
        assert_eq!(m, r);
        let m2 = attention_flops(128, 16, 4, Mechanism::MultiHead).unwrap() - 5 * 128 * 128 * 4;
        assert_eq!(m2, 4 * m);
    }

    #[test]
    fn intensity_golden_values() {
        // flops 4*512^2*1024 + 5*512^2*16 = 1_094_713_344 over 37_748_736 bytes
        let mha = arithmetic_intensity(512, 64, 16, Mechanism::MultiHead, 2).unwrap();
        assert_eq!(mha, 29.0);
        // 1_075_052_544 flops over 6_291_456 bytes
        let reuse = arithmetic_intensity(512, 64, 16, Mechanism::Reuse, 2).unwrap();
        assert_eq!(reuse, 170.875);
        assert_eq!(
            arithmetic_intensity(100, 8, 1, Mechanism::MultiHead, 2).unwrap(),
            arithmetic_intensity(100, 8, 1, Mechanism::Reuse, 2).unwrap()
        );
    }

    #[test]
    fn reuse_intensity_dominates_over_sweep() {
        for h in [2u64, 4, 8, 16] {
            for d in [32u64, 64, 128] {
                let mut n = 64;
                while n <= 4096 {
                    let m = arithmetic_intensity(n, d, h, Mechanism::MultiHead, 2).unwrap();
                    let r = arithmetic_intensity(n, d, h, Mechanism::Reuse, 2).unwrap();
                    assert!(r >= m, "N={n} d={d} h={h}: {r} < {m}");
                    n *= 2;
                }
            }
        }
    }

    #[test]
    fn roofline_examples() {
        let rpi = DeviceSpec::new("RPi3B", 17e9, None).unwrap();
        let h100 = DeviceSpec::new("H100", 3350e9, None).unwrap();
        let t = roofline_time_bound(141.73e9, 0.0, &rpi).unwrap();
        assert!((t - 8.337).abs() < 1e-3);
        let t = roofline_time_bound(141.73e9, 0.0, &h100).unwrap();
        assert!((t - 0.0423).abs() < 1e-4);
        assert_eq!(roofline_time_bound(0.0, 0.0, &h100).unwrap(), 0.0);
        let fast = DeviceSpec::new("x", 1e9, Some(1e9)).unwrap();
        assert_eq!(roofline_time_bound(1e9, 5e9, &fast).unwrap(), 5.0);
        assert!(roofline_time_bound(-1.0, 0.0, &fast).is_err());
    }

    #[test]
    fn byte_formatting() {
        assert_eq!(format_bytes(141_733_920_768), "141.73 GB");
        assert_eq!(format_bytes(226_492_416), "226.49 MB");
        assert_eq!(format_bytes(4_353_888), "4.35 MB");
        assert_eq!(format_bytes(0), "0.00 B");
    }

    #[test]
    fn layerless_model_moves_nothing() {
        let p = ModelPreset {
            layers: 0,
            ..ModelPreset::new("empty", 1, 8, 8, 2, 2)
        };
        assert_eq!(model_total_bytes(&p, Mechanism::MultiHead).unwrap(), 0);
    }
}
