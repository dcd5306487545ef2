//! Built-in model and device catalogs plus a plain-text record format for
//! extending them.
//!
//! One record per line, `#` starts a comment. Fields are either `key=value`
//! pairs separated by whitespace or commas, or positional values separated by
//! commas:
//!
//! ```text
//! # model presets: name, layers, N, d, h, bytes
//! name=BERT-Large layers=24 tokens=512 head_dim=64 heads=16 bytes=2
//! MyModel, 12, 1024, 64, 12, 2
//!
//! # devices: name, bandwidth in GB/s, optional peak TFLOP/s
//! name=H100 bandwidth_gbps=3350
//! Laptop, 51.2, 2.5
//! ```

use std::collections::HashMap;

use super::ByteUnit;
use crate::error::{Error, Result};

/// Full-model attention configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPreset {
    pub name: String,
    pub layers: u64,
    pub tokens: u64,
    pub head_dim: u64,
    pub heads: u64,
    pub bytes_per_element: u64,
}

impl ModelPreset {
    pub fn new(
        name: &str,
        layers: u64,
        tokens: u64,
        head_dim: u64,
        heads: u64,
        bytes_per_element: u64,
    ) -> Self {
        ModelPreset {
            name: name.to_string(),
            layers,
            tokens,
            head_dim,
            heads,
            bytes_per_element,
        }
    }

    pub fn dim(&self) -> u64 {
        self.head_dim * self.heads
    }

    /// A zero layer count is allowed (the model then moves nothing).
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("tokens", self.tokens),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("bytes", self.bytes_per_element),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("preset {}: {what} must be positive", self.name)));
            }
        }
        Ok(())
    }
}

/// Hardware target for roofline bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub name: String,
    /// bytes per second
    pub bandwidth: f64,
    /// FLOP per second
    pub peak_flops: Option<f64>,
}

impl DeviceSpec {
    pub fn new(name: &str, bandwidth: f64, peak_flops: Option<f64>) -> Result<Self> {
        let d = DeviceSpec {
            name: name.to_string(),
            bandwidth,
            peak_flops,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Parameter(format!(
                "device {}: bandwidth must be positive",
                self.name
            )));
        }
        if let Some(p) = self.peak_flops {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Parameter(format!(
                    "device {}: peak compute must be positive",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Published per-model totals the built-in catalog reproduces: multi-head
/// and reuse traffic as displayed (value, unit) and the reduction in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub mha: (f64, ByteUnit),
    pub reuse: (f64, ByteUnit),
    pub reduction: f64,
}

pub const REFERENCE_TOTALS: [ReferenceRow; 8] = [
    ReferenceRow { name: "Llama2-7B", mha: (141.73, ByteUnit::GB), reuse: (8.59, ByteUnit::GB), reduction: 93.94 },
    ReferenceRow { name: "GPT-3", mha: (328.56, ByteUnit::GB), reuse: (22.55, ByteUnit::GB), reduction: 93.14 },
    ReferenceRow { name: "ALBERT-xxlarge", mha: (1.81, ByteUnit::GB), reuse: (226.49, ByteUnit::MB), reduction: 87.50 },
    ReferenceRow { name: "BERT-Large", mha: (905.97, ByteUnit::MB), reuse: (150.99, ByteUnit::MB), reduction: 83.33 },
    ReferenceRow { name: "Transformer-XL", mha: (679.48, ByteUnit::MB), reuse: (113.25, ByteUnit::MB), reduction: 83.33 },
    ReferenceRow { name: "T5-Large", mha: (905.97, ByteUnit::MB), reuse: (150.99, ByteUnit::MB), reduction: 83.33 },
    ReferenceRow { name: "CLIP-Text", mha: (8.34, ByteUnit::MB), reuse: (4.35, ByteUnit::MB), reduction: 47.78 },
    ReferenceRow { name: "ViT-Base", mha: (59.23, ByteUnit::MB), reuse: (18.25, ByteUnit::MB), reduction: 69.19 },
];

/// Published row whose model configuration is not public; it is kept out
/// of the catalog and only examined with [`super::search_layer_config`].
pub const UNCATALOGED_REFERENCE: ReferenceRow = ReferenceRow {
    name: "Stable-Diffusion",
    mha: (16.68, ByteUnit::MB),
    reuse: (8.33, ByteUnit::MB),
    reduction: 50.06,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresetCatalog {
    presets: Vec<ModelPreset>,
}

impl PresetCatalog {
    /// Public configurations at two bytes per element. T5-Large counts its
    /// 24 attention layers and Transformer-XL 18.
    pub fn builtin() -> Self {
        let p = ModelPreset::new;
        PresetCatalog {
            presets: vec![
                p("Llama2-7B", 32, 4096, 128, 32, 2),
                p("GPT-3", 96, 2048, 128, 96, 2),
                p("ALBERT-xxlarge", 12, 512, 64, 64, 2),
                p("BERT-Large", 24, 512, 64, 16, 2),
                p("Transformer-XL", 18, 512, 64, 16, 2),
                p("T5-Large", 24, 512, 64, 16, 2),
                p("CLIP-Text", 12, 77, 64, 8, 2),
                p("ViT-Base", 12, 197, 64, 12, 2),
            ],
        }
    }

    pub fn presets(&self) -> &[ModelPreset] {
        &self.presets
    }

    pub fn names(&self) -> Vec<String> {
        self.presets.iter().map(|p| p.name.clone()).collect()
    }

    /// Case-insensitive lookup by name.
    pub fn lookup(&self, name: &str) -> Result<&ModelPreset> {
        self.presets
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Lookup {
                kind: "model preset",
                name: name.to_string(),
                available: self.names(),
            })
    }

    /// Adds presets, replacing existing entries with the same name.
    pub fn extend(&mut self, more: Vec<ModelPreset>) {
        for p in more {
            match self.presets.iter_mut().find(|q| q.name.eq_ignore_ascii_case(&p.name)) {
                Some(slot) => *slot = p,
                None => self.presets.push(p),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCatalog {
    devices: Vec<DeviceSpec>,
}

impl DeviceCatalog {
    /// Memory bandwidths only; no peak compute figures are shipped.
    pub fn builtin() -> Self {
        let d = |name: &str, gbps: f64| DeviceSpec {
            name: name.to_string(),
            bandwidth: gbps * 1e9,
            peak_flops: None,
        };
        DeviceCatalog {
            devices: vec![d("H100", 3350.0), d("RPi3B", 17.0), d("Jetson-Nano", 25.6)],
        }
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.devices
    }

    pub fn names(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.name.clone()).collect()
    }

    pub fn lookup(&self, name: &str) -> Result<&DeviceSpec> {
        self.devices
            .iter()
            .find(|d| d.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Lookup {
                kind: "device",
                name: name.to_string(),
                available: self.names(),
            })
    }

    pub fn extend(&mut self, more: Vec<DeviceSpec>) {
        for d in more {
            match self.devices.iter_mut().find(|e| e.name.eq_ignore_ascii_case(&d.name)) {
                Some(slot) => *slot = d,
                None => self.devices.push(d),
            }
        }
    }
}

/// Splits a record into named fields, mapping positional values onto
/// `order`.
fn record_fields<'a>(
    line: &'a str,
    order: &[&'static str],
    aliases: &[(&str, &'static str)],
    lineno: usize,
) -> Result<HashMap<&'static str, &'a str>> {
    let mut out = HashMap::new();
    if line.contains('=') {
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected key=value, got `{tok}`"),
            })?;
            let key = order
                .iter()
                .copied()
                .find(|o| *o == k)
                .or_else(|| aliases.iter().find(|(a, _)| *a == k).map(|(_, o)| *o))
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("unknown key `{k}`"),
                })?;
            out.insert(key, v);
        }
    } else {
        let vals: Vec<&str> = line.split(',').map(str::trim).collect();
        if vals.len() > order.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected at most {} fields, got {}", order.len(), vals.len()),
            });
        }
        for (k, v) in order.iter().zip(vals) {
            out.insert(*k, v);
        }
    }
    Ok(out)
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_num<N: std::str::FromStr>(
    fields: &HashMap<&str, &str>,
    key: &str,
    lineno: usize,
) -> Result<Option<N>> {
    fields
        .get(key)
        .map(|v| {
            v.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("`{key}` is not a valid number: `{v}`"),
            })
        })
        .transpose()
}

fn required<N>(v: Option<N>, key: &str, lineno: usize) -> Result<N> {
    v.ok_or_else(|| Error::Parse {
        line: lineno,
        msg: format!("missing `{key}`"),
    })
}

/// Parses model preset records (`name, layers, N, d, h[, bytes]`; bytes
/// defaults to 2).
pub fn parse_presets(text: &str) -> Result<Vec<ModelPreset>> {
    const ORDER: [&str; 6] = ["name", "layers", "tokens", "head_dim", "heads", "bytes"];
    const ALIASES: [(&str, &str); 3] = [("N", "tokens"), ("d", "head_dim"), ("h", "heads")];
    records(text)
        .map(|(lineno, line)| {
            let f = record_fields(line, &ORDER, &ALIASES, lineno)?;
            let name = required(f.get("name").copied(), "name", lineno)?;
            let preset = ModelPreset {
                name: name.to_string(),
                layers: required(parse_num(&f, "layers", lineno)?, "layers", lineno)?,
                tokens: required(parse_num(&f, "tokens", lineno)?, "tokens", lineno)?,
                head_dim: required(parse_num(&f, "head_dim", lineno)?, "head_dim", lineno)?,
                heads: required(parse_num(&f, "heads", lineno)?, "heads", lineno)?,
                bytes_per_element: parse_num(&f, "bytes", lineno)?.unwrap_or(2),
            };
            preset.validate().map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            Ok(preset)
        })
        .collect()
}

/// Parses device records (`name, bandwidth_gbps[, peak_tflops]`).
pub fn parse_devices(text: &str) -> Result<Vec<DeviceSpec>> {
    const ORDER: [&str; 3] = ["name", "bandwidth_gbps", "peak_tflops"];
    records(text)
        .map(|(lineno, line)| {
            let f = record_fields(line, &ORDER, &[], lineno)?;
            let name = required(f.get("name").copied(), "name", lineno)?;
            let gbps: f64 = required(parse_num(&f, "bandwidth_gbps", lineno)?, "bandwidth_gbps", lineno)?;
            let peak: Option<f64> = parse_num(&f, "peak_tflops", lineno)?;
            DeviceSpec::new(name, gbps * 1e9, peak.map(|p| p * 1e12)).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_known_and_unknown() {
        let cat = PresetCatalog::builtin();
        let bert = cat.lookup("BERT-Large").unwrap();
        assert_eq!((bert.layers, bert.tokens, bert.head_dim, bert.heads), (24, 512, 64, 16));
        let gpt = cat.lookup("gpt-3").unwrap();
        assert_eq!((gpt.layers, gpt.tokens, gpt.head_dim, gpt.heads), (96, 2048, 128, 96));
        match cat.lookup("nonexistent") {
            Err(Error::Lookup { available, .. }) => assert_eq!(available.len(), 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_both_record_styles() {
        let text = "# header\nname=Foo layers=2 N=16 d=8 h=4\n\nBar, 3, 32, 16, 2, 4  # trailing\n";
        let p = parse_presets(text).unwrap();
        assert_eq!(p[0], ModelPreset::new("Foo", 2, 16, 8, 4, 2));
        assert_eq!(p[1], ModelPreset::new("Bar", 3, 32, 16, 2, 4));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_presets("\nname=Foo layers=x tokens=1 head_dim=1 heads=1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_presets("name=Foo layers=1 tokens=0 head_dim=1 heads=1").is_err());
        assert!(parse_presets("name=Foo colour=red").is_err());
        assert!(parse_devices("Dev, 0").is_err());
    }

    #[test]
    fn devices_parse_and_override() {
        let mut cat = DeviceCatalog::builtin();
        cat.extend(parse_devices("name=H100 bandwidth_gbps=3000 peak_tflops=900\nEdge, 4.5").unwrap());
        let h = cat.lookup("h100").unwrap();
        assert_eq!(h.bandwidth, 3000e9);
        assert_eq!(h.peak_flops, Some(900e12));
        assert_eq!(cat.lookup("Edge").unwrap().bandwidth, 4.5e9);
        assert_eq!(cat.devices().len(), 4);
    }

    #[test]
    fn builtin_bandwidth_gap() {
        let cat = DeviceCatalog::builtin();
        let ratio = cat.lookup("H100").unwrap().bandwidth / cat.lookup("RPi3B").unwrap().bandwidth;
        assert!((ratio - 197.0).abs() < 0.5);
        assert_eq!(cat.lookup("Jetson-Nano").unwrap().bandwidth, 25.6e9);
    }
}
