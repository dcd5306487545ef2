use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::Value;

use reuse_attn::attention::Mechanism;
use reuse_attn::backbone::{count_flops, synthetic_images, weights, UniFormConfig, UniFormModel};
use reuse_attn::memory::{
    attention_flops, format_bytes, model_total_bytes, parse_devices, parse_presets, reduction_percent,
    roofline_time_bound, traffic, traffic_reuse, DeviceCatalog, PresetCatalog,
};
use reuse_attn::verify::{run_all, VerifyOptions};
use reuse_attn::{Error, Result};

use crate::report::{Cell, Format, Table};
use crate::MechanismArg;

pub struct Output {
    pub stdout: String,
    pub code: u8,
}

impl Output {
    fn ok(stdout: String) -> Self {
        Output { stdout, code: 0 }
    }
}

fn bytes_cell(bytes: u64) -> Cell {
    Cell::shown_as(format_bytes(bytes), Value::from(bytes))
}

fn load_presets(file: Option<&Path>) -> Result<PresetCatalog> {
    let mut catalog = PresetCatalog::builtin();
    if let Some(path) = file {
        catalog.extend(parse_presets(&std::fs::read_to_string(path)?)?);
    }
    Ok(catalog)
}

pub fn table2(format: Format, only: &[String], presets: Option<&Path>) -> Result<Output> {
    let catalog = load_presets(presets)?;
    let selected = if only.is_empty() {
        catalog.presets().iter().collect()
    } else {
        only.iter().map(|n| catalog.lookup(n)).collect::<Result<Vec<_>>>()?
    };
    let mut table = Table::new(vec!["model", "mha_bytes", "reuse_bytes", "reduction_percent"]);
    for p in selected {
        let mha = model_total_bytes(p, Mechanism::MultiHead)?;
        let reuse = model_total_bytes(p, Mechanism::Reuse)?;
        table.push(vec![
            Cell::text(&p.name),
            bytes_cell(mha),
            bytes_cell(reuse),
            Cell::float(reduction_percent(p.tokens, p.head_dim, p.heads)?, 2),
        ]);
    }
    Ok(Output::ok(table.render(format)))
}

pub struct SweepArgs {
    pub mechanisms: Vec<MechanismArg>,
    pub tokens: Vec<u64>,
    pub from: u64,
    pub to: u64,
    pub factor: u64,
    pub head_dim: u64,
    pub heads: u64,
    pub bytes: u64,
}

impl SweepArgs {
    fn token_counts(&self) -> Result<Vec<u64>> {
        let counts = if self.tokens.is_empty() {
            if self.factor < 2 {
                return Err(Error::Parameter("--factor must be at least 2".into()));
            }
            let mut v = Vec::new();
            let mut n = self.from;
            while n >= 1 && n <= self.to {
                v.push(n);
                n = n.saturating_mul(self.factor);
            }
            v
        } else {
            self.tokens.clone()
        };
        if counts.is_empty() {
            return Err(Error::Parameter(format!("empty token range {}..{}", self.from, self.to)));
        }
        if counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("token counts must be strictly ascending".into()));
        }
        Ok(counts)
    }

    pub fn run(&self, format: Format) -> Result<Output> {
        if self.bytes == 0 {
            return Err(Error::Parameter("--bytes must be positive".into()));
        }
        if self.mechanisms.is_empty() {
            return Err(Error::Parameter("no mechanisms selected".into()));
        }
        let mut table = Table::new(vec![
            "tokens",
            "mechanism",
            "loads",
            "stores",
            "total_bytes",
            "flops",
            "intensity",
        ]);
        for n in self.token_counts()? {
            for m in &self.mechanisms {
                let mech = m.mechanism();
                let t = traffic(mech, n, self.head_dim, self.heads)?;
                let bytes = t.total_bytes(self.bytes);
                let flops = attention_flops(n, self.head_dim, self.heads, mech)?;
                table.push(vec![
                    Cell::int(n),
                    Cell::text(mech.name()),
                    Cell::int(t.total_loads()),
                    Cell::int(t.total_stores()),
                    Cell::int(bytes),
                    Cell::int(flops),
                    Cell::float(flops as f64 / bytes as f64, 3),
                ]);
            }
        }
        Ok(Output::ok(table.render(format)))
    }
}

pub fn verify(seed: u64, trials: usize) -> Result<Output> {
    let report = run_all(VerifyOptions { seed, trials })?;
    Ok(Output {
        stdout: report.render(),
        code: if report.passed() { 0 } else { 1 },
    })
}

pub struct ForwardArgs {
    pub variant: String,
    pub resolution: usize,
    pub batch: usize,
    pub seed: u64,
    pub classes: usize,
    pub traffic: bool,
    pub save: Option<PathBuf>,
}

impl ForwardArgs {
    pub fn run(&self) -> Result<Output> {
        if self.batch == 0 {
            return Err(Error::Parameter("--batch must be at least 1".into()));
        }
        let cfg = UniFormConfig::variant(&self.variant)?
            .with_resolution(self.resolution)
            .with_num_classes(self.classes);
        cfg.validate()?;
        let model = UniFormModel::<f64>::build(&cfg, self.seed)?;
        let images = synthetic_images::<f64>(self.batch, self.resolution, self.seed.wrapping_add(1));

        let start = Instant::now();
        let (logits, probe) = if self.traffic {
            let (l, p) = model.forward_probed(&images)?;
            (l, Some(p))
        } else {
            (model.forward(&images)?, None)
        };
        eprintln!("wall time: {:.3} s", start.elapsed().as_secs_f64());

        let mut out = String::new();
        let grids = cfg.stage_grids(self.resolution)?;
        let _ = writeln!(out, "variant: {}", cfg.variant);
        let _ = writeln!(out, "resolution: {}", self.resolution);
        let grid_text: Vec<String> = grids
            .iter()
            .map(|g| format!("{}x{} ({} tokens)", g.0, g.1, g.0 * g.1))
            .collect();
        let _ = writeln!(out, "stage grids: {}", grid_text.join(", "));
        let _ = writeln!(out, "parameters: {}", model.count_params());
        let _ = writeln!(out, "macs: {}", count_flops(&model, self.resolution)?.total());
        let _ = writeln!(out, "logits: {}x{}", logits.shape()[0], logits.shape()[1]);
        let _ = writeln!(out, "finite: {}", logits.is_finite());

        if let Some(probe) = probe {
            let per_image = probe.blocks.len() / self.batch;
            let mut table = Table::new(vec![
                "stage",
                "blocks",
                "tokens",
                "head_dim",
                "heads",
                "observed_elements",
                "predicted_elements",
                "match",
            ]);
            for stage in 1..=3 {
                let blocks: Vec<_> = probe.blocks[..per_image].iter().filter(|b| b.stage == stage).collect();
                let first = blocks[0];
                let observed: u64 = blocks.iter().map(|b| b.traffic.total()).sum();
                let predicted = traffic_reuse(first.tokens as u64, first.head_dim as u64, first.heads as u64)?
                    .total_elements()
                    * blocks.len() as u64;
                table.push(vec![
                    Cell::int(stage as u64),
                    Cell::int(blocks.len() as u64),
                    Cell::int(first.tokens as u64),
                    Cell::int(first.head_dim as u64),
                    Cell::int(first.heads as u64),
                    Cell::int(observed),
                    Cell::int(predicted),
                    Cell::text(if observed == predicted { "yes" } else { "no" }),
                ]);
            }
            let _ = writeln!(out, "attention traffic per image (elements):");
            out.push_str(&table.render(Format::Markdown));
            let _ = writeln!(out, "max row-sum error: {:.3e}", probe.max_row_sum_error());
        }
        if let Some(path) = &self.save {
            weights::save(&model, path)?;
            let _ = writeln!(out, "saved: {}", path.display());
        }
        Ok(Output::ok(out))
    }
}

pub fn roofline(
    preset: &str,
    devices: &[String],
    mechanisms: &[MechanismArg],
    presets: Option<&Path>,
    devices_file: Option<&Path>,
    format: Format,
) -> Result<Output> {
    let catalog = load_presets(presets)?;
    let p = catalog.lookup(preset)?;
    let mut device_catalog = DeviceCatalog::builtin();
    if let Some(path) = devices_file {
        device_catalog.extend(parse_devices(&std::fs::read_to_string(path)?)?);
    }
    let selected = if devices.is_empty() {
        device_catalog.devices().iter().collect()
    } else {
        devices.iter().map(|d| device_catalog.lookup(d)).collect::<Result<Vec<_>>>()?
    };
    if mechanisms.is_empty() {
        return Err(Error::Parameter("no mechanisms selected".into()));
    }
    let mut table = Table::new(vec![
        "preset",
        "device",
        "mechanism",
        "bytes",
        "bandwidth_gb_s",
        "flops",
        "time_bound_s",
    ]);
    for device in selected {
        for m in mechanisms {
            let mech = m.mechanism();
            let bytes = model_total_bytes(p, mech)?;
            let flops = attention_flops(p.tokens, p.head_dim, p.heads, mech)? * p.layers;
            let time = roofline_time_bound(bytes as f64, flops as f64, device)?;
            table.push(vec![
                Cell::text(&p.name),
                Cell::text(&device.name),
                Cell::text(mech.name()),
                bytes_cell(bytes),
                Cell::float(device.bandwidth / 1e9, 2),
                Cell::int(flops),
                Cell::float(time, 6),
            ]);
        }
    }
    Ok(Output::ok(table.render(format)))
}
