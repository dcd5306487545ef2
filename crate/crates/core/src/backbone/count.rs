use crate::error::Result;
use crate::scalar::Scalar;

use super::config::UniFormConfig;
use super::model::UniFormModel;

/// Multiply-accumulate counts of one forward pass, by layer family.
///
/// Normalisation, activations, softmax and pooling are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub patch_embed: u64,
    pub dwconv: u64,
    pub ffn: u64,
    /// Q/K projections and per-head value projections.
    pub attention_projection: u64,
    pub value_conv: u64,
    /// `Q K^T` plus `A V_i` over all heads.
    pub attention_matmul: u64,
    pub downsample: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.parts().iter().map(|p| p.1).sum()
    }

    pub fn parts(&self) -> [(&'static str, u64); 8] {
        [
            ("patch_embed", self.patch_embed),
            ("dwconv", self.dwconv),
            ("ffn", self.ffn),
            ("attention_projection", self.attention_projection),
            ("value_conv", self.value_conv),
            ("attention_matmul", self.attention_matmul),
            ("downsample", self.downsample),
            ("head", self.head),
        ]
    }
}

fn conv_macs(side: usize, cin: usize, cout: usize) -> (u64, usize) {
    let out = side.div_ceil(2);
    ((out * out * 9 * cin * cout) as u64, out)
}

/// Analytic MAC count of `cfg` on a square input of `resolution`.
pub fn count_config_flops(cfg: &UniFormConfig, resolution: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let grids = cfg.stage_grids(resolution)?;
    let schedules = cfg.kernel_schedules()?;
    let mut r = FlopReport::default();

    let (mut side, mut cin) = (resolution, 3);
    for w in cfg.patch_widths() {
        let (m, out) = conv_macs(side, cin, w);
        r.patch_embed += m;
        side = out;
        cin = w;
    }

    for s in 0..3 {
        let n = (grids[s].0 * grids[s].1) as u64;
        let c = cfg.channels[s] as u64;
        let d = c / cfg.heads[s] as u64;
        let hidden = c * cfg.ffn_ratio as u64;
        let kernel_area: u64 = schedules[s].iter().map(|&k| (k * k) as u64).sum();
        let depth = cfg.depths[s] as u64;
        r.dwconv += depth * 2 * n * 9 * c;
        r.ffn += depth * 2 * 2 * n * c * hidden;
        r.attention_projection += depth * (2 * n * c * c + n * c * d);
        r.value_conv += depth * n * d * kernel_area;
        r.attention_matmul += depth * 2 * n * n * c;
        if s < 2 {
            let (m, _) = conv_macs(grids[s].0, cfg.channels[s], cfg.channels[s + 1]);
            r.downsample += m;
        }
    }
    r.head = (cfg.channels[2] * cfg.num_classes) as u64;
    Ok(r)
}

/// Analytic MAC count of `model` run at `resolution`.
pub fn count_flops<T: Scalar>(model: &UniFormModel<T>, resolution: usize) -> Result<FlopReport> {
    count_config_flops(model.config(), resolution)
}
