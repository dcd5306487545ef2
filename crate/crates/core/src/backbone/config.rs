use crate::attention::kernel_schedule;
use crate::error::{Error, Result};

pub const VARIANTS: [&str; 4] = ["tiny", "small", "medium", "large"];

/// Shape of a three-stage UniForm network.
///
/// Stage widths, depths and head counts come from the published variants;
/// patch stride, FFN ratio and class count are free knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniFormConfig {
    pub variant: String,
    pub channels: [usize; 3],
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    /// Square input side in pixels.
    pub resolution: usize,
    /// Total downsampling of the patch embedding; a power of two, realised
    /// as `log2(stride)` overlapping stride-2 3x3 convolutions.
    pub patch_stride: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
}

impl UniFormConfig {
    fn variant_of(name: &str, channels: [usize; 3], depths: [usize; 3], heads: [usize; 3]) -> Self {
        UniFormConfig {
            variant: name.to_string(),
            channels,
            depths,
            heads,
            resolution: 224,
            patch_stride: 16,
            ffn_ratio: 2,
            num_classes: 1000,
        }
    }

    pub fn tiny() -> Self {
        Self::variant_of("tiny", [64, 128, 192], [1, 2, 2], [4, 4, 4])
    }

    pub fn small() -> Self {
        Self::variant_of("small", [128, 144, 192], [1, 2, 2], [4, 4, 4])
    }

    pub fn medium() -> Self {
        Self::variant_of("medium", [128, 240, 320], [1, 2, 3], [4, 3, 4])
    }

    pub fn large() -> Self {
        Self::variant_of("large", [192, 288, 384], [1, 2, 3], [3, 3, 4])
    }

    /// Looks up a variant by name (`tiny`, `small`, `medium`, `large`, with
    /// an optional `uniform-` prefix).
    pub fn variant(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let key = key.strip_prefix("uniform-").unwrap_or(&key);
        match key {
            "tiny" | "t" => Ok(Self::tiny()),
            "small" | "s" => Ok(Self::small()),
            "medium" | "m" => Ok(Self::medium()),
            "large" | "l" => Ok(Self::large()),
            _ => Err(Error::Lookup {
                kind: "variant",
                name: name.to_string(),
                available: VARIANTS.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..3 {
            let (c, h, l) = (self.channels[s], self.heads[s], self.depths[s]);
            if c == 0 || h == 0 || l == 0 {
                return Err(Error::Config(format!("stage {}: channels, heads and depth must be positive", s + 1)));
            }
            if c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {c} channels not divisible by {h} heads",
                    s + 1
                )));
            }
        }
        if self.patch_stride < 2 || !self.patch_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch stride must be a power of two >= 2, got {}",
                self.patch_stride
            )));
        }
        if !self.channels[0].is_multiple_of(self.patch_stride / 2) {
            return Err(Error::Config(format!(
                "stage 1 width {} not divisible by {}",
                self.channels[0],
                self.patch_stride / 2
            )));
        }
        if self.ffn_ratio == 0 || self.num_classes == 0 {
            return Err(Error::Config("ffn ratio and class count must be positive".into()));
        }
        self.check_resolution(self.resolution)
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        if resolution == 0 || !resolution.is_multiple_of(self.patch_stride) {
            return Err(Error::Config(format!(
                "resolution {resolution} is not a positive multiple of the patch stride {}",
                self.patch_stride
            )));
        }
        Ok(())
    }

    /// Number of stride-2 convolutions in the patch embedding.
    pub fn patch_steps(&self) -> usize {
        self.patch_stride.trailing_zeros() as usize
    }

    /// Output widths of the patch-embedding convolutions, ending at `C1`.
    pub fn patch_widths(&self) -> Vec<usize> {
        let steps = self.patch_steps();
        (0..steps).map(|i| self.channels[0] >> (steps - 1 - i)).collect()
    }

    /// Token grids of the three stages for a square input of `resolution`.
    pub fn stage_grids(&self, resolution: usize) -> Result<[(usize, usize); 3]> {
        self.check_resolution(resolution)?;
        let g1 = resolution / self.patch_stride;
        let g2 = g1.div_ceil(2);
        let g3 = g2.div_ceil(2);
        Ok([(g1, g1), (g2, g2), (g3, g3)])
    }

    /// Value-head kernel sizes of each stage.
    pub fn kernel_schedules(&self) -> Result<[Vec<usize>; 3]> {
        Ok([
            kernel_schedule(self.heads[0])?,
            kernel_schedule(self.heads[1])?,
            kernel_schedule(self.heads[2])?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_match_published_table() {
        let t = UniFormConfig::tiny();
        assert_eq!((t.channels, t.depths, t.heads), ([64, 128, 192], [1, 2, 2], [4, 4, 4]));
        let s = UniFormConfig::small();
        assert_eq!((s.channels, s.depths, s.heads), ([128, 144, 192], [1, 2, 2], [4, 4, 4]));
        let m = UniFormConfig::medium();
        assert_eq!((m.channels, m.depths, m.heads), ([128, 240, 320], [1, 2, 3], [4, 3, 4]));
        let l = UniFormConfig::large();
        assert_eq!((l.channels, l.depths, l.heads), ([192, 288, 384], [1, 2, 3], [3, 3, 4]));
        for v in VARIANTS {
            UniFormConfig::variant(v).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn grids_for_224_and_32() {
        let t = UniFormConfig::tiny();
        assert_eq!(t.stage_grids(224).unwrap(), [(14, 14), (7, 7), (4, 4)]);
        assert_eq!(t.stage_grids(32).unwrap(), [(2, 2), (1, 1), (1, 1)]);
        assert!(matches!(t.stage_grids(225), Err(Error::Config(_))));
        assert!(t.stage_grids(100).is_err());
    }

    #[test]
    fn large_kernel_schedules() {
        let s = UniFormConfig::large().kernel_schedules().unwrap();
        assert_eq!(s, [vec![3, 5, 7], vec![3, 5, 7], vec![3, 5, 7, 9]]);
    }

    #[test]
    fn patch_widths_double_up_to_c1() {
        assert_eq!(UniFormConfig::tiny().patch_widths(), [8, 16, 32, 64]);
        let mut c = UniFormConfig::tiny();
        c.patch_stride = 4;
        assert_eq!(c.patch_widths(), [32, 64]);
    }

    #[test]
    fn rejects_indivisible_heads_and_unknown_variant() {
        let mut c = UniFormConfig::tiny();
        c.heads[1] = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(matches!(UniFormConfig::variant("huge"), Err(Error::Lookup { .. })));
        assert_eq!(UniFormConfig::variant("UniForm-T").unwrap(), UniFormConfig::tiny());
    }
}
