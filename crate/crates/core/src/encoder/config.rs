use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder scales.
pub const NUM_SCALES: usize = 4;

/// FL-slot variants (encoder scales 1–4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlVariant {
    /// `fR + fD + W-MSA(LN(fR + fD))`
    Full,
    /// `fR + fD`
    AddOnly,
    /// `W-MSA(LN(fR + fD))`
    WmsaOnly,
    /// `fR ⊙ fD`
    Mul,
}

/// FE-slot variants (scale 5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeVariant {
    Full,
    ConcatOnly,
    MulOnly,
    AddOnly,
    /// Each path keeps only its first attention; merged by the MLP.
    NoSwmsa,
    /// `concat(fR, fD)` without attention or MLP.
    PlainConcat,
}

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dims: [usize; NUM_SCALES],
    pub num_heads: [usize; NUM_SCALES],
    /// W-MSA/SW-MSA block pairs per scale.
    pub depths: [usize; NUM_SCALES],
    pub mlp_ratio: f64,
    /// Hidden width of the FE merge MLP relative to its 4C input.
    pub fe_mlp_ratio: f64,
    /// Output channels of the decoder blocks at scales 6..9.
    pub decoder_dims: [usize; NUM_SCALES],
    pub fl_variant: FlVariant,
    pub fe_variant: FeVariant,
    /// When false only the scale-5 head is built (no FL, no scales 6–9).
    pub multi_scale: bool,
    /// Per-nutrient multiplier applied to every head output.
    pub output_scale: [f64; 5],
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 4,
            window_size: 4,
            embed_dims: [16, 32, 64, 128],
            num_heads: [1, 2, 4, 4],
            depths: [1, 1, 1, 1],
            mlp_ratio: 4.0,
            fe_mlp_ratio: 1.0,
            decoder_dims: [128, 64, 32, 16],
            fl_variant: FlVariant::Full,
            fe_variant: FeVariant::Full,
            multi_scale: true,
            output_scale: [1.0; 5],
            init_seed: 0,
        }
    }
}

/// Window geometry of one token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl GridSpec {
    pub fn window_patches(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks: 16×16 input, patch 1,
    /// window 2, channels 2..16.
    pub fn tiny() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            patch_size: 1,
            window_size: 2,
            embed_dims: [2, 4, 8, 16],
            num_heads: [1, 1, 2, 2],
            depths: [1, 1, 1, 1],
            mlp_ratio: 1.0,
            fe_mlp_ratio: 0.5,
            decoder_dims: [4, 4, 2, 2],
            ..Self::default()
        }
    }

    /// Token grid `(height, width)` at encoder scale `s` (1-based).
    pub fn grid(&self, scale: usize) -> (usize, usize) {
        let f = self.patch_size << (scale - 1);
        (self.image_height / f, self.image_width / f)
    }

    /// Window and shift at scale `s`. Grids no larger than the window use a
    /// single window spanning the grid and no shift.
    pub fn grid_spec(&self, scale: usize) -> GridSpec {
        let (height, width) = self.grid(scale);
        let smallest = height.min(width);
        if smallest <= self.window_size {
            GridSpec {
                height,
                width,
                window: smallest,
                shift: 0,
            }
        } else {
            GridSpec {
                height,
                width,
                window: self.window_size,
                shift: self.window_size / 2,
            }
        }
    }

    /// Channel width of the fused scale-5 feature.
    pub fn fe_out_dim(&self) -> usize {
        self.fe_out_dim_for(self.fe_variant)
    }

    pub fn fe_out_dim_for(&self, variant: FeVariant) -> usize {
        let c4 = self.embed_dims[NUM_SCALES - 1];
        match variant {
            FeVariant::MulOnly | FeVariant::AddOnly => c4,
            _ => 2 * c4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.window_size == 0 {
            return bad("patch_size and window_size must be positive".into());
        }
        let step = self.patch_size << (NUM_SCALES - 1);
        if self.image_height % step != 0 || self.image_width % step != 0 || self.image_height == 0 || self.image_width == 0 {
            return bad(format!(
                "image {}x{} must be a positive multiple of patch_size*8 = {step}",
                self.image_height, self.image_width
            ));
        }
        for s in 1..NUM_SCALES {
            if self.embed_dims[s] != 2 * self.embed_dims[s - 1] {
                return bad(format!("embed_dims must double per scale, got {:?}", self.embed_dims));
            }
        }
        if self.embed_dims[0] == 0 {
            return bad("embed_dims must be positive".into());
        }
        for s in 0..NUM_SCALES {
            let (c, h) = (self.embed_dims[s], self.num_heads[s]);
            if h == 0 || c % h != 0 {
                return bad(format!("scale {} width {c} not divisible by {h} heads", s + 1));
            }
            let spec = self.grid_spec(s + 1);
            if spec.height % spec.window != 0 || spec.width % spec.window != 0 {
                return bad(format!(
                    "scale {} grid {}x{} not divisible by window {}",
                    s + 1,
                    spec.height,
                    spec.width,
                    spec.window
                ));
            }
            if self.decoder_dims[s] == 0 {
                return bad("decoder_dims must be positive".into());
            }
        }
        if !(self.mlp_ratio > 0.0) || !(self.fe_mlp_ratio > 0.0) {
            return bad("mlp ratios must be positive".into());
        }
        if self.output_scale.iter().any(|v| !v.is_finite()) {
            return bad("output_scale must be finite".into());
        }
        Ok(())
    }

    /// Names of top-level fields whose values differ, compared through the
    /// canonical JSON form.
    pub fn diff_fields(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return vec!["<root>".into()];
        };
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }

    /// Sorted-key JSON used in checkpoint headers.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids_and_windows() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let grids: Vec<_> = (1..=4).map(|s| c.grid(s)).collect();
        assert_eq!(grids, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(c.grid_spec(1).shift, 2);
        assert_eq!(c.grid_spec(3), GridSpec { height: 4, width: 4, window: 4, shift: 0 });
        assert_eq!(c.grid_spec(4).window, 2);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn validation_failures() {
        let mut c = ModelConfig::default();
        c.image_height = 60;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.embed_dims = [16, 32, 48, 96];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.num_heads = [3, 2, 4, 4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.image_height = 96;
        c.image_width = 96;
        c.window_size = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn diff_names_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.window_size = 2;
        b.multi_scale = false;
        assert_eq!(a.diff_fields(&b), vec!["multi_scale", "window_size"]);
        assert!(a.diff_fields(&a).is_empty());
    }

    #[test]
    fn canonical_json_has_sorted_keys() {
        let json = ModelConfig::default().canonical_json();
        let pos = |k: &str| json.find(k).unwrap();
        assert!(pos("\"decoder_dims\"") < pos("\"embed_dims\""));
        assert!(pos("\"embed_dims\"") < pos("\"window_size\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::default());
    }
}
