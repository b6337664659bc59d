use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{EfconvMode, SplineGrid};

/// Spatial dims must be divisible by this (five halvings).
pub const SIZE_DIVISOR: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; 5],
    pub decoder_head_channels: usize,
    pub d_state: usize,
    pub spline: SplineGrid,
    pub cbam_reduction: usize,
    pub efconv_mode: EfconvMode,
    pub deep_supervision: bool,
    pub ds_weights: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full(3, 2)
    }
}

impl ModelConfig {
    pub fn full(in_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            in_channels,
            num_classes,
            stage_channels: [48, 96, 192, 384, 768],
            decoder_head_channels: 24,
            d_state: 16,
            spline: SplineGrid::default(),
            cbam_reduction: 16,
            efconv_mode: EfconvMode::Conv3x2,
            deep_supervision: true,
            ds_weights: [1.0, 0.5, 0.25, 0.125],
        }
    }

    /// Desk-scale preset: widths `[8, 16, 32, 64, 128]`, `d_state` 4, `r` 4.
    pub fn tiny(in_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32, 64, 128],
            d_state: 4,
            cbam_reduction: 4,
            ..Self::full(in_channels, num_classes)
        }
    }

    /// `"full"` or `"tiny"`.
    pub fn preset(name: &str, in_channels: usize, num_classes: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(in_channels, num_classes)),
            "tiny" => Ok(Self::tiny(in_channels, num_classes)),
            _ => Err(Error::InvalidArgument(format!("unknown preset {name:?} (full|tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad(format!(
                "need in_channels ≥ 1 and num_classes ≥ 2, got {} and {}",
                self.in_channels, self.num_classes
            ));
        }
        let sc = self.stage_channels;
        if sc[0] == 0 || sc.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("stage_channels must double at every stage, got {sc:?}"));
        }
        if self.decoder_head_channels == 0 || self.d_state == 0 {
            return bad("decoder_head_channels and d_state must be positive".into());
        }
        if self.cbam_reduction == 0 || sc[..3].iter().any(|c| c % self.cbam_reduction != 0) {
            return bad(format!(
                "cbam_reduction {} must divide the skip widths {:?}",
                self.cbam_reduction,
                &sc[..3]
            ));
        }
        if self.ds_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!("ds_weights must be finite and non-negative, got {:?}", self.ds_weights));
        }
        self.spline.validate()
    }

    /// Errors unless `h × w` is a valid input resolution.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(Error::shape(
                "medvkan",
                format!("input {h}x{w}: height and width must be positive multiples of {SIZE_DIVISOR}"),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full(3, 4).validate().unwrap();
        ModelConfig::tiny(1, 2).validate().unwrap();
        assert!(ModelConfig::preset("huge", 1, 2).is_err());
    }

    #[test]
    fn rejects_broken_configs() {
        let mut c = ModelConfig::tiny(1, 2);
        c.stage_channels[2] = 40;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(1, 2);
        c.cbam_reduction = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(1, 2);
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(1, 2);
        c.ds_weights[1] = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_size_must_divide_by_32() {
        let c = ModelConfig::tiny(1, 2);
        c.check_input_size(64, 96).unwrap();
        assert!(c.check_input_size(100, 64).is_err());
        assert!(c.check_input_size(64, 48).is_err());
    }

    #[test]
    fn json_keys_and_round_trip() {
        let c = ModelConfig::full(3, 5);
        let text = c.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "in_channels",
            "num_classes",
            "stage_channels",
            "decoder_head_channels",
            "d_state",
            "spline",
            "cbam_reduction",
            "efconv_mode",
            "deep_supervision",
            "ds_weights",
        ] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert_eq!(v["efconv_mode"], "conv3x2");
        assert_eq!(ModelConfig::from_json(&text).unwrap(), c);
        assert!(ModelConfig::from_json(r#"{"in_channels": 1}"#).is_err());
    }
}
