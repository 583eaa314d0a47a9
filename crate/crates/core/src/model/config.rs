use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub fpn_channels: usize,
    /// Pyramid-pooling grid sizes, strictly increasing.
    pub ppm_bins: Vec<usize>,
    /// Label excluded from the loss and from metrics.
    pub ignore_index: u8,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            fpn_channels: 128,
            ppm_bins: vec![1, 2, 3, 6],
            ignore_index: 255,
        }
    }
}

/// Everything needed to build a segmentation model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FANetConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub mlp_ratio: usize,
    pub scm_enabled: bool,
    pub frm_high_freq: bool,
    pub frm_low_freq: bool,
    pub num_classes: usize,
    pub in_channels: usize,
    pub head: HeadConfig,
}

impl Default for FANetConfig {
    fn default() -> Self {
        FANetConfig {
            stage_channels: [32, 64, 128, 256],
            stage_depths: [1, 1, 2, 1],
            mlp_ratio: 4,
            scm_enabled: true,
            frm_high_freq: true,
            frm_low_freq: true,
            num_classes: 5,
            in_channels: 3,
            head: HeadConfig::default(),
        }
    }
}

/// The six token-mixer configurations compared in the ablation, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Scm,
    FrmHigh,
    FrmLow,
    FrmBoth,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Scm,
        Variant::FrmHigh,
        Variant::FrmLow,
        Variant::FrmBoth,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Scm => "scm",
            Variant::FrmHigh => "frm-high",
            Variant::FrmLow => "frm-low",
            Variant::FrmBoth => "frm-both",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// `(scm, frm_high, frm_low)`.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Scm => (true, false, false),
            Variant::FrmHigh => (false, true, false),
            Variant::FrmLow => (false, false, true),
            Variant::FrmBoth => (false, true, true),
            Variant::Full => (true, true, true),
        }
    }
}

impl FANetConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.scm_enabled, self.frm_high_freq, self.frm_low_freq) = v.toggles();
        self
    }

    pub fn frm_enabled(&self) -> bool {
        self.frm_high_freq || self.frm_low_freq
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} must be positive and even",
                    i + 1
                )));
            }
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("stage {} depth must be >= 1", i + 1)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if usize::from(self.head.ignore_index) < self.num_classes {
            return Err(Error::Config(format!(
                "ignore_index {} collides with a class id",
                self.head.ignore_index
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.head.fpn_channels == 0 {
            return Err(Error::Config("fpn_channels must be positive".into()));
        }
        if self.head.ppm_bins.is_empty()
            || self.head.ppm_bins[0] == 0
            || self.head.ppm_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "ppm_bins {:?} must be positive and strictly increasing",
                self.head.ppm_bins
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        FANetConfig::default().validate().unwrap();
    }

    #[test]
    fn odd_width_rejected() {
        let cfg = FANetConfig {
            stage_channels: [32, 63, 128, 256],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn bins_must_increase() {
        let mut cfg = FANetConfig::default();
        cfg.head.ppm_bins = vec![1, 3, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<FANetConfig>(r#"{"mlp_ration": 2}"#).unwrap_err();
        assert!(err.to_string().contains("mlp_ration"));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }
}
