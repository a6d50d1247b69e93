//! Network architecture: configuration, the feature-depth plan, and the
//! built network with parameters.
//!
//! The encoder is `input conv -> DB -> (TD -> DB)*`, joined to the decoder
//! by a linking-unit dense block at the coarsest scale; the decoder mirrors
//! the encoder with transition-up blocks and long-skip concatenations, and
//! ends in a 3x3 + 1x1 convolution head followed by channel softmax.
//!
//! Depth recurrences:
//! - dense block: `depth_out = depth_in + layers * growth_rate`
//! - transition down/up: `floor(theta * depth_in)`
//! - decoder block input: transition-up output + matching encoder skip depth

mod network;

pub use network::{Mode, Network, Param, TrainForward};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// 2 for images, 3 for volumes.
    pub spatial_rank: usize,
    /// Bottleneck-block counts per feature-extraction level.
    pub levels: Vec<usize>,
    /// Bottleneck-block count of the linking unit.
    pub lu_layers: usize,
    /// Channels added by each bottleneck block (k).
    pub growth_rate: usize,
    /// Transition-down compression factor, in (0, 1].
    pub theta_down: f64,
    /// Transition-up compression factor, in (0, 1].
    pub theta_up: f64,
    /// Output channels of the input convolution (f0).
    pub input_features: usize,
    /// Channels of the raw input (1 for grayscale volumes, 3 for RGB images).
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl NetworkConfig {
    /// Compact 3D variant: growth rate 8, both transitions 0.3.
    pub fn dvnet_3d_v1() -> Self {
        Self::dvnet_3d(8, 0.3, 0.3)
    }

    /// Mid 3D variant: growth rate 16, both transitions 0.3.
    pub fn dvnet_3d_v2() -> Self {
        Self::dvnet_3d(16, 0.3, 0.3)
    }

    /// Full 3D variant: growth rate 16, transitions 0.5 / 0.3.
    pub fn dvnet_3d_v3() -> Self {
        Self::dvnet_3d(16, 0.5, 0.3)
    }

    fn dvnet_3d(growth_rate: usize, theta_down: f64, theta_up: f64) -> Self {
        NetworkConfig {
            spatial_rank: 3,
            levels: vec![4, 6, 8, 10, 12],
            lu_layers: 16,
            growth_rate,
            theta_down,
            theta_up,
            input_features: 64,
            in_channels: 1,
            num_classes: 3,
            dropout_rate: 0.1,
        }
    }

    /// 2D counterpart of the full variant, RGB input.
    pub fn dvnet_2d_v3() -> Self {
        NetworkConfig {
            spatial_rank: 2,
            in_channels: 3,
            ..Self::dvnet_3d_v3()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "3d-v1" => Some(Self::dvnet_3d_v1()),
            "3d-v2" => Some(Self::dvnet_3d_v2()),
            "3d-v3" => Some(Self::dvnet_3d_v3()),
            "2d-v3" => Some(Self::dvnet_2d_v3()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.spatial_rank == 2 || self.spatial_rank == 3) {
            return err(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.levels.is_empty() {
            return err("levels must not be empty".to_string());
        }
        if self.levels.iter().any(|&l| l == 0) || self.lu_layers == 0 {
            return err("all bottleneck counts must be >= 1".to_string());
        }
        if self.growth_rate == 0 {
            return err("growth_rate must be >= 1".to_string());
        }
        for (name, t) in [("theta_down", self.theta_down), ("theta_up", self.theta_up)] {
            if !(t > 0.0 && t <= 1.0) {
                return err(format!("{name} must lie in (0, 1], got {t}"));
            }
        }
        if self.input_features == 0 || self.in_channels == 0 {
            return err("input_features and in_channels must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Input spatial extents must be divisible by this.
    pub fn scale_divisor(&self) -> usize {
        1usize << self.levels.len()
    }

    pub fn to_key_values(&self) -> String {
        let levels: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        format!(
            "spatial_rank={}\nlevels={}\nlu_layers={}\ngrowth_rate={}\ntheta_down={}\ntheta_up={}\ninput_features={}\nin_channels={}\nnum_classes={}\ndropout_rate={}\n",
            self.spatial_rank,
            levels.join(","),
            self.lu_layers,
            self.growth_rate,
            self.theta_down,
            self.theta_up,
            self.input_features,
            self.in_channels,
            self.num_classes,
            self.dropout_rate,
        )
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k).ok_or_else(|| Error::Config(format!("missing key '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("key '{k}' is not an integer")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Config(format!("key '{k}' is not a number")))
        };
        let levels: Result<Vec<usize>> = get("levels")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config("levels must be comma-separated integers".to_string()))
            })
            .collect();
        let cfg = NetworkConfig {
            spatial_rank: parse_usize("spatial_rank")?,
            levels: levels?,
            lu_layers: parse_usize("lu_layers")?,
            growth_rate: parse_usize("growth_rate")?,
            theta_down: parse_f64("theta_down")?,
            theta_up: parse_f64("theta_up")?,
            input_features: parse_usize("input_features")?,
            in_channels: map
                .get("in_channels")
                .map(|v| v.parse().map_err(|_| Error::Config("in_channels is not an integer".into())))
                .transpose()?
                .unwrap_or(1),
            num_classes: parse_usize("num_classes")?,
            dropout_rate: parse_f64("dropout_rate")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_key_values())?)
    }
}

/// One row of the feature-depth/dimension table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanRow {
    pub stage: String,
    pub depth: usize,
    /// Spatial scale divisor relative to the input (1, 2, 4, ...).
    pub divisor: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub rows: Vec<PlanRow>,
}

impl LayerPlan {
    pub fn depths(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.depth).collect()
    }

    pub fn divisors(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.divisor).collect()
    }

    /// Depths excluding the class-channel output row.
    pub fn feature_depths(&self) -> Vec<usize> {
        self.rows[..self.rows.len() - 1].iter().map(|r| r.depth).collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>7} {:>10}", "stage", "depth", "dimension");
        for r in &self.rows {
            let dim = if r.divisor == 1 { "X".to_string() } else { format!("X/{}", r.divisor) };
            let _ = writeln!(s, "{:<14} {:>7} {:>10}", r.stage, r.depth, dim);
        }
        s
    }
}

/// Apply the depth recurrences from input conv through output conv.
pub fn plan_architecture(config: &NetworkConfig) -> Result<LayerPlan> {
    config.validate()?;
    let k = config.growth_rate;
    let n = config.levels.len();
    let mut rows = Vec::with_capacity(2 * n + 3);
    let mut depth = config.input_features;
    rows.push(PlanRow { stage: "input-conv".into(), depth, divisor: 1 });

    // encoder
    let mut skips = Vec::with_capacity(n);
    let mut divisor = 1usize;
    for (i, &layers) in config.levels.iter().enumerate() {
        let stage = if i == 0 {
            depth += layers * k;
            format!("db({layers})")
        } else {
            divisor *= 2;
            depth = floor_scale(depth, config.theta_down) + layers * k;
            format!("td+db({layers})")
        };
        skips.push(depth);
        rows.push(PlanRow { stage, depth, divisor });
    }

    // linking unit
    divisor *= 2;
    depth = floor_scale(depth, config.theta_down) + config.lu_layers * k;
    rows.push(PlanRow { stage: format!("td+lu({})", config.lu_layers), depth, divisor });

    // decoder
    for (i, &layers) in config.levels.iter().enumerate().rev() {
        divisor /= 2;
        depth = floor_scale(depth, config.theta_up) + skips[i] + layers * k;
        rows.push(PlanRow { stage: format!("tu+db({layers})"), depth, divisor });
    }

    rows.push(PlanRow { stage: "output-conv".into(), depth: config.num_classes, divisor: 1 });
    Ok(LayerPlan { rows })
}

pub(crate) fn floor_scale(depth: usize, theta: f64) -> usize {
    (depth as f64 * theta).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_reproduces_v3_feature_table() {
        let plan = plan_architecture(&NetworkConfig::dvnet_3d_v3()).unwrap();
        assert_eq!(
            plan.feature_depths(),
            vec![64, 128, 160, 208, 264, 324, 418, 641, 616, 520, 412, 315]
        );
        assert_eq!(plan.divisors(), vec![1, 1, 2, 4, 8, 16, 32, 16, 8, 4, 2, 1, 1]);
    }

    #[test]
    fn plan_small_config_hand_recurrence() {
        // levels [2], lu 2, k=4, f0=8, thetas 0.5 -> encoder [16], LU 16 at X/2,
        // decoder [32]
        let cfg = NetworkConfig {
            spatial_rank: 3,
            levels: vec![2],
            lu_layers: 2,
            growth_rate: 4,
            theta_down: 0.5,
            theta_up: 0.5,
            input_features: 8,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.0,
        };
        let plan = plan_architecture(&cfg).unwrap();
        assert_eq!(plan.depths(), vec![8, 16, 16, 32, 2]);
        assert_eq!(plan.divisors(), vec![1, 1, 2, 1, 1]);
    }

    #[test]
    fn unit_transitions_preserve_depth() {
        // theta_D = theta_U = 1 keeps TD/TU depth equal to its input depth
        let cfg = NetworkConfig {
            theta_down: 1.0,
            theta_up: 1.0,
            ..NetworkConfig::dvnet_3d_v1()
        };
        let plan = plan_architecture(&cfg).unwrap();
        // td+db row depth = previous + L*k exactly when theta = 1
        let d = plan.depths();
        assert_eq!(d[2], d[1] + 6 * 8);
    }

    #[test]
    fn config_key_value_roundtrip() {
        let cfg = NetworkConfig::dvnet_3d_v2();
        let text = cfg.to_key_values();
        let back = NetworkConfig::from_key_values(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_bad_theta() {
        let cfg = NetworkConfig { theta_down: 0.0, ..NetworkConfig::dvnet_3d_v1() };
        assert!(cfg.validate().is_err());
        let cfg = NetworkConfig { theta_up: 1.5, ..NetworkConfig::dvnet_3d_v1() };
        assert!(cfg.validate().is_err());
    }
}
