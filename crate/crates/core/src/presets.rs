//! Built-in DNN profiles and workload presets.
//!
//! Nominal job times come from single-instance throughput (`1 / min_jps`) and
//! are split over stages by fixed fractions. Widths are fractions of the GPU's
//! SM count: wide networks (UNet) saturate most of the device on their own,
//! narrow ones (InceptionV3) leave most of it idle, which is what makes
//! oversubscription and batching pay off differently per network.
//!
//! Stage splits:
//! * `resnet18` - stem + conv2_x, conv3_x, conv4_x, conv5_x + head.
//! * `unet` - two encoder halves, bottleneck + first decoder half, last
//!   decoder half + output head.
//! * `inceptionv3` - stem, inception-A blocks, reduction + inception-B
//!   blocks, inception-C blocks + head.

use serde::Deserialize;

use crate::gpu::BatchingCurve;
use crate::model::StageProfile;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DnnProfile {
    pub name: &'static str,
    /// Unbatched single-instance throughput (jobs/s).
    pub min_jps: f64,
    /// Best single-tenant batched throughput (jobs/s).
    pub max_jps: f64,
    pub batching_gain: f64,
    /// Batch size at which `batching_gain` is reached.
    pub reference_batch: u32,
    pub width_fraction: f64,
    pub stage_fractions: &'static [f64],
}

impl DnnProfile {
    pub fn nominal_total(&self) -> f64 {
        1.0 / self.min_jps
    }

    pub fn width(&self, total_sms: u32) -> u32 {
        ((self.width_fraction * total_sms as f64).round() as u32).clamp(1, total_sms.max(1))
    }

    pub fn stages(&self, total_sms: u32) -> Vec<StageProfile> {
        let width = self.width(total_sms);
        let total = self.nominal_total();
        self.stage_fractions
            .iter()
            .map(|f| StageProfile {
                nominal_time: total * f,
                width,
            })
            .collect()
    }

    pub fn batching_curve(&self) -> BatchingCurve {
        BatchingCurve {
            reference_batch: self.reference_batch,
            reference_gain: self.batching_gain,
        }
    }
}

pub const RESNET18: DnnProfile = DnnProfile {
    name: "resnet18",
    min_jps: 627.0,
    max_jps: 1025.0,
    batching_gain: 1.63,
    reference_batch: 4,
    width_fraction: 0.4,
    stage_fractions: &[0.31, 0.23, 0.23, 0.23],
};

pub const UNET: DnnProfile = DnnProfile {
    name: "unet",
    min_jps: 241.0,
    max_jps: 260.0,
    batching_gain: 1.08,
    reference_batch: 2,
    width_fraction: 0.75,
    stage_fractions: &[0.22, 0.24, 0.30, 0.24],
};

pub const INCEPTIONV3: DnnProfile = DnnProfile {
    name: "inceptionv3",
    min_jps: 142.0,
    max_jps: 446.0,
    batching_gain: 3.13,
    reference_batch: 8,
    width_fraction: 0.2,
    stage_fractions: &[0.18, 0.30, 0.30, 0.22],
};

pub const DNN_PROFILES: &[DnnProfile] = &[RESNET18, UNET, INCEPTIONV3];

pub fn dnn_profile(name: &str) -> Option<&'static DnnProfile> {
    DNN_PROFILES.iter().find(|p| p.name == name)
}

/// One homogeneous slice of a workload.
#[derive(Debug, Clone, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGroup {
    pub dnn: String,
    pub hp: usize,
    pub lp: usize,
    pub jps: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    groups: Vec<TaskGroup>,
}

const WORKLOAD_PRESETS: &[(&str, &str)] = &[
    ("resnet18_main", include_str!("../presets/resnet18_main.toml")),
    ("unet_main", include_str!("../presets/unet_main.toml")),
    ("inceptionv3_main", include_str!("../presets/inceptionv3_main.toml")),
    ("mixed_main", include_str!("../presets/mixed_main.toml")),
];

pub fn workload_preset_names() -> impl Iterator<Item = &'static str> {
    WORKLOAD_PRESETS.iter().map(|(n, _)| *n)
}

/// Task groups of a named workload preset.
pub fn workload_preset(name: &str) -> Option<Vec<TaskGroup>> {
    let (_, text) = WORKLOAD_PRESETS.iter().find(|(n, _)| *n == name)?;
    let file: PresetFile = toml::from_str(text).expect("built-in preset parses");
    Some(file.groups)
}
