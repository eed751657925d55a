//! Plasma shots: the data model, the on-disk dataset container,
//! preprocessing, augmentation and the synthetic shot generator.

mod io;
mod prep;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

pub use io::{
    load_dataset, parse_shot_csv, shot_csv_header, write_dataset, write_shot_csv, Dataset,
    DatasetManifest, GeneratorRecord, LabelCounts, ShotRecord, ShotTable, MANIFEST_FILE,
    MANIFEST_SCHEMA_VERSION,
};
pub use prep::{
    clip_augment, min_samples, prepare_shot, resample_200hz, resample_channels, truncate_samples,
    whitenoise_gaps, MAX_SAMPLES, MIN_DURATION_S, TRUNCATE_S,
};
pub use synth::{oracle_score, synth_generate, SynthConfig};

pub const N_FEATURES: usize = 12;

/// Input features, in channel order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "locked_mode_indicator",
    "rotating_mode_indicator",
    "beta_p",
    "li",
    "q95",
    "n_over_ng",
    "dz_center",
    "dz_lower",
    "kappa",
    "prad_over_pinput",
    "ip_error_over_ip_prog",
    "v_loop",
];

pub const LOCKED_MODE: usize = 0;
pub const ROTATING_MODE: usize = 1;
pub const BETA_P: usize = 2;
pub const LI: usize = 3;
pub const Q95: usize = 4;
pub const GREENWALD_FRACTION: usize = 5;
pub const DZ_CENTER: usize = 6;
pub const DZ_LOWER: usize = 7;
pub const KAPPA: usize = 8;
pub const V_LOOP: usize = 11;

/// Channels produced by equilibrium reconstruction; these drop out as
/// white noise when reconstruction fails.
pub const EFIT_CHANNELS: [usize; 6] = [BETA_P, LI, Q95, DZ_CENTER, DZ_LOWER, KAPPA];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Disruptive,
    Nondisruptive,
}

impl Label {
    pub fn is_disruptive(self) -> bool {
        self == Label::Disruptive
    }

    /// 1.0 for disruptive, 0.0 otherwise.
    pub fn target(self) -> f64 {
        if self.is_disruptive() {
            1.0
        } else {
            0.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Disruptive => "disruptive",
            Label::Nondisruptive => "nondisruptive",
        }
    }
}

/// One discharge sampled on a uniform grid: `channels` is `[12, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub id: String,
    pub channels: Tensor,
    pub step_s: f64,
    pub label: Label,
    pub machine: String,
}

impl Shot {
    pub fn new(
        id: impl Into<String>,
        channels: Tensor,
        step_s: f64,
        label: Label,
        machine: impl Into<String>,
    ) -> Result<Self> {
        let (c, _) = channels.dims2()?;
        if c != N_FEATURES {
            return Err(Error::Input(format!(
                "a shot has {N_FEATURES} channels, got {c}"
            )));
        }
        if !(step_s.is_finite() && step_s > 0.0) {
            return Err(Error::Input(format!("invalid sampling period {step_s}")));
        }
        Ok(Self {
            id: id.into(),
            channels,
            step_s,
            label,
            machine: machine.into(),
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.step_s
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.channels.row(c)
    }

    /// The first `len` samples, bit-identical to the original.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        Ok(Self {
            channels: self.channels.prefix_columns(len)?,
            ..self.clone()
        })
    }
}
