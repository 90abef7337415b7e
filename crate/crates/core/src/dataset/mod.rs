//! Wafer-run ingestion, resampling, normalization, splitting and synthesis.

mod io;
mod normalize;
mod resample;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_runs, load_runs_with_schema, write_runs};
pub use normalize::{normalize, prepare_sample, ChannelStats, NormScheme, SampleTensor};
pub use resample::resample_linear;
pub use split::{split, Partitions};
pub use synth::{synthesize, SynthConfig};

/// The 19 in-process sensor channels, in file order.
pub const CHANNEL_NAMES: [&str; 19] = [
    "USAGE_OF_BACKING_FILM",
    "USAGE_OF_DRESSER",
    "USAGE_OF_POLISHING_TABLE",
    "USAGE_OF_DRESSER_TABLE",
    "PRESSURIZED_CHAMBER_PRESSURE",
    "MAIN_OUTER_AIR_BAG_PRESSURE",
    "CENTER_AIR_BAG_PRESSURE",
    "RETAINER_RING_PRESSURE",
    "RIPPLE_AIR_BAG_PRESSURE",
    "USAGE_OF_MEMBRANE",
    "USAGE_OF_PRESSURIZED_SHEET",
    "SLURRY_FLOW_LINE_A",
    "SLURRY_FLOW_LINE_B",
    "SLURRY_FLOW_LINE_C",
    "WAFER_ROTATION",
    "STAGE_ROTATION",
    "HEAD_ROTATION",
    "DRESSING_WATER_STATUS",
    "EDGE_AIR_BAG_PRESSURE",
];

pub const N_CHANNELS: usize = CHANNEL_NAMES.len();

/// Default pressure proxy for the Preston baseline.
pub const PRESSURE_CHANNEL: &str = "CENTER_AIR_BAG_PRESSURE";
/// Default velocity proxy for the Preston baseline.
pub const VELOCITY_CHANNEL: &str = "STAGE_ROTATION";

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES.iter().position(|&c| c == name)
}

/// Polishing mode, identified by chamber.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    LowSpeed,
    HighSpeed,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::LowSpeed, Mode::HighSpeed];

    /// Chambers 4–6 polish in low-speed mode, 1–3 in high-speed mode.
    pub fn from_chamber(chamber: u32) -> Result<Self> {
        match chamber {
            4..=6 => Ok(Mode::LowSpeed),
            1..=3 => Ok(Mode::HighSpeed),
            other => Err(Error::Data(format!("unknown chamber id {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LowSpeed => "low_speed",
            Mode::HighSpeed => "high_speed",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One polishing run.
#[derive(Clone, Debug, PartialEq)]
pub struct WaferRun {
    pub run_id: String,
    pub chamber: u32,
    pub mode: Mode,
    pub timestamps: Vec<f64>,
    /// `channels[c][t]`, one series per entry of the schema.
    pub channels: Vec<Vec<f64>>,
    /// Material removal rate, nm/min.
    pub target_mrr: f64,
    /// Seconds between the first and last sample.
    pub polishing_time: f64,
}

impl WaferRun {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channel_mean(&self, idx: usize) -> f64 {
        let s = &self.channels[idx];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn validate(&self, n_channels: usize) -> Result<()> {
        if self.channels.len() != n_channels {
            return Err(Error::Data(format!(
                "run {} has {} channels, expected {n_channels}",
                self.run_id,
                self.channels.len()
            )));
        }
        if self.len() < 2 {
            return Err(Error::Data(format!(
                "run {} has {} timestamp(s); at least 2 are required",
                self.run_id,
                self.len()
            )));
        }
        if self.channels.iter().any(|c| c.len() != self.len()) {
            return Err(Error::Data(format!("run {} has ragged channels", self.run_id)));
        }
        if !(self.target_mrr.is_finite() && self.target_mrr > 0.0) {
            return Err(Error::Data(format!(
                "run {} has non-positive or non-finite target {}",
                self.run_id, self.target_mrr
            )));
        }
        Ok(())
    }
}
