//! Benchmark problems on the unit square and the experiment drivers built on them.

pub mod experiments;
pub mod fd;
pub mod test1;
pub mod test2;
pub mod test3;

use std::fmt;
use std::str::FromStr;

use parahjb::pipeline::{OfflineConfig, OnlineConfig, Problem};
use serde::{Deserialize, Serialize};

pub use test1::Test1Spec;
pub use test2::Test2Spec;
pub use test3::{SensorOutput, Test3Spec};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] parahjb::Error),

    #[error("invalid benchmark setting: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Smallest number of interior nodes per axis accepted by the builders.
pub const MIN_RESOLUTION: usize = 10;

pub(crate) fn check_resolution(k: usize) -> Result<()> {
    if k < MIN_RESOLUTION {
        return Err(Error::Invalid(format!(
            "resolution must be >= {MIN_RESOLUTION} nodes per axis, got {k}"
        )));
    }
    Ok(())
}

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Rect {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self {
            lower: [lo, lo],
            upper: [hi, hi],
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| p[k] >= self.lower[k] && p[k] <= self.upper[k])
    }
}

/// Closed disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) <= self.radius.powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkId {
    Test1,
    Test2,
    Test3,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 3] = [BenchmarkId::Test1, BenchmarkId::Test2, BenchmarkId::Test3];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchmarkId::Test1 => "test1",
            BenchmarkId::Test2 => "test2",
            BenchmarkId::Test3 => "test3",
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test1" => Ok(BenchmarkId::Test1),
            "test2" => Ok(BenchmarkId::Test2),
            "test3" => Ok(BenchmarkId::Test3),
            other => Err(Error::Invalid(format!("unknown benchmark `{other}`"))),
        }
    }
}

/// Settings of one benchmark problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase")]
pub enum BenchmarkSpec {
    Test1(Test1Spec),
    Test2(Test2Spec),
    Test3(Test3Spec),
}

impl BenchmarkSpec {
    pub fn default_for(id: BenchmarkId) -> Self {
        match id {
            BenchmarkId::Test1 => BenchmarkSpec::Test1(Test1Spec::default()),
            BenchmarkId::Test2 => BenchmarkSpec::Test2(Test2Spec::default()),
            BenchmarkId::Test3 => BenchmarkSpec::Test3(Test3Spec::default()),
        }
    }

    pub fn id(&self) -> BenchmarkId {
        match self {
            BenchmarkSpec::Test1(_) => BenchmarkId::Test1,
            BenchmarkSpec::Test2(_) => BenchmarkId::Test2,
            BenchmarkSpec::Test3(_) => BenchmarkId::Test3,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            BenchmarkSpec::Test1(s) => s.resolution,
            BenchmarkSpec::Test2(s) => s.resolution,
            BenchmarkSpec::Test3(s) => s.resolution,
        }
    }

    pub fn with_resolution(mut self, k: usize) -> Self {
        match &mut self {
            BenchmarkSpec::Test1(s) => s.resolution = k,
            BenchmarkSpec::Test2(s) => s.resolution = k,
            BenchmarkSpec::Test3(s) => s.resolution = k,
        }
        self
    }

    pub fn build(&self) -> Result<Problem> {
        match self {
            BenchmarkSpec::Test1(s) => s.build(),
            BenchmarkSpec::Test2(s) => s.build(),
            BenchmarkSpec::Test3(s) => s.build(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("benchmark settings serialize")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::Invalid(format!("stored benchmark settings: {e}")))
    }
}

/// Problem, offline and online settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub benchmark: BenchmarkSpec,
    pub offline: OfflineConfig,
    #[serde(default)]
    pub online: OnlineConfig,
}

impl RunConfig {
    pub fn default_for(id: BenchmarkId) -> Self {
        Self {
            benchmark: BenchmarkSpec::default_for(id),
            offline: experiments::default_offline(id),
            online: OnlineConfig::default(),
        }
    }
}
