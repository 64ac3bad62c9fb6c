//! Run folders: the text outputs of a batch plus JSON artifacts from which
//! metrics, frames and forecast charts can be recomputed without rerunning.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::config::{PreparedRun, RunConfig};
use super::templates::{parse_historical, write_historical, HistoricalRecord};
use super::{write_batch, IoError};
use crate::forecast::{IntensityModel, SpacePartition, TimePartition};
use crate::sim::SimOutput;

/// Partitions and arrival model a run was generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastArtifacts {
    pub partition: SpacePartition,
    pub time_partition: TimePartition,
    pub model: Option<IntensityModel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFolder {
    pub path: PathBuf,
}

impl RunFolder {
    pub const CONFIG: &'static str = "config.json";
    pub const OUTPUTS: &'static str = "outputs.json";
    pub const FORECAST: &'static str = "forecast.json";
    pub const HISTORY: &'static str = "history.txt";

    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunFolder { path: path.into() }
    }

    fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf, IoError> {
        let path = self.path.join(name);
        fs::write(&path, serde_json::to_vec(value)?)?;
        Ok(path)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, IoError> {
        Ok(serde_json::from_slice(&fs::read(self.path.join(name))?)?)
    }

    /// Writes the text outputs and the JSON artifacts.
    pub fn save(&self, config: &RunConfig, run: &PreparedRun, outputs: &[SimOutput]) -> Result<Vec<PathBuf>, IoError> {
        fs::create_dir_all(&self.path)?;
        let mut written = write_batch(&run.scenarios, outputs, &self.path)?;
        written.push(self.write_json(Self::CONFIG, config)?);
        written.push(self.write_json(Self::OUTPUTS, outputs)?);
        let artifacts = ForecastArtifacts {
            partition: run.partition.clone(),
            time_partition: run.time_partition.clone(),
            model: run.model.clone(),
        };
        written.push(self.save_forecast(&artifacts)?);
        if let Some(p) = &config.history_file {
            let records = parse_historical(&fs::read_to_string(p)?)?;
            written.push(self.save_history(&records)?);
        }
        Ok(written)
    }

    pub fn save_forecast(&self, artifacts: &ForecastArtifacts) -> Result<PathBuf, IoError> {
        fs::create_dir_all(&self.path)?;
        self.write_json(Self::FORECAST, artifacts)
    }

    pub fn save_history(&self, records: &[HistoricalRecord]) -> Result<PathBuf, IoError> {
        fs::create_dir_all(&self.path)?;
        let path = self.path.join(Self::HISTORY);
        fs::write(&path, write_historical(records))?;
        Ok(path)
    }

    pub fn load_config(&self) -> Result<RunConfig, IoError> {
        self.read_json(Self::CONFIG)
    }

    pub fn load_outputs(&self) -> Result<Vec<SimOutput>, IoError> {
        self.read_json(Self::OUTPUTS)
    }

    pub fn load_forecast(&self) -> Result<ForecastArtifacts, IoError> {
        self.read_json(Self::FORECAST)
    }

    /// `None` when the run had no historical dataset.
    pub fn load_history(&self) -> Result<Option<Vec<HistoricalRecord>>, IoError> {
        let path = self.path.join(Self::HISTORY);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(parse_historical(&fs::read_to_string(path)?)?))
    }

    pub fn has_outputs(&self) -> bool {
        Path::new(&self.path.join(Self::OUTPUTS)).is_file()
    }
}
