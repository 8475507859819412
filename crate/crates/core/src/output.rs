//! Result files: time series and density matrices as CSV, flash logs as CSV, and a
//! JSON summary. Floats in CSV use 17 significant digits so they parse back exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::grw::FlashEvent;
use crate::hilbert::DensityMatrix;

pub const TIMESERIES_HEADER: &str = "time,observable,mean,se";
pub const STATES_HEADER: &str = "time,row,col,re,im";
pub const FLASHES_HEADER: &str = "trajectory,time,particle,center";

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRow {
    pub time: f64,
    pub observable: String,
    pub mean: f64,
    pub se: f64,
}

/// Everything an experiment produces, ready to be written.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub timeseries: Vec<TimeSeriesRow>,
    pub states: Vec<(f64, DensityMatrix)>,
    /// `(trajectory, flash)` pairs in trajectory order; `None` for non-jump runs.
    pub flashes: Option<Vec<(usize, FlashEvent)>>,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub timeseries: PathBuf,
    pub states: PathBuf,
    pub summary: PathBuf,
    pub flashes: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            timeseries: d.join("timeseries.csv"),
            states: d.join("states.csv"),
            summary: d.join("summary.json"),
            flashes: d.join("flashes.csv"),
        }
    }
}

/// Formats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_timeseries(rows: &[TimeSeriesRow], path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{TIMESERIES_HEADER}")?;
        for r in rows {
            writeln!(w, "{},{},{},{}", fmt_f64(r.time), r.observable, fmt_f64(r.mean), fmt_f64(r.se))?;
        }
        Ok(())
    })
}

pub fn write_states(states: &[(f64, DensityMatrix)], path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{STATES_HEADER}")?;
        for (t, rho) in states {
            for i in 0..rho.dim() {
                for j in 0..rho.dim() {
                    let v = rho.entry(i, j);
                    writeln!(w, "{},{i},{j},{},{}", fmt_f64(*t), fmt_f64(v.re), fmt_f64(v.im))?;
                }
            }
        }
        Ok(())
    })
}

pub fn write_flashes(flashes: &[(usize, FlashEvent)], path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{FLASHES_HEADER}")?;
        for (traj, f) in flashes {
            writeln!(w, "{traj},{},{},{}", fmt_f64(f.time), f.particle, f.center)?;
        }
        Ok(())
    })
}

pub fn write_summary(summary: &Value, path: &Path) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, summary)?;
        writeln!(w)
    })
}

/// Writes every part of `output`. The flash log is only written for jump runs.
pub fn write_results(output: &RunOutput, paths: &OutputPaths) -> Result<()> {
    write_timeseries(&output.timeseries, &paths.timeseries)?;
    write_states(&output.states, &paths.states)?;
    if let Some(f) = &output.flashes {
        write_flashes(f, &paths.flashes)?;
    }
    write_summary(&output.summary, &paths.summary)
}

pub fn read_summary(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Internal(format!("{}: {e}", path.display())))
}
