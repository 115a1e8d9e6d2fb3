//! Raw highway vehicle observations and their ingestion.
//!
//! Input files are headered CSV with at least the columns `dataset_id`,
//! `vehicle_id`, `frame_id`, `local_x`, `local_y`, `lane_id` (extra columns
//! are ignored). `local_x` is lateral, `local_y` longitudinal, both in the
//! unit named at parse time; the canonical internal unit is meters.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw frames arrive at 10 Hz.
pub const FRAME_DT: f64 = 0.1;

/// Lane ids are capped here during normalization.
pub const MAX_LANE: i64 = 6;

pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Meters,
    Feet,
}

/// One vehicle observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub dataset_id: u32,
    pub vehicle_id: u64,
    pub frame_id: i64,
    pub local_x: f64,
    pub local_y: f64,
    pub lane_id: i64,
}

const COLUMNS: [&str; 6] = [
    "dataset_id",
    "vehicle_id",
    "frame_id",
    "local_x",
    "local_y",
    "lane_id",
];

/// Parse a CSV stream into records, in file order. `unit = Feet` converts
/// positions to meters; lane ids are left uncapped.
pub fn parse_records<R: BufRead>(reader: R, unit: Unit) -> Result<Vec<RawRecord>> {
    let mut lines = reader.lines().enumerate();

    let header = loop {
        match lines.next() {
            Some((lineno, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break (lineno, line);
                }
            }
            None => return Err(Error::MissingColumn(COLUMNS[0].into())),
        }
    };
    let names: Vec<String> = header.1.split(',').map(|s| s.trim().to_string()).collect();
    let mut col = [0usize; 6];
    for (slot, want) in col.iter_mut().zip(COLUMNS) {
        *slot = names
            .iter()
            .position(|n| n == want)
            .ok_or_else(|| Error::MissingColumn(want.into()))?;
    }

    let scale = match unit {
        Unit::Meters => 1.0,
        Unit::Feet => FEET_TO_METERS,
    };

    let mut out = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1; // 1-based for messages
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let field = |c: usize, name: &str| -> Result<&str> {
            fields.get(c).copied().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("row has {} fields, column '{name}' missing", fields.len()),
            })
        };
        let int = |c: usize, name: &str| -> Result<i64> {
            field(c, name)?.parse::<i64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column '{name}' is not an integer: '{}'", fields.get(c).copied().unwrap_or("")),
            })
        };
        let float = |c: usize, name: &str| -> Result<f64> {
            field(c, name)?.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column '{name}' is not a number: '{}'", fields.get(c).copied().unwrap_or("")),
            })
        };

        out.push(RawRecord {
            dataset_id: int(col[0], "dataset_id")? as u32,
            vehicle_id: int(col[1], "vehicle_id")? as u64,
            frame_id: int(col[2], "frame_id")?,
            local_x: float(col[3], "local_x")? * scale,
            local_y: float(col[4], "local_y")? * scale,
            lane_id: int(col[5], "lane_id")?,
        });
    }
    Ok(out)
}

/// Normalize a lane id by capping it at [`MAX_LANE`].
pub fn cap_lane(lane_id: i64) -> Result<i64> {
    if lane_id < 1 {
        return Err(Error::InvalidLane(lane_id));
    }
    Ok(lane_id.min(MAX_LANE))
}

/// Keep every `factor`-th record of a frame-sorted trajectory, starting with
/// the first. With 10 Hz input and factor 2 the resulting timestep is 0.2 s.
pub fn downsample(trajectory: &[RawRecord], factor: usize) -> Vec<RawRecord> {
    assert!(factor >= 1, "downsample factor must be >= 1");
    trajectory
        .iter()
        .step_by(factor)
        .cloned()
        .collect()
}
