//! Binary container for preprocessed samples, one file per split.
//!
//! Layout (integers little-endian, floats raw IEEE-754):
//!
//! ```text
//! magic    b"TRJS"
//! version  u32          (currently 1)
//! hash     u64          (hash of the generating preprocessing config)
//! history  u32
//! future   u32
//! count    u64
//! sample*  vehicle_id u64, anchor_frame i64,
//!          history×2 f64, future×2 f64,
//!          n_neighbors u32, (channel u8, cell u8, history×2 f64)×n
//! ```
//!
//! The occupancy mask is reconstructed from the neighbor cells on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::samples::{NeighborHistory, TrajectorySample, GRID_CELLS, GRID_CHANNELS};
use crate::error::{Error, Result};
use crate::social::OccupancyMask;

const MAGIC: &[u8; 4] = b"TRJS";
const VERSION: u32 = 1;

pub fn write_samples<W: Write>(w: &mut W, samples: &[TrajectorySample], config_hash: u64) -> Result<()> {
    let (history, future) = match samples.first() {
        Some(s) => (s.target_history.len(), s.future.len()),
        None => (0, 0),
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(history as u32).to_le_bytes())?;
    w.write_all(&(future as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        if s.target_history.len() != history || s.future.len() != future {
            return Err(Error::shape(
                "write_samples",
                format!("{history} history / {future} future rows"),
                format!("{} / {}", s.target_history.len(), s.future.len()),
            ));
        }
        w.write_all(&s.vehicle_id.to_le_bytes())?;
        w.write_all(&s.anchor_frame.to_le_bytes())?;
        for p in &s.target_history {
            w.write_all(&p[0].to_le_bytes())?;
            w.write_all(&p[1].to_le_bytes())?;
        }
        for p in &s.future {
            w.write_all(&p[0].to_le_bytes())?;
            w.write_all(&p[1].to_le_bytes())?;
        }
        w.write_all(&(s.neighbor_histories.len() as u32).to_le_bytes())?;
        for n in &s.neighbor_histories {
            w.write_all(&[n.channel, n.cell])?;
            for p in &n.history {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_samples<R: Read>(r: &mut R) -> Result<(Vec<TrajectorySample>, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad sample container magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported sample container version {version}")));
    }
    let hash = read_u64(r)?;
    let history = read_u32(r)? as usize;
    let future = read_u32(r)? as usize;
    let count = read_u64(r)? as usize;

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let vehicle_id = read_u64(r)?;
        let anchor_frame = read_i64(r)?;
        let target_history = read_points(r, history)?;
        let future_rows = read_points(r, future)?;
        let n_neighbors = read_u32(r)? as usize;
        let mut neighbor_histories = Vec::with_capacity(n_neighbors);
        for _ in 0..n_neighbors {
            let mut cg = [0u8; 2];
            r.read_exact(&mut cg)?;
            neighbor_histories.push(NeighborHistory {
                channel: cg[0],
                cell: cg[1],
                history: read_points(r, history)?,
            });
        }
        let mask = OccupancyMask::from_cells(
            GRID_CHANNELS,
            GRID_CELLS,
            neighbor_histories.iter().map(|n| (n.channel as usize, n.cell as usize)),
        )?;
        samples.push(TrajectorySample {
            vehicle_id,
            anchor_frame,
            target_history,
            neighbor_histories,
            mask,
            future: future_rows,
        });
    }
    Ok((samples, hash))
}

pub fn write_samples_file(path: &Path, samples: &[TrajectorySample], config_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_samples(&mut w, samples, config_hash)?;
    w.flush()?;
    Ok(())
}

pub fn read_samples_file(path: &Path) -> Result<(Vec<TrajectorySample>, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    read_samples(&mut r)
}

fn read_points<R: Read>(r: &mut R, n: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let x = f64::from_le_bytes(buf);
        r.read_exact(&mut buf)?;
        let y = f64::from_le_bytes(buf);
        out.push([x, y]);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64<R: Read>(r: &mut R) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}
