//! Windowing normalized records into training samples and resolving
//! neighbors onto the spatial grid.
//!
//! The grid around the target covers one lane to each side (3 channels) and
//! [-90, +90) meters longitudinally in 13 uniform cells per lane. All sample
//! coordinates are relative to the target's position at the anchor time, so
//! the last history row is always (0, 0).

use std::collections::HashMap;

use crate::data::records::RawRecord;
use crate::social::OccupancyMask;

/// Grid channels: left lane, own lane, right lane.
pub const GRID_CHANNELS: usize = 3;

/// Longitudinal cells per lane.
pub const GRID_CELLS: usize = 13;

/// Longitudinal half-range of the grid, meters.
pub const GRID_RANGE_M: f64 = 90.0;

/// Length of one longitudinal cell, meters.
pub const CELL_LENGTH_M: f64 = 2.0 * GRID_RANGE_M / GRID_CELLS as f64;

/// Map a neighbor's relative lane and longitudinal offset to its grid cell.
/// Returns `None` outside the adjacent-lane / [-90, +90) window. The cell
/// index is clamped when rounding at the far edge would produce 13.
pub fn grid_cell_index(delta_lane: i64, delta_y: f64) -> Option<(usize, usize)> {
    if delta_lane.abs() > 1 || !(-GRID_RANGE_M..GRID_RANGE_M).contains(&delta_y) {
        return None;
    }
    let channel = (delta_lane + 1) as usize;
    let cell = ((delta_y + GRID_RANGE_M) / CELL_LENGTH_M).floor() as usize;
    Some((channel, cell.min(GRID_CELLS - 1)))
}

/// History of one neighbor, keyed to its grid cell at the anchor time.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborHistory {
    pub channel: u8,
    pub cell: u8,
    /// Same length and timestamps as the target history, relative to the
    /// target's anchor position.
    pub history: Vec<[f64; 2]>,
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub vehicle_id: u64,
    pub anchor_frame: i64,
    /// `history_steps` rows of (x, y), anchor-relative; last row is (0, 0).
    pub target_history: Vec<[f64; 2]>,
    /// Sorted by (channel, cell); cells are unique.
    pub neighbor_histories: Vec<NeighborHistory>,
    pub mask: OccupancyMask,
    /// `future_steps` rows of (x, y), anchor-relative ground truth.
    pub future: Vec<[f64; 2]>,
}

/// Window every vehicle's downsampled trajectory into samples.
///
/// An anchor is valid when `history_steps` downsampled steps (anchor
/// inclusive) and `future_steps` further steps exist; windows without them
/// are skipped. Neighbors are resolved at the anchor frame: per occupied
/// cell the nearest |delta_y| vehicle wins (ties to the lower vehicle id),
/// and a winner without records at all of the target's history frames leaves
/// its cell unoccupied. Records must already be normalized (lane-capped,
/// meters). Output is sorted by (vehicle_id, anchor_frame).
pub fn build_samples(
    records: &[RawRecord],
    history_steps: usize,
    future_steps: usize,
    downsample_factor: usize,
) -> Vec<TrajectorySample> {
    assert!(history_steps >= 1 && future_steps >= 1 && downsample_factor >= 1);

    // Group per vehicle, frame-sorted.
    let mut by_vehicle: HashMap<(u32, u64), Vec<&RawRecord>> = HashMap::new();
    for r in records {
        by_vehicle.entry((r.dataset_id, r.vehicle_id)).or_default().push(r);
    }
    for traj in by_vehicle.values_mut() {
        traj.sort_by_key(|r| r.frame_id);
    }

    // Position lookup by (dataset, vehicle, frame) and per-frame rosters for
    // neighbor discovery.
    let mut at_frame: HashMap<(u32, u64, i64), &RawRecord> = HashMap::new();
    let mut roster: HashMap<(u32, i64), Vec<&RawRecord>> = HashMap::new();
    for r in records {
        at_frame.insert((r.dataset_id, r.vehicle_id, r.frame_id), r);
        roster.entry((r.dataset_id, r.frame_id)).or_default().push(r);
    }
    for list in roster.values_mut() {
        list.sort_by_key(|r| r.vehicle_id);
    }

    let mut keys: Vec<&(u32, u64)> = by_vehicle.keys().collect();
    keys.sort();

    let mut samples = Vec::new();
    for key in keys {
        let (dataset_id, vehicle_id) = *key;
        let traj = &by_vehicle[key];
        let down: Vec<&RawRecord> = traj.iter().step_by(downsample_factor).copied().collect();
        if down.len() < history_steps + future_steps {
            continue;
        }
        for anchor in (history_steps - 1)..(down.len() - future_steps) {
            let anchor_rec = down[anchor];
            let (x0, y0) = (anchor_rec.local_x, anchor_rec.local_y);
            let rel = |r: &RawRecord| [r.local_x - x0, r.local_y - y0];

            let history_frames: Vec<i64> = (anchor + 1 - history_steps..=anchor)
                .map(|i| down[i].frame_id)
                .collect();
            let target_history: Vec<[f64; 2]> =
                (anchor + 1 - history_steps..=anchor).map(|i| rel(down[i])).collect();
            let future: Vec<[f64; 2]> =
                (anchor + 1..=anchor + future_steps).map(|i| rel(down[i])).collect();

            // Nearest neighbor per grid cell at the anchor frame.
            let mut cell_winner: HashMap<(usize, usize), (&RawRecord, f64)> = HashMap::new();
            if let Some(present) = roster.get(&(dataset_id, anchor_rec.frame_id)) {
                for other in present {
                    if other.vehicle_id == vehicle_id {
                        continue;
                    }
                    let delta_lane = other.lane_id - anchor_rec.lane_id;
                    let delta_y = other.local_y - y0;
                    let Some(cell) = grid_cell_index(delta_lane, delta_y) else {
                        continue;
                    };
                    let dist = delta_y.abs();
                    match cell_winner.get(&cell) {
                        Some((best, best_dist))
                            if *best_dist < dist
                                || (*best_dist == dist && best.vehicle_id < other.vehicle_id) => {}
                        _ => {
                            cell_winner.insert(cell, (other, dist));
                        }
                    }
                }
            }

            let mut neighbor_histories = Vec::new();
            let mut cells = cell_winner.keys().copied().collect::<Vec<_>>();
            cells.sort();
            for (c, g) in cells {
                let (winner, _) = cell_winner[&(c, g)];
                let full: Option<Vec<[f64; 2]>> = history_frames
                    .iter()
                    .map(|&f| {
                        at_frame
                            .get(&(dataset_id, winner.vehicle_id, f))
                            .map(|r| rel(r))
                    })
                    .collect();
                if let Some(history) = full {
                    neighbor_histories.push(NeighborHistory {
                        channel: c as u8,
                        cell: g as u8,
                        history,
                    });
                }
            }

            let mask = OccupancyMask::from_cells(
                GRID_CHANNELS,
                GRID_CELLS,
                neighbor_histories
                    .iter()
                    .map(|n| (n.channel as usize, n.cell as usize)),
            )
            .expect("cells are unique by construction");

            samples.push(TrajectorySample {
                vehicle_id,
                anchor_frame: anchor_rec.frame_id,
                target_history,
                neighbor_histories,
                mask,
                future,
            });
        }
    }
    samples.sort_by_key(|s| (s.vehicle_id, s.anchor_frame));
    samples
}
