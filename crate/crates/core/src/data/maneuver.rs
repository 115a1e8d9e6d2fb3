//! Maneuver labels derived from raw (pre-downsample) trajectories. The
//! labels are sample metadata only; nothing downstream trains on them.

use serde::{Deserialize, Serialize};

use crate::data::records::{RawRecord, FRAME_DT};
use crate::error::{Error, Result};

/// Look-back and look-ahead window, in raw 10 Hz frames (~4 s).
pub const MANEUVER_WINDOW: usize = 40;

/// A future mean speed below this fraction of the historic mean counts as
/// braking.
pub const BRAKING_RATIO: f64 = 0.8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LateralManeuver {
    Keep,
    Left,
    Right,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LongitudinalManeuver {
    Normal,
    Braking,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ManeuverLabel {
    pub lateral: LateralManeuver,
    pub longitudinal: LongitudinalManeuver,
}

fn mean_speed(trajectory: &[RawRecord], from: usize, to: usize) -> f64 {
    let mut dist = 0.0;
    for i in from..to {
        let dx = trajectory[i + 1].local_x - trajectory[i].local_x;
        let dy = trajectory[i + 1].local_y - trajectory[i].local_y;
        dist += (dx * dx + dy * dy).sqrt();
    }
    dist / ((to - from) as f64 * FRAME_DT)
}

/// Label the maneuver at raw-frame index `t_index` of one vehicle's
/// frame-sorted trajectory. Lane numbers increase rightward; a lane decrease
/// in either window is a left change (left wins if both directions appear).
pub fn label_maneuver(trajectory: &[RawRecord], t_index: usize) -> Result<ManeuverLabel> {
    if t_index < MANEUVER_WINDOW || t_index + MANEUVER_WINDOW >= trajectory.len() {
        return Err(Error::WindowUnavailable {
            index: t_index,
            len: trajectory.len(),
            window: MANEUVER_WINDOW,
        });
    }
    let lane_back = trajectory[t_index - MANEUVER_WINDOW].lane_id;
    let lane_now = trajectory[t_index].lane_id;
    let lane_ahead = trajectory[t_index + MANEUVER_WINDOW].lane_id;

    let lateral = if lane_ahead < lane_now || lane_now < lane_back {
        LateralManeuver::Left
    } else if lane_ahead > lane_now || lane_now > lane_back {
        LateralManeuver::Right
    } else {
        LateralManeuver::Keep
    };

    let hist_speed = mean_speed(trajectory, t_index - MANEUVER_WINDOW, t_index);
    let fut_speed = mean_speed(trajectory, t_index, t_index + MANEUVER_WINDOW);
    let longitudinal = if fut_speed < BRAKING_RATIO * hist_speed {
        LongitudinalManeuver::Braking
    } else {
        LongitudinalManeuver::Normal
    };

    Ok(ManeuverLabel { lateral, longitudinal })
}
