use serde::{Deserialize, Serialize};

use super::env::AgentState;
use super::grid::GridWorld;

/// Observation handed to the agent: an egocentric occupancy patch with a
/// goal-marker channel, plus the GPS+Compass reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Channel-major `[2, k, k]`: occupancy (1 = blocked), then goal marker.
    pub ego_view: Vec<f64>,
    /// (distance to goal in meters, bearing relative to heading in radians).
    pub gps_compass: [f64; 2],
}

impl Observation {
    pub const CHANNELS: usize = 2;

    pub fn view_len(view_size: usize) -> usize {
        Self::CHANNELS * view_size * view_size
    }
}

/// Window cell `(r, c)` samples the world at forward offset `half - r` and
/// rightward offset `c - half` cells from the agent, so the heading points
/// to row 0.
pub fn render_observation(state: &AgentState, world: &GridWorld, view_size: usize) -> Observation {
    let k = view_size;
    let half = (k / 2) as f64;
    let cs = world.cell_size();
    let (fx, fy) = (state.heading.cos(), state.heading.sin());
    let (rx, ry) = (fy, -fx);
    let (px, py) = state.position;
    let mut view = vec![0.0; Observation::view_len(k)];
    for r in 0..k {
        let u = half - r as f64;
        for c in 0..k {
            let v = c as f64 - half;
            let wx = px + cs * (u * fx + v * rx);
            let wy = py + cs * (u * fy + v * ry);
            if !world.is_free_point(wx, wy) {
                view[r * k + c] = 1.0;
            }
        }
    }
    let (dx, dy) = (state.goal.0 - px, state.goal.1 - py);
    let gu = ((dx * fx + dy * fy) / cs).round().clamp(-half, half);
    let gv = ((dx * rx + dy * ry) / cs).round().clamp(-half, half);
    let gr = (half - gu) as usize;
    let gc = (half + gv) as usize;
    view[k * k + gr * k + gc] = 1.0;
    Observation {
        ego_view: view,
        gps_compass: [state.distance_to_goal(), state.goal_bearing()],
    }
}
