//! Conversion of observations into the fixed-length numeric inputs the
//! networks consume.

use serde::{Deserialize, Serialize};

use crate::env::{EntityState, Observation};

/// Per-environment scaling that keeps network inputs near unit range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub position: [f64; 2],
    pub velocity: f64,
    /// Divisor for entity ids; `None` drops ids from policy inputs.
    pub id: Option<f64>,
    /// Whether the ego's absolute longitudinal position is fed to the policy.
    pub ego_x: bool,
}

impl FeatureScale {
    pub fn unit(id_scale: f64) -> Self {
        Self {
            position: [1.0, 1.0],
            velocity: 1.0,
            id: Some(id_scale),
            ego_x: true,
        }
    }

    /// `[dx, dy, vx, vy]` of `e` relative to `origin`, scaled.
    pub fn state(&self, e: &EntityState, origin: [f64; 2]) -> [f64; 4] {
        [
            (e.position[0] - origin[0]) / self.position[0],
            (e.position[1] - origin[1]) / self.position[1],
            e.velocity[0] / self.velocity,
            e.velocity[1] / self.velocity,
        ]
    }

    /// Inverse of the position part of [`FeatureScale::state`].
    pub fn unscale_position(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.position[0], p[1] * self.position[1]]
    }

    fn id_feature(&self, id: u32) -> f64 {
        self.id.map_or(0.0, |s| id as f64 / s)
    }
}

pub const STATE_DIM: usize = 4;

/// Width of one neighbor slot in the policy's observation block.
pub const SLOT_DIM: usize = 6;

/// Length of the flattened observation block for `capacity` neighbor slots.
pub fn observation_block_len(capacity: usize) -> usize {
    5 + capacity * SLOT_DIM
}

/// Ego `[id, x, y, vx, vy]` followed by `[present, id, dx, dy, vx, vy]` per slot.
pub fn observation_block(obs: &Observation, scale: &FeatureScale) -> Vec<f64> {
    let mut out = Vec::with_capacity(observation_block_len(obs.capacity()));
    let e = obs.ego;
    let ex = if scale.ego_x { e.position[0] / scale.position[0] } else { 0.0 };
    out.extend([
        scale.id_feature(e.id),
        ex,
        e.position[1] / scale.position[1],
        e.velocity[0] / scale.velocity,
        e.velocity[1] / scale.velocity,
    ]);
    for (n, &p) in obs.neighbors.iter().zip(&obs.present) {
        if p {
            let s = scale.state(n, [0.0, 0.0]);
            out.extend([1.0, scale.id_feature(n.id), s[0], s[1], s[2], s[3]]);
        } else {
            out.extend([0.0; SLOT_DIM]);
        }
    }
    out
}

/// Node states in slot order: ego (at the origin) then neighbor slots, all
/// relative to the ego; absent slots are zero.
pub fn slot_states(obs: &Observation, scale: &FeatureScale) -> Vec<[f64; 4]> {
    let mut out = Vec::with_capacity(obs.capacity() + 1);
    out.push(scale.state(&obs.ego, obs.ego.position));
    for (n, &p) in obs.neighbors.iter().zip(&obs.present) {
        out.push(if p { scale.state(n, [0.0, 0.0]) } else { [0.0; 4] });
    }
    out
}

/// Ids and presence of the graph nodes: ego first, then neighbor slots.
pub fn slot_ids(obs: &Observation) -> (Vec<u32>, Vec<bool>) {
    let mut ids = vec![obs.ego.id];
    let mut present = vec![true];
    for (n, &p) in obs.neighbors.iter().zip(&obs.present) {
        ids.push(n.id);
        present.push(p);
    }
    (ids, present)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_observation, Scope, SlotOrder};

    #[test]
    fn block_length_and_masking() {
        let ego = EntityState::new(0, [1.0, 2.0], [0.5, 0.0]);
        let other = EntityState::new(1, [2.0, 2.0], [0.0, 0.0]);
        let obs = build_observation(ego, [other], Scope::Full, SlotOrder::Distance, 3);
        let b = observation_block(&obs, &FeatureScale::unit(4.0));
        assert_eq!(b.len(), observation_block_len(3));
        assert_eq!(&b[..5], &[0.0, 1.0, 2.0, 0.5, 0.0]);
        assert_eq!(&b[5..11], &[1.0, 0.25, 1.0, 0.0, 0.0, 0.0]);
        assert!(b[11..].iter().all(|&v| v == 0.0));
    }
}
