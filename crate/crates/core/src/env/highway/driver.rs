use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriverKind {
    Normal,
    Aggressive,
    Conservative,
}

impl DriverKind {
    pub const ALL: [DriverKind; 3] = [DriverKind::Normal, DriverKind::Aggressive, DriverKind::Conservative];
}

/// Longitudinal parameters of a behavior-driven vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub kind: DriverKind,
    pub max_speed: f64,
    pub default_speed_range: (f64, f64),
    pub max_accel: f64,
    pub desired_accel: f64,
    /// Negative by convention.
    pub desired_decel: f64,
    /// Centre-to-centre jam distance, vehicle length included where the
    /// profile calls for it.
    pub desired_front_distance: f64,
    pub time_wanted: f64,
}

impl DriverProfile {
    /// Profile for `kind` with vehicle length `length`.
    pub fn of(kind: DriverKind, length: f64) -> Self {
        match kind {
            DriverKind::Normal => Self {
                kind,
                max_speed: 40.0,
                default_speed_range: (23.0, 25.0),
                max_accel: 6.0,
                desired_accel: 3.0,
                desired_decel: -5.0,
                desired_front_distance: 5.0 + length,
                time_wanted: 1.5,
            },
            DriverKind::Aggressive => Self {
                kind,
                max_speed: 50.0,
                default_speed_range: (35.0, 40.0),
                max_accel: 9.0,
                desired_accel: 6.0,
                desired_decel: -9.0,
                desired_front_distance: 0.5,
                time_wanted: 1.2,
            },
            DriverKind::Conservative => Self {
                kind,
                max_speed: 40.0,
                default_speed_range: (23.0, 25.0),
                max_accel: 5.0,
                desired_accel: 2.0,
                desired_decel: -4.0,
                desired_front_distance: 8.0 + length,
                time_wanted: 1.8,
            },
        }
    }
}

pub const IDM_DELTA: i32 = 4;

/// Intelligent driver model acceleration, clamped to `[-max_accel, max_accel]`.
///
/// No leader is expressed as `gap = f64::INFINITY`; a non-positive gap means
/// the vehicles already touch and yields maximum braking.
pub fn idm_acceleration(v: f64, v_lead: f64, gap: f64, p: &DriverProfile, v0: f64) -> f64 {
    if gap <= 0.0 {
        return -p.max_accel;
    }
    let ab = (p.desired_accel * p.desired_decel.abs()).sqrt();
    let s_star = p.desired_front_distance + (v * p.time_wanted + v * (v - v_lead) / (2.0 * ab)).max(0.0);
    let free = 1.0 - (v.max(0.0) / v0).powi(IDM_DELTA);
    let a = p.desired_accel * (free - (s_star / gap).powi(2));
    a.clamp(-p.max_accel, p.max_accel)
}

/// Politeness used by the lane-change rule for each behavior kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilParams {
    pub politeness_normal: f64,
    pub politeness_aggressive: f64,
    pub politeness_conservative: f64,
    /// Minimum own acceleration gain for a lane change.
    pub min_gain: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self {
            politeness_normal: 0.3,
            politeness_aggressive: 0.0,
            politeness_conservative: 0.6,
            min_gain: 0.2,
        }
    }
}

impl MobilParams {
    pub fn politeness(&self, kind: DriverKind) -> f64 {
        match kind {
            DriverKind::Normal => self.politeness_normal,
            DriverKind::Aggressive => self.politeness_aggressive,
            DriverKind::Conservative => self.politeness_conservative,
        }
    }
}

/// Accelerations entering one lane-change decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobilInputs {
    pub self_now: f64,
    pub self_after: f64,
    pub new_follower_now: f64,
    pub new_follower_after: f64,
    pub old_follower_now: f64,
    pub old_follower_after: f64,
}

/// The change is refused when it would force the new follower to brake
/// harder than `safe_braking`, and otherwise accepted when the politeness
/// weighted gain reaches `min_gain`.
pub fn mobil_decision(m: &MobilInputs, politeness: f64, safe_braking: f64, min_gain: f64) -> bool {
    if m.new_follower_after < -safe_braking.abs() {
        return false;
    }
    let others = m.new_follower_after - m.new_follower_now + m.old_follower_after - m.old_follower_now;
    m.self_after - m.self_now + politeness * others >= min_gain
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_road_at_target_speed() {
        let p = DriverProfile::of(DriverKind::Normal, 5.0);
        assert_eq!(idm_acceleration(25.0, 25.0, f64::INFINITY, &p, 25.0), 0.0);
    }

    #[test]
    fn standing_start_reaches_desired_accel() {
        let p = DriverProfile::of(DriverKind::Aggressive, 5.0);
        assert_eq!(idm_acceleration(0.0, 0.0, f64::INFINITY, &p, 37.0), 6.0);
    }

    #[test]
    fn touching_vehicles_brake_fully() {
        let p = DriverProfile::of(DriverKind::Conservative, 5.0);
        assert_eq!(idm_acceleration(20.0, 0.0, 0.0, &p, 24.0), -5.0);
    }
}
