use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::driver::DriverKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    Controlled,
    Behavior(DriverKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub kind: VehicleKind,
    /// Lane whose centreline is nearest to `y`.
    pub lane: usize,
    pub target_lane: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub target_speed: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub length: f64,
    pub width: f64,
    pub crashed: bool,
}

impl VehicleState {
    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }

    /// Corners, counter-clockwise.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dx, dy)| [self.x + dx * c - dy * s, self.y + dx * s + dy * c])
    }
}

/// Kinematic bicycle update with the reference point at mid-wheelbase.
/// Speed is clamped to `[0, max_speed]` after integration.
pub fn bicycle_step(state: &VehicleState, accel: f64, steering: f64, dt: f64) -> VehicleState {
    let mut s = state.clone();
    let beta = (0.5 * steering.tan()).atan();
    s.x += state.speed * (state.heading + beta).cos() * dt;
    s.y += state.speed * (state.heading + beta).sin() * dt;
    s.heading += state.speed * beta.sin() / (state.length / 2.0) * dt;
    s.speed = (state.speed + accel * dt).clamp(0.0, state.max_speed);
    s
}

/// Gains of the cascaded lane-keeping and speed controllers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub tau_heading: f64,
    pub tau_lateral: f64,
    pub tau_accel: f64,
    pub max_steering: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            tau_heading: 0.2,
            tau_lateral: 0.6,
            tau_accel: 0.6,
            max_steering: PI / 3.0,
        }
    }
}

fn wrap_to_pi(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Steering that tracks the centreline `target_y` of a straight lane.
pub fn steering_control(state: &VehicleState, target_y: f64, gains: &ControllerGains) -> f64 {
    let lateral = state.y - target_y;
    let lateral_speed = -lateral / gains.tau_lateral;
    let speed = if state.speed.abs() < 1e-6 { 1e-6 } else { state.speed };
    let heading_cmd = (lateral_speed / speed).clamp(-1.0, 1.0).asin();
    let heading_ref = heading_cmd.clamp(-PI / 4.0, PI / 4.0);
    let heading_rate = wrap_to_pi(heading_ref - state.heading) / gains.tau_heading;
    let slip = (state.length / 2.0 / speed * heading_rate).clamp(-1.0, 1.0).asin();
    (2.0 * slip.tan()).atan().clamp(-gains.max_steering, gains.max_steering)
}

/// Proportional speed tracking, clamped to the vehicle's acceleration limit.
pub fn speed_control(state: &VehicleState, gains: &ControllerGains) -> f64 {
    ((state.target_speed - state.speed) / gains.tau_accel).clamp(-state.max_accel, state.max_accel)
}

/// Separating-axis test for two oriented rectangles. Touching edges do not
/// count as a collision.
pub fn rectangles_overlap(a: &VehicleState, b: &VehicleState) -> bool {
    let reach = |v: &VehicleState| 0.5 * (v.length * v.length + v.width * v.width).sqrt();
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    let r = reach(a) + reach(b);
    if dx * dx + dy * dy >= r * r {
        return false;
    }
    let (ca, cb) = (a.corners(), b.corners());
    let axes = [a.heading, a.heading + PI / 2.0, b.heading, b.heading + PI / 2.0];
    axes.iter().all(|&th| {
        let (ux, uy) = (th.cos(), th.sin());
        let project = |cs: &[[f64; 2]; 4]| {
            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p[0] * ux + p[1] * uy;
                (lo.min(d), hi.max(d))
            })
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        alo < bhi && blo < ahi
    })
}
