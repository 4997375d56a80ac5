use iplan::env::Environment;
use iplan::env::highway::{DriverKind, Highway, HighwayConfig, VehicleKind, VehicleState, FASTER, LANE_LEFT};

fn lone_vehicle(cfg: &HighwayConfig, lane: usize, speed: f64) -> VehicleState {
    VehicleState {
        id: 0,
        kind: VehicleKind::Controlled,
        lane,
        target_lane: lane,
        x: 0.0,
        y: cfg.lane_center(lane),
        heading: 0.0,
        speed,
        target_speed: speed,
        max_speed: 40.0,
        max_accel: 6.0,
        length: cfg.vehicle_length,
        width: cfg.vehicle_width,
        crashed: false,
    }
}

fn road(n: usize) -> (Highway, HighwayConfig) {
    let mut cfg = HighwayConfig::mild();
    cfg.n_controlled = n;
    cfg.n_behavior = 0;
    (Highway::new(cfg.clone()), cfg)
}

/// `y` after each simulation tick of a lane-left from `lane`.
fn lane_left_track(speed: f64, lane: usize, decisions: usize) -> (Vec<f64>, HighwayConfig) {
    let (mut hw, cfg) = road(1);
    hw.set_vehicles(vec![lone_vehicle(&cfg, lane, speed)]);
    assert!(hw.apply_meta_action(0, LANE_LEFT));
    let mut ys = Vec::new();
    for _ in 0..decisions * cfg.substeps {
        hw.simulate_tick();
        ys.push(hw.vehicles()[0].y);
    }
    (ys, cfg)
}

#[test]
fn lane_left_settles_without_overshoot() {
    for speed in [15.0, 25.0, 35.0] {
        let (ys, cfg) = lane_left_track(speed, 3, 4);
        let target = cfg.lane_center(2);
        let overshoot = ys.iter().map(|y| target - y).fold(0.0, f64::max);
        assert!(overshoot < 0.1 * cfg.lane_width, "speed {speed}: overshoot {overshoot}");
        let settled = &ys[3 * cfg.substeps - 1..];
        assert!(settled.iter().all(|y| (y - target).abs() < 0.1), "speed {speed}: {:?}", &settled[..3]);
    }
}

#[test]
fn faster_saturates_at_max_speed() {
    let (mut hw, cfg) = road(1);
    hw.set_vehicles(vec![lone_vehicle(&cfg, 3, 38.0)]);
    for _ in 0..3 {
        hw.apply_meta_action(0, FASTER);
    }
    assert_eq!(hw.vehicles()[0].target_speed, 40.0);
    for _ in 0..10 * cfg.substeps {
        hw.simulate_tick();
    }
    let v = &hw.vehicles()[0];
    assert!(v.speed <= 40.0 && v.speed > 39.0, "{}", v.speed);
}

#[test]
fn behavior_speed_draws_stay_in_profile_range() {
    let cfg = HighwayConfig::chaotic();
    let mut hw = Highway::new(cfg.clone());
    let mut seen = 0;
    for seed in 0..20 {
        hw.reset(seed).unwrap();
        for v in hw.vehicles() {
            if let VehicleKind::Behavior(k) = v.kind {
                let (lo, hi) = cfg.profile(k).default_speed_range;
                assert!((lo..=hi).contains(&v.target_speed), "{k:?} drew {}", v.target_speed);
                seen += usize::from(k == DriverKind::Aggressive);
            }
        }
    }
    assert!(seen > 100);
}
