//! Independent scalar reference implementations.
//!
//! Nothing here shares code with the `iplan` crate: every function is a
//! direct, loop-by-loop transcription of the textbook formula it names, so
//! that agreement between the two is evidence rather than tautology.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step evaluated scalar by scalar.
///
/// Weight layout: `w_ih[i][g*hidden + k]`, `w_hh[j][g*hidden + k]` with gate
/// index `g` = 0 reset, 1 update, 2 candidate.
pub fn gru_cell(
    x: &[f64],
    h: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b_ih: &[f64],
    b_hh: &[f64],
) -> Vec<f64> {
    let hid = h.len();
    let cols = 3 * hid;
    let dot_in = |gate: usize, k: usize| -> f64 {
        let mut s = b_ih[gate * hid + k];
        for (i, xi) in x.iter().enumerate() {
            s += xi * w_ih[i * cols + gate * hid + k];
        }
        s
    };
    let dot_hid = |gate: usize, k: usize| -> f64 {
        let mut s = b_hh[gate * hid + k];
        for (j, hj) in h.iter().enumerate() {
            s += hj * w_hh[j * cols + gate * hid + k];
        }
        s
    };
    (0..hid)
        .map(|k| {
            let r = logistic(dot_in(0, k) + dot_hid(0, k));
            let z = logistic(dot_in(1, k) + dot_hid(1, k));
            let n = (dot_in(2, k) + r * dot_hid(2, k)).tanh();
            (1.0 - z) * n + z * h[k]
        })
        .collect()
}

/// Single-head graph attention on one complete graph.
///
/// `features` is `n x f` row-major, `w` is `f x hid`, `a` has length
/// `2*hid` (receiver half first). Returns `(attention n x n, output n x hid)`
/// with an ELU on the output; absent nodes have zero rows and columns.
pub fn gat_layer(
    features: &[f64],
    present: &[bool],
    f: usize,
    w: &[f64],
    a: &[f64],
    hid: usize,
    slope: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = present.len();
    let mut wh = vec![0.0; n * hid];
    for i in 0..n {
        for k in 0..hid {
            let mut s = 0.0;
            for d in 0..f {
                s += features[i * f + d] * w[d * hid + k];
            }
            wh[i * hid + k] = s;
        }
    }
    let mut att = vec![0.0; n * n];
    let mut out = vec![0.0; n * hid];
    for i in 0..n {
        if !present[i] {
            continue;
        }
        let mut scores = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            if !present[j] {
                continue;
            }
            let mut e = 0.0;
            for k in 0..hid {
                e += a[k] * wh[i * hid + k] + a[hid + k] * wh[j * hid + k];
            }
            scores[j] = if e > 0.0 { e } else { slope * e };
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = scores
            .iter()
            .filter(|s| s.is_finite())
            .map(|s| (s - m).exp())
            .sum();
        for j in 0..n {
            if present[j] {
                att[i * n + j] = (scores[j] - m).exp() / denom;
            }
        }
        for k in 0..hid {
            let mut s = 0.0;
            for j in 0..n {
                s += att[i * n + j] * wh[j * hid + k];
            }
            out[i * hid + k] = if s > 0.0 { s } else { s.exp() - 1.0 };
        }
    }
    (att, out)
}

/// Parameter after applying bias-corrected Adam to each gradient in turn.
pub fn adam_scalar(p0: f64, grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let step = (t + 1) as f64;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powf(step));
        let v_hat = v / (1.0 - beta2.powf(step));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    p
}

/// Intelligent driver model acceleration, one expression.
#[allow(clippy::too_many_arguments)]
pub fn idm(
    v: f64,
    v_lead: f64,
    gap: f64,
    a: f64,
    b: f64,
    s0: f64,
    time_headway: f64,
    v0: f64,
    max_accel: f64,
    max_brake: f64,
) -> f64 {
    let s_star = s0 + (v * time_headway + v * (v - v_lead) / (2.0 * (a * b.abs()).sqrt())).max(0.0);
    let raw = a * (1.0 - (v / v0).powi(4) - (s_star / gap).powi(2));
    raw.max(-max_brake).min(max_accel)
}

/// GAE by explicit double loop: `A_t = sum_l (gamma*lambda)^l delta_{t+l}`,
/// truncated after the first terminal step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let next_value = |t: usize| {
        if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap
        }
    };
    let mut adv = vec![0.0; n];
    for (t, a) in adv.iter_mut().enumerate() {
        let mut weight = 1.0;
        for l in t..n {
            let delta = rewards[l] + gamma * next_value(l) - values[l];
            *a += weight * delta;
            if dones[l] {
                break;
            }
            weight *= gamma * lambda;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + 7.5;
        for (i, c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

fn student_t_pdf(t: f64, dof: f64) -> f64 {
    let ln_c = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * std::f64::consts::PI).ln();
    (ln_c - (dof + 1.0) / 2.0 * (1.0 + t * t / dof).ln()).exp()
}

/// `P(0 <= T <= x)` by composite Simpson integration of the density.
fn student_t_half_mass(x: f64, dof: f64) -> f64 {
    let steps = 20_000;
    let h = x / steps as f64;
    let mut s = student_t_pdf(0.0, dof) + student_t_pdf(x, dof);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * student_t_pdf(i as f64 * h, dof);
    }
    s * h / 3.0
}

/// Two-sided Student-t critical value by bisection on the integrated density.
pub fn student_t_critical(level: f64, dof: f64) -> f64 {
    let target = level / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    while student_t_half_mass(hi, dof) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_half_mass(mid, dof) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Textbook t interval: `(mean, t_{n-1} * s / sqrt(n))`.
pub fn t_interval(samples: &[f64], level: f64) -> (f64, f64) {
    t_interval_with(samples, student_t_critical(level, samples.len() as f64 - 1.0))
}

/// t interval with a precomputed critical value `t`.
pub fn t_interval_with(samples: &[f64], t: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let mut mean = 0.0;
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut ss = 0.0;
    for s in samples {
        ss += (s - mean) * (s - mean);
    }
    let sd = (ss / (n - 1.0)).sqrt();
    (mean, t * sd / n.sqrt())
}

/// MOBIL lane-change test. Accelerations are supplied by the caller:
/// `self_now`/`self_after` for the changing vehicle, and before/after values
/// for the new and old followers.
#[allow(clippy::too_many_arguments)]
pub fn mobil_accepts(
    self_now: f64,
    self_after: f64,
    new_follower_now: f64,
    new_follower_after: f64,
    old_follower_now: f64,
    old_follower_after: f64,
    politeness: f64,
    safe_braking: f64,
    threshold: f64,
) -> bool {
    if new_follower_after < -safe_braking.abs() {
        return false;
    }
    let gain = self_after - self_now
        + politeness * (new_follower_after - new_follower_now + old_follower_after - old_follower_now);
    gain >= threshold
}

/// Corners of a rectangle centred at `(cx, cy)` with heading `theta`.
pub fn rectangle(cx: f64, cy: f64, theta: f64, length: f64, width: f64) -> [(f64, f64); 4] {
    let (c, s) = (theta.cos(), theta.sin());
    let (hl, hw) = (length / 2.0, width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dx, dy)| (cx + dx * c - dy * s, cy + dx * s + dy * c))
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Sutherland-Hodgman clip of `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let p = input[k];
            let q = input[(k + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        s += p.0 * q.1 - q.0 * p.1;
    }
    0.5 * s.abs()
}

/// Two rectangles overlap when their intersection has positive area.
/// Touching edges do not count.
pub fn polygons_overlap(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    polygon_area(&clip_polygon(a, b)) > 1e-12
}

/// Per-tick highway reward written out term by term.
pub fn highway_reward(crashed: bool, lane: usize, lanes: usize, speed: f64) -> f64 {
    let mut r = 0.0;
    if crashed {
        r -= 1.0;
    }
    r += 0.1 * lane as f64 / (lanes - 1) as f64;
    let frac = ((speed - 20.0) / 10.0).clamp(0.0, 1.0);
    r + 0.4 * frac
}

/// Navigation reward for agent `me` given all positions and sizes.
pub fn navigation_reward(
    me: usize,
    positions: &[(f64, f64)],
    sizes: &[f64],
    controllable: &[bool],
    landmarks: &[(f64, f64)],
) -> f64 {
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let closest = |i: usize| {
        landmarks
            .iter()
            .map(|l| dist(positions[i], *l))
            .fold(f64::INFINITY, f64::min)
    };
    let collisions = |i: usize| {
        (0..positions.len())
            .filter(|&j| j != i && dist(positions[i], positions[j]) < sizes[i] + sizes[j])
            .count()
    };
    let mut r = -closest(me);
    r -= 5.0 * collisions(me) as f64;
    if closest(me) < 0.1 {
        r += 10.0;
    }
    let all = (0..positions.len())
        .filter(|&i| controllable[i])
        .all(|i| closest(i) < 0.1 && collisions(i) == 0);
    if all {
        r += 100.0;
    }
    r
}

/// Soft latent update written per component.
pub fn soft_update(encoded: &[f64], previous: &[f64], eta: f64) -> Vec<f64> {
    encoded
        .iter()
        .zip(previous)
        .map(|(e, p)| eta * e + (1.0 - eta) * p)
        .collect()
}

/// Steady-state turning radius of a kinematic bicycle with the reference
/// point at mid-wheelbase: `R = (l/2) / sin(atan(tan(delta)/2))`.
pub fn bicycle_turn_radius(length: f64, steering: f64) -> f64 {
    let slip = (steering.tan() / 2.0).atan();
    (length / 2.0) / slip.sin()
}

/// Closed-form speed trajectory of a damped double integrator driven by a
/// constant force: returns the position after `steps` ticks from rest.
pub fn damped_integrator_position(force: f64, damping: f64, dt: f64, steps: usize) -> f64 {
    let (mut v, mut p) = (0.0, 0.0);
    for _ in 0..steps {
        v = v * (1.0 - damping) + force * dt;
        p += v * dt;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_critical_matches_tables() {
        // Standard two-sided 95% critical values.
        assert!((student_t_critical(0.95, 9.0) - 2.262_157).abs() < 1e-5);
        assert!((student_t_critical(0.95, 63.0) - 1.998_341).abs() < 1e-5);
        assert!((student_t_critical(0.99, 9.0) - 3.249_836).abs() < 1e-5);
    }

    #[test]
    fn idm_free_road_at_target_speed_is_zero() {
        let a = idm(30.0, 30.0, f64::INFINITY, 3.0, -5.0, 10.0, 1.5, 30.0, 6.0, 6.0);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn overlapping_squares() {
        let a = rectangle(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = rectangle(1.5, 0.0, 0.3, 2.0, 2.0);
        let c = rectangle(5.0, 0.0, 0.0, 2.0, 2.0);
        assert!(polygons_overlap(&a, &b));
        assert!(!polygons_overlap(&a, &c));
    }

    #[test]
    fn clipped_area_of_offset_squares() {
        let a = rectangle(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = rectangle(1.0, 1.0, 0.0, 2.0, 2.0);
        assert!((polygon_area(&clip_polygon(&a, &b)) - 1.0).abs() < 1e-12);
        let touching = rectangle(2.0, 0.0, 0.0, 2.0, 2.0);
        assert!(!polygons_overlap(&a, &touching));
    }
}
