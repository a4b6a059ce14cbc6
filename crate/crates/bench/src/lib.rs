//! Deterministic inputs for the kernel benchmarks.

use moma_core::geometry::{Pose, UnitQuaternion, Vec3};
use nalgebra::DMatrix;

/// `n` rotations clustered around a common axis, with alternating signs.
pub fn quaternion_set(n: usize) -> (Vec<UnitQuaternion>, Vec<f64>) {
    let qs = (0..n)
        .map(|i| {
            let a = 0.3 + 0.01 * (i as f64 * 1.7).sin();
            let axis = Vec3::new(1.0, 0.2 * (i as f64).cos(), 0.1).normalize();
            let q = UnitQuaternion::from_axis_angle(&axis, a);
            if i % 2 == 0 {
                q
            } else {
                UnitQuaternion::new(-q.w(), -q.x(), -q.y(), -q.z()).expect("unit norm")
            }
        })
        .collect();
    let ws = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
    (qs, ws)
}

/// Hand poses sampled at 50 Hz along a gentle arc.
pub fn hand_track(n: usize) -> Vec<(f64, Pose)> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.02;
            let p = Vec3::new(0.5 + 0.1 * t, 0.05 * (2.0 * t).sin(), 0.8);
            (t, Pose::new(p, UnitQuaternion::from_axis_angle(&Vec3::z(), 0.2 * t)))
        })
        .collect()
}

/// Two frames of `(t, x, y, z, rx, ry, rz)` samples from `demos` noisy
/// copies of a smooth curve, one sample per column.
pub fn em_data(demos: usize, samples: usize) -> Vec<DMatrix<f64>> {
    let n = demos * samples;
    (0..2)
        .map(|f| {
            DMatrix::from_fn(7, n, |r, c| {
                let t = (c % samples) as f64 / (samples - 1) as f64;
                let d = (c / samples) as f64;
                let wiggle = 0.003 * ((c * 31 + r * 7 + f) as f64).sin();
                match r {
                    0 => t,
                    1 => 0.4 * t + 0.01 * d + f as f64 * 0.2 + wiggle,
                    2 => (3.0 * t).sin() * 0.2 + wiggle,
                    3 => 0.1 + 0.05 * t * t + wiggle,
                    _ => 0.02 * (t * r as f64).cos() + wiggle,
                }
            })
        })
        .collect()
}
