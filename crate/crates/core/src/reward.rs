//! Reward terms: energy, hand position, keypress and sliding.

use crate::keys::{KeySet, NUM_KEYS};
use serde::{Deserialize, Serialize};

pub const DEFAULT_ENERGY_COEF: f64 = 0.12;
/// Scale applied to the sliding penalty.
pub const SLIDING_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub energy: f64,
    pub hand_position: f64,
    pub keypress: f64,
    pub sliding: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(energy: f64, hand_position: f64, keypress: f64, sliding: f64) -> Self {
        RewardBreakdown { energy, hand_position, keypress, sliding, total: energy + hand_position + keypress + sliding }
    }
}

/// Key state seen by the keypress reward.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySnapshot {
    pub mu: [f64; NUM_KEYS],
    pub pressed: KeySet,
    pub targets: KeySet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandGeometry {
    pub palm_position: [f64; 2],
    pub target_key_positions: Vec<[f64; 2]>,
    pub hand_speed: f64,
}

/// Shape of the bounded distance falloff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceShape {
    pub bound: f64,
    pub margin: f64,
    pub value_at_margin: f64,
}

impl Default for ToleranceShape {
    fn default() -> Self {
        ToleranceShape { bound: 0.01, margin: 0.10, value_at_margin: 0.1 }
    }
}

/// How the mean target-key state is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMean {
    /// Mean of raw depression over every targeted key.
    #[default]
    Depression,
    /// Fraction of targeted keys that count as pressed.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub c_energy: f64,
    pub tolerance: ToleranceShape,
    pub target_mean: TargetMean,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { c_energy: DEFAULT_ENERGY_COEF, tolerance: ToleranceShape::default(), target_mean: TargetMean::Depression }
    }
}

/// `-(Σ|τ_i|·|v_i|)·c_energy`.
pub fn r_energy(tau: &[f64], qdot: &[f64], c_energy: f64) -> f64 {
    debug_assert_eq!(tau.len(), qdot.len());
    let work: f64 = tau.iter().zip(qdot).map(|(t, v)| t.abs() * v.abs()).sum();
    -work * c_energy
}

/// Gaussian tolerance: 1 inside `bound`, `value_at_margin` at `bound + margin`.
pub fn tolerance(distance: f64, shape: &ToleranceShape) -> f64 {
    if distance <= shape.bound {
        return 1.0;
    }
    let scale = (-2.0 * shape.value_at_margin.ln()).sqrt();
    let d = (distance - shape.bound) / shape.margin;
    (-0.5 * (d * scale).powi(2)).exp()
}

/// Mean tolerance of the palm-to-target distances; 1 when nothing is targeted.
pub fn r_hand_position(geom: &HandGeometry, shape: &ToleranceShape) -> f64 {
    if geom.target_key_positions.is_empty() {
        return 1.0;
    }
    let [px, pz] = geom.palm_position;
    let sum: f64 = geom
        .target_key_positions
        .iter()
        .map(|[kx, kz]| tolerance(((kx - px).powi(2) + (kz - pz).powi(2)).sqrt(), shape))
        .sum();
    sum / geom.target_key_positions.len() as f64
}

/// Which branch of the keypress reward applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypressCase {
    /// Targets exist, nothing pressed.
    NothingPressed,
    /// Targets exist, at least one wrong key pressed.
    WrongPressed,
    /// Targets exist, only correct keys pressed.
    OnlyCorrect,
    /// No targets.
    Silence,
}

pub fn keypress_case(snap: &KeySnapshot) -> KeypressCase {
    let wrong = snap.pressed.difference(snap.targets);
    let correct = snap.pressed.intersection(snap.targets);
    if snap.targets.is_empty() {
        KeypressCase::Silence
    } else if !wrong.is_empty() {
        KeypressCase::WrongPressed
    } else if !correct.is_empty() {
        KeypressCase::OnlyCorrect
    } else {
        KeypressCase::NothingPressed
    }
}

fn target_mean(snap: &KeySnapshot, mode: TargetMean) -> f64 {
    let n = snap.targets.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = match mode {
        TargetMean::Depression => snap.targets.iter().map(|k| snap.mu[k]).sum(),
        TargetMean::Binary => snap.pressed.intersection(snap.targets).len() as f64,
    };
    sum / n as f64
}

pub fn r_keypress(snap: &KeySnapshot) -> f64 {
    r_keypress_with(snap, TargetMean::Depression)
}

pub fn r_keypress_with(snap: &KeySnapshot, mode: TargetMean) -> f64 {
    match keypress_case(snap) {
        KeypressCase::NothingPressed => 0.0,
        KeypressCase::WrongPressed => 0.5 + 0.5 * target_mean(snap, mode),
        KeypressCase::OnlyCorrect => 1.0 + 0.5 * target_mean(snap, mode),
        KeypressCase::Silence => {
            // Empty set of wrong keys has max 0.
            let worst = snap.pressed.iter().map(|k| snap.mu[k]).fold(0.0, f64::max);
            2.0 * (1.0 - worst)
        }
    }
}

/// 0 = nothing pressed, 1 = pressed keys but no two adjacent, 2 = adjacent pair pressed.
pub fn adjacency_lambda(pressed: KeySet) -> u8 {
    if pressed.is_empty() {
        0
    } else if pressed.has_adjacent_pair() {
        2
    } else {
        1
    }
}

pub fn r_sliding(lambda: u8, hand_speed: f64) -> f64 {
    -(lambda as f64) * hand_speed * hand_speed * SLIDING_SCALE
}

/// Everything the reward needs from one control step.
pub struct RewardInputs<'a> {
    pub tau: &'a [f64],
    pub qdot: &'a [f64],
    pub geometry: &'a HandGeometry,
    pub keys: &'a KeySnapshot,
}

pub fn total_reward(inputs: &RewardInputs<'_>, cfg: &RewardConfig) -> RewardBreakdown {
    RewardBreakdown::new(
        r_energy(inputs.tau, inputs.qdot, cfg.c_energy),
        r_hand_position(inputs.geometry, &cfg.tolerance),
        r_keypress_with(inputs.keys, cfg.target_mean),
        r_sliding(adjacency_lambda(inputs.keys.pressed), inputs.geometry.hand_speed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(mu: &[(usize, f64)], pressed: &[usize], targets: &[usize]) -> KeySnapshot {
        let mut m = [0.0; NUM_KEYS];
        for &(k, v) in mu {
            m[k] = v;
        }
        KeySnapshot {
            mu: m,
            pressed: KeySet::from_indices(pressed.iter().copied()),
            targets: KeySet::from_indices(targets.iter().copied()),
        }
    }

    #[test]
    fn energy_values() {
        assert_eq!(r_energy(&[0.0; 13], &[1.0; 13], 0.12), 0.0);
        let mut tau = [0.0; 13];
        let mut v = [0.0; 13];
        tau[0] = 2.0;
        v[0] = 0.5;
        assert!((r_energy(&tau, &v, 0.12) - (-0.12)).abs() < 1e-15);
        tau[0] = -2.0;
        v[0] = 0.5;
        assert!(r_energy(&tau, &v, 0.12) < 0.0);
    }

    #[test]
    fn tolerance_shape() {
        let s = ToleranceShape::default();
        assert_eq!(tolerance(0.0, &s), 1.0);
        assert_eq!(tolerance(s.bound, &s), 1.0);
        assert!((tolerance(s.bound + s.margin, &s) - s.value_at_margin).abs() < 1e-12);
        let grid: Vec<f64> = (0..100).map(|i| s.bound + 0.003 * (i as f64 + 1.0)).collect();
        for w in grid.windows(2) {
            assert!(tolerance(w[1], &s) < tolerance(w[0], &s));
        }
        // continuity at the bound
        assert!((tolerance(s.bound + 1e-9, &s) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_position_cases() {
        let s = ToleranceShape::default();
        let g = HandGeometry { palm_position: [0.3, 0.0], target_key_positions: vec![[0.3, 0.0]], hand_speed: 0.0 };
        assert_eq!(r_hand_position(&g, &s), 1.0);
        let g = HandGeometry {
            palm_position: [0.0, 0.0],
            target_key_positions: vec![[0.005, 0.0], [s.bound + s.margin, 0.0]],
            hand_speed: 0.0,
        };
        assert!((r_hand_position(&g, &s) - (1.0 + s.value_at_margin) / 2.0).abs() < 1e-12);
        let g = HandGeometry { palm_position: [0.0, 0.0], target_key_positions: vec![], hand_speed: 0.0 };
        assert_eq!(r_hand_position(&g, &s), 1.0);
    }

    #[test]
    fn keypress_cases() {
        assert_eq!(r_keypress(&snap(&[], &[], &[5])), 0.0);
        assert_eq!(r_keypress(&snap(&[(9, 0.8)], &[9], &[5])), 0.5);
        assert_eq!(r_keypress(&snap(&[(5, 1.0)], &[5], &[5])), 1.5);
        assert_eq!(r_keypress(&snap(&[(7, 0.25)], &[7], &[])), 1.5);
        assert_eq!(r_keypress(&snap(&[], &[], &[])), 2.0);
        // unpressed targeted keys still count toward the mean
        let s = snap(&[(5, 1.0), (6, 0.2)], &[5], &[5, 6]);
        assert!((r_keypress(&s) - 1.3).abs() < 1e-12);
        assert!((r_keypress_with(&s, TargetMean::Binary) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn sliding_and_lambda() {
        assert_eq!(adjacency_lambda(KeySet::EMPTY), 0);
        assert_eq!(adjacency_lambda(KeySet::from_indices([3, 5])), 1);
        assert_eq!(adjacency_lambda(KeySet::from_indices([3, 4])), 2);
        assert_eq!(r_sliding(0, 5.0), 0.0);
        assert!((r_sliding(2, 0.5) - (-1.5)).abs() < 1e-15);
        assert_eq!(r_sliding(1, 1.0), -3.0);
    }

    #[test]
    fn total_is_exact_sum() {
        let b = RewardBreakdown::new(-0.3, 0.7, 1.25, -0.1);
        assert_eq!(b.total, -0.3 + 0.7 + 1.25 + -0.1);
    }
}
