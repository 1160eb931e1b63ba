//! Large-depth phase diagram of the single-pixel kernel map.
//!
//! For each `(sigma_w2, sigma_b2)` cell the fully connected (`d = 1`) kernel
//! recursion runs on a two-sample kernel with unit self-variances and initial
//! correlation 0.5. The pre-activation variance converges to `q*` and the
//! correlation to `c*`; small weight variances drive `c* -> 1` (ordered),
//! large ones keep `c* < 1` (chaotic), and near the boundary the convergence
//! rate collapses (critical band).

use rayon::prelude::*;

use crate::arch::Nonlinearity;
use crate::error::{Error, Result};
use crate::ops::{phi_self_unchecked, BivariateMoment};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseLabel {
    Ordered,
    Chaotic,
    CriticalBand,
    Divergent,
}

impl std::fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseLabel::Ordered => "ordered",
            PhaseLabel::Chaotic => "chaotic",
            PhaseLabel::CriticalBand => "critical-band",
            PhaseLabel::Divergent => "divergent",
        };
        f.write_str(s)
    }
}

/// Outcome of iterating one grid cell to `depth` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub depth: usize,
    /// Limiting pre-activation variance; `None` when the recursion diverges.
    pub q_star: Option<f64>,
    /// Limiting kernel correlation, in `[-1, 1]`.
    pub c_star: Option<f64>,
    /// Log-linear convergence rate of `|c_l - c*|` per step, from a
    /// regression over the last 20% of the iteration; `None` when the
    /// correlation pins to `c*` below measurement precision (fast).
    pub rate: Option<f64>,
    pub label: PhaseLabel,
}

/// Recorded trajectory of one cell, exposed for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct PhaseTrajectory {
    /// Pre-activation variances `q_l`, one per step.
    pub q: Vec<f64>,
    /// Kernel correlations `c_l`, one per step.
    pub c: Vec<f64>,
}

const DIVERGENCE_BOUND: f64 = 1e12;
const ORDERED_TOL: f64 = 1e-6;
const CRITICAL_RATE: f64 = 1e-3;

/// Iterates the two-sample map and records the trajectory.
pub fn phase_trajectory(
    sigma_w2: f64,
    sigma_b2: f64,
    nl: Nonlinearity,
    depth: usize,
) -> Option<PhaseTrajectory> {
    // Activation-kernel state: unit-normalized inputs, initial correlation 0.5.
    let (mut q1, mut q2, mut k12) = (1.0f64, 1.0f64, 0.5f64);
    let mut qs = Vec::with_capacity(depth);
    let mut cs = Vec::with_capacity(depth);
    for _ in 0..depth {
        let a11 = sigma_b2 + sigma_w2 * q1;
        let a22 = sigma_b2 + sigma_w2 * q2;
        let a12 = sigma_b2 + sigma_w2 * k12;
        if !a11.is_finite() || !a22.is_finite() || a11 > DIVERGENCE_BOUND || a22 > DIVERGENCE_BOUND
        {
            return None;
        }
        qs.push(a11);
        q1 = phi_self_unchecked(a11, nl);
        q2 = phi_self_unchecked(a22, nl);
        k12 = BivariateMoment {
            k_xx: a11,
            k_xy: a12,
            k_yy: a22,
        }
        .phi_expectation(nl)
        .expect("variances stay nonnegative");
        let denom = (q1 * q2).sqrt();
        cs.push(if denom == 0.0 {
            1.0
        } else {
            (k12 / denom).clamp(-1.0, 1.0)
        });
    }
    Some(PhaseTrajectory { q: qs, c: cs })
}

/// Least-squares slope of `ln |c_l - c*|` over the last fifth of the
/// trajectory; `None` when the residuals hit zero (converged exactly).
fn convergence_rate(cs: &[f64], c_star: f64) -> Option<f64> {
    let window_start = (cs.len() as f64 * 0.8) as usize;
    let pts: Vec<(f64, f64)> = cs
        .iter()
        .enumerate()
        .take(cs.len().saturating_sub(1)) // final point defines c*, residual 0
        .skip(window_start)
        .filter_map(|(l, &c)| {
            let r = (c - c_star).abs();
            (r > 1e-300).then(|| (l as f64, r.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    (denom != 0.0).then(|| (n * sxy - sx * sy) / denom)
}

/// Classifies one `(sigma_w2, sigma_b2)` cell.
pub fn phase_point(sigma_w2: f64, sigma_b2: f64, nl: Nonlinearity, depth: usize) -> PhasePoint {
    let Some(traj) = phase_trajectory(sigma_w2, sigma_b2, nl, depth) else {
        return PhasePoint {
            sigma_w2,
            sigma_b2,
            depth,
            q_star: None,
            c_star: None,
            rate: None,
            label: PhaseLabel::Divergent,
        };
    };
    let q_star = *traj.q.last().expect("depth >= 1");
    let c_star = *traj.c.last().expect("depth >= 1");
    let rate = convergence_rate(&traj.c, c_star);
    let label = match rate {
        Some(r) if r.abs() < CRITICAL_RATE => PhaseLabel::CriticalBand,
        _ if c_star >= 1.0 - ORDERED_TOL => PhaseLabel::Ordered,
        _ => PhaseLabel::Chaotic,
    };
    PhasePoint {
        sigma_w2,
        sigma_b2,
        depth,
        q_star: Some(q_star),
        c_star: Some(c_star),
        rate,
        label,
    }
}

/// Uniform grid over variance ranges, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub sigma_w2: Vec<f64>,
    pub sigma_b2: Vec<f64>,
}

impl PhaseGrid {
    pub fn uniform(
        w2_range: (f64, f64),
        w2_steps: usize,
        b2_range: (f64, f64),
        b2_steps: usize,
    ) -> Result<Self> {
        let axis = |(lo, hi): (f64, f64), steps: usize, positive: bool| -> Result<Vec<f64>> {
            if steps == 0 {
                return Err(Error::InvalidArch(
                    "phase grid needs at least one step".into(),
                ));
            }
            if hi < lo {
                return Err(Error::InvalidArch("phase grid range is inverted".into()));
            }
            if positive && lo <= 0.0 {
                return Err(Error::InvalidArch("sigma_w2 grid must be positive".into()));
            }
            if !positive && lo < 0.0 {
                return Err(Error::InvalidArch(
                    "sigma_b2 grid must be nonnegative".into(),
                ));
            }
            if steps == 1 {
                return Ok(vec![lo]);
            }
            Ok((0..steps)
                .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                .collect())
        };
        Ok(PhaseGrid {
            sigma_w2: axis(w2_range, w2_steps, true)?,
            sigma_b2: axis(b2_range, b2_steps, false)?,
        })
    }
}

/// One [`PhasePoint`] per grid cell, `sigma_w2`-major.
pub fn phase_scan(grid: &PhaseGrid, nl: Nonlinearity, depth: usize) -> Vec<PhasePoint> {
    let cells: Vec<(f64, f64)> = grid
        .sigma_w2
        .iter()
        .flat_map(|&w2| grid.sigma_b2.iter().map(move |&b2| (w2, b2)))
        .collect();
    cells
        .par_iter()
        .map(|&(w2, b2)| phase_point(w2, b2, nl, depth))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_weights_order() {
        let p = phase_point(0.1, 1.0, Nonlinearity::Erf, 1000);
        assert_eq!(p.label, PhaseLabel::Ordered);
        assert!(p.c_star.unwrap() >= 1.0 - 1e-6);
    }

    #[test]
    fn vanishing_weights_order_in_one_step() {
        let traj = phase_trajectory(1e-12, 0.5, Nonlinearity::Erf, 3).unwrap();
        assert!(traj.c[0] > 1.0 - 1e-9, "c_1 = {}", traj.c[0]);
    }

    #[test]
    fn erf_fixed_point_parameterization_pins_variance() {
        // Four-decimal q* = 1 parameterization: the pre-activation
        // variance settles at 1 within 1e-3 and stays there.
        let traj = phase_trajectory(1.7562, 0.1841, Nonlinearity::Erf, 200).unwrap();
        for (l, &q) in traj.q.iter().enumerate().skip(16) {
            assert!((q - 1.0).abs() < 1e-3, "q_{l} = {q}");
        }
        let p = phase_point(1.7562, 0.1841, Nonlinearity::Erf, 200);
        assert!((p.q_star.unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn large_weights_chaos() {
        let p = phase_point(4.5, 0.05, Nonlinearity::Erf, 2000);
        assert_eq!(p.label, PhaseLabel::Chaotic, "{p:?}");
        assert!(p.c_star.unwrap() < 1.0 - 1e-6);
    }

    #[test]
    fn supercritical_relu_diverges() {
        let p = phase_point(3.0, 0.1, Nonlinearity::Relu, 500);
        assert_eq!(p.label, PhaseLabel::Divergent);
        assert_eq!(p.c_star, None);
        assert_eq!(p.q_star, None);
    }

    #[test]
    fn grid_is_inclusive_and_validated() {
        let g = PhaseGrid::uniform((0.1, 5.0), 50, (0.0, 2.0), 50).unwrap();
        assert_eq!(g.sigma_w2.len(), 50);
        assert_eq!(g.sigma_w2[0], 0.1);
        assert_eq!(*g.sigma_w2.last().unwrap(), 5.0);
        assert_eq!(g.sigma_b2[0], 0.0);
        assert_eq!(*g.sigma_b2.last().unwrap(), 2.0);
        assert!(PhaseGrid::uniform((0.0, 1.0), 5, (0.0, 1.0), 5).is_err());
    }

    #[test]
    fn scan_orders_small_weights_first() {
        let g = PhaseGrid::uniform((0.1, 5.0), 10, (0.1, 0.1), 1).unwrap();
        let pts = phase_scan(&g, Nonlinearity::Erf, 1500);
        assert_eq!(pts.len(), 10);
        let ordered_max = pts
            .iter()
            .filter(|p| p.label == PhaseLabel::Ordered)
            .map(|p| p.sigma_w2)
            .fold(f64::NEG_INFINITY, f64::max);
        let chaotic_min = pts
            .iter()
            .filter(|p| p.label == PhaseLabel::Chaotic)
            .map(|p| p.sigma_w2)
            .fold(f64::INFINITY, f64::min);
        assert!(ordered_max.is_finite() && chaotic_min.is_finite());
        assert!(
            ordered_max < chaotic_min,
            "ordered up to {ordered_max}, chaos from {chaotic_min}"
        );
    }
}
