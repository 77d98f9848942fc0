//! Central finite-difference verification of hand-written backward passes.
//!
//! An [`Objective`] is a scalar function of a flat parameter vector together
//! with its analytic gradient. The checker compares the two coordinate by
//! coordinate with relative error `|fd - analytic| / max(1, |analytic|)`.
//!
//! Piecewise-linear pieces of the pipeline (max reductions, the rectifier)
//! are not differentiable at ties. A probe is rejected as [`Error::AtKink`]
//! when the objective reports a tie closer than `10 * step`, or when the
//! forward and backward one-sided quotients disagree, which happens exactly
//! when `x ± step` straddles a kink.

use rand::Rng;

use crate::error::{Error, Result};

pub trait Objective {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Smallest distance from `x` to a tie or rectifier kink, measured in the
    /// space where the non-smoothness lives. Smooth objectives keep the default.
    fn kink_gap(&self, _x: &[f64]) -> Result<f64> {
        Ok(f64::INFINITY)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// `(f(x + step e_i) - f(x - step e_i)) / (2 step)`.
pub fn central_difference(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    index: usize,
    step: f64,
) -> Result<f64> {
    let mut probe = x.to_vec();
    probe[index] = x[index] + step;
    let plus = f(&probe)?;
    probe[index] = x[index] - step;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * step))
}

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

impl GradCheck {
    pub fn new(step: f64, tolerance: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
        }
        Ok(Self { step, tolerance })
    }

    /// Checks `objective` at `x`, on every coordinate or on `coords` only.
    pub fn check(
        &self,
        objective: &dyn Objective,
        x: &[f64],
        coords: Option<&[usize]>,
    ) -> Result<GradCheckReport> {
        if x.len() != objective.dim() {
            return Err(Error::InvalidArgument(format!(
                "point has {} coordinates, objective {} expects {}",
                x.len(),
                objective.name(),
                objective.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gradient check at a non-finite point".into()));
        }
        let gap = objective.kink_gap(x)?;
        if gap < 10.0 * self.step {
            return Err(Error::AtKink {
                op: objective.name(),
                gap,
            });
        }
        let analytic = objective.gradient(x)?;
        let center = objective.value(x)?;
        let all: Vec<usize>;
        let coords = match coords {
            Some(c) => c,
            None => {
                all = (0..x.len()).collect();
                &all
            }
        };

        let mut probe = x.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: coords.first().copied().unwrap_or(0),
            checked: 0,
            passed: true,
        };
        for &i in coords {
            probe[i] = x[i] + self.step;
            let plus = objective.value(&probe)?;
            probe[i] = x[i] - self.step;
            let minus = objective.value(&probe)?;
            probe[i] = x[i];

            let scale = analytic[i].abs().max(1.0);
            let forward = (plus - center) / self.step;
            let backward = (center - minus) / self.step;
            if (forward - backward).abs() > self.tolerance * scale {
                return Err(Error::AtKink {
                    op: format!("{} (coordinate {i})", objective.name()),
                    gap: (forward - backward).abs(),
                });
            }
            let numeric = (plus - minus) / (2.0 * self.step);
            let err = relative_error(numeric, analytic[i]);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_index = i;
            }
            report.checked += 1;
        }
        report.passed = report.max_rel_error <= self.tolerance;
        Ok(report)
    }
}

/// One randomly drawn probe: an objective, the point, and optionally the
/// subset of coordinates to difference.
pub struct Probe {
    pub objective: Box<dyn Objective>,
    pub point: Vec<f64>,
    pub coords: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub resampled: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs `instances` independent probes produced by `draw`. Probes landing on
/// a kink are redrawn (up to `max_redraws` in total) rather than failed.
pub fn check_random<R: Rng>(
    name: &str,
    check: &GradCheck,
    instances: usize,
    max_redraws: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Result<Probe>,
) -> Result<SuiteEntry> {
    let mut entry = SuiteEntry {
        name: name.to_string(),
        instances: 0,
        resampled: 0,
        coordinates: 0,
        max_rel_error: 0.0,
        passed: true,
    };
    while entry.instances < instances {
        let probe = draw(rng)?;
        match check.check(probe.objective.as_ref(), &probe.point, probe.coords.as_deref()) {
            Ok(report) => {
                entry.instances += 1;
                entry.coordinates += report.checked;
                entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
                entry.passed &= report.passed;
            }
            Err(Error::AtKink { .. }) => {
                entry.resampled += 1;
                if entry.resampled > max_redraws {
                    return Err(Error::Numeric(format!(
                        "{name}: gave up after {} probes landed on kinks",
                        entry.resampled
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl Objective for Quadratic {
        fn name(&self) -> String {
            "quadratic".into()
        }
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(x[0] * x[0] + 3.0 * x[0] * x[1])
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]])
        }
    }

    struct WrongGradient;

    impl Objective for WrongGradient {
        fn name(&self) -> String {
            "wrong".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(2.0 * x[0])
        }
        fn gradient(&self, _x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![2.1])
        }
    }

    struct Abs;

    impl Objective for Abs {
        fn name(&self) -> String {
            "abs".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(x[0].abs())
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x[0].signum()])
        }
    }

    #[test]
    fn smooth_objective_passes() {
        let report = GradCheck::default().check(&Quadratic, &[0.3, -0.7], None).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn wrong_gradient_fails() {
        let report = GradCheck::default().check(&WrongGradient, &[0.5], None).unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_error - 0.1 / 2.1).abs() < 1e-6);
    }

    #[test]
    fn straddled_kink_is_detected() {
        let check = GradCheck::default();
        let err = check.check(&Abs, &[2e-7], None).unwrap_err();
        assert!(matches!(err, Error::AtKink { .. }));
        assert!(check.check(&Abs, &[0.25], None).unwrap().passed);
    }

    #[test]
    fn central_difference_of_cube() {
        let f = |x: &[f64]| -> Result<f64> { Ok(x[0].powi(3)) };
        let d = central_difference(&f, &[2.0], 0, 1e-5).unwrap();
        assert!((d - 12.0).abs() < 1e-8);
    }
}
