//! Monotone ascent with a backtracking line search.
//!
//! A step is accepted only when the objective does not decrease; otherwise
//! the step length is halved. After an accepted step the next trial length
//! doubles, capped at `max_step`. Problems may split their coordinates into
//! blocks; each iteration then takes one line-searched step per block, in
//! order, with a separate step length for each.

use std::ops::Range;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentSettings {
    pub step_size: f64,
    pub max_step: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Decay of an exponential moving average applied to the objective
    /// before the relative-change test. `None` tests the raw values.
    pub smoothing: Option<f64>,
    pub max_halvings: u32,
}

impl Default for AscentSettings {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_step: 1.0,
            max_iters: 5000,
            rel_tol: 1e-7,
            smoothing: None,
            max_halvings: 60,
        }
    }
}

pub trait AscentProblem {
    /// Called once at the start of every iteration with the current point,
    /// before any evaluation.
    fn begin_iteration(&mut self, _iteration: usize, _x: &DVector<f64>) {}

    /// Objective at `x`, or `None` when `x` is outside the domain.
    fn value(&mut self, x: &DVector<f64>) -> Option<f64>;

    /// Objective and ascent direction at `x`.
    fn value_and_direction(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;

    /// Coordinate blocks stepped in turn. Empty means a single block.
    fn blocks(&self) -> Vec<Range<usize>> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentOutcome {
    pub x: DVector<f64>,
    /// Objective after each accepted iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("objective or gradient became non-finite at iteration {iteration}")]
pub struct NonFiniteError {
    pub iteration: usize,
}

pub fn ascend(
    problem: &mut impl AscentProblem,
    x0: DVector<f64>,
    settings: &AscentSettings,
) -> Result<AscentOutcome, NonFiniteError> {
    let mut blocks = problem.blocks();
    if blocks.is_empty() {
        blocks.push(0..x0.len());
    }
    let single = blocks.len() == 1;
    let mut x = x0;
    let mut trace = Vec::new();
    let mut steps = vec![settings.step_size; blocks.len()];
    let mut tracked: Option<f64> = None;

    for iteration in 0..settings.max_iters {
        problem.begin_iteration(iteration, &x);
        let mut current = None;
        let mut moved = false;
        for (block, step) in blocks.iter().zip(steps.iter_mut()) {
            let (f, mut dir) = match problem.value_and_direction(&x) {
                Some((f, d)) if f.is_finite() && d.iter().all(|v| v.is_finite()) => (f, d),
                _ => return Err(NonFiniteError { iteration }),
            };
            if tracked.is_none() {
                tracked = Some(f);
            }
            if !single {
                for (k, v) in dir.iter_mut().enumerate() {
                    if !block.contains(&k) {
                        *v = 0.0;
                    }
                }
            }
            current = Some(f);
            let mut trial = *step;
            for _ in 0..=settings.max_halvings {
                let cand = &x + &dir * trial;
                if let Some(fc) = problem.value(&cand) {
                    if fc.is_finite() && fc >= f {
                        x = cand;
                        current = Some(fc);
                        moved = true;
                        *step = (2.0 * trial).min(settings.max_step);
                        break;
                    }
                }
                trial *= 0.5;
            }
        }
        let fc = current.expect("at least one block");
        trace.push(fc);
        if !moved {
            // No ascent even at a vanishing step: stationary to rounding.
            return Ok(AscentOutcome { x, trace, converged: true });
        }

        let prev = tracked.unwrap_or(fc);
        let next = match settings.smoothing {
            Some(decay) => decay * prev + (1.0 - decay) * fc,
            None => fc,
        };
        tracked = Some(next);
        if ((next - prev) / prev).abs() < settings.rel_tol {
            return Ok(AscentOutcome { x, trace, converged: true });
        }
    }
    Ok(AscentOutcome { x, trace, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl AscentProblem for Quadratic {
        fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
            Some(-10.0 - (x[0] - 1.0).powi(2) - 4.0 * (x[1] + 2.0).powi(2))
        }
        fn value_and_direction(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            let g = DVector::from_vec(vec![-2.0 * (x[0] - 1.0), -8.0 * (x[1] + 2.0)]);
            Some((self.value(x)?, g))
        }
    }

    #[test]
    fn finds_quadratic_max_with_monotone_trace() {
        let settings = AscentSettings { rel_tol: 1e-12, ..Default::default() };
        let out = ascend(&mut Quadratic, DVector::zeros(2), &settings).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] + 2.0).abs() < 1e-4);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_iterations_returns_start() {
        let settings = AscentSettings { max_iters: 0, ..Default::default() };
        let x0 = DVector::from_vec(vec![3.0, 3.0]);
        let out = ascend(&mut Quadratic, x0.clone(), &settings).unwrap();
        assert_eq!(out.x, x0);
        assert!(out.trace.is_empty() && !out.converged);
    }

    struct Blocked;

    impl AscentProblem for Blocked {
        fn value(&mut self, x: &DVector<f64>) -> Option<f64> {
            Quadratic.value(x)
        }
        fn value_and_direction(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            Quadratic.value_and_direction(x)
        }
        fn blocks(&self) -> Vec<Range<usize>> {
            vec![0..1, 1..2]
        }
    }

    #[test]
    fn block_steps_reach_the_same_maximum() {
        // A unit step reflects the first coordinate onto an equal value.
        let settings = AscentSettings { rel_tol: 1e-12, max_step: 0.4, ..Default::default() };
        let out = ascend(&mut Blocked, DVector::zeros(2), &settings).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] + 2.0).abs() < 1e-4);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    struct Broken;

    impl AscentProblem for Broken {
        fn value(&mut self, _: &DVector<f64>) -> Option<f64> {
            Some(f64::NAN)
        }
        fn value_and_direction(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
            Some((f64::NAN, x.clone()))
        }
    }

    #[test]
    fn reports_non_finite_iteration() {
        let err = ascend(&mut Broken, DVector::zeros(1), &AscentSettings::default()).unwrap_err();
        assert_eq!(err.iteration, 0);
    }
}
