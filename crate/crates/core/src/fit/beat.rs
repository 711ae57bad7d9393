use super::ScanPoint;
use crate::error::{invalid, Error, Result};
use crate::model::Branch;
use crate::sinc;
use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameter order used by the Jacobian, the guess array and the covariance.
pub const PARAM_NAMES: [&str; 4] = ["amplitude", "visibility", "delta", "delta_k"];

const MIN_POINTS: usize = 8;
const STEP_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-10;
/// Smallest eigenvalue ratio of the scaled normal matrix accepted as full rank.
const RANK_TOL: f64 = 1e-12;
const RESTART_SEED: u64 = 0x5eed_0b3a7;

/// `C(dx) = N (1 ∓ V sinc²(dx δ/2) cos(Δk dx))`, minus for antibunching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatCurve {
    pub branch: Branch,
    pub amplitude: f64,
    pub visibility: f64,
    pub delta: f64,
    pub delta_k: f64,
}

impl BeatCurve {
    fn from_theta(branch: Branch, t: &Vector4<f64>) -> Self {
        BeatCurve {
            branch,
            amplitude: t[0],
            visibility: t[1],
            delta: t[2],
            delta_k: t[3],
        }
    }

    pub fn params(&self) -> [f64; 4] {
        [self.amplitude, self.visibility, self.delta, self.delta_k]
    }

    pub fn value(&self, dx: f64) -> f64 {
        self.derivs(dx).0
    }

    /// `(C, dC/dx, d²C/dx²)`.
    pub fn derivs(&self, dx: f64) -> (f64, f64, f64) {
        let b = sinc::beat(self.visibility, self.delta, self.delta_k, dx);
        let s = self.branch.sign();
        let n = self.amplitude;
        (n * (1.0 + s * b.g), n * s * b.dg, n * s * b.d2g)
    }

    /// Gradient of `C(dx)` in the order of [`PARAM_NAMES`].
    pub fn jacobian(&self, dx: f64) -> [f64; 4] {
        let env = sinc::envelope(self.delta, dx);
        let (sn, cs) = (self.delta_k * dx).sin_cos();
        let s = self.branch.sign();
        let n = self.amplitude;
        let v = self.visibility;
        [
            1.0 + s * v * env.value * cs,
            n * s * env.value * cs,
            n * s * v * env.d_delta * cs,
            -n * s * v * env.value * dx * sn,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Weight residuals by `1/err²`; otherwise all points count equally.
    pub weighted: bool,
    pub max_iterations: usize,
    /// Extra starts jittered around the initial guess.
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            weighted: true,
            max_iterations: 500,
            restarts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatFitParams {
    pub curve: BeatCurve,
    /// Parameter covariance, order of [`PARAM_NAMES`]. NaN when degenerate.
    pub covariance: [[f64; 4]; 4],
    /// `sqrt(Σ r²)` of the (weighted) residuals.
    pub residual_norm: f64,
    pub n_points: usize,
    pub iterations: usize,
    pub degenerate: bool,
}

impl BeatFitParams {
    pub fn std_errors(&self) -> [f64; 4] {
        std::array::from_fn(|k| self.covariance[k][k].sqrt())
    }

    /// `χ²/(n − 4)`, meaningful for weighted fits.
    pub fn reduced_chi2(&self) -> f64 {
        self.residual_norm.powi(2) / (self.n_points as f64 - 4.0)
    }
}

struct Problem<'a> {
    points: &'a [ScanPoint],
    weights: Vec<f64>,
    branch: Branch,
}

impl Problem<'_> {
    fn residuals(&self, t: &Vector4<f64>) -> Vec<f64> {
        let c = BeatCurve::from_theta(self.branch, t);
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * (p.mean - c.value(p.dx)))
            .collect()
    }

    fn cost(&self, t: &Vector4<f64>) -> f64 {
        0.5 * self.residuals(t).iter().map(|r| r * r).sum::<f64>()
    }

    /// Normal matrix `JᵀJ`, gradient `Jᵀr`, `‖J‖_F` and `‖r‖`, with `J` the
    /// weighted model Jacobian.
    fn normal(&self, t: &Vector4<f64>) -> (Matrix4<f64>, Vector4<f64>, f64, f64) {
        let c = BeatCurve::from_theta(self.branch, t);
        let mut a = Matrix4::zeros();
        let mut g = Vector4::zeros();
        let mut jf = 0.0;
        let mut rn = 0.0;
        for (p, w) in self.points.iter().zip(&self.weights) {
            let j = Vector4::from(c.jacobian(p.dx)) * *w;
            let r = w * (p.mean - c.value(p.dx));
            a += j * j.transpose();
            g += j * r;
            jf += j.norm_squared();
            rn += r * r;
        }
        (a, g, jf.sqrt(), rn.sqrt())
    }
}

struct Outcome {
    theta: Vector4<f64>,
    cost: f64,
    iterations: usize,
}

/// Levenberg-Marquardt with Marquardt diagonal scaling and Nielsen's
/// damping update.
fn levenberg_marquardt(
    prob: &Problem,
    start: Vector4<f64>,
    max_iterations: usize,
) -> Result<Outcome> {
    let mut theta = start;
    let mut cost = prob.cost(&theta);
    if !cost.is_finite() {
        return Err(Error::NonConvergence { iterations: 0 });
    }
    let (mut a, mut g, mut jn, mut rn) = prob.normal(&theta);
    let mut lambda = 1e-3 * a.diagonal().max();
    let mut nu = 2.0;
    for it in 1..=max_iterations {
        if g.amax() <= GRAD_TOL * jn * rn {
            return Ok(Outcome {
                theta,
                cost,
                iterations: it - 1,
            });
        }
        let floor = 1e-12 * a.diagonal().max().max(f64::MIN_POSITIVE);
        let d = a.diagonal().map(|x| x.max(floor));
        let mut damped = a;
        for k in 0..4 {
            damped[(k, k)] += lambda * d[k];
        }
        let Some(h) = damped.cholesky().map(|ch| ch.solve(&g)) else {
            lambda *= nu;
            nu *= 2.0;
            continue;
        };
        let trial = theta + h;
        let new_cost = prob.cost(&trial);
        let predicted = 0.5 * h.dot(&(h.component_mul(&d) * lambda + g));
        let rho = if predicted > 0.0 {
            (cost - new_cost) / predicted
        } else {
            -1.0
        };
        if new_cost.is_finite() && rho > 0.0 {
            let small_step = h.norm() <= STEP_TOL * (theta.norm() + STEP_TOL);
            theta = trial;
            cost = new_cost;
            (a, g, jn, rn) = prob.normal(&theta);
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            if small_step {
                return Ok(Outcome {
                    theta,
                    cost,
                    iterations: it,
                });
            }
        } else {
            lambda *= nu;
            nu *= 2.0;
            if !lambda.is_finite() || lambda > 1e30 * a.diagonal().max().max(1.0) {
                // no downhill step is representable; accept if the gradient
                // is at rounding level
                if g.amax() <= 1e-8 * jn * rn {
                    return Ok(Outcome {
                        theta,
                        cost,
                        iterations: it,
                    });
                }
                return Err(Error::NonConvergence { iterations: it });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
    })
}

/// Seeds `(N, V)` by linear least squares with `δ` and `Δk` held at the
/// supplied values.
pub fn initial_guess(
    points: &[ScanPoint],
    branch: Branch,
    delta_k: f64,
    delta: f64,
) -> Result<[f64; 4]> {
    if points.is_empty() {
        return Err(invalid("no scan points"));
    }
    // C = N + a·u with u = ±sinc² cos and a = N V
    let s = branch.sign();
    let (mut sw, mut su, mut suu, mut sy, mut suy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let w = if p.err > 0.0 {
            1.0 / (p.err * p.err)
        } else {
            1.0
        };
        let u = s * sinc::envelope(delta, p.dx).value * (delta_k * p.dx).cos();
        sw += w;
        su += w * u;
        suu += w * u * u;
        sy += w * p.mean;
        suy += w * u * p.mean;
    }
    let det = sw * suu - su * su;
    let mean = sy / sw;
    let (n, v) = if det.abs() > 1e-12 * sw * suu.max(f64::MIN_POSITIVE) {
        let n = (suu * sy - su * suy) / det;
        let a = (sw * suy - su * sy) / det;
        if n > 0.0 {
            (n, (a / n).clamp(0.01, 1.0))
        } else {
            (mean, 0.1)
        }
    } else {
        (mean, 0.1)
    };
    if !(n > 0.0) {
        return Err(invalid("scan counts have non-positive mean"));
    }
    Ok([n, v, delta, delta_k])
}

fn covariance(a: &Matrix4<f64>, scale: f64) -> Option<[[f64; 4]; 4]> {
    let inv = a.try_inverse()?;
    Some(std::array::from_fn(|r| {
        std::array::from_fn(|c| inv[(r, c)] * scale)
    }))
}

/// Weighted nonlinear least squares of the beat curve to one channel scan.
///
/// The best of `opts.restarts + 1` starts is kept. On exit the curve is
/// canonicalized to `δ, Δk ≥ 0` (the model is even in both) and `V` is
/// clamped into `[0, 1]`. A rank-deficient normal matrix at the optimum is
/// reported as [`Error::RankDeficient`] carrying the partial fit.
pub fn fit_beat_curve(
    points: &[ScanPoint],
    branch: Branch,
    guess: [f64; 4],
    opts: &FitOptions,
) -> Result<BeatFitParams> {
    if points.len() < MIN_POINTS {
        return Err(invalid(format!(
            "need at least {MIN_POINTS} scan points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !(p.err > 0.0 && p.err.is_finite())) {
        return Err(invalid(format!(
            "scan error at dx = {} must be positive, got {}",
            p.dx, p.err
        )));
    }
    if points
        .iter()
        .any(|p| !p.dx.is_finite() || !p.mean.is_finite())
    {
        return Err(invalid("scan points must be finite"));
    }
    if !(guess[0] > 0.0) || guess.iter().any(|x| !x.is_finite()) {
        return Err(invalid(format!(
            "initial guess {guess:?} must be finite with positive amplitude"
        )));
    }
    let weights = points
        .iter()
        .map(|p| if opts.weighted { 1.0 / p.err } else { 1.0 })
        .collect();
    let prob = Problem {
        points,
        weights,
        branch,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let base = Vector4::from(guess);
    let mut starts = vec![base];
    for _ in 0..opts.restarts {
        let mut u = || rng.random_range(-1.0..=1.0);
        starts.push(Vector4::new(
            base[0],
            (base[1] * (1.0 + 0.5 * u())).clamp(0.01, 1.0),
            base[2] * (1.0 + 0.25 * u()),
            base[3] * (1.0 + 0.04 * u()),
        ));
    }
    let mut best: Option<Outcome> = None;
    let mut last_err = None;
    let mut total_iterations = 0;
    for start in starts {
        match levenberg_marquardt(&prob, start, opts.max_iterations) {
            Ok(out) => {
                total_iterations += out.iterations;
                if best.as_ref().is_none_or(|b| out.cost < b.cost) {
                    best = Some(out);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some(best) = best else {
        return Err(last_err.unwrap_or(Error::NonConvergence { iterations: 0 }));
    };

    let theta = best.theta;
    let (a, _, _, rn) = prob.normal(&theta);
    let n = points.len();
    let scale = if opts.weighted {
        1.0
    } else {
        rn * rn / (n as f64 - 4.0).max(1.0)
    };
    // columns scaled to natural magnitudes: N by itself, V by its range 1,
    // δ and Δk by themselves
    let units = Vector4::new(theta[0].abs(), 1.0, theta[2].abs(), theta[3].abs()).map(|x| {
        if x > 0.0 {
            x
        } else {
            1.0
        }
    });
    let scaled = Matrix4::from_fn(|r, c| a[(r, c)] * units[r] * units[c]);
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let degenerate = !(hi > 0.0) || lo <= RANK_TOL * hi;
    let cov = if degenerate {
        None
    } else {
        covariance(&a, scale)
    };

    let mut curve = BeatCurve::from_theta(branch, &theta);
    curve.delta = curve.delta.abs();
    curve.delta_k = curve.delta_k.abs();
    if !(0.0..=1.0).contains(&curve.visibility) {
        if curve.visibility < -1e-9 || curve.visibility > 1.0 + 1e-9 {
            log::warn!(
                "{branch} fit: visibility {} left [0, 1] and was clamped",
                curve.visibility
            );
        }
        curve.visibility = curve.visibility.clamp(0.0, 1.0);
    }
    let result = BeatFitParams {
        curve,
        covariance: cov.unwrap_or([[f64::NAN; 4]; 4]),
        residual_norm: rn,
        n_points: n,
        iterations: total_iterations,
        degenerate: degenerate || cov.is_none(),
    };
    if result.degenerate {
        let reason = if curve.visibility < 1e-6 {
            "visibility is zero, delta and delta_k are unidentifiable".to_string()
        } else {
            format!("normal matrix eigenvalue ratio {:.3e}", lo / hi)
        };
        return Err(Error::RankDeficient {
            reason,
            partial: Box::new(result),
        });
    }
    Ok(result)
}
