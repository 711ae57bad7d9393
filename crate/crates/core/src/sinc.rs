//! Unnormalized `sinc(u) = sin(u)/u` and the beat factor built from it.

/// Below this |u| the Taylor series is used; the truncation error is O(u^8).
const SERIES_CUTOFF: f64 = 1e-3;

pub fn sinc(u: f64) -> f64 {
    sinc_derivs(u).0
}

/// `(sinc(u), sinc'(u), sinc''(u))`.
pub fn sinc_derivs(u: f64) -> (f64, f64, f64) {
    if u.abs() < SERIES_CUTOFF {
        let u2 = u * u;
        let s = 1.0 - u2 / 6.0 + u2 * u2 / 120.0;
        let d1 = u * (-1.0 / 3.0 + u2 / 30.0 - u2 * u2 / 840.0);
        let d2 = -1.0 / 3.0 + u2 / 10.0 - u2 * u2 / 168.0;
        (s, d1, d2)
    } else {
        let (sn, cs) = u.sin_cos();
        let s = sn / u;
        let d1 = (cs - s) / u;
        let d2 = -s - 2.0 * d1 / u;
        (s, d1, d2)
    }
}

/// Pixel envelope `sinc²(dx·δ/2)` and its first two derivatives in `dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub value: f64,
    pub d_dx: f64,
    pub d2_dx2: f64,
    /// Derivative with respect to δ, needed by the beat-curve Jacobian.
    pub d_delta: f64,
}

pub fn envelope(delta: f64, dx: f64) -> Envelope {
    let u = 0.5 * dx * delta;
    let (s, s1, s2) = sinc_derivs(u);
    // d/du sinc² = 2 s s1, d²/du² sinc² = 2 (s1² + s s2)
    let du = 2.0 * s * s1;
    let du2 = 2.0 * (s1 * s1 + s * s2);
    Envelope {
        value: s * s,
        d_dx: du * 0.5 * delta,
        d2_dx2: du2 * 0.25 * delta * delta,
        d_delta: du * 0.5 * dx,
    }
}

/// Interference factor `g(dx) = V·sinc²(dx·δ/2)·cos(Δk·dx)` with its
/// first and second derivatives in `dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beat {
    pub g: f64,
    pub dg: f64,
    pub d2g: f64,
}

pub fn beat(visibility: f64, delta: f64, delta_k: f64, dx: f64) -> Beat {
    beat_with_envelope(visibility, &envelope(delta, dx), delta_k, dx)
}

pub(crate) fn beat_with_envelope(visibility: f64, env: &Envelope, delta_k: f64, dx: f64) -> Beat {
    let (sn, cs) = (delta_k * dx).sin_cos();
    let g = visibility * env.value * cs;
    let dg = visibility * (env.d_dx * cs - env.value * delta_k * sn);
    let d2g = visibility
        * (env.d2_dx2 * cs - 2.0 * env.d_dx * delta_k * sn - env.value * delta_k * delta_k * cs);
    Beat { g, dg, d2g }
}

/// `1 - sinc(u)` without cancellation near `u = 0`.
pub fn one_minus_sinc(u: f64) -> f64 {
    if u.abs() < 0.1 {
        let u2 = u * u;
        u2 / 6.0 * (1.0 - u2 / 20.0 * (1.0 - u2 / 42.0 * (1.0 - u2 / 72.0)))
    } else {
        1.0 - u.sin() / u
    }
}

/// `(1 - g, 1 + g)` for the beat factor, each evaluated as a sum of
/// non-negative parts so that neither loses precision when `g → ±1`.
pub fn beat_complements(visibility: f64, delta: f64, delta_k: f64, dx: f64) -> (f64, f64) {
    let u = 0.5 * dx * delta;
    let s1 = sinc(u);
    let one_minus_env = one_minus_sinc(u) * (1.0 + s1);
    let env = s1 * s1;
    let half = 0.5 * delta_k * dx;
    let sin_half = half.sin();
    let cos_half = half.cos();
    // 1 - s cos θ = (1 - s) + 2 s sin²(θ/2); 1 + s cos θ = (1 - s) + 2 s cos²(θ/2)
    let minus = one_minus_env + 2.0 * env * sin_half * sin_half;
    let plus = one_minus_env + 2.0 * env * cos_half * cos_half;
    let rest = 1.0 - visibility;
    (rest + visibility * minus, rest + visibility * plus)
}
