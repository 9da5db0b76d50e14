//! Manufactured problems for the convergence and effectivity studies: two
//! space-time solutions of u_t + Δ²u = f with homogeneous essential boundary
//! data on the unit square, plus a steady biharmonic benchmark. The forcing
//! is produced by differentiating the closed-form solution with Taylor jets,
//! not by hand-expanded formulas.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::forms::{SpaceFn, SpaceTimeFn};
use crate::taylor::Jet;

/// Derivatives 0..4 of the spatial factor φ(s) = sin²(πs)·e^{−10 s²}.
fn phi_derivs(s: f64) -> [f64; 5] {
    let v = Jet::variable(s);
    let jet = v.scale(PI).sin().square() * v.square().scale(-10.0).exp();
    [jet.deriv(0), jet.deriv(1), jet.deriv(2), jet.deriv(3), jet.deriv(4)]
}

fn phi_value(s: f64) -> f64 {
    let sn = (PI * s).sin();
    sn * sn * (-10.0 * s * s).exp()
}

/// The two space-time examples. Both vanish at t = 0 and share the separable
/// spatial profile φ(x)·φ(y); they differ in amplitude and time scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example {
    /// u₁ = sin(πt) · 10² · sin²(πx) sin²(πy) e^{−10(x²+y²)}
    U1,
    /// u₂ = sin(20πt) · sin²(πx) sin²(πy) e^{−10(x²+y²)}
    U2,
}

impl Example {
    pub fn name(self) -> &'static str {
        match self {
            Example::U1 => "u1",
            Example::U2 => "u2",
        }
    }

    pub fn amplitude(self) -> f64 {
        match self {
            Example::U1 => 100.0,
            Example::U2 => 1.0,
        }
    }

    /// (T(t), T′(t)) of the separable time factor.
    fn time_factor(self, t: f64) -> (f64, f64) {
        match self {
            Example::U1 => ((PI * t).sin(), PI * (PI * t).cos()),
            Example::U2 => ((20.0 * PI * t).sin(), 20.0 * PI * (20.0 * PI * t).cos()),
        }
    }

    pub fn exact(self, x: f64, y: f64, t: f64) -> f64 {
        self.time_factor(t).0 * self.amplitude() * phi_value(x) * phi_value(y)
    }

    pub fn initial(self, x: f64, y: f64) -> f64 {
        self.exact(x, y, 0.0)
    }

    pub fn time_derivative(self, x: f64, y: f64, t: f64) -> f64 {
        self.time_factor(t).1 * self.amplitude() * phi_value(x) * phi_value(y)
    }

    /// Δ²u via the separable split Δ²(φφ) = φ⁗φ + 2φ″φ″ + φφ⁗.
    pub fn bilaplacian(self, x: f64, y: f64, t: f64) -> f64 {
        let px = phi_derivs(x);
        let py = phi_derivs(y);
        let b = px[4] * py[0] + 2.0 * px[2] * py[2] + px[0] * py[4];
        self.time_factor(t).0 * self.amplitude() * b
    }

    /// f = u_t + Δ²u.
    pub fn forcing(self, x: f64, y: f64, t: f64) -> f64 {
        let px = phi_derivs(x);
        let py = phi_derivs(y);
        let (tf, tfd) = self.time_factor(t);
        let spatial = px[0] * py[0];
        let bilap = px[4] * py[0] + 2.0 * px[2] * py[2] + px[0] * py[4];
        self.amplitude() * (tfd * spatial + tf * bilap)
    }

    pub fn exact_fn(self) -> SpaceTimeFn {
        Arc::new(move |x, y, t| self.exact(x, y, t))
    }

    pub fn forcing_fn(self) -> SpaceTimeFn {
        Arc::new(move |x, y, t| self.forcing(x, y, t))
    }

    pub fn initial_fn(self) -> SpaceFn {
        Arc::new(move |x, y| self.initial(x, y))
    }

    pub fn final_time(self) -> f64 {
        1.0
    }
}

/// Steady benchmark Δ²ũ = φ with ũ = sin²(πx)·sin²(πy): returns (ũ, φ).
pub fn elliptic_benchmark() -> (SpaceFn, SpaceFn) {
    let psi = |s: f64| {
        let v = (PI * s).sin();
        v * v
    };
    let exact: SpaceFn = Arc::new(move |x, y| psi(x) * psi(y));
    let load: SpaceFn = Arc::new(|x, y| {
        let jet = |s: f64| Jet::variable(s).scale(PI).sin().square();
        let (jx, jy) = (jet(x), jet(y));
        jx.deriv(4) * jy.deriv(0) + 2.0 * jx.deriv(2) * jy.deriv(2) + jx.deriv(0) * jy.deriv(4)
    });
    (exact, load)
}
