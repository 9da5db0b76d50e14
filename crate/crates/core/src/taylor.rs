//! Univariate Taylor jets: a number together with its first four derivatives,
//! propagated exactly through arithmetic and elementary functions. Keeps the
//! manufactured forcing terms free of hand-expanded derivative formulas.

use std::ops::{Add, Mul, Neg, Sub};

pub const JET_LEN: usize = 5;

/// Taylor coefficients a_k = f⁽ᵏ⁾(x)/k! of a function at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet(pub [f64; JET_LEN]);

impl Jet {
    pub fn constant(c: f64) -> Jet {
        let mut a = [0.0; JET_LEN];
        a[0] = c;
        Jet(a)
    }

    /// The identity function evaluated at `x`.
    pub fn variable(x: f64) -> Jet {
        let mut a = [0.0; JET_LEN];
        a[0] = x;
        a[1] = 1.0;
        Jet(a)
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }

    /// k-th derivative (k! times the k-th coefficient).
    pub fn deriv(&self, k: usize) -> f64 {
        const FACT: [f64; JET_LEN] = [1.0, 1.0, 2.0, 6.0, 24.0];
        self.0[k] * FACT[k]
    }

    pub fn scale(self, s: f64) -> Jet {
        Jet(self.0.map(|a| s * a))
    }

    pub fn square(self) -> Jet {
        self * self
    }

    /// exp(f) by the standard convolution recurrence e_k = (1/k)·Σ j·f_j·e_{k−j}.
    pub fn exp(self) -> Jet {
        let f = self.0;
        let mut e = [0.0; JET_LEN];
        e[0] = f[0].exp();
        for k in 1..JET_LEN {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += j as f64 * f[j] * e[k - j];
            }
            e[k] = acc / k as f64;
        }
        Jet(e)
    }

    /// Simultaneous sin(f), cos(f) via the coupled recurrences
    /// s_k = (1/k)·Σ j·f_j·c_{k−j}, c_k = −(1/k)·Σ j·f_j·s_{k−j}.
    pub fn sin_cos(self) -> (Jet, Jet) {
        let f = self.0;
        let mut s = [0.0; JET_LEN];
        let mut c = [0.0; JET_LEN];
        s[0] = f[0].sin();
        c[0] = f[0].cos();
        for k in 1..JET_LEN {
            let (mut sa, mut ca) = (0.0, 0.0);
            for j in 1..=k {
                sa += j as f64 * f[j] * c[k - j];
                ca += j as f64 * f[j] * s[k - j];
            }
            s[k] = sa / k as f64;
            c[k] = -ca / k as f64;
        }
        (Jet(s), Jet(c))
    }

    pub fn sin(self) -> Jet {
        self.sin_cos().0
    }

    pub fn cos(self) -> Jet {
        self.sin_cos().1
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        let mut a = self.0;
        for (x, y) in a.iter_mut().zip(rhs.0) {
            *x += y;
        }
        Jet(a)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        let mut a = self.0;
        for (x, y) in a.iter_mut().zip(rhs.0) {
            *x -= y;
        }
        Jet(a)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet(self.0.map(|a| -a))
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut a = [0.0; JET_LEN];
        for k in 0..JET_LEN {
            let mut acc = 0.0;
            for j in 0..=k {
                acc += self.0[j] * rhs.0[k - j];
            }
            a[k] = acc;
        }
        Jet(a)
    }
}
