use serde::{Deserialize, Serialize};

/// A scalar activation with analytic derivatives up to order two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `log(1 + e^z)`.
    #[default]
    Softplus,
    /// `e^z`. Not Lipschitz; kept as a test configuration whose Gaussian
    /// derivative moments are all `√e`, which exercises the third-order path.
    Exp,
    /// `tanh z`, odd, so its even Gaussian derivative moments vanish.
    Tanh,
    /// `c0 + c1 z + c2 z² + c3 z³`.
    CubicPoly { c0: f64, c1: f64, c2: f64, c3: f64 },
    /// User-supplied evaluators. Not serialisable.
    #[serde(skip)]
    Custom(CustomActivation),
}

#[derive(Clone, Copy, Debug)]
pub struct CustomActivation {
    pub name: &'static str,
    pub value: fn(f64) -> f64,
    pub first: fn(f64) -> f64,
    pub second: Option<fn(f64) -> f64>,
}

/// Custom activations compare by name.
impl PartialEq for CustomActivation {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
            Activation::Tanh => "tanh",
            Activation::CubicPoly { .. } => "cubic_poly",
            Activation::Custom(c) => c.name,
        }
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Exp => z.exp(),
            Activation::Tanh => z.tanh(),
            Activation::CubicPoly { c0, c1, c2, c3 } => c0 + z * (c1 + z * (c2 + z * c3)),
            Activation::Custom(c) => (c.value)(z),
        }
    }

    #[inline]
    pub fn first(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus => sigmoid(z),
            Activation::Exp => z.exp(),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::CubicPoly { c1, c2, c3, .. } => c1 + z * (2.0 * c2 + 3.0 * c3 * z),
            Activation::Custom(c) => (c.first)(z),
        }
    }

    /// Second derivative, `None` when the activation does not provide one.
    #[inline]
    pub fn second(&self, z: f64) -> Option<f64> {
        match *self {
            Activation::Softplus => {
                let s = sigmoid(z);
                Some(s * (1.0 - s))
            }
            Activation::Exp => Some(z.exp()),
            Activation::Tanh => {
                let t = z.tanh();
                Some(-2.0 * t * (1.0 - t * t))
            }
            Activation::CubicPoly { c2, c3, .. } => Some(2.0 * c2 + 6.0 * c3 * z),
            Activation::Custom(c) => c.second.map(|f| f(z)),
        }
    }

    pub fn has_second(&self) -> bool {
        !matches!(self, Activation::Custom(CustomActivation { second: None, .. }))
    }

    /// Whether the activation satisfies the 1-Lipschitz assumption of the
    /// upper-bound analysis. Exp and non-linear polynomials do not.
    pub fn is_lipschitz(&self) -> bool {
        match *self {
            Activation::Softplus | Activation::Tanh => true,
            Activation::Exp => false,
            Activation::CubicPoly { c1, c2, c3, .. } => c2 == 0.0 && c3 == 0.0 && c1.abs() <= 1.0,
            Activation::Custom(_) => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn all() -> Vec<Activation> {
        vec![
            Activation::Softplus,
            Activation::Exp,
            Activation::Tanh,
            Activation::CubicPoly {
                c0: 0.1,
                c1: 0.5,
                c2: -0.3,
                c3: 0.05,
            },
        ]
    }

    #[test]
    fn finite_on_working_range() {
        for act in all() {
            for k in -500..=500 {
                let z = k as f64 / 10.0;
                assert!(act.value(z).is_finite(), "{} at {z}", act.name());
                assert!(act.first(z).is_finite());
                assert!(act.second(z).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = crate::rng::rng_from(11);
        for act in all() {
            for _ in 0..100 {
                let z: f64 = rng.random_range(-5.0..5.0);
                let h = 1e-5;
                let fd1 = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
                let fd2 = (act.first(z + h) - act.first(z - h)) / (2.0 * h);
                let a1 = act.first(z);
                let a2 = act.second(z).unwrap();
                let rel1 = (fd1 - a1).abs() / a1.abs().max(1e-3);
                let rel2 = (fd2 - a2).abs() / a2.abs().max(1e-3);
                assert!(rel1 < 1e-7, "{} σ' at {z}: {rel1}", act.name());
                assert!(rel2 < 1e-7, "{} σ'' at {z}: {rel2}", act.name());
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_arguments() {
        let a = Activation::Softplus;
        assert_eq!(a.value(50.0), 50.0);
        assert!(a.value(-50.0) > 0.0 && a.value(-50.0) < 1e-20);
        assert!((a.value(1.0) - (1.0 + 1f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn exp_is_flagged_non_lipschitz() {
        assert!(!Activation::Exp.is_lipschitz());
        assert!(Activation::Softplus.is_lipschitz());
    }

    #[test]
    fn config_round_trip() {
        let a: Activation = serde_json::from_str(r#"{"kind":"softplus"}"#).unwrap();
        assert_eq!(a.name(), "softplus");
        let p: Activation =
            serde_json::from_str(r#"{"kind":"cubic_poly","c0":0,"c1":1,"c2":0,"c3":0.5}"#)
                .unwrap();
        assert_eq!(p.value(2.0), 6.0);
    }
}
