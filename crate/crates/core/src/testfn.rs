//! Test functions `f` with closed-form Gaussian expectations.
//!
//! Every OU transition is Gaussian, so `E f(ξ_t)` is available in closed
//! form for these families; they serve as analytic oracles for the moment
//! and many-to-one checks.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// `f ≡ 1`.
    One,
    /// `f ≡ value`.
    Constant { value: f64 },
    /// `f(x) = exp(−a |x|²)`.
    Gaussian { a: f64 },
    /// `f(x) = 1{max_i |x_i| ≤ r}`.
    Box { r: f64 },
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::One => 1.0,
            TestFunction::Constant { value } => *value,
            TestFunction::Gaussian { a } => (-a * x.iter().map(|v| v * v).sum::<f64>()).exp(),
            TestFunction::Box { r } => {
                if x.iter().all(|v| v.abs() <= *r) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `E f(Y)` for `Y ~ N(mean, var · I)`.
    pub fn gaussian_expectation(&self, mean: &[f64], var: f64) -> f64 {
        if var <= 0.0 {
            return self.eval(mean);
        }
        match self {
            TestFunction::One => 1.0,
            TestFunction::Constant { value } => *value,
            TestFunction::Gaussian { a } => {
                let s = 1.0 + 2.0 * a * var;
                mean.iter().map(|m| (-a * m * m / s).exp() / s.sqrt()).product()
            }
            TestFunction::Box { r } => {
                let sd = var.sqrt();
                mean.iter()
                    .map(|m| std_normal_cdf((r - m) / sd) - std_normal_cdf((-r - m) / sd))
                    .product()
            }
        }
    }

    /// Short identifier used in CSV column names.
    pub fn label(&self) -> String {
        match self {
            TestFunction::One => "one".into(),
            TestFunction::Constant { value } => format!("const_{value}"),
            TestFunction::Gaussian { a } => format!("gauss_{a}"),
            TestFunction::Box { r } => format!("box_{r}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::simpson;

    fn normal_pdf(y: f64, m: f64, v: f64) -> f64 {
        (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn expectations_match_quadrature() {
        for f in [
            TestFunction::One,
            TestFunction::Gaussian { a: 0.7 },
            TestFunction::Box { r: 1.0 },
        ] {
            for (m, v) in [(0.0, 0.5), (1.3, 0.2), (-0.4, 2.0)] {
                let exact = f.gaussian_expectation(&[m], v);
                let g = |y: f64| f.eval(&[y]) * normal_pdf(y, m, v);
                let q = match f {
                    TestFunction::Box { r } => simpson(g, -r, r, 2000),
                    _ => simpson(g, -40.0, 40.0, 40_000),
                };
                assert!((exact - q).abs() < 1e-8, "{f:?} m={m} v={v}: {exact} vs {q}");
            }
        }
    }

    #[test]
    fn zero_variance_is_evaluation() {
        let f = TestFunction::Gaussian { a: 1.0 };
        assert_eq!(f.gaussian_expectation(&[0.5, 0.5], 0.0), f.eval(&[0.5, 0.5]));
    }

    #[test]
    fn box_in_two_dimensions_factorises() {
        let f = TestFunction::Box { r: 0.5 };
        let one_d = f.gaussian_expectation(&[0.1], 0.3);
        let two_d = f.gaussian_expectation(&[0.1, 0.1], 0.3);
        assert!((two_d - one_d * one_d).abs() < 1e-15);
    }

    #[test]
    fn parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            f: Vec<TestFunction>,
        }
        let w: W = toml::from_str(r#"f = [{ name = "one" }, { name = "gaussian", a = 1.0 }, { name = "box", r = 2.0 }]"#)
            .unwrap();
        assert_eq!(w.f[1], TestFunction::Gaussian { a: 1.0 });
        assert!(toml::from_str::<W>(r#"f = [{ name = "box", r = 2.0, extra = 1 }]"#).is_err());
    }
}
