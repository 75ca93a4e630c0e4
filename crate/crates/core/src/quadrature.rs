//! Gauss-Legendre rules on [-1, 1].

const GAUSS2_X: f64 = 0.577_350_269_189_625_8;

/// Two-point rule, exact for cubics.
pub const GAUSS2: [(f64, f64); 2] = [(-GAUSS2_X, 1.0), (GAUSS2_X, 1.0)];

/// Four-point rule, exact for polynomials of degree 7.
pub const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
    (-0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
];

/// Maps a rule to the interval `[a, b]`, returning `(point, weight)` pairs.
pub fn on_interval(rule: &[(f64, f64)], a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.iter().map(move |&(x, w)| (mid + half * x, half * w))
}

/// Averages `f` over `[a, b]` with the four-point rule.
pub fn interval_average(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return f(a);
    }
    on_interval(&GAUSS4, a, b).map(|(x, w)| w * f(x)).sum::<f64>() / (b - a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_integrate_monomials_exactly() {
        for p in 0..=7 {
            let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            let g4: f64 = GAUSS4.iter().map(|&(x, w)| w * x.powi(p)).sum();
            assert!((g4 - exact).abs() < 1e-14, "gauss4 p={p}");
            if p <= 3 {
                let g2: f64 = GAUSS2.iter().map(|&(x, w)| w * x.powi(p)).sum();
                assert!((g2 - exact).abs() < 1e-14, "gauss2 p={p}");
            }
        }
    }

    #[test]
    fn average_of_linear_is_midpoint() {
        assert!((interval_average(|t| 3.0 * t + 1.0, 0.0, 2.0) - 4.0).abs() < 1e-14);
    }
}
