//! Exact rational parameters (vote threshold, payment split, exposure cap).

use num_rational::Ratio;

pub type Fraction = Ratio<u64>;

/// Parses `a/b`, an integer, or a finite decimal such as `0.05`.
pub fn parse_fraction(s: &str) -> Result<Fraction, String> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        let d: u64 = d.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        if d == 0 {
            return Err(format!("{s:?}: zero denominator"));
        }
        return Ok(Fraction::new(n, d));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || frac.len() > 18 {
        return Err(format!("{s:?}: not a fraction"));
    }
    let digits = format!("{int}{frac}");
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("{s:?}: not a fraction"));
    }
    let n: u64 = digits.parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok(Fraction::new(n, 10u64.pow(frac.len() as u32)))
}

/// `floor(f * amount)` without intermediate overflow.
pub fn mul_floor(f: Fraction, amount: u64) -> u64 {
    let v = u128::from(*f.numer()) * u128::from(amount) / u128::from(*f.denom());
    u64::try_from(v).expect("fraction above one applied to near-max amount")
}

/// `true` when `value > f * base`, compared exactly.
pub fn exceeds(value: u64, f: Fraction, base: u64) -> bool {
    u128::from(value) * u128::from(*f.denom()) > u128::from(*f.numer()) * u128::from(base)
}

/// `true` when `value >= f * base`, compared exactly.
pub fn at_least(value: u64, f: Fraction, base: u64) -> bool {
    u128::from(value) * u128::from(*f.denom()) >= u128::from(*f.numer()) * u128::from(base)
}

pub fn display(f: Fraction) -> String {
    if *f.denom() == 1 {
        f.numer().to_string()
    } else {
        format!("{}/{}", f.numer(), f.denom())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_forms() {
        assert_eq!(parse_fraction("1/2").unwrap(), Fraction::new(1, 2));
        assert_eq!(parse_fraction("0.05").unwrap(), Fraction::new(1, 20));
        assert_eq!(parse_fraction("1").unwrap(), Fraction::new(1, 1));
        assert_eq!(parse_fraction(".5").unwrap(), Fraction::new(1, 2));
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("abc").is_err());
        assert!(parse_fraction("-0.5").is_err());
    }

    #[test]
    fn exact_comparisons() {
        let half = Fraction::new(1, 2);
        assert!(exceeds(6, half, 10));
        assert!(!exceeds(5, half, 10));
        assert!(at_least(5, half, 10));
        assert_eq!(mul_floor(half, 101), 50);
        assert_eq!(mul_floor(Fraction::new(1, 20), 100), 5);
    }
}
