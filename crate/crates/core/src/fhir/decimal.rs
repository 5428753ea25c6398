use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalError(pub String);

/// Exact decimal kept as its canonical text.
///
/// The canonical form has no exponent, no leading zeros in the integer
/// part, no trailing zeros in the fraction and no negative zero. Two
/// decimals are equal iff their canonical texts are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal(String);

const MAX_EXPONENT: i64 = 400;

impl Decimal {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        // Canonical text is always a valid float literal.
        self.0.parse().unwrap_or(f64::NAN)
    }

    pub fn from_f64(value: f64) -> Result<Self, DecimalError> {
        if !value.is_finite() {
            return Err(DecimalError(value.to_string()));
        }
        // `Display` for f64 prints the shortest round-trip text without exponent.
        format!("{value}").parse()
    }

    pub fn zero() -> Self {
        Decimal("0".to_owned())
    }

    pub fn one() -> Self {
        Decimal("1".to_owned())
    }
}

impl FromStr for Decimal {
    type Err = DecimalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        canonicalize(s).map(Decimal).ok_or_else(|| DecimalError(s.to_owned()))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn canonicalize(text: &str) -> Option<String> {
    let (negative, rest) = match text.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, text),
    };
    let (mantissa, exponent) = match rest.find(['e', 'E']) {
        Some(i) => {
            let exp: i64 = rest[i + 1..].parse().ok()?;
            if exp.abs() > MAX_EXPONENT {
                return None;
            }
            (&rest[..i], exp)
        }
        None => (rest, 0),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => {
            if f.is_empty() {
                return None;
            }
            (i, f)
        }
        None => (mantissa, ""),
    };
    if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }

    // All digits with the decimal point after `point` digits.
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes()).collect();
    let mut point = int_part.len() as i64 + exponent;
    if point < 0 {
        let pad = (-point) as usize;
        digits.splice(0..0, std::iter::repeat_n(b'0', pad));
        point = 0;
    }
    let point = point as usize;
    if point > digits.len() {
        digits.resize(point, b'0');
    }

    let (int_digits, frac_digits) = digits.split_at(point);
    let int_trimmed = match int_digits.iter().position(|&b| b != b'0') {
        Some(i) => &int_digits[i..],
        None => b"0".as_slice(),
    };
    let frac_trimmed = match frac_digits.iter().rposition(|&b| b != b'0') {
        Some(i) => &frac_digits[..=i],
        None => b"".as_slice(),
    };

    let mut out = String::with_capacity(int_trimmed.len() + frac_trimmed.len() + 2);
    let is_zero = int_trimmed == b"0" && frac_trimmed.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(std::str::from_utf8(int_trimmed).ok()?);
    if !frac_trimmed.is_empty() {
        out.push('.');
        out.push_str(std::str::from_utf8(frac_trimmed).ok()?);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn canon(s: &str) -> String {
        s.parse::<Decimal>().unwrap().0
    }

    #[test]
    fn strips_insignificant_zeros() {
        assert_eq!(canon("3.50"), "3.5");
        assert_eq!(canon("007.000"), "7");
        assert_eq!(canon("0.0"), "0");
        assert_eq!(canon("-0.000"), "0");
        assert_eq!(canon("-12.340"), "-12.34");
    }

    #[test]
    fn expands_exponents() {
        assert_eq!(canon("1e3"), "1000");
        assert_eq!(canon("1.5E-3"), "0.0015");
        assert_eq!(canon("12.5e1"), "125");
        assert_eq!(canon("0.88e0"), "0.88");
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["", "-", "1.", ".5", "1e", "abc", "1.2.3", "+1", "1e999"] {
            assert!(bad.parse::<Decimal>().is_err(), "{bad}");
        }
    }

    #[test]
    fn from_f64_round_trips() {
        let d = Decimal::from_f64(0.8807970779778823).unwrap();
        assert_eq!(d.as_str(), "0.8807970779778823");
        assert_eq!(d.to_f64(), 0.8807970779778823);
        assert!(Decimal::from_f64(f64::NAN).is_err());
        assert_eq!(Decimal::from_f64(1e-7).unwrap().as_str(), "0.0000001");
    }

    proptest! {
        #[test]
        fn canonical_form_is_a_fixed_point(int in 0u64..1_000_000, frac in "[0-9]{0,8}", exp in -12i64..12, neg: bool) {
            let text = format!(
                "{}{}{}e{}",
                if neg { "-" } else { "" },
                int,
                if frac.is_empty() { String::new() } else { format!(".{frac}") },
                exp
            );
            let once = canon(&text);
            prop_assert_eq!(canon(&once), once.clone());
            let expected: f64 = text.parse().unwrap();
            let got: f64 = once.parse().unwrap();
            prop_assert!((expected - got).abs() <= expected.abs() * 1e-12);
        }
    }
}
