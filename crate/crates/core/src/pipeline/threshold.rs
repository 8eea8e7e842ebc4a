use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid confidence threshold {0:?}: expected a rational in [0, 1] such as 3/5 or 0.6")]
pub struct ThresholdError(pub String);

/// Confidence threshold `t` held as a reduced fraction so that the gate
/// `k/m >= t` is decided exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Threshold {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Threshold {
    pub const ZERO: Threshold = Threshold { num: 0, den: 1 };
    pub const ONE: Threshold = Threshold { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, ThresholdError> {
        if den == 0 || num > den {
            return Err(ThresholdError(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Threshold {
            num: num / g,
            den: den / g,
        })
    }

    pub fn numerator(self) -> u64 {
        self.num
    }

    pub fn denominator(self) -> u64 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold { num: 3, den: 5 }
    }
}

/// The confidence gate: admit a fact when `k` of `m` self-checks support it
/// and `k/m >= t`. With no samples nothing is admitted.
pub fn confidence_gate(k: u32, m: u32, t: Threshold) -> bool {
    debug_assert!(k <= m, "k={k} exceeds m={m}");
    m > 0 && k as u64 * t.den >= t.num * m as u64
}

impl FromStr for Threshold {
    type Err = ThresholdError;

    /// Accepts `p/q`, or a decimal such as `0.6`, `1`, `.75`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ThresholdError(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| err())?;
            let d = d.trim().parse().map_err(|_| err())?;
            return Threshold::new(n, d).map_err(|_| err());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if (int.is_empty() && frac.is_empty())
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 18
        {
            return Err(err());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| err())? };
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| err())? };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_val))
            .ok_or_else(err)?;
        Threshold::new(num, den).map_err(|_| err())
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(serde_json::Number),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(s) => s,
            Raw::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}
