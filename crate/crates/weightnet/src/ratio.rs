//! Reduced positive fractions for the M and G hyperparameters.
//!
//! M and G are rationals (CondConv embeds as M = m/C, G = 1/C), but every
//! quantity derived from them — M*C, G*C, M/G — must come out an exact
//! integer. Keeping (num, den) reduced makes those checks exact instead of
//! float-approximate.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A positive rational number, always stored reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!(
                "ratio must be positive, got {num}/{den}"
            )));
        }
        let g = gcd(num, den);
        Ok(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn int(n: u64) -> Self {
        Ratio { num: n, den: 1 }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    /// `self * n` if that is an exact integer.
    pub fn times_exact(&self, n: usize) -> Option<usize> {
        let prod = self.num.checked_mul(n as u64)?;
        if prod % self.den == 0 {
            Some((prod / self.den) as usize)
        } else {
            None
        }
    }

    /// `self / other` if that is an exact integer.
    pub fn div_exact(&self, other: &Ratio) -> Option<usize> {
        // (a/b) / (c/d) = a*d / (b*c)
        let num = self.num.checked_mul(other.den)?;
        let den = self.den.checked_mul(other.num)?;
        if num % den == 0 {
            Some((num / den) as usize)
        } else {
            None
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl std::str::FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("invalid ratio '{s}'")))
        };
        match s.split_once('/') {
            Some((n, d)) => Ratio::new(parse(n)?, parse(d)?),
            None => Ok(Ratio::int(parse(s)?)),
        }
    }
}

// In JSON a ratio is either an integer or a "num/den" string.
impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.den == 1 {
            s.serialize_u64(self.num)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ratio::new(n, 1).map_err(de::Error::custom),
            Raw::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}
