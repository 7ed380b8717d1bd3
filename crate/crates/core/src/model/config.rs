use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel plan of the full-width network.
pub mod channels {
    pub const STEM: usize = 64;
    pub const STAGE1_MID: usize = 64;
    pub const STAGE1_OUT: usize = 256;
    pub const STAGE2_MID: usize = 128;
    pub const STAGE2_OUT: usize = 512;
    pub const HEAD: usize = 256;
    pub const STAGE1_BLOCKS: usize = 3;
    pub const STAGE2_BLOCKS: usize = 4;
}

/// Rational multiplier applied to every channel count, `num/den ∈ (0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

impl WidthMultiplier {
    pub const FULL: Self = Self { num: 1, den: 1 };
    pub const EIGHTH: Self = Self { num: 1, den: 8 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidArgument(format!("width multiplier {num}/{den} outside (0, 1]")));
        }
        let g = gcd(num, den);
        let w = Self {
            num: num / g,
            den: den / g,
        };
        for base in [
            channels::STEM,
            channels::STAGE1_MID,
            channels::STAGE1_OUT,
            channels::STAGE2_MID,
            channels::STAGE2_OUT,
            channels::HEAD,
        ] {
            w.apply(base)?;
        }
        Ok(w)
    }

    /// Scaled channel count; must come out a positive integer.
    pub fn apply(&self, base: usize) -> Result<usize> {
        let scaled = base * self.num as usize;
        if !scaled.is_multiple_of(self.den as usize) || scaled == 0 {
            return Err(Error::InvalidArgument(format!(
                "width {self} does not divide {base} channels evenly"
            )));
        }
        Ok(scaled / self.den as usize)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse width multiplier `{s}`"));
        match s.split_once('/') {
            Some((n, d)) => Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => {
                let v: f64 = s.trim().parse().map_err(|_| bad())?;
                // accept decimal forms of power-of-two fractions, e.g. 0.125
                for den in [1u32, 2, 4, 8, 16, 32, 64] {
                    let num = v * den as f64;
                    if (num - num.round()).abs() < 1e-9 && num.round() >= 1.0 {
                        return Self::new(num.round() as u32, den);
                    }
                }
                Err(bad())
            }
        }
    }
}

impl Serialize for WidthMultiplier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WidthMultiplier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: WidthMultiplier,
    pub adapters_enabled: bool,
    pub norm_eps: f64,
    /// Weight of the newest batch in the running normalization statistics.
    pub norm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: WidthMultiplier::EIGHTH,
            adapters_enabled: false,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_width(width: WidthMultiplier) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.width.apply(channels::STAGE2_OUT).expect("validated width")
    }
}
