use std::fmt;
use std::ops::Mul;

use serde::{Deserialize, Serialize};

/// A determinant stored as `sign · exp(log_abs)`.
///
/// Composition multiplies signs and adds log-magnitudes, so products of many
/// factors neither overflow nor lose the sign when one factor passes close to
/// zero. `sign == 0` encodes an exact zero; `log_abs` is then `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignLogDet {
    pub sign: i8,
    pub log_abs: f64,
}

impl SignLogDet {
    pub const ONE: SignLogDet = SignLogDet {
        sign: 1,
        log_abs: 0.0,
    };

    pub const ZERO: SignLogDet = SignLogDet {
        sign: 0,
        log_abs: f64::NEG_INFINITY,
    };

    pub fn new(sign: i8, log_abs: f64) -> Self {
        match sign.signum() {
            0 => Self::ZERO,
            s => Self { sign: s, log_abs },
        }
    }

    /// Converts a plain value. NaN maps to sign 0 with NaN magnitude.
    pub fn from_value(x: f64) -> Self {
        if x == 0.0 {
            Self::ZERO
        } else if x.is_nan() {
            Self {
                sign: 0,
                log_abs: f64::NAN,
            }
        } else {
            Self {
                sign: if x > 0.0 { 1 } else { -1 },
                log_abs: x.abs().ln(),
            }
        }
    }

    pub fn value(&self) -> f64 {
        match self.sign {
            0 => 0.0,
            s => f64::from(s) * self.log_abs.exp(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn recip(&self) -> Self {
        match self.sign {
            0 => Self {
                sign: 0,
                log_abs: f64::INFINITY,
            },
            s => Self {
                sign: s,
                log_abs: -self.log_abs,
            },
        }
    }
}

impl Default for SignLogDet {
    fn default() -> Self {
        Self::ONE
    }
}

impl Mul for SignLogDet {
    type Output = SignLogDet;

    fn mul(self, rhs: SignLogDet) -> SignLogDet {
        if self.sign == 0 || rhs.sign == 0 {
            return SignLogDet::ZERO;
        }
        SignLogDet {
            sign: self.sign * rhs.sign,
            log_abs: self.log_abs + rhs.log_abs,
        }
    }
}

impl fmt::Display for SignLogDet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.sign {
            1 => "+",
            -1 => "-",
            _ => "0",
        };
        write!(f, "{s}exp({})", self.log_abs)
    }
}
