use serde::{Deserialize, Serialize};

use super::P4InvError;

/// Log-space sanity bounds on merges and the penalty.
///
/// A merge with factor `G` into a layer with determinant `d` is accepted when
/// `min0 ≤ ln|G| ≤ max0` and `min1 ≤ ln|G·d| ≤ max1`. The penalty uses the
/// unsuperscripted pair `(min, max)` on both quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeBounds {
    #[serde(with = "crate::serde_ext")]
    pub c_min: f64,
    #[serde(with = "crate::serde_ext")]
    pub c_max: f64,
    #[serde(with = "crate::serde_ext")]
    pub c_min0: f64,
    #[serde(with = "crate::serde_ext")]
    pub c_max0: f64,
    #[serde(with = "crate::serde_ext")]
    pub c_min1: f64,
    #[serde(with = "crate::serde_ext")]
    pub c_max1: f64,
}

impl Default for MergeBounds {
    fn default() -> Self {
        Self {
            c_min: -2.0,
            c_max: 15.0,
            c_min0: -6.0,
            c_max0: f64::INFINITY,
            c_min1: -2.5,
            c_max1: 15.5,
        }
    }
}

impl MergeBounds {
    pub fn validate(&self) -> Result<(), P4InvError> {
        for (name, lo, hi) in [
            ("c_min/c_max", self.c_min, self.c_max),
            ("c_min0/c_max0", self.c_min0, self.c_max0),
            ("c_min1/c_max1", self.c_min1, self.c_max1),
        ] {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(P4InvError::InvalidConfig(format!(
                    "{name}: need lower <= upper, got {lo} > {hi}"
                )));
            }
        }
        Ok(())
    }

    /// The merge gate on `ln|G|` and `ln|G·det A|`. NaN fails.
    pub fn accepts(&self, log_abs_factor: f64, log_abs_new_det: f64) -> bool {
        (self.c_min0..=self.c_max0).contains(&log_abs_factor)
            && (self.c_min1..=self.c_max1).contains(&log_abs_new_det)
    }
}

/// Settings of a P⁴Inv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct P4InvConfig {
    /// A rejected merge is accepted anyway once this many attempts have
    /// happened since the last accepted one.
    pub n_force: u64,
    /// Run one Newton-Schulz correction every this many accepted merges
    /// (0 disables it).
    pub n_correct: u64,
    /// Penalty weight `C_p`.
    pub penalty: f64,
    pub bounds: MergeBounds,
    /// Standard deviation of the freshly drawn `v` after a reset.
    pub v_scale: f64,
    /// When set, the penalty uses `ln(|G| + eps)` instead of `ln|G|`.
    pub penalty_log_epsilon: Option<f64>,
    /// Whether the layer has a (directly trained) bias.
    pub bias: bool,
}

impl Default for P4InvConfig {
    fn default() -> Self {
        Self {
            n_force: 10,
            n_correct: 50,
            penalty: 0.0,
            bounds: MergeBounds::default(),
            v_scale: 1.0,
            penalty_log_epsilon: None,
            bias: true,
        }
    }
}

impl P4InvConfig {
    pub fn validate(&self) -> Result<(), P4InvError> {
        self.bounds.validate()?;
        if self.n_force == 0 {
            return Err(P4InvError::InvalidConfig("n_force must be >= 1".into()));
        }
        if !(self.penalty >= 0.0) {
            return Err(P4InvError::InvalidConfig(format!(
                "penalty must be >= 0, got {}",
                self.penalty
            )));
        }
        if !(self.v_scale.is_finite() && self.v_scale > 0.0) {
            return Err(P4InvError::InvalidConfig(format!(
                "v_scale must be positive, got {}",
                self.v_scale
            )));
        }
        Ok(())
    }
}
