//! Reject option based classification: minority-group instances whose
//! predicted probability falls in the critical region `[1 - tau, tau]` are
//! assigned the desirable class.

use serde::{Deserialize, Serialize};

use crate::dataset::Group;
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocConfig {
    pub tau: f64,
    pub desirable_class: u8,
}

impl Default for RocConfig {
    fn default() -> Self {
        RocConfig {
            tau: DEFAULT_TAU,
            desirable_class: 1,
        }
    }
}

impl RocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0.5, 1), got {}", self.tau)));
        }
        if self.desirable_class > 1 {
            return Err(Error::invalid("desirable class must be 0 or 1"));
        }
        Ok(())
    }
}

/// `probabilities` are `p(c+ | x)`; S0 is the minority group.
pub fn roc_adjust(probabilities: &[f64], groups: &[Group], cfg: &RocConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    if groups.len() != probabilities.len() {
        return Err(Error::LengthMismatch {
            what: "groups",
            expected: probabilities.len(),
            found: groups.len(),
        });
    }
    let c_plus = cfg.desirable_class;
    probabilities
        .iter()
        .zip(groups)
        .map(|(&p, &g)| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
            }
            let critical = p >= 1.0 - cfg.tau && p <= cfg.tau;
            Ok(if (critical && g == Group::S0) || p >= 0.5 {
                c_plus
            } else {
                1 - c_plus
            })
        })
        .collect()
}
