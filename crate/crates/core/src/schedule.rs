//! Linear down-sampling schedule from aggressive to mild.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub n_init: usize,
    pub n_final: usize,
    pub k_init: f64,
    pub k_final: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Group size 32, 8 -> 32 responses, 5% -> 20% tokens.
    pub fn full_scale(total_steps: usize) -> Self {
        Self {
            n_init: 8,
            n_final: 32,
            k_init: 0.05,
            k_final: 0.20,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(Error::config("n_init", "must be at least 2"));
        }
        if self.n_init > self.n_final {
            return Err(Error::config("n_final", "must be >= n_init"));
        }
        for (key, k) in [("k_init", self.k_init), ("k_final", self.k_final)] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::config(key, "must lie in (0, 1]"));
            }
        }
        if self.k_init > self.k_final {
            return Err(Error::config("k_final", "must be >= k_init"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        Ok(())
    }

    /// `(n_s, k)` after `step` completed optimizer steps.
    pub fn at_progress(&self, step: usize) -> Result<(usize, f64)> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step == self.total_steps {
            return Ok((self.n_final, self.k_final));
        }
        let p = step as f64 / self.total_steps as f64;
        let n = (1.0 - p) * self.n_init as f64 + p * self.n_final as f64;
        // round half up
        let n_s = ((n + 0.5).floor() as usize).clamp(self.n_init, self.n_final);
        let k = ((1.0 - p) * self.k_init + p * self.k_final).clamp(self.k_init, self.k_final);
        Ok((n_s, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = ScheduleConfig::full_scale(100);
        assert_eq!(s.at_progress(0).unwrap(), (8, 0.05));
        assert_eq!(s.at_progress(100).unwrap(), (32, 0.20));
        let (n, k) = s.at_progress(50).unwrap();
        assert_eq!(n, 20);
        assert!((k - 0.125).abs() < 1e-15);
    }

    #[test]
    fn round_half_up() {
        let s = ScheduleConfig {
            n_init: 2,
            n_final: 3,
            k_init: 0.1,
            k_final: 0.1,
            total_steps: 2,
        };
        assert_eq!(s.at_progress(1).unwrap().0, 3);
    }

    #[test]
    fn out_of_range_step() {
        assert!(ScheduleConfig::full_scale(10).at_progress(11).is_err());
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig::full_scale(10).validate().is_ok());
        let mut s = ScheduleConfig::full_scale(10);
        s.k_init = 0.5;
        assert!(s.validate().is_err());
        s = ScheduleConfig::full_scale(0);
        assert!(s.validate().is_err());
        s = ScheduleConfig::full_scale(10);
        s.n_final = 4;
        assert!(s.validate().is_err());
    }
}
