//! Cumulative noise schedule driving the deterministic sampler and its inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::ContentHasher;

pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;

/// Cumulative signal retention `ᾱ_t` for `t = 0..=T`.
///
/// `ᾱ_0` is exactly one (the clean end of the chain) and the sequence is
/// strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β ramp over `steps` entries followed by a cumulative product of `1 - β`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("number of steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let mut alphas_cumprod = Vec::with_capacity(steps + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Self::from_alphas_cumprod(alphas_cumprod)
    }

    /// Wraps an explicit `ᾱ` sequence after checking the schedule invariants.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if alphas_cumprod[0] != 1.0 {
            return Err(Error::InvalidRange(format!(
                "alphas_cumprod[0] must be 1.0, got {}",
                alphas_cumprod[0]
            )));
        }
        for (t, pair) in alphas_cumprod.windows(2).enumerate() {
            if !(pair[1] < pair[0] && pair[1] > 0.0) {
                return Err(Error::InvalidRange(format!(
                    "alphas_cumprod must be strictly decreasing within (0, 1]: step {} has {} after {}",
                    t + 1,
                    pair[1],
                    pair[0]
                )));
            }
        }
        Ok(Self { alphas_cumprod })
    }

    pub fn num_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `ᾱ_t`; panics when `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.num_steps() });
        }
        Ok(())
    }

    /// Stable content hash of the `ᾱ` values, used to key cached stores.
    pub fn content_hash(&self) -> u64 {
        let mut h = ContentHasher::new("schedule");
        for a in &self.alphas_cumprod {
            h.update(&a.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// User-facing schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_has_thirty_steps() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.num_steps(), 30);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alphas_cumprod().len(), 31);
    }

    #[test]
    fn single_step() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas_cumprod(), &[1.0, 0.5]);
    }

    #[test]
    fn three_step_cumulative_product() {
        // betas 0.1, 0.2, 0.3 -> 0.9, 0.9*0.8, 0.9*0.8*0.7
        let s = build_schedule(3, 0.1, 0.3).unwrap();
        let expected = [1.0, 0.9, 0.72, 0.504];
        for (a, e) in s.alphas_cumprod().iter().zip(expected) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(3, 0.0, 0.2).is_err());
        assert!(build_schedule(3, 0.3, 0.2).is_err());
        assert!(build_schedule(3, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![0.9, 0.5]).is_err());
    }

    #[test]
    fn hash_distinguishes_schedules() {
        let a = build_schedule(30, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let b = build_schedule(29, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }

    proptest! {
        #[test]
        fn valid_inputs_give_valid_schedules(
            steps in 1usize..200,
            start in 1e-5f64..0.5,
            span in 0.0f64..0.49,
        ) {
            let end = (start + span).min(0.999);
            let s = build_schedule(steps, start, end).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            for w in s.alphas_cumprod().windows(2) {
                prop_assert!(w[1] < w[0]);
                prop_assert!(w[1] > 0.0);
            }
        }
    }
}
