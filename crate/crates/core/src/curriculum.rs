//! Coarse-to-fine control: the flow-loss weight ramp and the two-phase data plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a signed step (as received from config files or the C API).
pub fn checked_step(step: i64) -> Result<u64> {
    u64::try_from(step).map_err(|_| Error::NegativeStep(step))
}

/// Linear ramp of the flow-loss weight from 0 to `alpha_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    pub ramp_start: u64,
    pub ramp_end: u64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha_max: 0.5,
            ramp_start: 0,
            ramp_end: 0,
        }
    }
}

impl AlphaSchedule {
    pub fn new(alpha_max: f64, ramp_start: u64, ramp_end: u64) -> Result<Self> {
        let s = AlphaSchedule {
            alpha_max,
            ramp_start,
            ramp_end,
        };
        s.validate()?;
        Ok(s)
    }

    /// Ramp spanning the fine phase of `plan`.
    pub fn over_fine_phase(alpha_max: f64, plan: &PhasePlan) -> Result<Self> {
        Self::new(alpha_max, plan.coarse_steps, plan.total_steps())
    }

    /// Constant zero weight.
    pub fn disabled() -> Self {
        AlphaSchedule {
            alpha_max: 0.0,
            ramp_start: 0,
            ramp_end: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= 0.0) || !self.alpha_max.is_finite() {
            return Err(Error::NegativeAlpha(self.alpha_max));
        }
        if self.ramp_start > self.ramp_end {
            return Err(Error::Config(format!(
                "alpha ramp starts at {} after it ends at {}",
                self.ramp_start, self.ramp_end
            )));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        if step >= self.ramp_end {
            return self.alpha_max;
        }
        if step <= self.ramp_start {
            return 0.0;
        }
        let frac = (step - self.ramp_start) as f64 / (self.ramp_end - self.ramp_start) as f64;
        self.alpha_max * frac
    }
}

pub fn alpha_at(step: i64, sched: &AlphaSchedule) -> Result<f64> {
    Ok(sched.alpha_at(checked_step(step)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub coarse_steps: u64,
    pub fine_steps: u64,
    pub coarse_dataset: String,
    pub fine_dataset: String,
    /// Whether the fine phase uses precise motion labels.
    #[serde(default = "yes")]
    pub fine_label_detail: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseDescriptor<'a> {
    pub phase: Phase,
    pub dataset: &'a str,
    pub detailed_labels: bool,
}

impl PhasePlan {
    pub fn total_steps(&self) -> u64 {
        self.coarse_steps + self.fine_steps
    }

    /// Steps `[0, coarse_steps)` are coarse; the boundary step is fine.
    pub fn phase_at(&self, step: u64) -> Result<PhaseDescriptor<'_>> {
        if step >= self.total_steps() {
            return Err(Error::StepBeyondPlan {
                step,
                total: self.total_steps(),
            });
        }
        Ok(if step < self.coarse_steps {
            PhaseDescriptor {
                phase: Phase::Coarse,
                dataset: &self.coarse_dataset,
                detailed_labels: false,
            }
        } else {
            PhaseDescriptor {
                phase: Phase::Fine,
                dataset: &self.fine_dataset,
                detailed_labels: self.fine_label_detail,
            }
        })
    }
}

pub fn phase_at(step: i64, plan: &PhasePlan) -> Result<PhaseDescriptor<'_>> {
    plan.phase_at(checked_step(step)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(coarse: u64, fine: u64) -> PhasePlan {
        PhasePlan {
            coarse_steps: coarse,
            fine_steps: fine,
            coarse_dataset: "coarse".into(),
            fine_dataset: "fine".into(),
            fine_label_detail: true,
        }
    }

    #[test]
    fn alpha_examples() {
        let s = AlphaSchedule::new(0.5, 100, 300).unwrap();
        assert_eq!(s.alpha_at(0), 0.0);
        assert_eq!(s.alpha_at(100), 0.0);
        assert_eq!(s.alpha_at(200), 0.25);
        assert_eq!(s.alpha_at(300), 0.5);
        assert_eq!(s.alpha_at(10_000), 0.5);
        assert!(matches!(alpha_at(-1, &s), Err(Error::NegativeStep(-1))));
        assert!(AlphaSchedule::new(-0.1, 0, 1).is_err());
        assert!(AlphaSchedule::new(0.5, 5, 1).is_err());
    }

    #[test]
    fn degenerate_ramp_is_a_step() {
        let s = AlphaSchedule::new(0.5, 10, 10).unwrap();
        assert_eq!(s.alpha_at(9), 0.0);
        assert_eq!(s.alpha_at(10), 0.5);
    }

    #[test]
    fn phase_boundary_belongs_to_fine() {
        let p = plan(3, 2);
        assert_eq!(p.phase_at(0).unwrap().phase, Phase::Coarse);
        assert_eq!(p.phase_at(2).unwrap().phase, Phase::Coarse);
        let b = p.phase_at(3).unwrap();
        assert_eq!(b.phase, Phase::Fine);
        assert_eq!(b.dataset, "fine");
        assert!(b.detailed_labels);
        assert!(matches!(
            p.phase_at(5),
            Err(Error::StepBeyondPlan { step: 5, total: 5 })
        ));
        assert!(phase_at(-3, &p).is_err());
    }

    #[test]
    fn sweep_emits_each_phase_once() {
        let p = plan(17, 9);
        let phases: Vec<Phase> = (0..p.total_steps())
            .map(|s| p.phase_at(s).unwrap().phase)
            .collect();
        let coarse = phases.iter().take_while(|&&ph| ph == Phase::Coarse).count();
        assert_eq!(coarse, 17);
        assert!(phases[coarse..].iter().all(|&ph| ph == Phase::Fine));
        assert_eq!(phases.len() - coarse, 9);
        let transitions = phases.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(transitions, 1);
    }

    proptest! {
        #[test]
        fn alpha_is_monotone_and_bounded(
            max in 0.0f64..2.0,
            start in 0u64..1000,
            len in 0u64..1000,
            a in 0u64..3000,
            b in 0u64..3000,
        ) {
            let s = AlphaSchedule::new(max, start, start + len).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.alpha_at(lo) <= s.alpha_at(hi));
            prop_assert!(s.alpha_at(hi) <= max);
            prop_assert!(s.alpha_at(lo) >= 0.0);
        }
    }
}
