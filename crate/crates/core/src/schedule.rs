//! View-level schedules mapping sampling step `t` to a view count `v_t`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleStrategy {
    Geometric,
    Linear,
}

impl std::str::FromStr for ScheduleStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(ScheduleStrategy::Geometric),
            "linear" => Ok(ScheduleStrategy::Linear),
            other => Err(format!("unknown schedule strategy `{other}`")),
        }
    }
}

/// Strictly decreasing view counts `[v_0 = n_full, v_1, ..., v_T]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSchedule {
    levels: Vec<usize>,
}

impl ViewSchedule {
    /// Validates an explicit level list.
    pub fn from_levels(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Schedule("a schedule needs at least one level".into()));
        }
        if levels.contains(&0) {
            return Err(Error::Schedule("view levels must be at least 1".into()));
        }
        if let Some(w) = levels.windows(2).find(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!("levels must strictly decrease, found {} then {}", w[0], w[1])));
        }
        Ok(ViewSchedule { levels })
    }

    pub fn build(n_full: usize, target: usize, steps: usize, strategy: ScheduleStrategy) -> Result<Self> {
        if target == 0 || target >= n_full {
            return Err(Error::Schedule(format!("target {target} must lie in [1, {n_full})")));
        }
        if steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        let mut levels: Vec<usize> = (0..=steps)
            .map(|t| {
                let frac = t as f64 / steps as f64;
                let v = match strategy {
                    ScheduleStrategy::Geometric => n_full as f64 * (target as f64 / n_full as f64).powf(frac),
                    ScheduleStrategy::Linear => n_full as f64 - (n_full - target) as f64 * frac,
                };
                v.round() as usize
            })
            .collect();
        levels[0] = n_full;
        levels[steps] = target;
        ViewSchedule::from_levels(levels).map_err(|_| {
            Error::Schedule(format!(
                "{steps} steps from {n_full} to {target} views collapse adjacent levels; use fewer steps"
            ))
        })
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn n_full(&self) -> usize {
        self.levels[0]
    }

    pub fn target(&self) -> usize {
        self.levels[self.steps()]
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn views_at(&self, step: usize) -> Result<usize> {
        self.levels
            .get(step)
            .copied()
            .ok_or_else(|| Error::Validation(format!("step {step} outside schedule of {} steps", self.steps())))
    }

    /// Step index whose level equals `views`, if any.
    pub fn step_of(&self, views: usize) -> Option<usize> {
        self.levels.iter().position(|&v| v == views)
    }

    /// The leading part of the schedule ending at `views`, which keeps the
    /// step indices of the full schedule. Used to reconstruct at an
    /// intermediate sparsity with a model trained on the whole schedule.
    pub fn truncated_at(&self, views: usize) -> Result<ViewSchedule> {
        let step = self
            .step_of(views)
            .ok_or_else(|| Error::Schedule(format!("{views} views is not a level of {:?}", self.levels)))?;
        Ok(ViewSchedule { levels: self.levels[..=step].to_vec() })
    }
}
