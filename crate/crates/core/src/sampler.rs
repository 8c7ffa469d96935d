//! Cold-diffusion sampling.
//!
//! Both samplers walk a [`ViewSchedule`] from its sparsest level `v_T` down
//! to `v_0` with the update
//!
//! ```text
//! x_{t-1} = x_t - D(x0_hat, v_t) + D(x0_hat, v_{t-1})
//! ```
//!
//! The naive sampler predicts `x0_hat` with the null condition. The
//! residual-conditioned sampler first makes a null prediction, measures the
//! tanh-normalized observation residual `x_t - D(x0_hat_null, v_t)` and
//! predicts again conditioned on it. Nothing in either loop is random.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::restorer::{Condition, Restorer};
use crate::schedule::ViewSchedule;
use crate::tomo::{degrade, Geometry, Image};

/// Largest `f32` below one. `tanh` saturates to exactly 1.0 in single
/// precision, so normalized residuals are clamped here.
pub const RESIDUAL_BOUND: f32 = 1.0 - f32::EPSILON / 2.0;

/// When the one-time re-anchoring to `x_T` happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LevelTransition {
    #[default]
    Off,
    /// The update of the `k`-th executed step (1-based) is anchored at `x_T`.
    AfterSteps(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerOptions {
    /// Gain `g` in `tanh(g * residual)`.
    pub residual_gain: f64,
    pub level_transition: LevelTransition,
    pub record_trace: bool,
    /// Ground truth for per-step PSNR; diagnostics only.
    pub reference: Option<Image>,
    /// Keep the state after every step in the trace.
    pub keep_states: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            residual_gain: 1.0,
            level_transition: LevelTransition::Off,
            record_trace: true,
            reference: None,
            keep_states: false,
        }
    }
}

impl SamplerOptions {
    fn validate(&self, steps: usize) -> Result<()> {
        if !(self.residual_gain > 0.0 && self.residual_gain.is_finite()) {
            return Err(Error::Validation(format!("residual gain {} must be positive", self.residual_gain)));
        }
        if let LevelTransition::AfterSteps(k) = self.level_transition {
            if k == 0 || k > steps {
                return Err(Error::Validation(format!("level transition after {k} steps is outside [1, {steps}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub view_level: usize,
    /// Mean absolute residual before normalization.
    pub raw_residual_mean: f64,
    pub norm_residual_mean: f64,
    pub psnr: Option<f64>,
    pub transition: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    pub records: Vec<StepRecord>,
    /// Restorer evaluations made during the run.
    pub nfe: usize,
    pub transition_step: Option<usize>,
    /// `(step, state after the update)` when requested.
    pub states: Vec<(usize, Image)>,
}

impl SampleTrace {
    pub const CSV_HEADER: &'static str = "step,view_level,raw_residual_mean,norm_residual_mean,psnr,transition";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let psnr = r.psnr.map(|p| crate::metrics::psnr_for_csv(p).to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.view_level,
                r.raw_residual_mean,
                r.norm_residual_mean,
                psnr,
                u8::from(r.transition)
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Elementwise `tanh(gain * raw)`, kept strictly inside `(-1, 1)`.
pub fn normalize_residual(raw: &Image, gain: f64) -> Result<Image> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::Validation(format!("residual gain {gain} must be positive")));
    }
    raw.check_finite("raw residual")?;
    Ok(raw.map(|v| ((gain * f64::from(v)).tanh() as f32).clamp(-RESIDUAL_BOUND, RESIDUAL_BOUND)))
}

/// `state - D(prediction, views)` before normalization.
pub fn raw_residual(state: &Image, prediction: &Image, views: usize, geo: &Geometry) -> Result<Image> {
    state.check_shape(prediction, "observation residual")?;
    state.sub(&degrade(prediction, views, geo)?)
}

/// `tanh(gain * (state - D(prediction, views)))`.
pub fn observation_residual(
    state: &Image,
    prediction: &Image,
    views: usize,
    gain: f64,
    geo: &Geometry,
) -> Result<Image> {
    normalize_residual(&raw_residual(state, prediction, views, geo)?, gain)
}

/// `state - D(prediction, v_t) + D(prediction, v_prev)` with `v_prev >= v_t`.
pub fn cold_step(state: &Image, prediction: &Image, v_t: usize, v_prev: usize, geo: &Geometry) -> Result<Image> {
    if v_prev < v_t {
        return Err(Error::Validation(format!("cold step must move to a denser level ({v_t} -> {v_prev})")));
    }
    state.check_shape(prediction, "cold step")?;
    if v_prev == v_t {
        return Ok(state.clone());
    }
    let removed = state.sub(&degrade(prediction, v_t, geo)?)?;
    removed.add(&degrade(prediction, v_prev, geo)?)
}

/// `x_T - D(prediction, v_t) + D(prediction, v_prev)`: the cold-step formula
/// re-anchored at the original sparse-view input.
pub fn transition_step(
    x_t_original: &Image,
    prediction: &Image,
    v_t: usize,
    v_prev: usize,
    geo: &Geometry,
) -> Result<Image> {
    cold_step(x_t_original, prediction, v_t, v_prev, geo)
}

/// Holds `x_T` and allows exactly one [`transition_step`].
#[derive(Debug)]
pub struct OneTimeTransition {
    anchor: Image,
    used: bool,
}

impl OneTimeTransition {
    pub fn new(x_t_original: Image) -> Self {
        OneTimeTransition { anchor: x_t_original, used: false }
    }

    pub fn used(&self) -> bool {
        self.used
    }

    pub fn apply(&mut self, prediction: &Image, v_t: usize, v_prev: usize, geo: &Geometry) -> Result<Image> {
        if self.used {
            return Err(Error::Logic("the level transition was already applied in this run".into()));
        }
        let out = transition_step(&self.anchor, prediction, v_t, v_prev, geo)?;
        self.used = true;
        Ok(out)
    }
}

fn check_start(x_t: &Image, schedule: &ViewSchedule, geo: &Geometry) -> Result<()> {
    geo.check_image(x_t)?;
    x_t.check_finite("sampler input")?;
    if schedule.n_full() > geo.n_angles_full() {
        return Err(Error::Validation(format!(
            "schedule starts at {} views but the scan has {}",
            schedule.n_full(),
            geo.n_angles_full()
        )));
    }
    Ok(())
}

fn step_psnr(opts: &SamplerOptions, prediction: &Image) -> Result<Option<f64>> {
    opts.reference.as_ref().map(|r| psnr(prediction, r, 1.0)).transpose()
}

/// Plain cold-diffusion sampling: one null-conditioned prediction per step.
///
/// The residual columns of the trace are measured against that prediction
/// for comparison; they do not feed back into the loop.
pub fn sample_naive<R: Restorer + ?Sized>(
    x_t: &Image,
    schedule: &ViewSchedule,
    model: &R,
    opts: &SamplerOptions,
    geo: &Geometry,
) -> Result<(Image, SampleTrace)> {
    check_start(x_t, schedule, geo)?;
    opts.validate(schedule.steps())?;
    let levels = schedule.levels();
    let mut trace = SampleTrace::default();
    let mut x = x_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let (v_t, v_prev) = (levels[t], levels[t - 1]);
        let pred = model.restore(&x, &Condition::Null, t)?;
        trace.nfe += 1;
        if opts.record_trace {
            let raw = raw_residual(&x, &pred, v_t, geo)?;
            let norm = normalize_residual(&raw, opts.residual_gain)?;
            trace.records.push(StepRecord {
                step: t,
                view_level: v_t,
                raw_residual_mean: raw.mean_abs(),
                norm_residual_mean: norm.mean_abs(),
                psnr: step_psnr(opts, &pred)?,
                transition: false,
            });
        }
        x = cold_step(&x, &pred, v_t, v_prev, geo)?;
        x.check_finite("naive sampler state")?;
        if opts.keep_states {
            trace.states.push((t - 1, x.clone()));
        }
    }
    Ok((x, trace))
}

/// Residual-conditioned self-guided sampling.
pub fn sample_reco<R: Restorer + ?Sized>(
    x_t: &Image,
    schedule: &ViewSchedule,
    model: &R,
    opts: &SamplerOptions,
    geo: &Geometry,
) -> Result<(Image, SampleTrace)> {
    check_start(x_t, schedule, geo)?;
    opts.validate(schedule.steps())?;
    let levels = schedule.levels();
    let steps = schedule.steps();
    let transition_at = match opts.level_transition {
        LevelTransition::Off => None,
        LevelTransition::AfterSteps(k) => Some(steps + 1 - k),
    };
    let mut anchor = OneTimeTransition::new(x_t.clone());
    let mut trace = SampleTrace::default();
    let mut x = x_t.clone();
    for t in (1..=steps).rev() {
        let (v_t, v_prev) = (levels[t], levels[t - 1]);
        let null_pred = model.restore(&x, &Condition::Null, t)?;
        let raw = raw_residual(&x, &null_pred, v_t, geo)?;
        let err = normalize_residual(&raw, opts.residual_gain)?;
        let norm_mean = err.mean_abs();
        let pred = model.restore(&x, &Condition::residual(err)?, t)?;
        trace.nfe += 2;

        let transition = transition_at == Some(t);
        if opts.record_trace {
            trace.records.push(StepRecord {
                step: t,
                view_level: v_t,
                raw_residual_mean: raw.mean_abs(),
                norm_residual_mean: norm_mean,
                psnr: step_psnr(opts, &pred)?,
                transition,
            });
        }
        x = if transition {
            trace.transition_step = Some(t);
            anchor.apply(&pred, v_t, v_prev, geo)?
        } else {
            cold_step(&x, &pred, v_t, v_prev, geo)?
        };
        x.check_finite("reco sampler state")?;
        if opts.keep_states {
            trace.states.push((t - 1, x.clone()));
        }
    }
    Ok((x, trace))
}
