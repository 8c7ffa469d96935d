//! Residual-conditioned training with error-propagating composite states.
//!
//! Each iteration applies two sequential Adam updates, each followed by an
//! EMA update:
//!
//! 1. the direct objective on `x_t = D(x0, v_t)`,
//! 2. the composite objective on a state synthesized from the EMA teacher's
//!    null prediction at a sparse target level and carried to a denser level.
//!
//! Both objectives use the two-pass residual-conditioned prediction. The
//! null pass and the residual are constants for differentiation: gradients
//! flow only through the conditioned pass.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::restorer::{
    adam_step, AdamConfig, AdamState, Architecture, Condition, ConvRestorer, EmaParams, Restorer, RestorerParams,
};
use crate::sampler::{cold_step, observation_residual};
use crate::schedule::ViewSchedule;
use crate::tomo::{degrade, Geometry, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub schedule: ViewSchedule,
    /// View levels used as the sparse anchor of composite states. Each must
    /// be a level of `schedule`.
    pub composite_targets: Vec<usize>,
    pub residual_gain: f64,
    /// Weight of the plain restoration loss on the null-conditioned
    /// prediction, added to the direct objective. 0 trains the null pass
    /// only through its use in the residual.
    pub null_weight: f64,
    pub seed: u64,
    /// Iterations between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(schedule: ViewSchedule) -> Self {
        let target = schedule.target();
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            schedule,
            composite_targets: vec![target],
            residual_gain: 1.0,
            null_weight: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Validation(format!("invalid Adam settings {a:?}")));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Validation(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.residual_gain > 0.0 && self.residual_gain.is_finite()) {
            return Err(Error::Validation(format!("residual gain {} must be positive", self.residual_gain)));
        }
        if !(self.null_weight >= 0.0 && self.null_weight.is_finite()) {
            return Err(Error::Validation(format!("null weight {} must be finite and >= 0", self.null_weight)));
        }
        if self.schedule.steps() == 0 {
            return Err(Error::Validation("training needs a schedule with at least one step".into()));
        }
        if self.composite_targets.is_empty() {
            return Err(Error::Validation("at least one composite target level is required".into()));
        }
        for &v in &self.composite_targets {
            if self.schedule.step_of(v).is_none() {
                return Err(Error::Validation(format!(
                    "composite target {v} is not a level of the schedule {:?}",
                    self.schedule.levels()
                )));
            }
        }
        Ok(())
    }
}

/// Losses of one iteration, each measured before its own update.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub restore_loss: f64,
    /// `None` when the drawn composite target has no intermediate level.
    pub compose_loss: Option<f64>,
    /// Null-prediction loss, present when `null_weight > 0`. Not part of
    /// `train_loss`.
    pub null_loss: Option<f64>,
    pub ema_checksum: u64,
    pub wall_time: Duration,
}

impl TrainRecord {
    pub fn train_loss(&self) -> f64 {
        self.restore_loss + self.compose_loss.unwrap_or(0.0)
    }
}

pub const TRAIN_LOG_HEADER: &str = "iteration,restore_loss,compose_loss,null_loss,train_loss,ema_checksum";

/// Training log as CSV. Wall time is left out so reruns are byte-identical.
pub fn train_log_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in records {
        let optional = |v: Option<f64>| v.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{:016x}",
            r.iteration,
            r.restore_loss,
            optional(r.compose_loss),
            optional(r.null_loss),
            r.train_loss(),
            r.ema_checksum
        )
        .unwrap();
    }
    out
}

/// `x_T - D(x0_hat, v_T) + D(x0_hat, v_t')` where `x_T = D(x0, v_T)` and
/// `x0_hat` is the teacher's null-conditioned prediction at step `step_t`.
pub fn synthesize_propagated_state<R: Restorer + ?Sized>(
    x0: &Image,
    v_target: usize,
    v_inter: usize,
    step_t: usize,
    teacher: &R,
    geo: &Geometry,
) -> Result<Image> {
    if v_inter < v_target {
        return Err(Error::Validation(format!(
            "intermediate level {v_inter} must not be sparser than the target {v_target}"
        )));
    }
    let x_t = degrade(x0, v_target, geo)?;
    let pred = teacher.restore(&x_t, &Condition::Null, step_t)?;
    cold_step(&x_t, &pred, v_target, v_inter, geo)
}

/// Null pass, normalized residual and the conditioned input for `state` at
/// step `step` whose degradation level is `views`.
fn residual_condition<R: Restorer + ?Sized>(
    model: &R,
    state: &Image,
    step: usize,
    views: usize,
    gain: f64,
    geo: &Geometry,
) -> Result<Condition> {
    let null_pred = model.restore(state, &Condition::Null, step)?;
    Condition::residual(observation_residual(state, &null_pred, views, gain, geo)?)
}

fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b, "mse")?;
    let sum: f64 = a.values().iter().zip(b.values()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    Ok(sum / a.values().len() as f64)
}

/// Residual-conditioned restoration loss of `model` on `state` against `x0`.
pub fn conditioned_loss<R: Restorer + ?Sized>(
    model: &R,
    state: &Image,
    x0: &Image,
    step: usize,
    views: usize,
    gain: f64,
    geo: &Geometry,
) -> Result<f64> {
    let cond = residual_condition(model, state, step, views, gain, geo)?;
    let loss = mse(&model.restore(state, &cond, step)?, x0)?;
    finite_loss(loss, "conditioned loss")
}

fn conditioned_loss_and_grad(
    model: &ConvRestorer,
    state: &Image,
    x0: &Image,
    step: usize,
    views: usize,
    gain: f64,
    geo: &Geometry,
) -> Result<(f64, Vec<f32>)> {
    let cond = residual_condition(model, state, step, views, gain, geo)?;
    model.loss_and_grad(state, &cond, step, x0)
}

fn finite_loss(loss: f64, stage: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { stage: stage.into() })
    }
}

/// Direct objective for one image at step `t` of the schedule.
pub fn direct_loss<R: Restorer + ?Sized>(
    x0: &Image,
    t: usize,
    model: &R,
    schedule: &ViewSchedule,
    gain: f64,
    geo: &Geometry,
) -> Result<f64> {
    let v = step_views(schedule, t, 1)?;
    let x_t = degrade(x0, v, geo)?;
    conditioned_loss(model, &x_t, x0, t, v, gain, geo)
}

/// Composite objective for one image: anchor at step `target_step`, train at
/// the denser step `t_inter`.
pub fn composite_loss<R: Restorer + ?Sized, Q: Restorer + ?Sized>(
    x0: &Image,
    target_step: usize,
    t_inter: usize,
    model: &R,
    teacher: &Q,
    schedule: &ViewSchedule,
    gain: f64,
    geo: &Geometry,
) -> Result<f64> {
    let (v_target, v_inter) = composite_levels(schedule, target_step, t_inter)?;
    let state = synthesize_propagated_state(x0, v_target, v_inter, target_step, teacher, geo)?;
    conditioned_loss(model, &state, x0, t_inter, v_inter, gain, geo)
}

fn step_views(schedule: &ViewSchedule, t: usize, min: usize) -> Result<usize> {
    if t < min || t > schedule.steps() {
        return Err(Error::Validation(format!("step {t} outside [{min}, {}]", schedule.steps())));
    }
    schedule.views_at(t)
}

fn composite_levels(schedule: &ViewSchedule, target_step: usize, t_inter: usize) -> Result<(usize, usize)> {
    let v_target = step_views(schedule, target_step, 2)?;
    if t_inter == 0 || t_inter >= target_step {
        return Err(Error::Validation(format!("intermediate step {t_inter} must lie in [1, {}]", target_step - 1)));
    }
    Ok((v_target, schedule.views_at(t_inter)?))
}

/// Model, optimizer and EMA state for a training run.
#[derive(Debug)]
pub struct Trainer {
    model: ConvRestorer,
    ema: EmaParams,
    adam: AdamState,
    cfg: TrainConfig,
    geo: Geometry,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    /// Fresh parameters initialized from `cfg.seed`; the EMA starts as a copy.
    pub fn new(arch: Architecture, cfg: TrainConfig, geo: Geometry) -> Result<Self> {
        let params = RestorerParams::init(arch, cfg.seed)?;
        Self::from_params(params, cfg, geo)
    }

    pub fn from_params(params: RestorerParams, cfg: TrainConfig, geo: Geometry) -> Result<Self> {
        cfg.validate()?;
        let arch = params.arch();
        if arch.max_step < cfg.schedule.steps() {
            return Err(Error::Validation(format!(
                "restorer embeds steps up to {} but the schedule has {}",
                arch.max_step,
                cfg.schedule.steps()
            )));
        }
        if arch.image_size != geo.image_size() {
            return Err(Error::Dimension(format!(
                "restorer size {} does not match geometry size {}",
                arch.image_size,
                geo.image_size()
            )));
        }
        if cfg.schedule.n_full() > geo.n_angles_full() {
            return Err(Error::Validation(format!(
                "schedule starts at {} views but the geometry has {}",
                cfg.schedule.n_full(),
                geo.n_angles_full()
            )));
        }
        let ema = EmaParams::new(params.clone(), cfg.ema_decay)?;
        let adam = AdamState::new(params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer { model: ConvRestorer::new(params), ema, adam, cfg, geo, rng, iteration: 0 })
    }

    pub fn model(&self) -> &ConvRestorer {
        &self.model
    }

    pub fn ema(&self) -> &EmaParams {
        &self.ema
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn into_parts(self) -> (RestorerParams, EmaParams) {
        (self.model.into_params(), self.ema)
    }

    /// One Adam update on the mean direct loss of `(x0, t)` pairs, then one
    /// EMA update. Returns the conditioned loss and, when `null_weight > 0`,
    /// the null-prediction loss, both measured before the update.
    pub fn direct_step(&mut self, batch: &[(&Image, usize)]) -> Result<(f64, Option<f64>)> {
        let (schedule, gain, geo, model) = (&self.cfg.schedule, self.cfg.residual_gain, &self.geo, &self.model);
        let weight = self.cfg.null_weight;
        let parts = batch
            .par_iter()
            .map(|&(x0, t)| {
                let v = step_views(schedule, t, 1)?;
                let x_t = degrade(x0, v, geo)?;
                if weight == 0.0 {
                    return Ok((conditioned_loss_and_grad(model, &x_t, x0, t, v, gain, geo)?, 0.0));
                }
                let (null_pred, null_loss, null_grad) = model.predict_loss_and_grad(&x_t, &Condition::Null, t, x0)?;
                let cond = Condition::residual(observation_residual(&x_t, &null_pred, v, gain, geo)?)?;
                let (loss, mut grad) = model.loss_and_grad(&x_t, &cond, t, x0)?;
                let w = weight as f32;
                grad.iter_mut().zip(null_grad).for_each(|(g, n)| *g += w * n);
                Ok(((loss, grad), null_loss))
            })
            .collect::<Result<Vec<_>>>()?;
        let null_loss = parts.iter().map(|(_, l)| l).sum::<f64>() / parts.len().max(1) as f64;
        let loss = self.apply(parts.into_iter().map(|(p, _)| p).collect(), "direct loss")?;
        Ok((loss, (weight > 0.0).then_some(null_loss)))
    }

    /// One Adam update on the mean composite loss of
    /// `(x0, target step, intermediate step)` triples, with states synthesized
    /// by the current EMA teacher, then one EMA update.
    pub fn composite_step(&mut self, batch: &[(&Image, usize, usize)]) -> Result<f64> {
        let teacher = ConvRestorer::new(self.ema.shadow().clone());
        let (schedule, gain, geo, model) = (&self.cfg.schedule, self.cfg.residual_gain, &self.geo, &self.model);
        let parts = batch
            .par_iter()
            .map(|&(x0, target_step, t_inter)| {
                let (v_target, v_inter) = composite_levels(schedule, target_step, t_inter)?;
                let state = synthesize_propagated_state(x0, v_target, v_inter, target_step, &teacher, geo)?;
                conditioned_loss_and_grad(model, &state, x0, t_inter, v_inter, gain, geo)
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply(parts, "composite loss")
    }

    fn apply(&mut self, parts: Vec<(f64, Vec<f32>)>, stage: &str) -> Result<f64> {
        let n = parts.len();
        if n == 0 {
            return Err(Error::Validation("empty training batch".into()));
        }
        let mut grad = vec![0f32; self.model.params().len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let inv = 1.0 / n as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        let loss = finite_loss(loss / n as f64, stage)?;
        adam_step(self.model.params_mut(), &grad, &mut self.adam, &self.cfg.adam)?;
        if !self.model.params().is_finite() {
            return Err(Error::NonFinite { stage: format!("parameters after {stage} update") });
        }
        self.ema.update(self.model.params())?;
        Ok(loss)
    }

    /// Draws a batch and levels, runs the direct then the composite update.
    pub fn iterate(&mut self, dataset: &[Image]) -> Result<TrainRecord> {
        if dataset.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        let start = Instant::now();
        let steps = self.cfg.schedule.steps();
        let b = self.cfg.batch_size;

        let direct: Vec<(&Image, usize)> =
            (0..b).map(|_| (&dataset[self.rng.gen_range(0..dataset.len())], self.rng.gen_range(1..=steps))).collect();
        let mut composite = Vec::with_capacity(b);
        for _ in 0..b {
            let x0 = &dataset[self.rng.gen_range(0..dataset.len())];
            let target = self.cfg.composite_targets[self.rng.gen_range(0..self.cfg.composite_targets.len())];
            let target_step = self.cfg.schedule.step_of(target).expect("validated target level");
            if target_step >= 2 {
                composite.push((x0, target_step, self.rng.gen_range(1..target_step)));
            }
        }

        let (restore_loss, null_loss) = self.direct_step(&direct)?;
        let compose_loss = if composite.is_empty() { None } else { Some(self.composite_step(&composite)?) };
        self.iteration += 1;
        Ok(TrainRecord {
            iteration: self.iteration,
            restore_loss,
            compose_loss,
            null_loss,
            ema_checksum: self.ema.shadow().checksum(),
            wall_time: start.elapsed(),
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: RestorerParams,
    pub ema: EmaParams,
    pub records: Vec<TrainRecord>,
}

/// Runs `cfg.iterations` iterations. `on_checkpoint` sees the trainer after
/// every `cfg.checkpoint_every` iterations.
pub fn train<F>(
    dataset: &[Image],
    arch: Architecture,
    cfg: TrainConfig,
    geo: Geometry,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    for img in dataset {
        geo.check_image(img)?;
        img.check_finite("training image")?;
    }
    let iterations = cfg.iterations;
    let every = cfg.checkpoint_every;
    let mut trainer = Trainer::new(arch, cfg, geo)?;
    let mut records = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        records.push(trainer.iterate(dataset)?);
        if every > 0 && trainer.iteration() % every == 0 {
            on_checkpoint(&trainer)?;
        }
    }
    let (params, ema) = trainer.into_parts();
    Ok(TrainOutcome { params, ema, records })
}
