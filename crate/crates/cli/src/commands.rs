//! Subcommand implementations.
//!
//! Every CSV written here has a header row and a fixed column order. All
//! of them except `timing.csv` are byte-identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;

use recodiff_core::metrics::{psnr_for_csv, MetricReport};
use recodiff_core::phantoms::{self, Dataset, ManifestEntry, PhantomKind};
use recodiff_core::restorer::{load_params_expecting, save_params, ConvRestorer, OracleRestorer, Restorer};
use recodiff_core::sampler::{sample_naive, sample_reco, SampleTrace};
use recodiff_core::tomo::io::{
    export_error_map, export_image, read_image_raw, read_sinogram_raw, write_image_raw, DisplayWindow,
};
use recodiff_core::tomo::{degrade, fbp, subsample_views, Geometry, HuMap, Image, Window};
use recodiff_core::training::{train_log_csv, Trainer};
use recodiff_core::{ScheduleStrategy, ViewSchedule};

use crate::config::{ExperimentConfig, Method};
use crate::CliError;

/// Absolute HU error shown at full red in error maps.
pub const ERROR_MAP_SCALE_HU: f64 = 100.0;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PhantomGenArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub kind: PhantomKind,
    pub force: bool,
}

pub fn phantom_gen(args: &PhantomGenArgs) -> Result<Vec<ManifestEntry>, CliError> {
    Ok(phantoms::generate_dataset(&args.out, args.count, args.seed, args.size, args.kind, args.force)?)
}

/// File names inside a training output directory.
pub const PARAMS_FILE: &str = "params.rcw";
pub const EMA_FILE: &str = "ema.rcw";
pub const META_FILE: &str = "meta.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_restore_loss: Option<f64>,
    pub out: PathBuf,
}

fn checkpoint_meta(cfg: &ExperimentConfig, trainer: &Trainer) -> String {
    format!(
        "iteration = {}\nseed = {}\nconfig_sha256 = \"{}\"\narchitecture = \"{}\"\nparams_checksum = \"{:016x}\"\nema_checksum = \"{:016x}\"\n",
        trainer.iteration(),
        cfg.seed,
        cfg.text_hash,
        trainer.model().arch().descriptor(),
        trainer.model().params().checksum(),
        trainer.ema().shadow().checksum(),
    )
}

fn write_checkpoint(dir: &Path, cfg: &ExperimentConfig, trainer: &Trainer) -> Result<(), CliError> {
    create_dir(dir)?;
    save_params(trainer.model().params(), &dir.join(PARAMS_FILE))?;
    save_params(trainer.ema().shadow(), &dir.join(EMA_FILE))?;
    write_text(&dir.join(META_FILE), &checkpoint_meta(cfg, trainer))
}

/// Trains on `train.dataset` and writes final raw and EMA weights, the
/// metadata sidecar and the training log into `output`. Intermediate
/// checkpoints go to `output/checkpoints/iter_NNNNNN`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    let data_dir = cfg.train_dataset()?;
    let tcfg = cfg.train_config()?;
    let geo = cfg.geometry()?;
    let dataset = Dataset::load(data_dir)?;
    if dataset.is_empty() {
        return Err(CliError::Config(format!("train.dataset: {} holds no images", data_dir.display())));
    }
    for (e, img) in dataset.entries.iter().zip(&dataset.images) {
        if img.width() != geo.image_size() || img.height() != geo.image_size() {
            return Err(CliError::Config(format!(
                "train.dataset: image {} is {}x{}, geometry.image_size is {}",
                e.id,
                img.width(),
                img.height(),
                geo.image_size()
            )));
        }
    }
    let out = cfg.output.clone();
    create_dir(&out)?;

    let every = tcfg.checkpoint_every;
    let mut trainer = Trainer::new(cfg.architecture()?, tcfg.clone(), geo)?;
    let mut records = Vec::with_capacity(tcfg.iterations);
    for _ in 0..tcfg.iterations {
        records.push(trainer.iterate(&dataset.images)?);
        if every > 0 && trainer.iteration() % every == 0 {
            let dir = out.join("checkpoints").join(format!("iter_{:06}", trainer.iteration()));
            write_checkpoint(&dir, cfg, &trainer)?;
        }
    }
    write_checkpoint(&out, cfg, &trainer)?;
    write_text(&out.join(TRAIN_LOG_FILE), &train_log_csv(&records))?;
    Ok(TrainSummary {
        iterations: trainer.iteration(),
        final_restore_loss: records.last().map(|r| r.restore_loss),
        out,
    })
}

/// Which stored weights drive the learned samplers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weights {
    #[default]
    Ema,
    Params,
}

impl std::str::FromStr for Weights {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ema" => Ok(Weights::Ema),
            "params" => Ok(Weights::Params),
            other => Err(format!("unknown weights {other:?} (expected ema or params)")),
        }
    }
}

/// Loads the trained restorer, checking it against the configured
/// architecture.
pub fn load_model(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    weights: Weights,
) -> Result<ConvRestorer, CliError> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => cfg.output.join(match weights {
            Weights::Ema => EMA_FILE,
            Weights::Params => PARAMS_FILE,
        }),
    };
    let params = load_params_expecting(&path, &cfg.architecture()?)?;
    Ok(ConvRestorer::new(params))
}

/// The schedule that ends at `views`, keeping the configured step indices.
pub fn schedule_for(cfg: &ExperimentConfig, views: usize) -> Result<ViewSchedule, CliError> {
    cfg.schedule()?.truncated_at(views).map_err(|_| {
        CliError::Config(format!("views: {views} is not a level of schedule.levels {:?}", cfg.schedule.levels))
    })
}

/// Runs `method` from the sparse-view input `x_t`.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    x_t: &Image,
    views: usize,
    model: Option<&dyn Restorer>,
    reference: Option<&Image>,
    keep_states: bool,
) -> Result<(Image, Option<SampleTrace>), CliError> {
    if method == Method::Fbp {
        return Ok((x_t.clone(), None));
    }
    let geo = cfg.geometry()?;
    let schedule = schedule_for(cfg, views)?;
    let model = model.ok_or_else(|| CliError::Config(format!("method {} needs a trained restorer", method.name())))?;
    let mut opts = cfg.sampler_options(views, schedule.steps());
    opts.reference = reference.cloned();
    opts.keep_states = keep_states;
    let (out, trace) = match method {
        Method::Naive => sample_naive(x_t, &schedule, model, &opts, &geo)?,
        Method::Reco => sample_reco(x_t, &schedule, model, &opts, &geo)?,
        Method::Fbp => unreachable!(),
    };
    Ok((out, Some(trace)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputKind {
    /// A clean image, degraded to the requested view count.
    #[default]
    Image,
    /// A full-scan or already sparse sinogram.
    Sinogram,
}

impl std::str::FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(InputKind::Image),
            "sinogram" => Ok(InputKind::Sinogram),
            other => Err(format!("unknown input kind {other:?} (expected image or sinogram)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructArgs {
    pub input: PathBuf,
    pub input_kind: InputKind,
    pub method: Method,
    pub views: usize,
    pub out: Option<PathBuf>,
    /// Ground truth. Defaults to the input for image inputs.
    pub reference: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub weights: Weights,
    /// Replace the restorer by one that always returns the reference.
    pub oracle: bool,
    pub dump_states: bool,
}

#[derive(Clone, Debug)]
pub struct ReconstructSummary {
    pub output: PathBuf,
    pub metrics: Option<MetricReport>,
    pub nfe: usize,
}

fn sparse_input(args: &ReconstructArgs, geo: &Geometry) -> Result<(Image, Option<Image>), CliError> {
    let hu = Some(HuMap::DEFAULT);
    match args.input_kind {
        InputKind::Image => {
            let x0 = read_image_raw(&args.input, hu)?;
            Ok((degrade(&x0, args.views, geo)?, Some(x0)))
        }
        InputKind::Sinogram => {
            let n_full = geo.n_angles_full();
            let raw = recodiff_core::tomo::io::read_raw(&args.input)?;
            let sino = if raw.rows == n_full {
                subsample_views(&read_sinogram_raw(&args.input, n_full)?, args.views, geo)?
            } else if raw.rows == args.views {
                read_sinogram_raw(&args.input, n_full)?
            } else {
                return Err(CliError::Config(format!(
                    "--input: sinogram has {} views; expected {n_full} or {}",
                    raw.rows, args.views
                )));
            };
            Ok((fbp(&sino, geo, Window::RamLak)?.with_hu_map(hu), None))
        }
    }
}

/// Reconstructs one input and writes `recon_<method>_<views>.{raw,png}`,
/// the trace CSV for diffusion methods, and an error map when a reference
/// is known.
pub fn reconstruct(cfg: &ExperimentConfig, args: &ReconstructArgs) -> Result<ReconstructSummary, CliError> {
    let geo = cfg.geometry()?;
    if args.views == 0 || args.views > geo.n_angles_full() {
        return Err(CliError::Config(format!("--views must lie in [1, {}]", geo.n_angles_full())));
    }
    if args.method != Method::Fbp {
        schedule_for(cfg, args.views)?;
    }
    let (x_t, from_input) = sparse_input(args, &geo)?;
    let reference = match &args.reference {
        Some(p) => Some(read_image_raw(p, Some(HuMap::DEFAULT))?),
        None => from_input,
    };
    if args.oracle && reference.is_none() {
        return Err(CliError::Config("--oracle-restorer needs a reference image".into()));
    }

    let oracle;
    let trained;
    let model: Option<&dyn Restorer> = match (args.method, args.oracle) {
        (Method::Fbp, _) => None,
        (_, true) => {
            oracle = OracleRestorer::new(reference.clone().expect("checked above"));
            Some(&oracle)
        }
        (_, false) => {
            trained = load_model(cfg, args.checkpoint.as_deref(), args.weights)?;
            Some(&trained)
        }
    };

    let (recon, trace) = run_method(cfg, args.method, &x_t, args.views, model, reference.as_ref(), args.dump_states)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.join("reconstruct"));
    create_dir(&out)?;
    let stem = format!("{}_{}", args.method.name(), args.views);
    let recon_path = out.join(format!("recon_{stem}.raw"));
    write_image_raw(&recon, &recon_path)?;
    export_image(&recon, DisplayWindow::default(), &out.join(format!("recon_{stem}.png")))?;

    let mut nfe = 0;
    if let Some(trace) = &trace {
        nfe = trace.nfe;
        trace.write_csv(&out.join(format!("trace_{stem}.csv")))?;
        if args.dump_states {
            let dir = out.join(format!("states_{stem}"));
            create_dir(&dir)?;
            for (t, state) in &trace.states {
                export_image(state, DisplayWindow::default(), &dir.join(format!("state_t{t}.pgm")))?;
            }
        }
    }
    let metrics = match &reference {
        Some(r) => {
            export_error_map(&recon, r, ERROR_MAP_SCALE_HU, &out.join(format!("error_{stem}.png")))?;
            write_text(&out.join("error_legend.txt"), &error_legend())?;
            Some(MetricReport::compute(&recon, r)?)
        }
        None => None,
    };
    Ok(ReconstructSummary { output: recon_path, metrics, nfe })
}

fn error_legend() -> String {
    format!(
        "error maps show |reconstruction - reference| in HU\nblack = 0 HU\nfull red = {ERROR_MAP_SCALE_HU} HU or more\n"
    )
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateArgs {
    pub dataset: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub views: Option<Vec<usize>>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub weights: Option<Weights>,
}

/// One per-image evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub views: usize,
    pub method: Method,
    pub report: MetricReport,
    pub nfe: usize,
    pub seconds: f64,
}

/// Mean of the rows for one `(views, method)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub views: usize,
    pub method: Method,
    pub count: usize,
    pub rmse_hu: f64,
    pub psnr_db: f64,
    pub ssim_pct: f64,
    pub nfe: usize,
    pub mean_seconds: f64,
}

pub const METRICS_HEADER: &str = "id,views,method,rmse_hu,psnr_db,ssim_pct";
pub const SUMMARY_HEADER: &str = "views,method,count,rmse_hu,psnr_db,ssim_pct,nfe,data_range";

/// Evaluates every method at every view setting on every image of the test
/// dataset. Images run in parallel; each reconstruction is sequential.
pub fn evaluate(cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<(Vec<EvalRow>, Vec<EvalSummary>), CliError> {
    let data_dir = match &args.dataset {
        Some(p) if p.is_dir() => p.as_path(),
        Some(p) => return Err(CliError::Config(format!("--dataset: {} does not exist", p.display()))),
        None => cfg.evaluate_dataset()?,
    };
    let methods: Vec<Method> = match &args.methods {
        Some(m) => m.clone(),
        None => cfg.evaluate.methods.iter().map(|m| m.parse().expect("validated")).collect(),
    };
    let views = args.views.clone().unwrap_or_else(|| cfg.evaluate.views.clone());
    for &v in &views {
        schedule_for(cfg, v)?;
    }
    let geo = cfg.geometry()?;
    let dataset = Dataset::load(data_dir)?;
    let weights = args.weights.unwrap_or_else(|| cfg.evaluate.weights.parse().expect("validated"));
    let model = if methods.iter().any(|&m| m != Method::Fbp) {
        Some(load_model(cfg, args.checkpoint.as_deref(), weights)?)
    } else {
        None
    };

    let per_image: Vec<Vec<EvalRow>> = dataset
        .entries
        .par_iter()
        .zip(dataset.images.par_iter())
        .map(|(entry, x0)| -> Result<Vec<EvalRow>, CliError> {
            let mut rows = Vec::new();
            for &v in &views {
                let x_t = degrade(x0, v, &geo)?;
                for &method in &methods {
                    let start = Instant::now();
                    let (recon, trace) =
                        run_method(cfg, method, &x_t, v, model.as_ref().map(|m| m as &dyn Restorer), None, false)?;
                    let seconds = start.elapsed().as_secs_f64();
                    rows.push(EvalRow {
                        id: entry.id.clone(),
                        views: v,
                        method,
                        report: MetricReport::compute(&recon, x0)?,
                        nfe: trace.map_or(0, |t| t.nfe),
                        seconds,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<EvalRow> = per_image.into_iter().flatten().collect();
    let summary = summarize(&rows, &views, &methods);

    let out = args.out.clone().unwrap_or_else(|| cfg.output.join("evaluate"));
    create_dir(&out)?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_text(&out.join("summary.csv"), &summary_csv(&summary))?;
    write_text(&out.join("timing.csv"), &timing_csv(&summary))?;
    Ok((rows, summary))
}

pub fn summarize(rows: &[EvalRow], views: &[usize], methods: &[Method]) -> Vec<EvalSummary> {
    let mut out = Vec::new();
    for &v in views {
        for &m in methods {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.views == v && r.method == m).collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            let mean = |f: &dyn Fn(&EvalRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            out.push(EvalSummary {
                views: v,
                method: m,
                count: sel.len(),
                rmse_hu: mean(&|r| r.report.rmse_hu),
                psnr_db: mean(&|r| psnr_for_csv(r.report.psnr_db)),
                ssim_pct: mean(&|r| r.report.ssim_pct()),
                nfe: sel[0].nfe,
                mean_seconds: mean(&|r| r.seconds),
            });
        }
    }
    out
}

pub fn metrics_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.id,
            r.views,
            r.method.name(),
            r.report.rmse_hu,
            psnr_for_csv(r.report.psnr_db),
            r.report.ssim_pct()
        )
        .unwrap();
    }
    s
}

pub fn summary_csv(summary: &[EvalSummary]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for m in summary {
        writeln!(
            s,
            "{},{},{},{},{},{},{},1",
            m.views,
            m.method.name(),
            m.count,
            m.rmse_hu,
            m.psnr_db,
            m.ssim_pct,
            m.nfe
        )
        .unwrap();
    }
    s
}

/// Wall-clock means; the only output that differs between reruns.
pub fn timing_csv(summary: &[EvalSummary]) -> String {
    let mut s = String::from("views,method,mean_seconds\n");
    for m in summary {
        writeln!(s, "{},{},{}", m.views, m.method.name(), m.mean_seconds).unwrap();
    }
    s
}

/// Builds a schedule from its endpoints for pasting into a config.
pub fn schedule_levels(
    n_full: usize,
    target: usize,
    steps: usize,
    strategy: ScheduleStrategy,
) -> Result<ViewSchedule, CliError> {
    ViewSchedule::build(n_full, target, steps, strategy).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, psnr: f64, nfe: usize) -> EvalRow {
        EvalRow {
            id: id.into(),
            views: 18,
            method: Method::Reco,
            report: MetricReport { rmse_hu: 10.0, psnr_db: psnr, ssim: 0.9, data_range: 1.0 },
            nfe,
            seconds: 0.5,
        }
    }

    #[test]
    fn single_row_summary_equals_the_row() {
        let rows = vec![row("a", 31.5, 6)];
        let s = summarize(&rows, &[18], &[Method::Reco]);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].psnr_db, s[0].rmse_hu, s[0].nfe, s[0].count), (31.5, 10.0, 6, 1));
        assert!((s[0].ssim_pct - 90.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layouts() {
        let rows = vec![row("a", f64::INFINITY, 6), row("b", 30.0, 6)];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "a,18,reco,10,100,90");
        let s = summary_csv(&summarize(&rows, &[18], &[Method::Reco]));
        assert_eq!(s.lines().nth(1).unwrap(), "18,reco,2,10,65,90,6,1");
    }
}
