//! One function per subcommand. Each returns the summary printed on
//! success; all files go under the configured output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nowcast_core::checkpoint::Checkpoint;
use nowcast_core::convlstm::{init_params, CellActivation, NetworkSpec};
use nowcast_core::datapipe::{format_time, load_csv, GridSeriesDataset, Variable};
use nowcast_core::metrics::{correlation_matrix, mean, pearson_cc, per_grid_report, Phase};
use nowcast_core::synth::gen_advection;
use nowcast_core::tensor::{Grid3, SeqBatch};
use nowcast_core::training::{backward, grad_check_against, relu_kink_margin, train_with, SampleSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::pipeline::{
    annotate, checkpoint_path, find_predictions, paired_series, predict_rows, predictions_path, prepare, prepare_with,
    parse_predictions_name, read_predictions, stats_from, window_from, write_predictions,
};
use crate::plots::{line_chart, scatter_chart};

/// Published predictor–rainfall correlations the matrix is compared with.
pub const REFERENCE_CORRELATIONS: [(Variable, f64); 2] = [(Variable::Rh500, 0.43), (Variable::Sp, -0.36)];
pub const ADVISORY_TOLERANCE: f64 = 0.05;

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<GridSeriesDataset> {
    load_csv(path).with_context(|| format!("loading {}", path.display()))
}

pub fn ingest(cfg: &RunConfig, path: &Path) -> Result<String> {
    let ds = load(path)?;
    let mut report = String::new();
    let _ = writeln!(report, "hours {}", ds.hours());
    let _ = writeln!(report, "start {}", format_time(ds.start_time()));
    let _ = writeln!(report, "end {}", format_time(ds.time_at(ds.hours() - 1)));
    let _ = writeln!(report, "{:<6} {:>16} {:>16} {:>16} unit", "code", "min", "max", "mean");
    for var in Variable::ALL {
        let v: Vec<f64> = ds.variable_values(var, 0..ds.hours()).collect();
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let _ = writeln!(
            report,
            "{:<6} {:>16.6e} {:>16.6e} {:>16.6e} {}",
            var.code(),
            lo,
            hi,
            mean(&v),
            var.unit()
        );
    }
    write(&cfg.out.join("ingest_report.txt"), &report)?;
    Ok(format!(
        "ok: {} hours from {} to {}",
        ds.hours(),
        format_time(ds.start_time()),
        format_time(ds.time_at(ds.hours() - 1))
    ))
}

pub fn synth(cfg: &RunConfig) -> Result<String> {
    let ds = gen_advection(&cfg.synth)?;
    let path = cfg.out.join("synthetic.csv");
    ds.save_csv(&path)?;
    Ok(format!("wrote {} ({} hours)", path.display(), ds.hours()))
}

/// Text comparing measured tp correlations with the published ones.
pub fn advisory_text(matrix: &nowcast_core::metrics::CorrelationMatrix) -> String {
    let mut s = format!(
        "{:<10} {:>9} {:>9} {:>10}  within ±{ADVISORY_TOLERANCE}\n",
        "pair", "measured", "published", "difference"
    );
    for (var, published) in REFERENCE_CORRELATIONS {
        let name = format!("tp-{}", var.code());
        match matrix.get(Variable::Tp, var) {
            Some(r) => {
                let d = r - published;
                let ok = if d.abs() <= ADVISORY_TOLERANCE { "yes" } else { "no" };
                let _ = writeln!(s, "{name:<10} {r:>9.4} {published:>9.2} {d:>+10.4}  {ok}");
            }
            None => {
                let _ = writeln!(s, "{name:<10} {:>9} {published:>9.2} {:>10}  n/a", "n/a", "n/a");
            }
        }
    }
    s
}

pub fn correlate(cfg: &RunConfig, data: &Path) -> Result<String> {
    let ds = load(data)?;
    let m = correlation_matrix(&ds, cfg.correlation_mode)?;
    write(&cfg.out.join("correlation.csv"), &m.to_csv())?;
    write(&cfg.out.join("correlation.txt"), &m.to_text())?;
    let advisory = advisory_text(&m);
    write(&cfg.out.join("correlation_advisory.txt"), &advisory)?;
    Ok(format!("correlation ({}):\n{}{advisory}", cfg.correlation_mode, m.to_text()))
}

pub fn train(cfg: &RunConfig, data: &Path, progress: &mut dyn FnMut(&str)) -> Result<String> {
    let ds = load(data)?;
    let prep = prepare(&ds, cfg.window)?;
    let lead = cfg.window.lead;
    let log_path = cfg.out.join(format!("train_log_lead{lead}.txt"));
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "epoch train_loss val_loss seconds")?;
    let mut log_error = None;
    let outcome = train_with(
        &cfg.network,
        init_params(&cfg.network, cfg.train.seed),
        &prep.train,
        &prep.validation,
        &cfg.train,
        &mut |rec| {
            let line = rec.log_line();
            if let Err(e) = writeln!(log, "{line}") {
                log_error.get_or_insert(e);
            }
            progress(&line);
        },
    )?;
    if let Some(e) = log_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }

    let mut ckpt = Checkpoint::new(cfg.network.clone(), outcome.params)?;
    annotate(&mut ckpt, cfg.window, &prep.stats);
    ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
    ckpt.metadata.insert("best_epoch".into(), outcome.history.best_epoch.to_string());
    ckpt.metadata.insert("stop_reason".into(), outcome.history.stop_reason.to_string());
    let path = checkpoint_path(&cfg.out, lead);
    ckpt.save(&path)?;
    prep.stats.save(&cfg.out.join(format!("normalization_lead{lead}.txt")))?;
    Ok(format!(
        "wrote {} ({} epochs, {}, best epoch {}; {} train / {} validation / {} test windows)",
        path.display(),
        outcome.history.epochs.len(),
        outcome.history.stop_reason,
        outcome.history.best_epoch,
        prep.train.len(),
        prep.validation.len(),
        prep.test.len()
    ))
}

pub fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Path, lead: Option<usize>) -> Result<String> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path(&cfg.out, lead.unwrap_or(cfg.window.lead)),
    };
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let window = window_from(&ckpt)?;
    if let Some(l) = lead {
        if l != window.lead {
            bail!("checkpoint {} was trained for lead {}, not {l}", path.display(), window.lead);
        }
    }
    let stats = stats_from(&ckpt)?;
    let ds = load(data)?;
    let prep = prepare_with(&ds, window, stats)?;
    let mut written = Vec::new();
    for (phase, set) in [(Phase::Training, &prep.train), (Phase::Testing, &prep.test)] {
        if set.is_empty() {
            continue;
        }
        let rows = predict_rows(&ckpt, &prep.stats, set)?;
        let out = predictions_path(&cfg.out, window.lead, phase);
        write_predictions(&out, &rows)?;
        written.push(out.display().to_string());
    }
    Ok(format!("wrote {}", written.join(", ")))
}

fn prediction_files(given: &[PathBuf], dir: &Path) -> Result<Vec<PathBuf>> {
    let files = if given.is_empty() { find_predictions(dir)? } else { given.to_vec() };
    if files.is_empty() {
        bail!("no predictions files (predictions_lead<N>_<phase>.csv) in {}", dir.display());
    }
    Ok(files)
}

pub fn evaluate(cfg: &RunConfig, predictions: &[PathBuf]) -> Result<String> {
    let files = prediction_files(predictions, &cfg.out)?;
    let report = per_grid_report(&paired_series(&files)?)?;
    let text = report.to_text();
    write(&cfg.out.join("metrics.txt"), &text)?;
    write(&cfg.out.join("metrics.json"), &(report.to_json() + "\n"))?;
    Ok(text)
}

pub fn report(cfg: &RunConfig, dir: Option<&Path>) -> Result<String> {
    let dir = dir.unwrap_or(&cfg.out);
    let files = prediction_files(&[], dir)?;
    let report = per_grid_report(&paired_series(&files)?)?;
    let table = report.to_text();
    write(&cfg.out.join("table2.txt"), &table)?;
    let plots = cfg.out.join("plots");
    fs::create_dir_all(&plots).with_context(|| format!("creating {}", plots.display()))?;
    let mut count = 0;
    for file in &files {
        let (lead, phase) = parse_predictions_name(file).ok_or_else(|| anyhow!("unexpected file {}", file.display()))?;
        for g in read_predictions(file)? {
            let stem = format!("grid{}_lead{lead}_{phase}", g.grid);
            let mut csv = String::from("time,observed_mm,predicted_mm\n");
            for ((t, o), p) in g.times.iter().zip(&g.observed).zip(&g.predicted) {
                let _ = writeln!(csv, "{t},{o},{p}");
            }
            write(&plots.join(format!("{stem}.csv")), &csv)?;
            let title = format!("Grid {} {phase}, {lead} h lead", g.grid);
            write(
                &plots.join(format!("{stem}_series.svg")),
                &line_chart(&title, &g.times, &g.observed, &g.predicted),
            )?;
            let r = pearson_cc(&g.observed, &g.predicted).ok();
            write(
                &plots.join(format!("{stem}_scatter.svg")),
                &scatter_chart(&title, &g.observed, &g.predicted, r),
            )?;
            count += 1;
        }
    }
    Ok(format!("{table}wrote table2.txt and {count} per-grid plot sets under {}", plots.display()))
}

/// Settings for the finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckArgs {
    pub layer1_filters: usize,
    pub layer2_filters: usize,
    pub steps: usize,
    pub batch: usize,
    pub fd_step: f64,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            layer1_filters: 4,
            layer2_filters: 2,
            steps: 4,
            batch: 2,
            fd_step: 1e-5,
        }
    }
}

/// A seeded random network, batch and targets. Peepholes and biases are
/// perturbed away from their initial zeros so every gradient path carries
/// signal; relu draws that land within 1e-3 of the kink are redrawn.
pub fn gradcheck_instance(
    spec: &NetworkSpec,
    seed: u64,
    steps: usize,
    batch: usize,
) -> Result<(nowcast_core::convlstm::NetworkParams, SeqBatch, Vec<Grid3>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, (h, w)) = (spec.input_channels, spec.grid);
    for _ in 0..1000 {
        let mut params = init_params(spec, rng.random());
        let mut flat = params.to_flat();
        for v in flat.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        params.set_flat(&flat)?;
        if !spec.peepholes {
            for cell in [&mut params.layer1, &mut params.layer2] {
                let f = cell.filters();
                cell.w_ci = Grid3::zeros(f, h, w);
                cell.w_cf = Grid3::zeros(f, h, w);
                cell.w_co = Grid3::zeros(f, h, w);
            }
        }
        let x: Vec<f64> = (0..batch * steps * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let seq = SeqBatch::new(batch, steps, c, h, w, x)?;
        let targets = (0..batch)
            .map(|_| Grid3::new(1, h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect::<nowcast_core::Result<Vec<_>>>()?;
        if spec.activation == CellActivation::Relu && relu_kink_margin(spec, &params, &seq)? < 1e-3 {
            continue;
        }
        return Ok((params, seq, targets));
    }
    bail!("could not draw a kink-free instance")
}

pub fn gradcheck(cfg: &RunConfig, args: GradcheckArgs) -> Result<String> {
    let spec = NetworkSpec {
        layer1_filters: args.layer1_filters,
        layer2_filters: args.layer2_filters,
        ..cfg.network.clone()
    };
    spec.validate()?;
    if args.steps == 0 || args.batch == 0 {
        bail!("steps and batch must be at least 1");
    }
    let (params, seq, targets) = gradcheck_instance(&spec, cfg.seed, args.steps, args.batch)?;
    let (_, grads) = backward(&spec, &params, &seq, &targets)?;
    let report = grad_check_against(&spec, &params, &seq, &targets, &grads, args.fd_step)?;
    let text = format!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, finite difference {:.6e}); {} parameters, {} activation, peepholes {}",
        report.max_relative_error,
        report.worst_parameter,
        report.worst_index,
        report.analytic,
        report.numeric,
        params.num_params(),
        spec.activation,
        if spec.peepholes { "on" } else { "off" }
    );
    write(&cfg.out.join("gradcheck.txt"), &format!("{text}\n"))?;
    Ok(text)
}
