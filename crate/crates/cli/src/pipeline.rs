//! Shared plumbing between commands: split-aware normalization, checkpoint
//! metadata, and the predictions file format.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Utc};
use nowcast_core::checkpoint::Checkpoint;
use nowcast_core::datapipe::{
    apply, fit_normalization, format_time, invert, make_windows, parse_time, split_counts, window_anchors,
    GridSeriesDataset, NormalizationStats, Variable, WindowSet, WindowSpec, GRID_COLS, GRID_ROWS,
};
use nowcast_core::metrics::{grid_id, PairedSeries, Phase};
use nowcast_core::training::{predict, SampleSource};

pub const PREDICTIONS_HEADER: &str = "timestamp_utc,row,col,observed_mm,predicted_mm";

/// Windows of a dataset split chronologically, normalized with statistics
/// from the training span.
pub struct Prepared {
    pub stats: NormalizationStats,
    pub train: WindowSet,
    pub validation: WindowSet,
    pub test: WindowSet,
}

/// Hours covered by the training windows: every input hour and every
/// target hour of the training split.
pub fn training_span(hours: usize, window: WindowSpec) -> Result<std::ops::Range<usize>> {
    let anchors = window_anchors(hours, window)?;
    let counts = split_counts(anchors.len())?;
    if counts.train == 0 {
        bail!("{hours} hours leave no training windows");
    }
    let last_anchor = anchors.start + counts.train - 1;
    Ok(0..last_anchor + window.lead + 1)
}

pub fn prepare(ds: &GridSeriesDataset, window: WindowSpec) -> Result<Prepared> {
    let stats = fit_normalization(ds, training_span(ds.hours(), window)?)?;
    prepare_with(ds, window, stats)
}

pub fn prepare_with(ds: &GridSeriesDataset, window: WindowSpec, stats: NormalizationStats) -> Result<Prepared> {
    let windows = make_windows(Arc::new(apply(ds, &stats)), window)?;
    let (train, validation, test) = windows.split()?;
    Ok(Prepared {
        stats,
        train,
        validation,
        test,
    })
}

pub fn checkpoint_path(out: &Path, lead: usize) -> PathBuf {
    out.join(format!("checkpoint_lead{lead}.txt"))
}

pub fn predictions_path(out: &Path, lead: usize, phase: Phase) -> PathBuf {
    out.join(format!("predictions_lead{lead}_{phase}.csv"))
}

/// Lead and phase encoded in a predictions file name.
pub fn parse_predictions_name(path: &Path) -> Option<(usize, Phase)> {
    let name = path.file_name()?.to_str()?;
    let rest = name.strip_prefix("predictions_lead")?.strip_suffix(".csv")?;
    let (lead, phase) = rest.split_once('_')?;
    Some((lead.parse().ok()?, phase.parse().ok()?))
}

/// Predictions files in `dir`, sorted by name.
pub fn find_predictions(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if parse_predictions_name(&path).is_some() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Stores window settings and normalization statistics alongside the
/// weights, so prediction needs only the checkpoint and the data.
pub fn annotate(ckpt: &mut Checkpoint, window: WindowSpec, stats: &NormalizationStats) {
    ckpt.metadata.insert("input_length".into(), window.input_length.to_string());
    ckpt.metadata.insert("lead".into(), window.lead.to_string());
    for line in stats.to_text().lines() {
        let (code, rest) = line.split_once(',').expect("stats lines start with a code");
        ckpt.metadata.insert(format!("norm.{code}"), rest.to_string());
    }
}

pub fn window_from(ckpt: &Checkpoint) -> Result<WindowSpec> {
    let get = |k: &str| -> Result<usize> {
        ckpt.metadata
            .get(k)
            .ok_or_else(|| anyhow!("checkpoint has no {k} entry"))?
            .parse()
            .map_err(|_| anyhow!("checkpoint {k} entry is not a count"))
    };
    Ok(WindowSpec {
        input_length: get("input_length")?,
        lead: get("lead")?,
    })
}

pub fn stats_from(ckpt: &Checkpoint) -> Result<NormalizationStats> {
    let mut text = String::new();
    for var in Variable::ALL {
        let rest = ckpt
            .metadata
            .get(&format!("norm.{}", var.code()))
            .ok_or_else(|| anyhow!("checkpoint has no normalization entry for {var}"))?;
        text.push_str(&format!("{},{rest}\n", var.code()));
    }
    Ok(NormalizationStats::from_text(&text)?)
}

/// One predicted grid per window, in millimetres.
pub struct PredictionRows {
    pub times: Vec<DateTime<Utc>>,
    /// `[window][cell]`
    pub observed: Vec<[f64; 4]>,
    pub predicted: Vec<[f64; 4]>,
}

/// Runs the network over `set` and maps outputs and targets back to mm.
pub fn predict_rows(ckpt: &Checkpoint, stats: &NormalizationStats, set: &WindowSet) -> Result<PredictionRows> {
    let raw = predict(&ckpt.spec, &ckpt.params, set)?;
    let mut rows = PredictionRows {
        times: Vec::with_capacity(set.len()),
        observed: Vec::with_capacity(set.len()),
        predicted: Vec::with_capacity(set.len()),
    };
    for (i, pred) in raw.iter().enumerate() {
        let obs = invert(&set.target(i), stats, Variable::Tp);
        let pred = invert(pred, stats, Variable::Tp);
        rows.times.push(set.series().time_at(set.target_hour(i)));
        rows.observed.push([obs[0], obs[1], obs[2], obs[3]]);
        rows.predicted.push([pred[0], pred[1], pred[2], pred[3]]);
    }
    Ok(rows)
}

pub fn write_predictions(path: &Path, rows: &PredictionRows) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "{PREDICTIONS_HEADER}")?;
    for (i, t) in rows.times.iter().enumerate() {
        let ts = format_time(*t);
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let k = r * GRID_COLS + c;
                writeln!(w, "{ts},{r},{c},{},{}", rows.observed[i][k], rows.predicted[i][k])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-grid observed/predicted series read back from a predictions file.
pub struct GridSeries {
    pub grid: usize,
    pub times: Vec<String>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<GridSeries>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header.join(",") != PREDICTIONS_HEADER {
        bail!("{}: header must be {PREDICTIONS_HEADER}", path.display());
    }
    let mut grids: Vec<GridSeries> = (0..GRID_ROWS * GRID_COLS)
        .map(|k| GridSeries {
            grid: k + 1,
            times: Vec::new(),
            observed: Vec::new(),
            predicted: Vec::new(),
        })
        .collect();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let field = |i: usize| rec.get(i).ok_or_else(|| anyhow!("{}:{line}: missing field", path.display()));
        parse_time(field(0)?).with_context(|| format!("{}:{line}", path.display()))?;
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(i)?
                .parse()
                .map_err(|_| anyhow!("{}:{line}: bad number", path.display()))?;
            if !v.is_finite() {
                bail!("{}:{line}: non-finite value", path.display());
            }
            Ok(v)
        };
        let cell = |i: usize, n: usize| -> Result<usize> {
            field(i)?
                .parse()
                .ok()
                .filter(|&v: &usize| v < n)
                .ok_or_else(|| anyhow!("{}:{line}: bad cell index", path.display()))
        };
        let g = &mut grids[grid_id(cell(1, GRID_ROWS)?, cell(2, GRID_COLS)?) - 1];
        g.times.push(field(0)?.to_string());
        g.observed.push(num(3)?);
        g.predicted.push(num(4)?);
    }
    Ok(grids)
}

/// Every grid of every predictions file as metric inputs.
pub fn paired_series(paths: &[PathBuf]) -> Result<Vec<PairedSeries>> {
    let mut out = Vec::new();
    for path in paths {
        let (lead, phase) = parse_predictions_name(path)
            .ok_or_else(|| anyhow!("{}: expected a name like predictions_lead6_testing.csv", path.display()))?;
        for g in read_predictions(path)? {
            out.push(PairedSeries {
                obs: g.observed,
                pred: g.predicted,
                grid: g.grid,
                phase,
                lead,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_names_round_trip() {
        let p = predictions_path(Path::new("o"), 12, Phase::Testing);
        assert_eq!(p, PathBuf::from("o/predictions_lead12_testing.csv"));
        assert_eq!(parse_predictions_name(&p), Some((12, Phase::Testing)));
        assert_eq!(parse_predictions_name(Path::new("predictions_leadx_testing.csv")), None);
        assert_eq!(parse_predictions_name(Path::new("metrics.json")), None);
    }

    #[test]
    fn training_span_ends_at_last_training_target() {
        // 1000 windows from anchors 23..1023; 850 train, last anchor 872.
        let span = training_span(1029, WindowSpec::default()).unwrap();
        assert_eq!(span, 0..879);
    }
}
