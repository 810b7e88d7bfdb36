//! Forecast verification (CC, NSE, NRMSE), the predictor correlation
//! matrix, and the per-grid report laid out as grid × lead rows against
//! training/testing columns.
//!
//! NRMSE is RMSE divided by the mean of the observations. Metrics that have
//! no defined value for an input (constant series, zero-mean observations)
//! return [`Error::Undefined`] rather than a placeholder number.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::datapipe::{GridSeriesDataset, Variable, CELLS, NUM_VARIABLES};
use crate::error::{Error, Result};

fn check_pair(obs: &[f64], pred: &[f64]) -> Result<()> {
    if obs.len() != pred.len() {
        return Err(Error::Shape(format!(
            "observed has {} values, predicted {}",
            obs.len(),
            pred.len()
        )));
    }
    if obs.len() < 2 {
        return Err(Error::InvalidArgument("metrics need at least two values".into()));
    }
    if obs.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Arithmetic mean. Exposed so callers can build the mean predictor with
/// exactly the value [`nse`] centres on.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson_cc(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(obs, pred)?;
    let (mo, mp) = (mean(obs), mean(pred));
    let (mut sop, mut soo, mut spp) = (0.0, 0.0, 0.0);
    for (o, p) in obs.iter().zip(pred) {
        let (a, b) = (o - mo, p - mp);
        sop += a * b;
        soo += a * a;
        spp += b * b;
    }
    if soo == 0.0 || spp == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sop / (soo * spp).sqrt()).clamp(-1.0, 1.0))
}

/// Nash–Sutcliffe efficiency, `1 - Σ(o-p)² / Σ(o-ō)²`.
pub fn nse(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(obs, pred)?;
    let mo = mean(obs);
    let sse: f64 = obs.iter().zip(pred).map(|(o, p)| (o - p) * (o - p)).sum();
    let sst: f64 = obs.iter().map(|o| (o - mo) * (o - mo)).sum();
    if sst == 0.0 {
        return Err(Error::Undefined("NSE with constant observations".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Root-mean-square error over the mean observation.
pub fn nrmse(obs: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(obs, pred)?;
    let mo = mean(obs);
    if mo == 0.0 {
        return Err(Error::Undefined("NRMSE with zero-mean observations".into()));
    }
    let mse = obs.iter().zip(pred).map(|(o, p)| (o - p) * (o - p)).sum::<f64>() / obs.len() as f64;
    Ok(mse.sqrt() / mo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Testing,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Training => "training",
            Phase::Testing => "testing",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(Phase::Training),
            "testing" | "test" => Ok(Phase::Testing),
            _ => Err(Error::InvalidArgument(format!("unknown phase {s:?}"))),
        }
    }
}

/// Observed and predicted rainfall (mm) at one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    pub obs: Vec<f64>,
    pub pred: Vec<f64>,
    /// 1-based, row-major over the 2×2 grid.
    pub grid: usize,
    pub phase: Phase,
    pub lead: usize,
}

/// Grid number (1..=4) of cell `(row, col)`.
pub fn grid_id(row: usize, col: usize) -> usize {
    row * 2 + col + 1
}

/// Each metric is `None` when undefined for the series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsTriple {
    pub cc: Option<f64>,
    pub nse: Option<f64>,
    pub nrmse: Option<f64>,
}

impl MetricsTriple {
    pub fn compute(obs: &[f64], pred: &[f64]) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            cc: defined(pearson_cc(obs, pred))?,
            nse: defined(nse(obs, pred))?,
            nrmse: defined(nrmse(obs, pred))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub grid: usize,
    pub lead: usize,
    pub phase: Phase,
}

/// Metrics per (grid, lead, phase). Slots with no series are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub slots: BTreeMap<SlotKey, Option<MetricsTriple>>,
}

#[derive(Serialize)]
struct JsonEntry {
    grid: usize,
    phase: Phase,
    lead: usize,
    cc: Option<f64>,
    nse: Option<f64>,
    nrmse: Option<f64>,
}

pub const DEFAULT_LEADS: [usize; 2] = [6, 12];

/// Builds the 4 grids × 2 phases × leads table. Leads 6 and 12 always
/// have slots; any other lead present in `series` gets slots as well.
pub fn per_grid_report(series: &[PairedSeries]) -> Result<MetricsReport> {
    let mut leads: Vec<usize> = DEFAULT_LEADS.to_vec();
    for s in series {
        if !leads.contains(&s.lead) {
            leads.push(s.lead);
        }
    }
    let mut slots = BTreeMap::new();
    for grid in 1..=CELLS {
        for &lead in &leads {
            for phase in [Phase::Training, Phase::Testing] {
                slots.insert(SlotKey { grid, lead, phase }, None);
            }
        }
    }
    for s in series {
        if !(1..=CELLS).contains(&s.grid) {
            return Err(Error::InvalidArgument(format!("grid id {} outside 1..=4", s.grid)));
        }
        let key = SlotKey {
            grid: s.grid,
            lead: s.lead,
            phase: s.phase,
        };
        if slots.get(&key).is_some_and(|v| v.is_some()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate series for grid {} lead {} {}",
                s.grid, s.lead, s.phase
            )));
        }
        slots.insert(key, Some(MetricsTriple::compute(&s.obs, &s.pred)?));
    }
    Ok(MetricsReport { slots })
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

impl MetricsReport {
    pub fn get(&self, grid: usize, lead: usize, phase: Phase) -> Option<&MetricsTriple> {
        self.slots.get(&SlotKey { grid, lead, phase }).and_then(|s| s.as_ref())
    }

    pub fn absent_count(&self) -> usize {
        self.slots.values().filter(|s| s.is_none()).count()
    }

    fn leads(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.slots.keys().map(|k| k.lead).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Aligned text table: one row per grid and lead, training then testing
    /// columns. Absent slots print as `-`, undefined metrics as `n/a`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:<6} | {:>9} {:>9} {:>9} | {:>9} {:>9} {:>9}\n",
            "", "", "Training", "", "", "Testing", "", ""
        ));
        out.push_str(&format!(
            "{:<6} {:<6} | {:>9} {:>9} {:>9} | {:>9} {:>9} {:>9}\n",
            "Grid", "Lead", "CC", "NSE", "NRMSE", "CC", "NSE", "NRMSE"
        ));
        out.push_str(&format!("{}\n", "-".repeat(80)));
        for grid in 1..=CELLS {
            for lead in self.leads() {
                let mut cols = Vec::with_capacity(6);
                for phase in [Phase::Training, Phase::Testing] {
                    match self.slots.get(&SlotKey { grid, lead, phase }).copied().flatten() {
                        Some(m) => {
                            cols.push(fmt_metric(m.cc));
                            cols.push(fmt_metric(m.nse));
                            cols.push(fmt_metric(m.nrmse));
                        }
                        None => cols.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
                    }
                }
                out.push_str(&format!(
                    "{:<6} {:<6} | {:>9} {:>9} {:>9} | {:>9} {:>9} {:>9}\n",
                    format!("{grid}"),
                    format!("{lead}h"),
                    cols[0],
                    cols[1],
                    cols[2],
                    cols[3],
                    cols[4],
                    cols[5]
                ));
            }
        }
        out
    }

    /// JSON array of present slots with keys grid/phase/lead/cc/nse/nrmse;
    /// undefined metrics are `null`.
    pub fn to_json(&self) -> String {
        let entries: Vec<JsonEntry> = self
            .slots
            .iter()
            .filter_map(|(k, v)| {
                v.map(|m| JsonEntry {
                    grid: k.grid,
                    phase: k.phase,
                    lead: k.lead,
                    cc: m.cc,
                    nse: m.nse,
                    nrmse: m.nrmse,
                })
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("plain data serializes")
    }
}

/// How the four cells of each hour enter the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationMode {
    /// One value per hour: the mean over the grid.
    #[default]
    SpatialMean,
    /// Every (hour, cell) value is a separate observation.
    PooledCells,
}

impl fmt::Display for CorrelationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrelationMode::SpatialMean => "spatial-mean",
            CorrelationMode::PooledCells => "pooled-cells",
        })
    }
}

impl FromStr for CorrelationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial-mean" => Ok(CorrelationMode::SpatialMean),
            "pooled-cells" => Ok(CorrelationMode::PooledCells),
            _ => Err(Error::InvalidArgument(format!(
                "unknown correlation mode {s:?} (expected spatial-mean or pooled-cells)"
            ))),
        }
    }
}

/// Pearson coefficients between all 12 variables; `None` where a variable
/// is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    values: [[Option<f64>; NUM_VARIABLES]; NUM_VARIABLES],
}

impl CorrelationMatrix {
    pub fn get(&self, a: Variable, b: Variable) -> Option<f64> {
        self.values[a.index()][b.index()]
    }

    /// CSV with a header of variable codes; undefined entries are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable");
        for v in Variable::ALL {
            s.push(',');
            s.push_str(v.code());
        }
        s.push('\n');
        for a in Variable::ALL {
            s.push_str(a.code());
            for b in Variable::ALL {
                s.push(',');
                if let Some(r) = self.get(a, b) {
                    s.push_str(&format!("{r}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>7}", "");
        for v in Variable::ALL {
            s.push_str(&format!("{:>7}", v.code()));
        }
        s.push('\n');
        for a in Variable::ALL {
            s.push_str(&format!("{:>7}", a.code()));
            for b in Variable::ALL {
                match self.get(a, b) {
                    Some(r) => s.push_str(&format!("{r:>7.2}")),
                    None => s.push_str(&format!("{:>7}", "n/a")),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn correlation_matrix(dataset: &GridSeriesDataset, mode: CorrelationMode) -> Result<CorrelationMatrix> {
    if dataset.hours() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two hours".into()));
    }
    let series: Vec<Vec<f64>> = Variable::ALL
        .iter()
        .map(|&v| {
            let all: Vec<f64> = dataset.variable_values(v, 0..dataset.hours()).collect();
            match mode {
                CorrelationMode::PooledCells => all,
                CorrelationMode::SpatialMean => all.chunks(CELLS).map(|c| c.iter().sum::<f64>() / CELLS as f64).collect(),
            }
        })
        .collect();
    let mut values = [[None; NUM_VARIABLES]; NUM_VARIABLES];
    for a in 0..NUM_VARIABLES {
        for b in a..NUM_VARIABLES {
            let r = match pearson_cc(&series[a], &series[b]) {
                Ok(r) => Some(if a == b { 1.0 } else { r }),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            values[a][b] = r;
            values[b][a] = r;
        }
    }
    Ok(CorrelationMatrix { values })
}
