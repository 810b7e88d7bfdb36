//! Hourly 2×2 gridded series: CSV ingest and export, min-max normalization,
//! lead-time windowing and the chronological train/validation/test split.
//!
//! The CSV is in long format with the header
//! `timestamp_utc,row,col,variable,value`, one row per (hour, cell, variable)
//! and timestamps written as `YYYY-MM-DDTHH:00:00Z`. Rows may appear in any
//! order; the hours must form a contiguous range.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};

use crate::error::{Error, Result};
use crate::tensor::Grid3;
use crate::training::SampleSource;

pub const GRID_ROWS: usize = 2;
pub const GRID_COLS: usize = 2;
pub const CELLS: usize = GRID_ROWS * GRID_COLS;
pub const NUM_VARIABLES: usize = 12;
pub const CSV_HEADER: [&str; 5] = ["timestamp_utc", "row", "col", "variable", "value"];
const TIME_FORMAT: &str = "%Y-%m-%dT%H:00:00Z";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variable {
    T250,
    T500,
    T850,
    Rh250,
    Rh500,
    Rh850,
    Pv500,
    Pv850,
    Tcc,
    Hcc,
    Sp,
    Tp,
}

impl Variable {
    pub const ALL: [Variable; NUM_VARIABLES] = [
        Variable::T250,
        Variable::T500,
        Variable::T850,
        Variable::Rh250,
        Variable::Rh500,
        Variable::Rh850,
        Variable::Pv500,
        Variable::Pv850,
        Variable::Tcc,
        Variable::Hcc,
        Variable::Sp,
        Variable::Tp,
    ];

    /// Model inputs: everything except precipitation.
    pub const PREDICTORS: [Variable; 11] = [
        Variable::T250,
        Variable::T500,
        Variable::T850,
        Variable::Rh250,
        Variable::Rh500,
        Variable::Rh850,
        Variable::Pv500,
        Variable::Pv850,
        Variable::Tcc,
        Variable::Hcc,
        Variable::Sp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Variable::T250 => "t250",
            Variable::T500 => "t500",
            Variable::T850 => "t850",
            Variable::Rh250 => "rh250",
            Variable::Rh500 => "rh500",
            Variable::Rh850 => "rh850",
            Variable::Pv500 => "pv500",
            Variable::Pv850 => "pv850",
            Variable::Tcc => "tcc",
            Variable::Hcc => "hcc",
            Variable::Sp => "sp",
            Variable::Tp => "tp",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Variable::T250 | Variable::T500 | Variable::T850 => "K",
            Variable::Rh250 | Variable::Rh500 | Variable::Rh850 | Variable::Tcc | Variable::Hcc => "%",
            Variable::Pv500 | Variable::Pv850 => "K m2 kg-1 s-1",
            Variable::Sp => "Pa",
            Variable::Tp => "mm",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variable::ALL
            .iter()
            .copied()
            .find(|v| v.code() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variable code {s:?}")))
    }
}

#[inline]
fn flat_index(hour: usize, var: usize, row: usize, col: usize) -> usize {
    ((hour * NUM_VARIABLES + var) * GRID_ROWS + row) * GRID_COLS + col
}

pub fn format_time(t: DateTime<Utc>) -> String {
    t.format(TIME_FORMAT).to_string()
}

pub fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ")
        .map_err(|e| Error::InvalidArgument(format!("bad timestamp {s:?}: {e}")))?;
    if naive.minute() != 0 || naive.second() != 0 || s.len() != 20 {
        return Err(Error::InvalidArgument(format!(
            "timestamp {s:?} is not of the form YYYY-MM-DDTHH:00:00Z"
        )));
    }
    Ok(naive.and_utc())
}

/// Dense hourly series of all 12 variables on the 2×2 grid, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeriesDataset {
    start_time: DateTime<Utc>,
    hours: usize,
    values: Vec<f64>,
}

impl GridSeriesDataset {
    /// `values` is indexed `[hour][variable][row][col]`, variables in
    /// [`Variable::ALL`] order.
    pub fn new(start_time: DateTime<Utc>, hours: usize, values: Vec<f64>) -> Result<Self> {
        if hours == 0 {
            return Err(Error::Validation("dataset has no hours".into()));
        }
        if values.len() != hours * NUM_VARIABLES * CELLS {
            return Err(Error::Shape(format!(
                "{hours} hours need {} values, got {}",
                hours * NUM_VARIABLES * CELLS,
                values.len()
            )));
        }
        if start_time.minute() != 0 || start_time.second() != 0 || start_time.timestamp_subsec_nanos() != 0 {
            return Err(Error::Validation("start time must fall on the hour".into()));
        }
        if let Some(n) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset value at flat index {n}")));
        }
        let ds = Self {
            start_time,
            hours,
            values,
        };
        for h in 0..hours {
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    let v = ds.get(h, Variable::Tp, r, c);
                    if v < 0.0 {
                        return Err(Error::Validation(format!(
                            "negative tp {v} at {} cell ({r},{c})",
                            format_time(ds.time_at(h))
                        )));
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start_time
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time_at(&self, hour: usize) -> DateTime<Utc> {
        self.start_time + Duration::hours(hour as i64)
    }

    pub fn get(&self, hour: usize, var: Variable, row: usize, col: usize) -> f64 {
        self.values[flat_index(hour, var.index(), row, col)]
    }

    /// Values of `var` for hours in `span`, all four cells per hour.
    pub fn variable_values(&self, var: Variable, span: Range<usize>) -> impl Iterator<Item = f64> + '_ {
        span.flat_map(move |h| {
            let base = flat_index(h, var.index(), 0, 0);
            self.values[base..base + CELLS].iter().copied()
        })
    }

    /// Per-hour series of one variable at one cell.
    pub fn cell_series(&self, var: Variable, row: usize, col: usize) -> Vec<f64> {
        (0..self.hours).map(|h| self.get(h, var, row, col)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for h in 0..self.hours {
            let ts = format_time(self.time_at(h));
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    for var in Variable::ALL {
                        // `{}` on f64 prints the shortest representation that
                        // parses back to the same bits.
                        let value = format!("{}", self.get(h, var, r, c));
                        w.write_record([ts.as_str(), &r.to_string(), &c.to_string(), var.code(), &value])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(f))
    }
}

fn row_err(line: u64, message: impl Into<String>) -> Error {
    Error::DataRow {
        line,
        message: message.into(),
    }
}

/// Parses the long-format CSV.
pub fn read_csv<R: Read>(reader: R) -> Result<GridSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(row_err(1, format!("header must be exactly {}", CSV_HEADER.join(","))));
    }

    struct Row {
        line: u64,
        time: i64,
        row: usize,
        col: usize,
        var: Variable,
        value: f64,
    }
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 5 {
            return Err(row_err(line, format!("expected 5 fields, found {}", record.len())));
        }
        let time = parse_time(&record[0]).map_err(|e| row_err(line, e.to_string()))?;
        let cell = |s: &str, what: &str, n: usize| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v < n => Ok(v),
                _ => Err(row_err(line, format!("{what} {s:?} outside 0..{n}"))),
            }
        };
        let row = cell(&record[1], "row", GRID_ROWS)?;
        let col = cell(&record[2], "col", GRID_COLS)?;
        let var: Variable = record[3]
            .parse()
            .map_err(|_| row_err(line, format!("unknown variable code {:?}", &record[3])))?;
        let value: f64 = record[4]
            .trim()
            .parse()
            .map_err(|_| row_err(line, format!("unparseable value {:?}", &record[4])))?;
        if !value.is_finite() {
            return Err(row_err(line, format!("non-finite value {:?}", &record[4])));
        }
        if var == Variable::Tp && value < 0.0 {
            return Err(row_err(line, format!("negative tp {value}")));
        }
        rows.push(Row {
            line,
            time: time.timestamp(),
            row,
            col,
            var,
            value,
        });
    }
    let (Some(t0), Some(t1)) = (rows.iter().map(|r| r.time).min(), rows.iter().map(|r| r.time).max()) else {
        return Err(Error::Validation("file contains no data rows".into()));
    };
    let hours = ((t1 - t0) / 3600) as usize + 1;
    let start = DateTime::from_timestamp(t0, 0).expect("timestamp came from a parsed date");

    let mut values = vec![0.0; hours * NUM_VARIABLES * CELLS];
    let mut seen = vec![false; values.len()];
    for r in &rows {
        let h = ((r.time - t0) / 3600) as usize;
        let k = flat_index(h, r.var.index(), r.row, r.col);
        if seen[k] {
            return Err(row_err(
                r.line,
                format!(
                    "duplicate row for ({}, {}, {}, {})",
                    format_time(start + Duration::hours(h as i64)),
                    r.var,
                    r.row,
                    r.col
                ),
            ));
        }
        seen[k] = true;
        values[k] = r.value;
    }

    let per_hour = NUM_VARIABLES * CELLS;
    let mut missing = Vec::new();
    let mut missing_count = 0usize;
    for h in 0..hours {
        let block = &seen[h * per_hour..(h + 1) * per_hour];
        let ts = format_time(start + Duration::hours(h as i64));
        if block.iter().all(|s| !s) {
            return Err(Error::Validation(format!("gap in hours: no rows for {ts}")));
        }
        for var in Variable::ALL {
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    if !seen[flat_index(h, var.index(), r, c)] {
                        missing_count += 1;
                        if missing.len() < 20 {
                            missing.push(format!("({ts}, {var}, {r}, {c})"));
                        }
                    }
                }
            }
        }
    }
    if missing_count > 0 {
        let more = if missing_count > missing.len() {
            format!(" and {} more", missing_count - missing.len())
        } else {
            String::new()
        };
        return Err(Error::Validation(format!(
            "missing (hour, variable, row, col): {}{more}",
            missing.join(", ")
        )));
    }
    GridSeriesDataset::new(start, hours, values)
}

pub fn load_csv(path: &Path) -> Result<GridSeriesDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariableStats {
    pub min: f64,
    pub max: f64,
    /// `max == min`: every value normalizes to 0.
    pub degenerate: bool,
}

impl VariableStats {
    pub fn normalize(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            y * (self.max - self.min) + self.min
        }
    }
}

/// Per-variable min/max, in [`Variable::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    stats: [VariableStats; NUM_VARIABLES],
}

impl NormalizationStats {
    pub fn get(&self, var: Variable) -> &VariableStats {
        &self.stats[var.index()]
    }

    /// One line per variable: `code,min,max,degenerate`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for var in Variable::ALL {
            let st = self.get(var);
            s.push_str(&format!("{},{},{},{}\n", var.code(), st.min, st.max, st.degenerate));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut stats: [Option<VariableStats>; NUM_VARIABLES] = [None; NUM_VARIABLES];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| row_err(n as u64 + 1, m.to_string());
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(bad("expected code,min,max,degenerate"));
            }
            let var: Variable = parts[0].parse().map_err(|_| bad("unknown variable code"))?;
            let min: f64 = parts[1].parse().map_err(|_| bad("bad min"))?;
            let max: f64 = parts[2].parse().map_err(|_| bad("bad max"))?;
            let degenerate: bool = parts[3].parse().map_err(|_| bad("bad degenerate flag"))?;
            if !(min.is_finite() && max.is_finite() && min <= max) || degenerate != (min == max) {
                return Err(bad("inconsistent statistics"));
            }
            if stats[var.index()].replace(VariableStats { min, max, degenerate }).is_some() {
                return Err(bad("duplicate variable"));
            }
        }
        let mut out = [VariableStats {
            min: 0.0,
            max: 0.0,
            degenerate: true,
        }; NUM_VARIABLES];
        for (k, s) in stats.iter().enumerate() {
            out[k] = s.ok_or_else(|| {
                Error::Validation(format!("statistics missing for {}", Variable::ALL[k]))
            })?;
        }
        Ok(Self { stats: out })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_text(&text)
    }
}

/// Min/max of every variable over the hours in `train_span`.
pub fn fit_normalization(dataset: &GridSeriesDataset, train_span: Range<usize>) -> Result<NormalizationStats> {
    if train_span.is_empty() || train_span.end > dataset.hours {
        return Err(Error::InvalidArgument(format!(
            "training span {train_span:?} is empty or exceeds {} hours",
            dataset.hours
        )));
    }
    let mut stats = [VariableStats {
        min: 0.0,
        max: 0.0,
        degenerate: true,
    }; NUM_VARIABLES];
    for var in Variable::ALL {
        let (min, max) = dataset
            .variable_values(var, train_span.clone())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        stats[var.index()] = VariableStats {
            min,
            max,
            degenerate: min == max,
        };
    }
    Ok(NormalizationStats { stats })
}

/// A dataset mapped through [`NormalizationStats`]. Values outside the
/// training span may fall outside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    start_time: DateTime<Utc>,
    hours: usize,
    values: Vec<f64>,
}

impl NormalizedSeries {
    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start_time
    }

    pub fn time_at(&self, hour: usize) -> DateTime<Utc> {
        self.start_time + Duration::hours(hour as i64)
    }

    pub fn get(&self, hour: usize, var: Variable, row: usize, col: usize) -> f64 {
        self.values[flat_index(hour, var.index(), row, col)]
    }
}

pub fn apply(dataset: &GridSeriesDataset, stats: &NormalizationStats) -> NormalizedSeries {
    let mut values = dataset.values.clone();
    for block in values.chunks_mut(NUM_VARIABLES * CELLS) {
        for var in Variable::ALL {
            let st = stats.get(var);
            for v in &mut block[var.index() * CELLS..(var.index() + 1) * CELLS] {
                *v = st.normalize(*v);
            }
        }
    }
    NormalizedSeries {
        start_time: dataset.start_time,
        hours: dataset.hours,
        values,
    }
}

/// Maps normalized values of `var` back to physical units.
pub fn invert(values: &[f64], stats: &NormalizationStats, var: Variable) -> Vec<f64> {
    let st = stats.get(var);
    values.iter().map(|&v| st.denormalize(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Hours of predictors fed to the network.
    pub input_length: usize,
    /// Hours between the last input hour and the target hour.
    pub lead: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            input_length: 24,
            lead: 6,
        }
    }
}

/// Anchor hours `L-1 ..= hours-1-lead`, i.e. `hours - (L-1) - lead` windows.
pub fn window_anchors(hours: usize, spec: WindowSpec) -> Result<Range<usize>> {
    if spec.input_length == 0 || spec.lead == 0 {
        return Err(Error::InvalidArgument("input_length and lead must be at least 1".into()));
    }
    if hours < spec.input_length + spec.lead {
        return Err(Error::InvalidArgument(format!(
            "{hours} hours is too short for input_length {} and lead {}",
            spec.input_length, spec.lead
        )));
    }
    Ok(spec.input_length - 1..hours - spec.lead)
}

/// One training pair. `x` is `L × 11 × 2 × 2`, `y` is tp at the anchor
/// plus lead.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub x: Vec<f64>,
    pub y: Grid3,
    pub anchor: usize,
    pub anchor_time: DateTime<Utc>,
}

/// Windows over a normalized series, in anchor-time order. Samples are
/// materialized on demand.
#[derive(Debug, Clone)]
pub struct WindowSet {
    series: Arc<NormalizedSeries>,
    spec: WindowSpec,
    anchors: Range<usize>,
}

pub fn make_windows(series: Arc<NormalizedSeries>, spec: WindowSpec) -> Result<WindowSet> {
    let anchors = window_anchors(series.hours, spec)?;
    Ok(WindowSet { series, spec, anchors })
}

impl WindowSet {
    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn series(&self) -> &NormalizedSeries {
        &self.series
    }

    pub fn anchor(&self, i: usize) -> usize {
        assert!(i < self.anchors.len());
        self.anchors.start + i
    }

    pub fn anchors(&self) -> Range<usize> {
        self.anchors.clone()
    }

    pub fn anchor_time(&self, i: usize) -> DateTime<Utc> {
        self.series.time_at(self.anchor(i))
    }

    pub fn target_hour(&self, i: usize) -> usize {
        self.anchor(i) + self.spec.lead
    }

    pub fn get(&self, i: usize) -> WindowedSample {
        WindowedSample {
            x: self.input(i),
            y: Grid3::from_raw(1, GRID_ROWS, GRID_COLS, self.target(i)),
            anchor: self.anchor(i),
            anchor_time: self.anchor_time(i),
        }
    }

    /// Windows with indices in `range`, sharing the same series.
    pub fn slice(&self, range: Range<usize>) -> WindowSet {
        assert!(range.end <= self.anchors.len());
        WindowSet {
            series: Arc::clone(&self.series),
            spec: self.spec,
            anchors: self.anchors.start + range.start..self.anchors.start + range.end,
        }
    }

    /// Chronological train / validation / test split of these windows.
    pub fn split(&self) -> Result<(WindowSet, WindowSet, WindowSet)> {
        let c = split_counts(self.len())?;
        Ok((
            self.slice(0..c.train),
            self.slice(c.train..c.train + c.validation),
            self.slice(c.train + c.validation..self.len()),
        ))
    }
}

impl SampleSource for WindowSet {
    fn len(&self) -> usize {
        self.anchors.len()
    }

    fn steps(&self) -> usize {
        self.spec.input_length
    }

    fn input(&self, i: usize) -> Vec<f64> {
        let anchor = self.anchor(i);
        let first = anchor + 1 - self.spec.input_length;
        let mut x = Vec::with_capacity(self.spec.input_length * Variable::PREDICTORS.len() * CELLS);
        for h in first..=anchor {
            for var in Variable::PREDICTORS {
                let base = flat_index(h, var.index(), 0, 0);
                x.extend_from_slice(&self.series.values[base..base + CELLS]);
            }
        }
        x
    }

    fn target(&self, i: usize) -> Vec<f64> {
        let base = flat_index(self.target_hour(i), Variable::Tp.index(), 0, 0);
        self.series.values[base..base + CELLS].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// First 85% (floor) train; of the rest, the first 15% (floor) validation,
/// the remainder test.
pub fn split_counts(n: usize) -> Result<SplitCounts> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 samples to split, got {n}")));
    }
    let train = n * 85 / 100;
    let rest = n - train;
    let validation = rest * 15 / 100;
    Ok(SplitCounts {
        train,
        validation,
        test: rest - validation,
    })
}

pub fn split<T>(samples: &[T]) -> Result<(&[T], &[T], &[T])> {
    let c = split_counts(samples.len())?;
    let (train, rest) = samples.split_at(c.train);
    let (val, test) = rest.split_at(c.validation);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn start() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2011, 1, 1, 0, 0, 0).unwrap()
    }

    fn ramp(hours: usize) -> GridSeriesDataset {
        let values = (0..hours * NUM_VARIABLES * CELLS).map(|k| (k % 97) as f64 * 0.25).collect();
        GridSeriesDataset::new(start(), hours, values).unwrap()
    }

    fn csv_of(ds: &GridSeriesDataset) -> String {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn two_hour_file_loads() {
        let ds = ramp(2);
        let text = csv_of(&ds);
        assert_eq!(text.lines().count(), 97);
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.hours(), 2);
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_cell_is_named() {
        let text = csv_of(&ramp(2));
        let text: String = text
            .lines()
            .filter(|l| !l.starts_with("2011-01-01T01:00:00Z,1,0,rh500,"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = read_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("(2011-01-01T01:00:00Z, rh500, 1, 0)"), "{err}");
    }

    #[test]
    fn rejections_carry_line_numbers() {
        let good = csv_of(&ramp(1));
        let mut lines: Vec<String> = good.lines().map(String::from).collect();

        let mut dup = lines.clone();
        dup.push(lines[5].clone());
        let err = read_csv(dup.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DataRow { line: 50, .. }), "{err}");

        let mut unknown = lines.clone();
        unknown[3] = unknown[3].replace("t850", "q700");
        let err = read_csv(unknown.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DataRow { line: 4, .. }), "{err}");

        lines[7] = lines[7].rsplit_once(',').unwrap().0.to_string() + ",NaN";
        let err = read_csv(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DataRow { line: 8, .. }), "{err}");

        let bad_header = good.replacen("timestamp_utc", "time", 1);
        assert!(read_csv(bad_header.as_bytes()).is_err());
    }

    #[test]
    fn gap_in_hours_rejected() {
        let text = csv_of(&ramp(3));
        let text: String = text
            .lines()
            .filter(|l| !l.starts_with("2011-01-01T01:"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = read_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("gap"), "{err}");
    }

    #[test]
    fn negative_rain_rejected() {
        let text = csv_of(&ramp(1)).replace(",0,0,tp,", ",0,0,tp,-");
        assert!(read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn normalization_endpoints_and_degenerate() {
        let mut values = vec![7.0; 3 * NUM_VARIABLES * CELLS];
        for (h, x) in [0.0, 5.0, 10.0].into_iter().enumerate() {
            for c in 0..CELLS {
                values[flat_index(h, Variable::Rh500.index(), c / 2, c % 2)] = x;
            }
        }
        let ds = GridSeriesDataset::new(start(), 3, values).unwrap();
        let stats = fit_normalization(&ds, 0..3).unwrap();
        let n = apply(&ds, &stats);
        let got: Vec<f64> = (0..3).map(|h| n.get(h, Variable::Rh500, 1, 1)).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0]);
        assert!(stats.get(Variable::Sp).degenerate);
        assert_eq!(n.get(2, Variable::Sp, 0, 0), 0.0);
        assert_eq!(invert(&[0.0, 0.3], &stats, Variable::Sp), vec![7.0, 7.0]);
        assert!(fit_normalization(&ds, 0..0).is_err());
        assert!(fit_normalization(&ds, 0..4).is_err());
    }

    #[test]
    fn stats_text_round_trip() {
        let ds = ramp(5);
        let stats = fit_normalization(&ds, 0..4).unwrap();
        assert_eq!(NormalizationStats::from_text(&stats.to_text()).unwrap(), stats);
        assert!(NormalizationStats::from_text("tp,1,0,false\n").is_err());
    }

    #[test]
    fn out_of_span_values_normalize_outside_unit_interval() {
        let ds = ramp(10);
        let stats = fit_normalization(&ds, 0..1).unwrap();
        let n = apply(&ds, &stats);
        let any_outside = (0..10).any(|h| {
            Variable::ALL
                .iter()
                .any(|&v| !(0.0..=1.0).contains(&n.get(h, v, 0, 0)))
        });
        assert!(any_outside);
    }

    #[test]
    fn window_counts() {
        let spec = |l, lead| WindowSpec {
            input_length: l,
            lead,
        };
        assert_eq!(window_anchors(30, spec(24, 6)).unwrap().len(), 1);
        assert_eq!(window_anchors(105192, spec(24, 6)).unwrap().len(), 105163);
        assert_eq!(window_anchors(105192, spec(24, 12)).unwrap().len(), 105157);
        assert!(window_anchors(29, spec(24, 6)).is_err());
    }

    #[test]
    fn window_contents() {
        let ds = ramp(12);
        let stats = fit_normalization(&ds, 0..12).unwrap();
        let series = Arc::new(apply(&ds, &stats));
        let w = make_windows(Arc::clone(&series), WindowSpec { input_length: 3, lead: 2 }).unwrap();
        assert_eq!(w.len(), 12 - 2 - 2);
        let s = w.get(1);
        assert_eq!(s.anchor, 3);
        assert_eq!(s.x.len(), 3 * 11 * 4);
        // First frame is hour 1, first predictor t250 at cell (0,1).
        assert_eq!(s.x[1], series.get(1, Variable::T250, 0, 1));
        // Last frame, sp at cell (1,1).
        assert_eq!(s.x[s.x.len() - 1], series.get(3, Variable::Sp, 1, 1));
        assert_eq!(s.y.data()[2], series.get(5, Variable::Tp, 1, 0));
        assert_eq!(s.anchor_time, start() + Duration::hours(3));
    }

    #[test]
    fn split_arithmetic() {
        let c = split_counts(1000).unwrap();
        assert_eq!((c.train, c.validation, c.test), (850, 22, 128));
        let c = split_counts(3).unwrap();
        assert_eq!((c.train, c.validation, c.test), (2, 0, 1));
        let c = split_counts(105163).unwrap();
        assert_eq!((c.train, c.validation, c.test), (89388, 2366, 13409));
        assert!(split_counts(2).is_err());
        let v: Vec<usize> = (0..20).collect();
        let (a, b, t) = split(&v).unwrap();
        assert_eq!(a.len() + b.len() + t.len(), 20);
        assert_eq!(a.len(), 17);
    }
}
