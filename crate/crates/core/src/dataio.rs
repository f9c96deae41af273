//! Monthly macro series: CSV ingestion, log-difference standardization,
//! hand-specified train/validation segments and recession bands.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// First day of a calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month(NaiveDate);

impl Month {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, 1).map(Month)
    }

    pub fn year(&self) -> i32 {
        self.0.year()
    }

    pub fn month(&self) -> u32 {
        self.0.month()
    }

    pub fn succ(&self) -> Month {
        let (y, m) = if self.month() == 12 { (self.year() + 1, 1) } else { (self.year(), self.month() + 1) };
        Month::new(y, m).expect("valid month")
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = String;

    /// Accepts `YYYY-MM` or an ISO date `YYYY-MM-DD` (day must be valid).
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let date = NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .or_else(|_| NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d"))
            .map_err(|_| format!("invalid date `{s}`"))?;
        Ok(Month(date.with_day(1).expect("day 1 exists")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroSeries {
    pub name: String,
    pub dates: Vec<Month>,
    pub values: Vec<f64>,
}

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), detail: detail.into() }
}

/// Reads a two-column `date,value` CSV with strictly increasing monthly dates.
/// The series is named after the file stem.
pub fn load_csv(path: &Path) -> Result<MacroSeries> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "date" || &headers[1] != "value" {
        return Err(parse_err(path, "expected header `date,value`"));
    }
    let mut dates: Vec<Month> = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let d: Month = rec[0].parse().map_err(|e: String| parse_err(path, format!("line {row}: {e}")))?;
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| parse_err(path, format!("line {row}: invalid value `{}`", &rec[1])))?;
        if !v.is_finite() {
            return Err(parse_err(path, format!("line {row}: non-finite value")));
        }
        if let Some(prev) = dates.last() {
            if d == *prev {
                return Err(parse_err(path, format!("duplicate date {d}")));
            }
            if d < *prev {
                return Err(parse_err(path, format!("dates not increasing at {d}")));
            }
        }
        dates.push(d);
        values.push(v);
    }
    if dates.is_empty() {
        return Err(parse_err(path, "no observations"));
    }
    Ok(MacroSeries { name, dates, values })
}

/// Inner join on month. The common index must be gap-free.
pub fn align(series: &[MacroSeries]) -> Result<(Vec<Month>, Mat)> {
    if series.is_empty() {
        return Err(Error::Data("no series to align".into()));
    }
    let maps: Vec<BTreeMap<Month, f64>> =
        series.iter().map(|s| s.dates.iter().copied().zip(s.values.iter().copied()).collect()).collect();
    let dates: Vec<Month> = series[0].dates.iter().copied().filter(|d| maps.iter().all(|m| m.contains_key(d))).collect();
    if dates.len() < 2 {
        return Err(Error::Data("series share fewer than two months".into()));
    }
    for w in dates.windows(2) {
        if w[1] != w[0].succ() {
            return Err(Error::Data(format!("common monthly index has a gap between {} and {}", w[0], w[1])));
        }
    }
    let mut m = Mat::zeros(dates.len(), series.len());
    for (t, d) in dates.iter().enumerate() {
        for (i, map) in maps.iter().enumerate() {
            m.set(t, i, map[d]);
        }
    }
    Ok((dates, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub names: Vec<String>,
    /// Month of each row (the later month of each difference).
    pub dates: Vec<Month>,
    /// Standardized log differences, `N x k`.
    pub y: Mat,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Columns with zero variance (left centred, not scaled).
    pub degenerate: Vec<bool>,
}

/// Log differences `ln v_t - ln v_{t-1}`, standardized per column with the
/// population standard deviation.
pub fn transform(series: &[MacroSeries]) -> Result<Transformed> {
    let (dates, levels) = align(series)?;
    for (i, s) in series.iter().enumerate() {
        for (t, d) in dates.iter().enumerate() {
            if levels.get(t, i) <= 0.0 {
                return Err(Error::Data(format!("series `{}` has a non-positive level at {d}", s.name)));
            }
        }
    }
    let n = dates.len() - 1;
    let k = series.len();
    let mut y = Mat::zeros(n, k);
    for t in 0..n {
        for i in 0..k {
            y.set(t, i, levels.get(t + 1, i).ln() - levels.get(t, i).ln());
        }
    }
    let mut means = Vec::with_capacity(k);
    let mut sds = Vec::with_capacity(k);
    let mut degenerate = Vec::with_capacity(k);
    for i in 0..k {
        let col = y.col(i);
        let m = crate::stats::mean(&col);
        let sd = crate::stats::std_dev(&col);
        let flat = !(sd > 1e-300);
        for t in 0..n {
            let v = y.get(t, i) - m;
            y.set(t, i, if flat { v } else { v / sd });
        }
        means.push(m);
        sds.push(sd);
        degenerate.push(flat);
    }
    Ok(Transformed { names: series.iter().map(|s| s.name.clone()).collect(), dates: dates[1..].to_vec(), y, means, sds, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentLabel {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitInterval {
    pub label: SegmentLabel,
    pub start: Month,
    /// Inclusive.
    pub end: Month,
}

/// Hand-specified segmentation into training and validation intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub intervals: Vec<SplitInterval>,
}

impl SplitSpec {
    /// Reads a `label,start,end` CSV (`label` is `train` or `validation`).
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(path)?;
        let mut intervals = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            if rec.len() != 3 {
                return Err(parse_err(path, format!("line {row}: expected label,start,end")));
            }
            let label = match &rec[0] {
                "train" => SegmentLabel::Train,
                "validation" | "val" => SegmentLabel::Validation,
                other => return Err(parse_err(path, format!("line {row}: unknown label `{other}`"))),
            };
            let start: Month = rec[1].parse().map_err(|e: String| parse_err(path, format!("line {row}: {e}")))?;
            let end: Month = rec[2].parse().map_err(|e: String| parse_err(path, format!("line {row}: {e}")))?;
            if end < start {
                return Err(parse_err(path, format!("line {row}: end before start")));
            }
            intervals.push(SplitInterval { label, start, end });
        }
        Ok(Self { intervals })
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted: Vec<&SplitInterval> = self.intervals.iter().collect();
        sorted.sort_by_key(|i| i.start);
        for w in sorted.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::Config(format!(
                    "split intervals overlap: {}..{} and {}..{}",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        for want in [SegmentLabel::Train, SegmentLabel::Validation] {
            if !self.intervals.iter().any(|i| i.label == want) {
                return Err(Error::Config(format!("split has no {want:?} interval")));
            }
        }
        Ok(())
    }
}

/// Contiguous index segments per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<Range<usize>>,
    pub val: Vec<Range<usize>>,
}

impl SplitMasks {
    pub fn label_of(&self, t: usize) -> Option<SegmentLabel> {
        if self.train.iter().any(|r| r.contains(&t)) {
            Some(SegmentLabel::Train)
        } else if self.val.iter().any(|r| r.contains(&t)) {
            Some(SegmentLabel::Validation)
        } else {
            None
        }
    }
}

/// Maps labeled intervals to index segments of `dates`. Periods outside all
/// intervals are unused.
pub fn apply_split(dates: &[Month], spec: &SplitSpec) -> Result<SplitMasks> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for iv in &spec.intervals {
        let lo = dates.partition_point(|d| *d < iv.start);
        let hi = dates.partition_point(|d| *d <= iv.end);
        if lo >= hi {
            continue;
        }
        match iv.label {
            SegmentLabel::Train => train.push(lo..hi),
            SegmentLabel::Validation => val.push(lo..hi),
        }
    }
    train.sort_by_key(|r| r.start);
    val.sort_by_key(|r| r.start);
    if train.is_empty() {
        return Err(Error::Config("no training periods within the data range".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("no validation periods within the data range".into()));
    }
    Ok(SplitMasks { train, val })
}

/// Recession bands from a `start,end` CSV of months.
pub fn load_recessions(path: &Path) -> Result<Vec<(Month, Month)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "start" || &headers[1] != "end" {
        return Err(parse_err(path, "expected header `start,end`"));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let s: Month = rec[0].parse().map_err(|e: String| parse_err(path, format!("line {row}: {e}")))?;
        let e: Month = rec[1].parse().map_err(|e: String| parse_err(path, format!("line {row}: {e}")))?;
        if e < s {
            return Err(parse_err(path, format!("line {row}: recession ends ({e}) before it starts ({s})")));
        }
        out.push((s, e));
    }
    Ok(out)
}

pub fn in_recession(d: Month, bands: &[(Month, Month)]) -> bool {
    bands.iter().any(|(s, e)| d >= *s && d <= *e)
}

/// Downloads `url` to `dest`. Requires an explicit opt-in; no retries.
pub fn fetch_remote(url: &str, dest: &Path, allow_network: bool) -> Result<()> {
    if !allow_network {
        return Err(Error::Config("network access not allowed (pass --allow-network)".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(60)))
        .http_status_as_error(false)
        .build()
        .into();
    let resp = agent.get(url).call().map_err(|e| Error::Network(e.to_string()))?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(Error::Http { status });
    }
    let mut body = Vec::new();
    resp.into_body().into_reader().read_to_end(&mut body).map_err(|e| Error::Network(e.to_string()))?;
    if body.is_empty() {
        return Err(Error::Network("empty response body".into()));
    }
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = dest.with_extension("part");
    fs::write(&tmp, &body)?;
    fs::rename(&tmp, dest)?;
    Ok(())
}
