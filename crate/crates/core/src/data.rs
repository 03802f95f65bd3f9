//! Futures and yield-curve panels: CSV ingestion, validation and date alignment.
//!
//! Input files are comma-separated with a `date` column (`YYYY-MM` or
//! `YYYY-MM-DD`) followed by one column per tenor named `m<months>`.
//! Dates are kept at calendar-month granularity. Empty, `NA` and `NaN` cells
//! are read as missing and the affected dates are dropped by [`align_panels`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Year fraction between consecutive monthly observations.
pub const MONTHLY_DT: f64 = 1.0 / 12.0;

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    year: i32,
    month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Parse(format!("month {month} out of range")));
        }
        Ok(Month { year, month })
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u32 {
        self.month
    }

    /// Months since year 0, used for arithmetic on month-stamps.
    pub fn ordinal(&self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        Month {
            year: ordinal.div_euclid(12) as i32,
            month: (ordinal.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn add_months(&self, n: i64) -> Self {
        Month::from_ordinal(self.ordinal() + n)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("unparseable date '{s}'"));
        match s.len() {
            7 => {
                let (y, m) = s.split_once('-').ok_or_else(bad)?;
                if y.len() != 4 || m.len() != 2 {
                    return Err(bad());
                }
                let year = y.parse::<i32>().map_err(|_| bad())?;
                let month = m.parse::<u32>().map_err(|_| bad())?;
                Month::new(year, month).map_err(|_| bad())
            }
            10 => {
                let d = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| bad())?;
                use chrono::Datelike;
                Month::new(d.year(), d.month())
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Time to maturity of a constant-tenor contract or yield point, in months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Tenor(u32);

impl Tenor {
    pub fn new(months: u32) -> Result<Self> {
        if months == 0 {
            return Err(Error::InvalidParam(
                "tenor must be at least one month".into(),
            ));
        }
        Ok(Tenor(months))
    }

    pub fn months(&self) -> u32 {
        self.0
    }

    pub fn years(&self) -> f64 {
        self.0 as f64 / 12.0
    }

    /// Parses a column header of the form `m<months>`.
    pub fn from_header(h: &str) -> Result<Self> {
        let h = h.trim();
        h.strip_prefix('m')
            .and_then(|m| m.parse::<u32>().ok())
            .ok_or_else(|| Error::Parse(format!("bad tenor column header '{h}'")))
            .and_then(Tenor::new)
    }

    pub fn header(&self) -> String {
        format!("m{}", self.0)
    }
}

impl TryFrom<u32> for Tenor {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Tenor::new(v)
    }
}

impl From<Tenor> for u32 {
    fn from(t: Tenor) -> u32 {
        t.0
    }
}

impl fmt::Display for Tenor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

pub fn tenors(months: &[u32]) -> Result<Vec<Tenor>> {
    months.iter().map(|&m| Tenor::new(m)).collect()
}

/// The yield tenors used throughout: 1, 3, 6, 9 and 12 months.
pub fn default_yield_tenors() -> Vec<Tenor> {
    [1, 3, 6, 9, 12].into_iter().map(Tenor).collect()
}

/// Log futures prices, one row per date and one column per tenor.
#[derive(Debug, Clone, PartialEq)]
pub struct FuturesPanel {
    pub dates: Vec<Month>,
    pub tenors: Vec<Tenor>,
    /// N×P natural logs of USD prices. Missing quotes are NaN before alignment.
    pub log_prices: DMatrix<f64>,
}

/// Annualized yields as decimal fractions, one row per tenor and one column per date.
#[derive(Debug, Clone, PartialEq)]
pub struct YieldPanel {
    pub dates: Vec<Month>,
    pub tenors: Vec<Tenor>,
    /// M×N; row i is the time series of the yield at `tenors[i]`.
    pub yields: DMatrix<f64>,
}

/// Futures and yields restricted to their common, complete dates.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    pub futures: FuturesPanel,
    pub yields: YieldPanel,
    /// Year fraction between consecutive dates.
    pub dt: f64,
}

impl FuturesPanel {
    pub fn new(dates: Vec<Month>, tenors: Vec<Tenor>, log_prices: DMatrix<f64>) -> Result<Self> {
        check_dates(&dates)?;
        check_tenors(&tenors)?;
        if log_prices.shape() != (dates.len(), tenors.len()) {
            return Err(Error::Shape(format!(
                "log_prices is {:?}, expected ({}, {})",
                log_prices.shape(),
                dates.len(),
                tenors.len()
            )));
        }
        Ok(FuturesPanel {
            dates,
            tenors,
            log_prices,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tenors(&self) -> usize {
        self.tenors.len()
    }
}

impl YieldPanel {
    pub fn new(dates: Vec<Month>, tenors: Vec<Tenor>, yields: DMatrix<f64>) -> Result<Self> {
        check_dates(&dates)?;
        check_tenors(&tenors)?;
        if yields.shape() != (tenors.len(), dates.len()) {
            return Err(Error::Shape(format!(
                "yields is {:?}, expected ({}, {})",
                yields.shape(),
                tenors.len(),
                dates.len()
            )));
        }
        Ok(YieldPanel {
            dates,
            tenors,
            yields,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tenors(&self) -> usize {
        self.tenors.len()
    }

    /// The yield curve observed on date index `t`.
    pub fn curve(&self, t: usize) -> Vec<f64> {
        self.yields.column(t).iter().copied().collect()
    }

    pub fn tenor_index(&self, tenor: Tenor) -> Option<usize> {
        self.tenors.iter().position(|&x| x == tenor)
    }
}

impl AlignedDataset {
    pub fn n_dates(&self) -> usize {
        self.futures.n_dates()
    }

    pub fn dates(&self) -> &[Month] {
        &self.futures.dates
    }
}

fn check_dates(dates: &[Month]) -> Result<()> {
    for w in dates.windows(2) {
        if w[1] == w[0] {
            return Err(Error::Data(format!("duplicate date {}", w[1])));
        }
        if w[1] < w[0] {
            return Err(Error::Data(format!("dates not increasing at {}", w[1])));
        }
    }
    Ok(())
}

fn check_tenors(tenors: &[Tenor]) -> Result<()> {
    if tenors.is_empty() {
        return Err(Error::Data("no tenor columns".into()));
    }
    if tenors.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("tenors must be strictly increasing".into()));
    }
    Ok(())
}

/// How to read a panel file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Yields in the file are quoted in percent (2.5 meaning 0.025).
    #[serde(default)]
    pub yields_in_percent: bool,
    /// Tenor columns to read. `None` reads every futures column, and the
    /// default 1/3/6/9/12-month set for yields.
    #[serde(default)]
    pub tenors: Option<Vec<Tenor>>,
}

struct RawTable {
    dates: Vec<Month>,
    tenors: Vec<Tenor>,
    /// Row-major, one Vec per date.
    rows: Vec<Vec<f64>>,
}

fn parse_cell(cell: &str, line: usize, col: &str) -> Result<f64> {
    let c = cell.trim();
    if c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    match c.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse(format!(
            "unparseable value '{c}' in column {col} at line {line}"
        ))),
    }
}

fn read_table(path: &Path, wanted: Option<&[Tenor]>) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.get(0).map(|h| h.trim()) != Some("date") {
        return Err(Error::Parse("first column must be named 'date'".into()));
    }
    let file_tenors = headers
        .iter()
        .skip(1)
        .map(Tenor::from_header)
        .collect::<Result<Vec<_>>>()?;
    let columns: Vec<(Tenor, usize)> = match wanted {
        None => file_tenors
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i + 1))
            .collect(),
        Some(ws) => ws
            .iter()
            .map(|&w| {
                file_tenors
                    .iter()
                    .position(|&t| t == w)
                    .map(|i| (w, i + 1))
                    .ok_or_else(|| Error::Data(format!("missing tenor column {}", w.header())))
            })
            .collect::<Result<_>>()?,
    };
    let mut dates = Vec::new();
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "ragged row at line {line}: {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        dates.push(record[0].parse::<Month>()?);
        let row = columns
            .iter()
            .map(|&(t, c)| parse_cell(&record[c], line, &t.header()))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    check_dates(&dates)?;
    let tenors: Vec<Tenor> = columns.iter().map(|&(t, _)| t).collect();
    check_tenors(&tenors)?;
    Ok(RawTable {
        dates,
        tenors,
        rows,
    })
}

/// Reads raw USD futures prices and returns their logs.
pub fn load_futures_csv(path: impl AsRef<Path>, config: &IngestConfig) -> Result<FuturesPanel> {
    let table = read_table(path.as_ref(), config.tenors.as_deref())?;
    let n = table.dates.len();
    let p = table.tenors.len();
    let mut log_prices = DMatrix::zeros(n, p);
    for (t, row) in table.rows.iter().enumerate() {
        for (i, &price) in row.iter().enumerate() {
            if price.is_nan() {
                log_prices[(t, i)] = f64::NAN;
            } else if price <= 0.0 {
                return Err(Error::Data(format!(
                    "non-positive price {price} on {} for {}",
                    table.dates[t], table.tenors[i]
                )));
            } else {
                log_prices[(t, i)] = price.ln();
            }
        }
    }
    FuturesPanel::new(table.dates, table.tenors, log_prices)
}

pub fn load_yields_csv(path: impl AsRef<Path>, config: &IngestConfig) -> Result<YieldPanel> {
    let wanted = config.tenors.clone().unwrap_or_else(default_yield_tenors);
    let table = read_table(path.as_ref(), Some(&wanted))?;
    let scale = if config.yields_in_percent { 0.01 } else { 1.0 };
    let m = table.tenors.len();
    let n = table.dates.len();
    let yields = DMatrix::from_fn(m, n, |i, t| table.rows[t][i] * scale);
    YieldPanel::new(table.dates, table.tenors, yields)
}

/// Restricts both panels to the dates present, and complete, in each.
pub fn align_panels(futures: &FuturesPanel, yields: &YieldPanel) -> Result<AlignedDataset> {
    if futures.dates.is_empty() || yields.dates.is_empty() {
        return Err(Error::Data("empty panel".into()));
    }
    let complete_f: BTreeSet<(Month, usize)> = futures
        .dates
        .iter()
        .enumerate()
        .filter(|&(t, _)| futures.log_prices.row(t).iter().all(|v| v.is_finite()))
        .map(|(t, &d)| (d, t))
        .collect();
    let mut keep_f = Vec::new();
    let mut keep_y = Vec::new();
    for (ty, d) in yields.dates.iter().enumerate() {
        if !yields.yields.column(ty).iter().all(|v| v.is_finite()) {
            continue;
        }
        if let Some(&(_, tf)) = complete_f.range((*d, 0)..=(*d, usize::MAX)).next() {
            keep_f.push(tf);
            keep_y.push(ty);
        }
    }
    if keep_f.is_empty() {
        return Err(Error::Data("no overlapping dates".into()));
    }
    let dates: Vec<Month> = keep_f.iter().map(|&t| futures.dates[t]).collect();
    let log_prices = futures.log_prices.select_rows(keep_f.iter());
    let ylds = yields.yields.select_columns(keep_y.iter());
    Ok(AlignedDataset {
        futures: FuturesPanel::new(dates.clone(), futures.tenors.clone(), log_prices)?,
        yields: YieldPanel::new(dates, yields.tenors.clone(), ylds)?,
        dt: MONTHLY_DT,
    })
}

/// Formats a value with 12 significant digits.
pub fn fmt_sig12(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.11e}")
}

fn write_table(
    path: &Path,
    dates: &[Month],
    tenors: &[Tenor],
    value: impl Fn(usize, usize) -> f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{other:?}")),
    })?;
    let mut header = vec!["date".to_string()];
    header.extend(tenors.iter().map(Tenor::header));
    w.write_record(&header)?;
    for (t, d) in dates.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend((0..tenors.len()).map(|i| {
            let v = value(t, i);
            if v.is_nan() {
                String::new()
            } else {
                fmt_sig12(v)
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes USD prices (the exponent of the stored logs).
pub fn write_futures_csv(panel: &FuturesPanel, path: impl AsRef<Path>) -> Result<()> {
    write_table(path.as_ref(), &panel.dates, &panel.tenors, |t, i| {
        panel.log_prices[(t, i)].exp()
    })
}

/// Writes yields as decimal fractions.
pub fn write_yields_csv(panel: &YieldPanel, path: impl AsRef<Path>) -> Result<()> {
    write_table(path.as_ref(), &panel.dates, &panel.tenors, |t, i| {
        panel.yields[(i, t)]
    })
}
