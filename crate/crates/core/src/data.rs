//! Reader and writer for daily CSV files in the Kenneth French data-library
//! layout, and the aligned [`Dataset`] built from an industry file and a
//! three-factor file.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DynCovError, Result};
use crate::panel::{FactorPanel, ReturnPanel};

/// Values the data library uses for missing observations.
const SENTINELS: [f64; 2] = [-99.99, -999.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrenchLayout {
    /// 49 industry portfolio returns.
    Industry49,
    /// `Mkt-RF, SMB, HML, RF`.
    Factors3,
}

impl FrenchLayout {
    pub fn value_columns(self) -> usize {
        match self {
            Self::Industry49 => 49,
            Self::Factors3 => 4,
        }
    }
}

/// Rows of one file section: a date plus the numeric columns, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct FrenchTable {
    pub columns: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<Vec<f64>>,
    /// Rows removed because they held a missing-value sentinel.
    pub dropped: usize,
}

impl FrenchTable {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

fn is_date_field(s: &str) -> bool {
    s.len() == 8 && s.bytes().all(|b| b.is_ascii_digit())
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y%m%d").map_err(|e| DynCovError::Parse {
        line,
        message: format!("invalid date '{s}': {e}"),
    })
}

pub fn load_french_csv(path: impl AsRef<Path>, layout: FrenchLayout) -> Result<FrenchTable> {
    let file = std::fs::File::open(path.as_ref())?;
    read_french(file, layout)
}

/// Parses the first data section: lines before it are preamble, the last
/// preamble line with the right field count supplies the column names, and
/// the section ends at the first line that is not a dated row.
pub fn read_french<R: Read>(input: R, layout: FrenchLayout) -> Result<FrenchTable> {
    let width = layout.value_columns();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut columns: Option<Vec<String>> = None;
    let mut dates = Vec::new();
    let mut values = Vec::new();
    let mut dropped = 0;
    let mut in_data = false;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let first = record.get(0).unwrap_or("");
        if !is_date_field(first) {
            if in_data {
                break;
            }
            if record.len() == width + 1 && first.is_empty() {
                columns = Some(record.iter().skip(1).map(str::to_string).collect());
            }
            continue;
        }
        in_data = true;
        if record.len() != width + 1 {
            return Err(DynCovError::Parse {
                line,
                message: format!("expected {} fields, found {}", width + 1, record.len()),
            });
        }
        let date = parse_date(first, line)?;
        let row: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>().map_err(|_| DynCovError::Parse {
                    line,
                    message: format!("non-numeric value '{s}'"),
                })
            })
            .collect::<Result<_>>()?;
        if row.iter().any(|v| SENTINELS.contains(v)) {
            log::info!("line {line}: missing-value sentinel, row {date} dropped");
            dropped += 1;
            continue;
        }
        dates.push(date);
        values.push(row);
    }
    if dates.is_empty() {
        return Err(DynCovError::EmptyDataset("no data rows".into()));
    }
    let columns = columns.unwrap_or_else(|| (1..=width).map(|j| format!("col{j}")).collect());
    Ok(FrenchTable {
        columns,
        dates,
        values,
        dropped,
    })
}

/// Writes a single-section file in the same layout.
pub fn write_french_csv<W: Write>(
    mut out: W,
    title: &str,
    columns: &[String],
    dates: &[NaiveDate],
    values: &DMatrix<f64>,
    decimals: usize,
) -> Result<()> {
    if values.nrows() != dates.len() || values.ncols() != columns.len() {
        return Err(invalid("table shape does not match dates and columns"));
    }
    writeln!(out, "{title}")?;
    writeln!(out)?;
    writeln!(out, ",{}", columns.join(","))?;
    for (t, d) in dates.iter().enumerate() {
        write!(out, "{}", d.format("%Y%m%d"))?;
        for v in values.row(t).iter() {
            write!(out, ",{v:.decimals$}")?;
        }
        writeln!(out)?;
    }
    writeln!(out)?;
    writeln!(out, "Copyright notice and other trailing text")?;
    Ok(())
}

/// Writes a plain numeric table: a header of column names, then one row per
/// observation. Values use the shortest representation that parses back to
/// the same `f64`.
pub fn write_panel_csv<W: Write>(out: W, names: &[String], values: &DMatrix<f64>) -> Result<()> {
    if names.len() != values.ncols() {
        return Err(invalid("column names do not match the table width"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(names)?;
    for row in values.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_panel_csv`].
pub fn read_panel_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut flat = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != names.len() {
            return Err(DynCovError::Parse {
                line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        for s in record.iter() {
            flat.push(s.parse::<f64>().map_err(|_| DynCovError::Parse {
                line,
                message: format!("non-numeric value '{s}'"),
            })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DynCovError::EmptyDataset("no data rows".into()));
    }
    Ok((names, DMatrix::from_row_slice(rows, flat.len() / rows, &flat)))
}

/// Industry excess returns and factors on a shared date index, in percent.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dates: Vec<NaiveDate>,
    /// Industry returns minus the risk-free rate.
    pub returns: ReturnPanel,
    /// `Mkt-RF, SMB, HML`, with the risk-free rate attached.
    pub factors: FactorPanel,
    pub risk_free: DVector<f64>,
}

impl Dataset {
    /// Inner join of the two tables on date; returns become excess returns.
    pub fn from_tables(industry: &FrenchTable, factors: &FrenchTable) -> Result<Self> {
        if factors.columns.len() != 4 {
            return Err(invalid("factor table must have Mkt-RF, SMB, HML, RF"));
        }
        let by_date: HashMap<NaiveDate, usize> = factors.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let mut dates = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut rf = Vec::new();
        for (i, d) in industry.dates.iter().enumerate() {
            let Some(&j) = by_date.get(d) else { continue };
            let f = &factors.values[j];
            dates.push(*d);
            y.extend(industry.values[i].iter().map(|v| v - f[3]));
            x.extend_from_slice(&f[..3]);
            rf.push(f[3]);
        }
        let n = dates.len();
        if n == 0 {
            return Err(DynCovError::EmptyDataset("no common dates".into()));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("dates must be strictly increasing"));
        }
        let p = industry.columns.len();
        let rf = DVector::from_vec(rf);
        let returns = ReturnPanel::with_names(DMatrix::from_row_slice(n, p, &y), industry.columns.clone())?;
        let factors = FactorPanel::with_names(
            DMatrix::from_row_slice(n, 3, &x),
            factors.columns[..3].to_vec(),
            Some(rf.clone()),
        )?;
        Ok(Self {
            dates,
            returns,
            factors,
            risk_free: rf,
        })
    }

    pub fn load(industry: impl AsRef<Path>, factors: impl AsRef<Path>) -> Result<Self> {
        let ind = load_french_csv(industry, FrenchLayout::Industry49)?;
        let fac = load_french_csv(factors, FrenchLayout::Factors3)?;
        Self::from_tables(&ind, &fac)
    }

    pub fn n_obs(&self) -> usize {
        self.dates.len()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            dates: self.dates[start..end].to_vec(),
            returns: self.returns.slice(start, end),
            factors: self.factors.slice(start, end),
            risk_free: self.risk_free.rows(start, end - start).into_owned(),
        }
    }

    /// Market return including the risk-free rate on row `t`.
    pub fn market_return(&self, t: usize) -> f64 {
        self.factors.data()[(t, 0)] + self.risk_free[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FACTORS: &str = "This file was created using a test database.\n\
        \n\
        ,Mkt-RF,SMB,HML,RF\n\
        20200102,  0.86, -0.96,  -0.30,  0.006\n\
        20200103, -0.67,  0.31,   0.00,  0.006\n\
        20200106,  0.36, -0.21,  -0.55,  0.006\n\
        \n\
        Copyright 2020\n";

    #[test]
    fn three_rows_exact() {
        let t = read_french(FACTORS.as_bytes(), FrenchLayout::Factors3).unwrap();
        assert_eq!(t.columns, vec!["Mkt-RF", "SMB", "HML", "RF"]);
        assert_eq!(t.len(), 3);
        assert_eq!(t.dates[1], NaiveDate::from_ymd_opt(2020, 1, 3).unwrap());
        assert_eq!(t.values[0], vec![0.86, -0.96, -0.30, 0.006]);
        assert_eq!(t.values[2], vec![0.36, -0.21, -0.55, 0.006]);
    }

    #[test]
    fn sentinel_rows_dropped() {
        let text = FACTORS.replace("-0.67", "-99.99");
        let t = read_french(text.as_bytes(), FrenchLayout::Factors3).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dropped, 1);
        let text = FACTORS.replace("0.31", "-999");
        assert_eq!(read_french(text.as_bytes(), FrenchLayout::Factors3).unwrap().len(), 2);
    }

    #[test]
    fn header_only_is_empty() {
        let text = "preamble\n,Mkt-RF,SMB,HML,RF\n";
        assert!(matches!(
            read_french(text.as_bytes(), FrenchLayout::Factors3),
            Err(DynCovError::EmptyDataset(_))
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = FACTORS.replace("0.36", "abc");
        match read_french(text.as_bytes(), FrenchLayout::Factors3) {
            Err(DynCovError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = FACTORS.replace("20200103, -0.67,", "20200103,");
        assert!(matches!(
            read_french(text.as_bytes(), FrenchLayout::Factors3),
            Err(DynCovError::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn stops_at_first_section() {
        let text = format!("{FACTORS}\n,Mkt-RF,SMB,HML,RF\n20200107, 1, 1, 1, 1\n");
        assert_eq!(read_french(text.as_bytes(), FrenchLayout::Factors3).unwrap().len(), 3);
    }

    #[test]
    fn write_then_read() {
        let cols: Vec<String> = ["Mkt-RF", "SMB", "HML", "RF"].iter().map(|s| s.to_string()).collect();
        let dates = vec![NaiveDate::from_ymd_opt(2021, 3, 1).unwrap(), NaiveDate::from_ymd_opt(2021, 3, 2).unwrap()];
        let v = DMatrix::from_row_slice(2, 4, &[0.1, 0.2, -0.3, 0.01, 1.25, -2.5, 0.0, 0.01]);
        let mut buf = Vec::new();
        write_french_csv(&mut buf, "test", &cols, &dates, &v, 2).unwrap();
        let t = read_french(buf.as_slice(), FrenchLayout::Factors3).unwrap();
        assert_eq!(t.dates, dates);
        assert_eq!(t.values[1], vec![1.25, -2.5, 0.0, 0.01]);
    }

    #[test]
    fn panel_csv_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let v = DMatrix::from_row_slice(2, 2, &[0.1 + 0.2, -1.0 / 3.0, 1e-300, 7.0]);
        let names = vec!["a".to_string(), "b".to_string()];
        write_panel_csv(std::fs::File::create(&path).unwrap(), &names, &v).unwrap();
        let (n2, v2) = read_panel_csv(&path).unwrap();
        assert_eq!(n2, names);
        assert_eq!(v2, v);
    }
}
