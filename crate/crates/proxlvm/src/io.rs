//! File formats: response CSVs, Q-matrix CSVs, parameter JSON, metric CSVs.
//!
//! Data files are headerless CSVs of 0/1 integers, one respondent per row.
//! Q-matrix files are 0/1 CSVs with J rows and K columns. Parameter files
//! are JSON documents tagged by a `model` field whose keys follow the
//! documented block layout. Metric files are long-format CSVs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::models::{IfaParams, ResponseMatrix, RlcaParams};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Read a headerless 0/1 CSV into a response matrix.
pub fn read_data_csv(path: &Path) -> Result<ResponseMatrix, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            match field.trim() {
                "0" => row.push(0),
                "1" => row.push(1),
                other => {
                    return Err(parse_err(
                        path,
                        format!("line {}: expected 0 or 1, got '{other}'", lineno + 1),
                    ))
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "no rows"));
    }
    let j = rows[0].len();
    if rows.iter().any(|r| r.len() != j) {
        return Err(parse_err(path, "ragged rows"));
    }
    let n = rows.len();
    Ok(ResponseMatrix::new(n, j, rows.concat()))
}

pub fn write_data_csv(path: &Path, data: &ResponseMatrix) -> Result<(), Error> {
    let mut out = String::with_capacity(data.n_respondents() * data.n_items() * 2);
    for i in 0..data.n_respondents() {
        let row = data.row(i);
        for (jj, v) in row.iter().enumerate() {
            if jj > 0 {
                out.push(',');
            }
            out.push(if *v == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a J x K 0/1 design matrix.
pub fn read_qmatrix_csv(path: &Path) -> Result<Vec<Vec<u8>>, Error> {
    let data = read_data_csv(path)?;
    Ok((0..data.n_respondents())
        .map(|i| data.row(i).to_vec())
        .collect())
}

pub fn write_qmatrix_csv(path: &Path, q: &[Vec<u8>]) -> Result<(), Error> {
    let mut out = String::new();
    for row in q {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push(if *v == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Parameter file payload, tagged by model kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ParamFile {
    Ifa(IfaParams),
    Rlca(RlcaParams),
}

impl ParamFile {
    pub fn as_ifa(&self) -> Option<&IfaParams> {
        match self {
            ParamFile::Ifa(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_rlca(&self) -> Option<&RlcaParams> {
        match self {
            ParamFile::Rlca(p) => Some(p),
            _ => None,
        }
    }
}

pub fn read_params_json(path: &Path) -> Result<ParamFile, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_params_json(path: &Path, params: &ParamFile) -> Result<(), Error> {
    let text =
        serde_json::to_string_pretty(params).map_err(|e| parse_err(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Generic JSON helpers for config files.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// One long-format metric record: (study, replication, metric, value).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub study: String,
    pub replication: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), Error> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "study,replication,metric,value").map_err(|e| io_err(path, e))?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.study, r.replication, r.metric, r.value)
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Quantile summary row matching the study tables: 25%, median, 75%.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub study: String,
    pub metric: String,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), Error> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "study,metric,q25,median,q75").map_err(|e| io_err(path, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.study, r.metric, r.q25, r.median, r.q75
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Per-iteration trace file sink (CSV with a header).
pub struct CsvTraceSink {
    file: fs::File,
}

impl CsvTraceSink {
    pub fn create(path: &Path) -> Result<Self, Error> {
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(file, "iteration,gamma,diff,elapsed_ms").map_err(|e| io_err(path, e))?;
        Ok(CsvTraceSink { file })
    }
}

impl crate::optim::TraceSink for CsvTraceSink {
    fn record(&mut self, rec: &crate::optim::TraceRecord) {
        let _ = writeln!(
            self.file,
            "{},{},{},{:.3}",
            rec.iter, rec.gamma, rec.diff, rec.elapsed_ms
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Penalty;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "proxlvm-io-test-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn data_csv_roundtrip() {
        let dir = tmpdir();
        let path = dir.join("data.csv");
        let data = ResponseMatrix::new(3, 2, vec![1, 0, 0, 1, 1, 1]);
        write_data_csv(&path, &data).unwrap();
        let back = read_data_csv(&path).unwrap();
        assert_eq!(back.n_respondents(), 3);
        assert_eq!(back.n_items(), 2);
        for i in 0..3 {
            assert_eq!(back.row(i), data.row(i));
        }
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let dir = tmpdir();
        let path = dir.join("bad.csv");
        fs::write(&path, "1,0\n2,1\n").unwrap();
        assert!(matches!(read_data_csv(&path), Err(Error::Parse { .. })));
        fs::write(&path, "1,0\n1\n").unwrap();
        assert!(matches!(read_data_csv(&path), Err(Error::Parse { .. })));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn params_json_roundtrip() {
        let dir = tmpdir();
        let path = dir.join("params.json");
        let params = IfaParams {
            b: vec![vec![1.0, 0.0], vec![0.4, (1.0f64 - 0.16).sqrt()]],
            d: vec![0.1, -0.2],
            a: vec![vec![1.0, 0.0], vec![0.0, 0.9]],
            q_mask: Some(vec![vec![1, 0], vec![0, 1]]),
            penalty: Penalty::L1 { lambda: 0.25 },
        };
        write_params_json(&path, &ParamFile::Ifa(params.clone())).unwrap();
        let back = read_params_json(&path).unwrap();
        let ifa = back.as_ifa().unwrap();
        assert_eq!(ifa.d, params.d);
        assert_eq!(ifa.a, params.a);
        assert_eq!(ifa.b, params.b);
        assert_eq!(ifa.penalty, params.penalty);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn metric_csv_format() {
        let dir = tmpdir();
        let path = dir.join("metrics.csv");
        write_metrics_csv(
            &path,
            &[MetricRow {
                study: "III".into(),
                replication: 2,
                metric: "theta_mse".into(),
                value: 0.03125,
            }],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "study,replication,metric,value\nIII,2,theta_mse,0.03125\n");
        fs::remove_dir_all(dir).unwrap();
    }
}
