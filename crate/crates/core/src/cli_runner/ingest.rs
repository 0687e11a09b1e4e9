use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::report::fmt_sig;
use super::CliError;
use crate::estimating_equations::PanelDataset;

/// Columns every long-format panel must carry.
pub const REQUIRED_COLUMNS: [&str; 3] = ["id", "time", "y"];

#[derive(Debug, Clone, PartialEq)]
enum Key {
    Num(f64),
    Text(String),
}

impl Key {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Key::Num(a), Key::Num(b)) => a.total_cmp(b),
            (Key::Num(_), Key::Text(_)) => Ordering::Less,
            (Key::Text(_), Key::Num(_)) => Ordering::Greater,
            (Key::Text(a), Key::Text(b)) => a.cmp(b),
        }
    }

    fn parse(s: &str) -> Self {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Key::Num(v),
            _ => Key::Text(s.to_string()),
        }
    }
}

struct Record {
    line: u64,
    id: Key,
    id_raw: String,
    time: f64,
    time_raw: String,
    y: Option<f64>,
    x: Vec<f64>,
}

fn parse_error(line: u64, message: String) -> CliError {
    CliError::ParseError { row: line, message }
}

/// Reads a long-format panel (`id,time,y,<covariates>`) from a file.
pub fn ingest_csv(path: &Path) -> Result<PanelDataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ingest_reader(file)
}

/// Long-format panel from any reader. Units are sorted by `id` (numerically
/// when every id is a number), occasions by `time`. Absent `(id, time)` cells
/// and empty `y` fields are unobserved. An intercept column is prepended to
/// the declared covariates.
pub fn ingest_reader<R: Read>(reader: R) -> Result<PanelDataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::SchemaError(format!("cannot read header: {e}")))?
        .clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 3];
    for (k, name) in REQUIRED_COLUMNS.iter().enumerate() {
        idx[k] = position(name).ok_or_else(|| CliError::SchemaError(format!("missing required column `{name}`")))?;
    }
    let covariates: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(k, _)| !idx.contains(k))
        .map(|(k, h)| (k, h.to_string()))
        .collect();
    if let Some((_, dup)) = covariates.iter().find(|(_, h)| h == "intercept") {
        return Err(CliError::SchemaError(format!("column `{dup}` is reserved")));
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| row.get(k).unwrap_or("");
        let number = |k: usize, name: &str| -> Result<f64, CliError> {
            let s = field(k);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(line, format!("`{name}` value `{s}` is not a finite number")))
        };
        let id_raw = field(idx[0]).to_string();
        if id_raw.is_empty() {
            return Err(parse_error(line, "empty `id`".into()));
        }
        let time = number(idx[1], "time")?;
        let y = if field(idx[2]).is_empty() { None } else { Some(number(idx[2], "y")?) };
        let x = covariates
            .iter()
            .map(|(k, name)| number(*k, name))
            .collect::<Result<Vec<f64>, _>>()?;
        records.push(Record {
            line,
            id: Key::parse(&id_raw),
            id_raw,
            time,
            time_raw: field(idx[1]).to_string(),
            y,
            x,
        });
    }
    if records.is_empty() {
        return Err(CliError::SchemaError("no data rows".into()));
    }
    let all_numeric = records.iter().all(|r| matches!(r.id, Key::Num(_)));
    if !all_numeric {
        for r in &mut records {
            r.id = Key::Text(r.id_raw.clone());
        }
    }

    let mut ids: Vec<Key> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for r in &records {
        if !ids.iter().any(|k| k.cmp(&r.id) == Ordering::Equal) {
            ids.push(r.id.clone());
        }
        if !times.iter().any(|t| t.total_cmp(&r.time) == Ordering::Equal) {
            times.push(r.time);
        }
    }
    ids.sort_by(Key::cmp);
    times.sort_by(f64::total_cmp);
    let unit_of = |k: &Key| ids.binary_search_by(|p| p.cmp(k)).unwrap_or(0);
    let occ_of = |t: f64| times.binary_search_by(|p| p.total_cmp(&t)).unwrap_or(0);

    let n = ids.len();
    let t = times.len();
    let l = covariates.len() + 1;
    let mut y = DMatrix::from_element(n, t, f64::NAN);
    let mut x: Vec<DMatrix<f64>> = (0..n)
        .map(|_| DMatrix::from_fn(t, l, |_, c| if c == 0 { 1.0 } else { 0.0 }))
        .collect();
    let mut obs = vec![false; n * t];
    let mut seen: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for r in &records {
        let (i, j) = (unit_of(&r.id), occ_of(r.time));
        if let Some(first) = seen.insert((i, j), r.line) {
            return Err(CliError::RaggedPanel {
                id: r.id_raw.clone(),
                time: r.time_raw.clone(),
                first,
                second: r.line,
            });
        }
        for (c, v) in r.x.iter().enumerate() {
            x[i][(j, c + 1)] = *v;
        }
        if let Some(v) = r.y {
            y[(i, j)] = v;
            obs[i * t + j] = true;
        }
    }
    let names = std::iter::once("intercept".to_string())
        .chain(covariates.into_iter().map(|(_, h)| h))
        .collect();
    PanelDataset::new(y, x, obs, None, names).map_err(|e| CliError::SchemaError(e.to_string()))
}

/// Writes a panel in long format with occasions coded `0..T-1` and unit ids
/// `1..n`. Unobserved cells are written with an empty `y`.
pub fn write_panel_csv<W: Write>(data: &PanelDataset, writer: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| CliError::Io {
        path: "<panel>".into(),
        message: e.to_string(),
    };
    let mut header = vec!["id".to_string(), "time".to_string(), "y".to_string()];
    header.extend(data.covariate_names()[1..].iter().cloned());
    w.write_record(&header).map_err(io)?;
    for i in 0..data.n() {
        let xi = data.unit_design(i);
        for j in 0..data.n_times() {
            let mut rec = vec![(i + 1).to_string(), j.to_string()];
            rec.push(if data.observed(i, j) { fmt_sig(data.y(i, j)) } else { String::new() });
            rec.extend((1..data.n_covariates()).map(|c| fmt_sig(xi[(j, c)])));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::Io {
        path: "<panel>".into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_panel_placement() {
        let csv = "id,time,y,x1\n2,1,7,0.5\n1,0,3,1.5\n1,1,4,2.5\n2,0,6,-1\n";
        let d = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!((d.n(), d.n_times(), d.n_covariates()), (2, 2, 2));
        assert_eq!(d.y(0, 0), 3.0);
        assert_eq!(d.y(0, 1), 4.0);
        assert_eq!(d.y(1, 0), 6.0);
        assert_eq!(d.y(1, 1), 7.0);
        assert_eq!(d.unit_design(1)[(1, 1)], 0.5);
        assert_eq!(d.covariate_names(), &["intercept".to_string(), "x1".to_string()]);
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let csv = "id,time,y\n10,0,1\n9,0,2\n";
        let d = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(d.y(0, 0), 2.0);
    }

    #[test]
    fn absent_cell_is_unobserved() {
        let csv = "id,time,y,x1\n1,0,3,1\n1,1,4,2\n2,0,6,3\n";
        let d = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(d.obs_mask(), &[true, true, true, false]);
    }

    #[test]
    fn empty_response_is_unobserved() {
        let csv = "id,time,y,x1\n1,0,,1\n2,0,4,2\n";
        let d = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(d.obs_mask(), &[false, true]);
        assert_eq!(d.unit_design(0)[(0, 1)], 1.0);
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(ingest_reader("id,y,x1\n1,2,3\n".as_bytes()), Err(CliError::SchemaError(_))));
        assert!(matches!(ingest_reader("id,time,y\n".as_bytes()), Err(CliError::SchemaError(_))));
    }

    #[test]
    fn duplicate_cell_is_ragged() {
        let err = ingest_reader("id,time,y\n1,0,1\n1,0,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CliError::RaggedPanel { first: 2, second: 3, .. }));
    }

    #[test]
    fn parse_error_carries_row() {
        let err = ingest_reader("id,time,y,x1\n1,0,1,2\n1,1,abc,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CliError::ParseError { row: 3, .. }));
    }
}
