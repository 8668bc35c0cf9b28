//! Gauge observation tables: CSV with a time column followed by one column
//! per gauge. Missing discharge is the `-99` sentinel.

use std::path::Path;

use super::{fmt_f64, IoError};

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub times: Vec<String>,
    pub names: Vec<String>,
    /// `series[gauge][step]`
    pub series: Vec<Vec<f64>>,
}

impl ObservationTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.series[i].as_slice())
    }

    pub fn nt(&self) -> usize {
        self.times.len()
    }
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<ObservationTable, IoError> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IoError::parse(path, 0, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| IoError::parse(path, 1, e.to_string()))?
        .clone();
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut series = vec![Vec::new(); names.len()];
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| IoError::parse(path, line, e.to_string()))?;
        if record.len() != names.len() + 1 {
            return Err(IoError::parse(path, line, "wrong number of columns"));
        }
        times.push(record[0].to_string());
        for (g, field) in record.iter().skip(1).enumerate() {
            let v = field
                .parse::<f64>()
                .map_err(|_| IoError::parse(path, line, format!("bad value `{field}`")))?;
            series[g].push(v);
        }
    }
    Ok(ObservationTable {
        times,
        names,
        series,
    })
}

pub fn write_observations(path: impl AsRef<Path>, table: &ObservationTable) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::parse(path, 0, e.to_string()))?;
    let wrap = |e: csv::Error| IoError::parse(path, 0, e.to_string());
    let mut header = vec!["time".to_string()];
    header.extend(table.names.iter().cloned());
    w.write_record(&header).map_err(wrap)?;
    for (t, time) in table.times.iter().enumerate() {
        let mut row = vec![time.clone()];
        row.extend(table.series.iter().map(|s| fmt_f64(s[t])));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}
