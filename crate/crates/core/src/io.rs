//! CSV input and output of survival datasets.
//!
//! Files need a header with `group`, `time` and `status` columns; every
//! other column is a numeric covariate, kept in file order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

const REQUIRED: [&str; 3] = ["group", "time", "status"];

fn parse_number(field: &str, column: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidData(format!("line {line}: column '{column}' has non-numeric value '{field}'")))
}

pub fn read_dataset<R: Read>(reader: R) -> Result<SurvivalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let position = |name: &str| header.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| position(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::DataSchema(format!("missing required column(s): {}", missing.join(", "))));
    }
    let (gi, ti, si) = (position("group").unwrap(), position("time").unwrap(), position("status").unwrap());
    let cov_cols: Vec<usize> = (0..header.len()).filter(|c| ![gi, ti, si].contains(c)).collect();

    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups = Vec::new();
    let mut times = Vec::new();
    let mut status = Vec::new();
    let mut values = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let label = record[gi].to_string();
        let next = labels.len();
        let g = *index.entry(label.clone()).or_insert_with(|| {
            labels.push(label);
            next
        });
        groups.push(g);
        times.push(parse_number(&record[ti], "time", line)?);
        status.push(match record[si].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::InvalidData(format!("line {line}: status must be 0 or 1, got '{other}'")));
            }
        });
        for &c in &cov_cols {
            values.push(parse_number(&record[c], &header[c], line)?);
        }
    }
    let n = times.len();
    let covariates = Array2::from_shape_vec((n, cov_cols.len()), values)
        .map_err(|e| Error::DataSchema(e.to_string()))?;
    let names = cov_cols.iter().map(|&c| header[c].clone()).collect();
    SurvivalDataset::with_labels(groups, labels, times, status, covariates, names)
}

pub fn read_dataset_path(path: &Path) -> Result<SurvivalDataset> {
    read_dataset(std::fs::File::open(path)?)
}

pub fn write_dataset<W: Write>(data: &SurvivalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["group".to_string(), "time".to_string(), "status".to_string()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    let x = data.covariates();
    for i in 0..data.n_subjects() {
        let mut rec = vec![
            data.group_labels()[data.groups()[i]].clone(),
            data.times()[i].to_string(),
            if data.status()[i] { "1" } else { "0" }.to_string(),
        ];
        rec.extend(x.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
