use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::shiftlab::Dataset;

/// Column order: `domain,observed,true,f0,…,f{d−1}`.
pub fn write_dataset<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = data.features.cols();
    let mut header = vec!["domain".to_owned(), "observed".to_owned(), "true".to_owned()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![
            data.domain.clone(),
            data.observed[i].to_string(),
            data.truth[i].to_string(),
        ];
        // `Display` for f64 is the shortest string that round-trips.
        rec.extend(data.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 4
        || &header[0] != "domain"
        || &header[1] != "observed"
        || &header[2] != "true"
        || header.iter().skip(3).enumerate().any(|(j, h)| h != format!("f{j}"))
    {
        return Err(Error::invalid(format!(
            "dataset header {:?} is not domain,observed,true,f0..",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let d = header.len() - 3;
    let mut domain = None;
    let mut data = Vec::new();
    let mut observed = Vec::new();
    let mut truth = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_label = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("row {line}: bad label {s:?}")))
        };
        if domain.is_none() {
            domain = Some(rec[0].to_owned());
        }
        observed.push(parse_label(&rec[1])?);
        truth.push(parse_label(&rec[2])?);
        for s in rec.iter().skip(3) {
            data.push(
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("row {line}: bad feature {s:?}")))?,
            );
        }
    }
    let n = observed.len();
    Ok(Dataset {
        domain: domain.unwrap_or_default(),
        features: Matrix::from_vec(n, d, data)?,
        observed,
        truth,
    })
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(data, std::io::BufWriter::new(f))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}
