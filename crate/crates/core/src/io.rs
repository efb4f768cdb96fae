//! CSV and JSON artifacts: datasets, per-round records and traces.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the exact values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datasynth::{Domain, FeatureSet, Sample, SynthConfig};
use crate::error::{Error, Result};

/// Sidecar holding the generator config of a dataset CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes both domains as rows `domain,identity,camera,f_0..f_{d-1}`.
pub fn write_dataset_csv<W: Write>(out: W, sets: &[&FeatureSet]) -> Result<()> {
    let dim = sets.first().map_or(0, |s| s.dim());
    if sets.iter().any(|s| s.dim() != dim) {
        return Err(Error::Shape("domains differ in feature dimension".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["domain".to_string(), "identity".into(), "camera".into()];
    header.extend((0..dim).map(|j| format!("f_{j}")));
    w.write_record(&header)?;
    for set in sets {
        for i in 0..set.len() {
            let mut rec = vec![set.domain().as_str().to_string(), set.identities()[i].to_string(), set.cameras()[i].to_string()];
            rec.extend(set.features().row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the dataset CSV and its config sidecar.
pub fn write_dataset(path: &Path, source: &FeatureSet, target: &FeatureSet, cfg: &SynthConfig) -> Result<()> {
    write_dataset_csv(BufWriter::new(File::create(path)?), &[source, target])?;
    write_json(&sidecar_path(path), cfg)
}

/// Reads a dataset CSV back into `(source, target)`.
pub fn read_dataset(path: &Path) -> Result<(FeatureSet, FeatureSet)> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let header = r.headers()?.clone();
    if header.len() < 4 || &header[0] != "domain" || &header[1] != "identity" || &header[2] != "camera" {
        return Err(Error::Parse(format!("{}: expected header domain,identity,camera,f_0,...", path.display())));
    }
    let dim = header.len() - 3;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("{} row {}: bad {what}", path.display(), line + 1));
        let domain: Domain = rec[0].parse()?;
        let identity = rec[1].parse().map_err(|_| bad("identity"))?;
        let camera = rec[2].parse().map_err(|_| bad("camera"))?;
        let feature = (0..dim)
            .map(|j| rec[3 + j].parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        let sample = Sample {
            feature,
            identity,
            camera,
            domain,
        };
        match domain {
            Domain::Source => source.push(sample),
            Domain::Target => target.push(sample),
        }
    }
    Ok((FeatureSet::from_samples(Domain::Source, &source)?, FeatureSet::from_samples(Domain::Target, &target)?))
}

pub fn write_records<T: Serialize, W: Write>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header-first CSV of `rows`; an empty slice still gets the header
/// when `header` is given.
pub fn write_records_file<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    if rows.is_empty() {
        writeln!(f, "{}", header.join(","))?;
        return Ok(());
    }
    write_records(f, rows)
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}
