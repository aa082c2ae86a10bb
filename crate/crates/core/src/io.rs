//! File formats: measurement CSV, ACOV CSV, and JSON configs and reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use csv::{ReaderBuilder, Trim, WriterBuilder};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::simulate::{MeasurementRecord, Origin};
use crate::stability::AcovEstimate;

/// Relative tolerance on the spacing of the time column.
const SPACING_RTOL: f64 = 1e-9;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `t_s,z1,...,z{n_z}` with 17 significant digits, so reading back is exact.
pub fn write_measurements<W: Write>(record: &MeasurementRecord, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    let mut header = vec!["t_s".to_string()];
    header.extend((1..=record.nz()).map(|c| format!("z{c}")));
    w.write_record(&header)?;
    let z = record.z();
    let mut row = Vec::with_capacity(record.nz() + 1);
    for k in 0..z.ncols() {
        row.clear();
        row.push(fmt(k as f64 * record.ts()));
        row.extend(z.column(k).iter().map(|&v| fmt(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_measurements_file(record: &MeasurementRecord, path: &Path) -> Result<()> {
    write_measurements(record, BufWriter::new(File::create(path)?))
}

/// Parses a measurement CSV; the period is inferred from the time column,
/// which must be uniformly spaced.
pub fn read_measurements<R: Read>(input: R, origin: Origin) -> Result<MeasurementRecord> {
    let mut rdr = ReaderBuilder::new().trim(Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "t_s" {
        return invalid("measurement CSV needs a header `t_s,z1,...`");
    }
    for (c, name) in headers.iter().skip(1).enumerate() {
        if name != format!("z{}", c + 1) {
            return invalid(format!("unexpected column `{name}`, expected `z{}`", c + 1));
        }
    }
    let nz = headers.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != nz + 1 {
            return invalid(format!(
                "row {} has {} fields, expected {}",
                line + 2,
                rec.len(),
                nz + 1
            ));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("row {}: cannot parse `{field}`", line + 2)))?;
            if c == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if times.len() < 2 {
        return invalid(format!(
            "measurement file has {} data rows, need at least 2",
            times.len()
        ));
    }
    let ts = times[1] - times[0];
    if ts.is_nan() || ts <= 0.0 {
        return invalid("time column must be strictly increasing");
    }
    for (k, &t) in times.iter().enumerate() {
        let expect = times[0] + k as f64 * ts;
        if (t - expect).abs() > SPACING_RTOL * expect.abs().max(ts) {
            return invalid(format!(
                "time column is not uniformly spaced at row {} (t = {t}, expected {expect})",
                k + 2
            ));
        }
    }
    let z = DMatrix::from_vec(nz, times.len(), values);
    MeasurementRecord::new(ts, z, origin)
}

pub fn read_measurements_file(path: &Path) -> Result<MeasurementRecord> {
    let file = BufReader::new(File::open(path)?);
    read_measurements(
        file,
        Origin::Ingested {
            path: path.to_path_buf(),
        },
    )
}

/// Writes `tau_s,pair_i,pair_j,sigma2,var_sigma2` with 1-based channel indices.
pub fn write_acov<W: Write>(acov: &AcovEstimate, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record(["tau_s", "pair_i", "pair_j", "sigma2", "var_sigma2"])?;
    let taus = acov.grid.taus();
    for (k, &(i, j)) in acov.pairs.iter().enumerate() {
        for (p, tau) in taus.iter().enumerate() {
            w.write_record([
                fmt(*tau),
                (i + 1).to_string(),
                (j + 1).to_string(),
                fmt(acov.sigma2[k][p]),
                fmt(acov.var_weights[k][p]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_acov_file(acov: &AcovEstimate, path: &Path) -> Result<()> {
    write_acov(acov, BufWriter::new(File::create(path)?))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
