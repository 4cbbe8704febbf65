//! Two-column signal files: header `ch1,ch2`, one sample per row.
//!
//! Values are written in scientific notation with 17 significant digits, so
//! every `f64` survives a write/read roundtrip exactly.

use std::io::Write;
use std::path::Path;

use lqbss_core::{SamplePair, SignalBatch};

use crate::error::{CliError, CliResult};

pub const HEADER: [&str; 2] = ["ch1", "ch2"];

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_signal<W: Write>(out: W, batch: &SignalBatch) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for s in batch {
        w.write_record([format_value(s.first), format_value(s.second)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_signal_file(path: &Path, batch: &SignalBatch) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_signal(std::io::BufWriter::new(file), batch).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Parse {
            path: path.to_path_buf(),
            row: 0,
            message: format!("{other:?}"),
        },
    })
}

/// Reads a signal file; errors name the 1-based data row (header is row 0).
pub fn read_signal_file(path: &Path) -> CliResult<SignalBatch> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |row: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(0, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(
            0,
            format!(
                "expected header 'ch1,ch2', found '{}'",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != 2 {
            return Err(parse_err(
                row,
                format!("expected 2 fields, found {}", record.len()),
            ));
        }
        let field = |k: usize| -> CliResult<f64> {
            let text = &record[k];
            let v: f64 = text
                .parse()
                .map_err(|_| parse_err(row, format!("cannot parse '{text}' in {}", HEADER[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(row, format!("non-finite value in {}", HEADER[k])))
            }
        };
        samples.push(SamplePair::new(field(0)?, field(1)?));
    }
    if samples.is_empty() {
        return Err(parse_err(0, "file has no data rows".into()));
    }
    Ok(SignalBatch::new(samples)?)
}
