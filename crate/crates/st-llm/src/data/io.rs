//! On-disk traffic formats.
//!
//! CSV: a header row of station ids, then one row per timestep; one file per
//! channel. Binary: magic `STLL`, version u32, T/N/C u32, interval u32,
//! start_epoch i64, then T*N*C little-endian f64 (all integers little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::TrafficTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STLL";
const VERSION: u32 = 1;

/// Load a single-channel CSV (or several, one per channel) into a validated
/// traffic tensor. All files must agree on station ids and timestep count.
pub fn load_csv(paths: &[&Path], interval_minutes: u32, start_epoch: i64) -> Result<TrafficTensor> {
    if paths.is_empty() {
        return Err(Error::Data("no csv files given".into()));
    }
    let mut station_ids: Option<Vec<String>> = None;
    let mut channels: Vec<Vec<f64>> = Vec::new(); // per channel: T*N row-major
    let mut t_len: Option<usize> = None;

    for path in paths {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(BufReader::new(file));
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect::<Vec<_>>();
        if headers.is_empty() {
            return Err(Error::Data(format!("{}: empty header row", path.display())));
        }
        match &station_ids {
            None => station_ids = Some(headers.clone()),
            Some(ids) if *ids != headers => {
                return Err(Error::Data(format!(
                    "{}: station ids differ from the first channel file",
                    path.display()
                )))
            }
            _ => {}
        }
        let n = headers.len();
        let mut values = Vec::new();
        let mut rows = 0usize;
        for (row_ix, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), row_ix + 2)))?;
            if record.len() != n {
                return Err(Error::Data(format!(
                    "{}: row {} has {} cells, expected {}",
                    path.display(),
                    row_ix + 2,
                    record.len(),
                    n
                )));
            }
            for (col_ix, cell) in record.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {} column {} ({}): not a number: {cell:?}",
                        path.display(),
                        row_ix + 2,
                        col_ix + 1,
                        headers[col_ix]
                    ))
                })?;
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!(
                        "{}: row {} column {} ({}): value {v} must be finite and nonnegative",
                        path.display(),
                        row_ix + 2,
                        col_ix + 1,
                        headers[col_ix]
                    )));
                }
                values.push(v);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Data(format!("{}: no rows", path.display())));
        }
        match t_len {
            None => t_len = Some(rows),
            Some(t) if t != rows => {
                return Err(Error::Data(format!(
                    "{}: {} rows, expected {} like the first channel file",
                    path.display(),
                    rows,
                    t
                )))
            }
            _ => {}
        }
        channels.push(values);
    }

    let ids = station_ids.unwrap();
    let (t, n, c) = (t_len.unwrap(), ids.len(), channels.len());
    let mut data = Vec::with_capacity(t * n * c);
    for step in 0..t {
        for station in 0..n {
            for channel in &channels {
                data.push(channel[step * n + station]);
            }
        }
    }
    TrafficTensor::new(Tensor::new(vec![t, n, c], data)?, interval_minutes, start_epoch, ids)
}

/// Write one CSV per channel. `paths` must have one entry per channel.
pub fn save_csv(tt: &TrafficTensor, paths: &[&Path]) -> Result<()> {
    if paths.len() != tt.channels() {
        return Err(Error::Data(format!(
            "{} paths for {} channels",
            paths.len(),
            tt.channels()
        )));
    }
    for (ch, path) in paths.iter().enumerate() {
        let file = File::create(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(&tt.station_ids)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for t in 0..tt.timesteps() {
            let row: Vec<String> = (0..tt.stations())
                .map(|n| tt.values.at(&[t, n, ch]).to_string())
                .collect();
            w.write_record(&row)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn save_binary(tt: &TrafficTensor, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tt.timesteps() as u32).to_le_bytes())?;
    w.write_all(&(tt.stations() as u32).to_le_bytes())?;
    w.write_all(&(tt.channels() as u32).to_le_bytes())?;
    w.write_all(&tt.interval_minutes.to_le_bytes())?;
    w.write_all(&tt.start_epoch.to_le_bytes())?;
    w.write_all(&tt.values.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_binary(path: &Path) -> Result<TrafficTensor> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("{}: truncated header: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|e| Error::Data(format!("truncated field: {e}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let t = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let interval = read_u32(&mut r)?;
    let mut i64buf = [0u8; 8];
    r.read_exact(&mut i64buf)
        .map_err(|e| Error::Data(format!("truncated start_epoch: {e}")))?;
    let start_epoch = i64::from_le_bytes(i64buf);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let values = Tensor::from_le_bytes(vec![t, n, c], &payload)?;
    TrafficTensor::new(
        values,
        interval,
        start_epoch,
        (0..n).map(|i| format!("s{i:03}")).collect(),
    )
}

/// Pick the loader from the file extension: `.csv` is a single-channel CSV,
/// anything else the binary format.
pub fn load_auto(path: &Path, interval_minutes: u32, start_epoch: i64) -> Result<TrafficTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(&[path], interval_minutes, start_epoch),
        _ => load_binary(path),
    }
}
