//! On-disk formats.
//!
//! A cohort directory holds `cohort.json` (schema, layout, generator config
//! and seed), `index.csv` with columns `id,era,label,file`, and one
//! `episodes/<id>.csv` per episode with columns `hour,variable,value`.
//!
//! The processed cache is a little-endian binary file: the 8-byte magic
//! `DKLPROC1`, a `u32` header length, a JSON [`ProcessedHeader`], then per
//! episode a `u16` id length, the UTF-8 id, an era byte (0 = A, 1 = B), a
//! label byte and `48 × 76` `f64` values in row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    variable_index, Era, Layout, Measurement, ProcessedEpisode, RawEpisode, ShiftConfig, Value, N_FEATURES, STEPS,
    VARIABLES,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COHORT_SCHEMA: &str = "dkl-cohort/v1";
pub const PROCESSED_SCHEMA: &str = "dkl-processed/v1";
pub const PROCESSED_MAGIC: &[u8; 8] = b"DKLPROC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub schema: String,
    pub layout: Layout,
    pub episodes: usize,
    pub seed: Option<u64>,
    pub generator: Option<ShiftConfig>,
}

impl CohortManifest {
    pub fn new(episodes: usize, seed: Option<u64>, generator: Option<ShiftConfig>) -> Self {
        Self {
            schema: COHORT_SCHEMA.into(),
            layout: Layout::current(),
            episodes,
            seed,
            generator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortIndexRow {
    pub id: String,
    pub era: String,
    pub label: u8,
    pub file: String,
}

#[derive(Serialize, Deserialize)]
struct MeasurementRow {
    hour: f64,
    variable: String,
    value: String,
}

fn check_schema(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::VersionMismatch {
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(BufReader::new(file)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a cohort directory, creating it if needed.
pub fn write_cohort(dir: &Path, manifest: &CohortManifest, episodes: &[RawEpisode]) -> Result<()> {
    let ep_dir = dir.join("episodes");
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    write_json(&dir.join("cohort.json"), manifest)?;
    let index_path = dir.join("index.csv");
    let mut index = csv_writer(&index_path)?;
    for ep in episodes {
        let file = format!("episodes/{}.csv", ep.id);
        index.serialize(CohortIndexRow {
            id: ep.id.clone(),
            era: ep.era.as_str().into(),
            label: ep.label,
            file: file.clone(),
        })?;
        let path = dir.join(&file);
        let mut w = csv_writer(&path)?;
        for m in &ep.measurements {
            let value = match &m.value {
                Value::Number(x) => x.to_string(),
                Value::Category(c) => c.clone(),
            };
            w.serialize(MeasurementRow { hour: m.hour, variable: m.variable.clone(), value })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join("cohort.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), e.line())))?;
    let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    check_schema(COHORT_SCHEMA, found)?;
    let manifest: CohortManifest = serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.layout != Layout::current() {
        return Err(Error::VersionMismatch {
            expected: "current 76-column layout".into(),
            found: format!("layout {}", manifest.layout.schema),
        });
    }
    Ok(manifest)
}

fn read_episode(path: &Path, id: String, era: Era, label: u8) -> Result<RawEpisode> {
    let mut reader = csv_reader(path)?;
    let mut measurements = Vec::new();
    for (i, row) in reader.deserialize::<MeasurementRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Format(format!("{}:{line}: {e}", path.display())))?;
        let var = variable_index(&row.variable).ok_or_else(|| {
            Error::Format(format!("{}:{line}: unknown variable {:?}", path.display(), row.variable))
        })?;
        let value = if VARIABLES[var].is_continuous() {
            Value::Number(row.value.parse().map_err(|_| {
                Error::Format(format!("{}:{line}: {:?} is not a number", path.display(), row.value))
            })?)
        } else {
            Value::Category(row.value)
        };
        measurements.push(Measurement { hour: row.hour, variable: row.variable, value });
    }
    Ok(RawEpisode { id, era, label, measurements })
}

pub fn read_cohort(dir: &Path) -> Result<(CohortManifest, Vec<RawEpisode>)> {
    let manifest = read_manifest(dir)?;
    let index_path = dir.join("index.csv");
    let mut index = csv_reader(&index_path)?;
    let mut episodes = Vec::new();
    for (i, row) in index.deserialize::<CohortIndexRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Format(format!("{}:{line}: {e}", index_path.display())))?;
        let era = Era::parse(&row.era)
            .ok_or_else(|| Error::Format(format!("{}:{line}: unknown era {:?}", index_path.display(), row.era)))?;
        if row.label > 1 {
            return Err(Error::Format(format!("{}:{line}: label {} is not 0/1", index_path.display(), row.label)));
        }
        episodes.push(read_episode(&dir.join(&row.file), row.id, era, row.label)?);
    }
    if episodes.len() != manifest.episodes {
        return Err(Error::Format(format!(
            "{} lists {} episodes but cohort.json declares {}",
            index_path.display(),
            episodes.len(),
            manifest.episodes
        )));
    }
    Ok((manifest, episodes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedHeader {
    pub schema: String,
    pub layout: Layout,
    pub episodes: usize,
}

pub fn write_processed(path: &Path, episodes: &[ProcessedEpisode]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = serde_json::to_vec(&ProcessedHeader {
        schema: PROCESSED_SCHEMA.into(),
        layout: Layout::current(),
        episodes: episodes.len(),
    })?;
    w.write_all(PROCESSED_MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for ep in episodes {
        if ep.x.shape() != [STEPS, N_FEATURES] {
            return Err(Error::Format(format!("episode {} has shape {:?}", ep.id, ep.x.shape())));
        }
        let id = ep.id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Format(format!("episode id {} too long", ep.id)))?;
        w.write_all(&id_len.to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        w.write_all(&[ep.era as u8, ep.label]).map_err(io)?;
        for v in ep.x.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_processed(path: &Path) -> Result<Vec<ProcessedEpisode>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r: &[u8] = &bytes;
    let truncated = || Error::Format(format!("{}: truncated processed file", path.display()));
    let take = |n: usize, r: &mut &[u8]| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| truncated())?;
        Ok(buf)
    };
    if take(8, &mut r)? != PROCESSED_MAGIC {
        return Err(Error::Format(format!("{} is not a processed cohort file", path.display())));
    }
    let len = u32::from_le_bytes(take(4, &mut r)?.try_into().expect("4 bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&take(len, &mut r)?)?;
    check_schema(PROCESSED_SCHEMA, header.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>"))?;
    let header: ProcessedHeader = serde_json::from_value(header)?;
    if header.layout != Layout::current() {
        return Err(Error::VersionMismatch {
            expected: "current 76-column layout".into(),
            found: format!("layout {}", header.layout.schema),
        });
    }
    let mut out = Vec::with_capacity(header.episodes);
    for _ in 0..header.episodes {
        let id_len = u16::from_le_bytes(take(2, &mut r)?.try_into().expect("2 bytes")) as usize;
        let id = String::from_utf8(take(id_len, &mut r)?)
            .map_err(|_| Error::Format(format!("{}: episode id is not UTF-8", path.display())))?;
        let tags = take(2, &mut r)?;
        let era = match tags[0] {
            0 => Era::A,
            1 => Era::B,
            b => return Err(Error::Format(format!("{}: era byte {b}", path.display()))),
        };
        let data: Vec<f64> = take(8 * STEPS * N_FEATURES, &mut r)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(ProcessedEpisode { id, era, label: tags[1], x: Tensor::matrix(STEPS, N_FEATURES, data)? });
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{}: trailing bytes after last episode", path.display())));
    }
    Ok(out)
}

/// Path of the processed cache inside a cohort directory.
pub fn processed_path(dir: &Path) -> PathBuf {
    dir.join("processed.bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, preprocess_episode};

    #[test]
    fn cohort_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ShiftConfig { n_era_a: 4, n_era_b: 3, ..Default::default() };
        let eps = generate_cohort(&cfg, 5).unwrap();
        write_cohort(dir.path(), &CohortManifest::new(eps.len(), Some(5), Some(cfg.clone())), &eps).unwrap();
        let (manifest, back) = read_cohort(dir.path()).unwrap();
        assert_eq!(manifest.generator, Some(cfg));
        assert_eq!(back, eps);
    }

    #[test]
    fn processed_cache_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ShiftConfig { n_era_a: 3, n_era_b: 2, ..Default::default() };
        let eps: Vec<ProcessedEpisode> =
            generate_cohort(&cfg, 1).unwrap().iter().map(|e| preprocess_episode(e).unwrap()).collect();
        let path = dir.path().join("p.bin");
        write_processed(&path, &eps).unwrap();
        assert_eq!(read_processed(&path).unwrap(), eps);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_processed(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_schema_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = serde_json::to_value(CohortManifest::new(0, None, None)).unwrap();
        m["schema"] = "dkl-cohort/v0".into();
        fs::write(dir.path().join("cohort.json"), m.to_string()).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn bad_rows_report_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let eps = vec![RawEpisode {
            id: "X1".into(),
            era: Era::A,
            label: 1,
            measurements: vec![Measurement { hour: 0.5, variable: "pH".into(), value: Value::Number(7.2) }],
        }];
        write_cohort(dir.path(), &CohortManifest::new(1, None, None), &eps).unwrap();
        fs::write(dir.path().join("episodes/X1.csv"), "hour,variable,value\n0.5,pH,7.2\n1.5,pH,acid\n").unwrap();
        let err = read_cohort(dir.path()).unwrap_err().to_string();
        assert!(err.contains("X1.csv:3"), "{err}");
    }
}
