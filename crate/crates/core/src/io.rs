//! CSV ingestion and JSON artifacts.
//!
//! Corpus CSV: `traj_id,step,x,y,v0`, one row per sample, positions relative
//! to the vehicle's start. Scene CSV: `sample_id,role,id,X,Y,v,psi,length,width`
//! with role `ego` or `other`, paired with a corpus-format trajectory file whose
//! `traj_id` is the sample id. Dataset CSV: the affordance columns followed by
//! `flag_0..flag_{M-1}` holding 1, 0 or 2.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationReport;
use crate::error::{Error, Result};
use crate::geometry::{deviation_encode, AtomSet, Trajectory, TrajectoryBasis};
use crate::predictor::{LossConfig, NetworkParams, TrainConfig};
use crate::scene::{Affordance, Dataset, Flag, LabeledSample, LaneGeometry, Scene, VehicleState, AFFORDANCE_NAMES};

pub const CORPUS_HEADER: [&str; 5] = ["traj_id", "step", "x", "y", "v0"];
pub const SCENE_HEADER: [&str; 9] = ["sample_id", "role", "id", "X", "Y", "v", "psi", "length", "width"];

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found == expected {
        return Ok(());
    }
    let missing: Vec<&str> = expected.iter().copied().filter(|c| !found.contains(c)).collect();
    let unexpected: Vec<&str> = found.iter().copied().filter(|c| !expected.contains(c)).collect();
    Err(Error::Schema(format!(
        "expected columns [{}]; missing [{}], unexpected [{}]",
        expected.join(","),
        missing.join(","),
        unexpected.join(",")
    )))
}

/// Typed access to one CSV record with row/column-aware errors.
struct Row<'a> {
    record: &'a csv::StringRecord,
    header: &'a [&'a str],
    line: u64,
}

impl Row<'_> {
    fn text(&self, col: usize) -> Result<&str> {
        self.record.get(col).map(str::trim).ok_or_else(|| {
            Error::Schema(format!("row {}: missing column {}", self.line, self.header[col]))
        })
    }

    fn float(&self, col: usize) -> Result<f64> {
        let raw = self.text(col)?;
        let v: f64 = raw.parse().map_err(|_| {
            Error::Data(format!("row {} column {}: cannot parse '{raw}' as a number", self.line, self.header[col]))
        })?;
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "row {} column {}: value '{raw}' is not finite",
                self.line, self.header[col]
            )));
        }
        Ok(v)
    }

    fn uint(&self, col: usize) -> Result<u64> {
        let raw = self.text(col)?;
        raw.parse().map_err(|_| {
            Error::Data(format!(
                "row {} column {}: '{raw}' is not a non-negative integer",
                self.line, self.header[col]
            ))
        })
    }
}

fn for_each_row<R: Read>(reader: R, header: &[&str], mut f: impl FnMut(&Row<'_>) -> Result<()>) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    check_header(rdr.headers()?, header)?;
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        f(&Row {
            record: &record,
            header,
            line,
        })?;
    }
    Ok(())
}

/// Reads raw trajectories; rows of one id must have consecutive steps from 0.
/// Ids keep their order of first appearance.
pub fn read_corpus<R: Read>(reader: R, dt: f64) -> Result<Vec<Trajectory>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (f64, Vec<[f64; 2]>)> = BTreeMap::new();
    for_each_row(reader, &CORPUS_HEADER, |row| {
        let id = row.text(0)?.to_string();
        let step = row.uint(1)? as usize;
        let (x, y, v0) = (row.float(2)?, row.float(3)?, row.float(4)?);
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (v0, Vec::new())
        });
        if step != entry.1.len() {
            return Err(Error::Data(format!(
                "row {}: trajectory {id} expected step {} but found {step}",
                row.line,
                entry.1.len()
            )));
        }
        if v0 != entry.0 {
            return Err(Error::Data(format!("row {}: trajectory {id} changes v0", row.line)));
        }
        entry.1.push([x, y]);
        Ok(())
    })?;
    let trajs: Vec<Trajectory> = order
        .into_iter()
        .map(|id| {
            let (v0, samples) = rows.remove(&id).expect("recorded id");
            Trajectory::new(samples, dt, id, v0)
        })
        .collect::<Result<_>>()?;
    if let Some(first) = trajs.first() {
        if let Some(bad) = trajs.iter().find(|t| t.len() != first.len()) {
            return Err(Error::Data(format!(
                "trajectory {} has {} samples, expected {}",
                bad.source_id(),
                bad.len(),
                first.len()
            )));
        }
    }
    Ok(trajs)
}

pub fn write_corpus<W: Write>(writer: W, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CORPUS_HEADER)?;
    for t in trajs {
        for (k, p) in t.samples().iter().enumerate() {
            w.write_record([
                t.source_id().to_string(),
                k.to_string(),
                p[0].to_string(),
                p[1].to_string(),
                t.v0().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads scenes keyed by sample id, in order of first appearance.
pub fn read_scenes<R: Read>(reader: R, lanes: &LaneGeometry) -> Result<Vec<(String, Scene)>> {
    let mut order: Vec<String> = Vec::new();
    let mut parts: BTreeMap<String, (Option<VehicleState>, Vec<VehicleState>)> = BTreeMap::new();
    for_each_row(reader, &SCENE_HEADER, |row| {
        let sid = row.text(0)?.to_string();
        let role = row.text(1)?.to_string();
        let id = u32::try_from(row.uint(2)?)
            .map_err(|_| Error::Data(format!("row {} column id: out of range", row.line)))?;
        let v = VehicleState {
            id,
            x: row.float(3)?,
            y: row.float(4)?,
            v: row.float(5)?,
            psi: row.float(6)?,
            length: row.float(7)?,
            width: row.float(8)?,
        };
        let entry = parts.entry(sid.clone()).or_insert_with(|| {
            order.push(sid.clone());
            (None, Vec::new())
        });
        match role.as_str() {
            "ego" if entry.0.is_some() => Err(Error::Data(format!("row {}: sample {sid} has two ego rows", row.line))),
            "ego" => {
                entry.0 = Some(v);
                Ok(())
            }
            "other" => {
                entry.1.push(v);
                Ok(())
            }
            _ => Err(Error::Data(format!(
                "row {} column role: expected 'ego' or 'other', found '{role}'",
                row.line
            ))),
        }
    })?;
    order
        .into_iter()
        .map(|sid| {
            let (ego, others) = parts.remove(&sid).expect("recorded id");
            let ego = ego.ok_or_else(|| Error::Data(format!("sample {sid} has no ego row")))?;
            let scene = Scene::new(ego, others, lanes.clone()).map_err(|e| Error::Data(format!("sample {sid}: {e}")))?;
            Ok((sid, scene))
        })
        .collect()
}

pub fn write_scenes<W: Write>(writer: W, scenes: &[(String, Scene)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SCENE_HEADER)?;
    for (sid, scene) in scenes {
        let rows = std::iter::once(("ego", &scene.ego)).chain(scene.others.iter().map(|o| ("other", o)));
        for (role, v) in rows {
            w.write_record([
                sid.clone(),
                role.to_string(),
                v.id.to_string(),
                v.x.to_string(),
                v.y.to_string(),
                v.v.to_string(),
                v.psi.to_string(),
                v.length.to_string(),
                v.width.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Scenes joined with their observed futures, deviation-encoded at each ego's speed.
pub fn ingest_corpus(scenes: &Path, trajectories: &Path, lanes: &LaneGeometry, dt: f64) -> Result<Vec<(Scene, Trajectory)>> {
    let scenes = read_scenes(open(scenes)?, lanes)?;
    let trajs = read_corpus(open(trajectories)?, dt)?;
    let mut by_id: BTreeMap<String, Trajectory> = trajs.into_iter().map(|t| (t.source_id().to_string(), t)).collect();
    scenes
        .into_iter()
        .map(|(sid, scene)| {
            let raw = by_id
                .remove(&sid)
                .ok_or_else(|| Error::Data(format!("sample {sid} has no trajectory rows")))?;
            let observed = deviation_encode(&raw, raw.v0())?;
            Ok((scene, observed))
        })
        .collect()
}

pub fn dataset_header(m: usize) -> Vec<String> {
    AFFORDANCE_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain((0..m).map(|i| format!("flag_{i}")))
        .collect()
}

pub fn write_dataset<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let m = data.output_dim().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset_header(m))?;
    for s in &data.samples {
        let row: Vec<String> = s
            .affordance
            .to_array()
            .iter()
            .map(f64::to_string)
            .chain(s.flags.iter().map(|f| f.code().to_string()))
            .collect();
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let m = headers.len().checked_sub(AFFORDANCE_NAMES.len()).unwrap_or(0);
    let expected = dataset_header(m);
    let expected: Vec<&str> = expected.iter().map(String::as_str).collect();
    check_header(&headers, &expected)?;
    let mut samples = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let row = Row {
            record: &record,
            header: &expected,
            line: record.position().map_or(0, |p| p.line()),
        };
        let aff: Vec<f64> = (0..AFFORDANCE_NAMES.len()).map(|c| row.float(c)).collect::<Result<_>>()?;
        let flags: Vec<Flag> = (0..m)
            .map(|i| {
                let c = AFFORDANCE_NAMES.len() + i;
                let code = row.uint(c)?;
                u8::try_from(code)
                    .map_err(|_| Error::Data(format!("row {} column {}: bad flag {code}", row.line, expected[c])))
                    .and_then(Flag::from_code)
                    .map_err(|e| Error::Data(format!("row {} column {}: {e}", row.line, expected[c])))
            })
            .collect::<Result<_>>()?;
        let sample = LabeledSample::new(Affordance::from_array(&aff)?, flags)
            .map_err(|e| Error::Data(format!("row {}: {e}", row.line)))?;
        samples.push(sample);
    }
    Ok(Dataset::from_samples(samples))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Artifact(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Artifact(format!("missing artifact: expected {}", path.display())));
    }
    let value = serde_json::from_reader(open(path)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    Ok(value)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Basis document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisArtifact {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub atoms: AtomSet,
    pub epsilon: f64,
    /// Deviation-encoded samples of each base.
    pub bases: Vec<Vec<[f64; 2]>>,
    pub base_ids: Vec<String>,
    pub base_v0: Vec<f64>,
    pub source_indices: Vec<usize>,
    pub corpus_size: usize,
    pub fingerprint: String,
}

impl BasisArtifact {
    pub fn from_basis(basis: &TrajectoryBasis, corpus_size: usize, fingerprint: String) -> Self {
        Self {
            dt: basis.dt(),
            horizon: basis.horizon(),
            atoms: basis.atoms.clone(),
            epsilon: basis.epsilon,
            bases: basis.bases.iter().map(|b| b.samples().to_vec()).collect(),
            base_ids: basis.bases.iter().map(|b| b.source_id().to_string()).collect(),
            base_v0: basis.bases.iter().map(Trajectory::v0).collect(),
            source_indices: basis.source_indices.clone(),
            corpus_size,
            fingerprint,
        }
    }

    pub fn to_basis(&self) -> Result<TrajectoryBasis> {
        if self.bases.is_empty() {
            return Err(Error::Schema("basis artifact has no bases".into()));
        }
        if self.base_ids.len() != self.bases.len() || self.base_v0.len() != self.bases.len() {
            return Err(Error::Schema("basis artifact metadata length mismatch".into()));
        }
        let bases = self
            .bases
            .iter()
            .zip(&self.base_ids)
            .zip(&self.base_v0)
            .map(|((s, id), v0)| {
                if s.len() != self.horizon {
                    return Err(Error::Schema(format!("base {id} has {} samples, expected {}", s.len(), self.horizon)));
                }
                Trajectory::new(s.clone(), self.dt, id.clone(), *v0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryBasis {
            bases,
            epsilon: self.epsilon,
            atoms: self.atoms.clone(),
            source_indices: self.source_indices.clone(),
        })
    }
}

/// Model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub params: NetworkParams,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub n1: usize,
    pub loss_history: Vec<f64>,
    /// Fingerprint of the basis the outputs index.
    pub basis_fingerprint: String,
    pub fingerprint: String,
}

/// Calibration artifact: the report plus what it was computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub report: CalibrationReport,
    pub model_fingerprint: String,
    pub fingerprint: String,
}
