use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prep::{prepare_shot, resample_channels};
use super::synth::SynthConfig;
use super::{Label, Shot, FEATURE_NAMES, N_FEATURES};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::kernels::DEFAULT_STEP_S;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// `time_s` followed by the twelve feature names.
pub fn shot_csv_header() -> Vec<String> {
    std::iter::once("time_s")
        .chain(FEATURE_NAMES)
        .map(String::from)
        .collect()
}

fn expected_header() -> String {
    shot_csv_header().join(",")
}

/// Raw columns of a shot CSV, before resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotTable {
    pub times: Vec<f64>,
    /// One vector per feature, in schema order.
    pub channels: Vec<Vec<f64>>,
}

impl ShotTable {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Resamples onto a uniform grid. A single-row table is taken as already
    /// on the grid.
    pub fn to_channels(&self, step_s: f64) -> Result<Tensor> {
        let rows = if self.len() == 1 {
            self.channels.clone()
        } else {
            resample_channels(&self.times, &self.channels, step_s)?
        };
        Tensor::from_rows(&rows)
    }
}

/// Parses a shot CSV. The header must match [`shot_csv_header`] exactly.
pub fn parse_shot_csv<R: Read>(reader: R) -> Result<ShotTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Schema {
            message: format!("unreadable header: {e}"),
            expected: expected_header(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != shot_csv_header() {
        return Err(Error::Schema {
            message: format!("got header {}", header.join(",")),
            expected: expected_header(),
        });
    }
    let mut times = Vec::new();
    let mut channels = vec![Vec::new(); N_FEATURES];
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != N_FEATURES + 1 {
            return Err(Error::Input(format!(
                "line {line}: expected {} fields, got {}",
                N_FEATURES + 1,
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Input(format!("line {line}: cannot parse {field:?} as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::Input(format!(
                    "line {line}: non-finite value {field:?}"
                )));
            }
            if j == 0 {
                times.push(v);
            } else {
                channels[j - 1].push(v);
            }
        }
    }
    if times.is_empty() {
        return Err(Error::Input("shot CSV has no samples".into()));
    }
    Ok(ShotTable { times, channels })
}

/// Writes a shot with time stamps `i * step_s`.
pub fn write_shot_csv<W: Write>(writer: W, shot: &Shot) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(shot_csv_header())?;
    let mut row = Vec::with_capacity(N_FEATURES + 1);
    for t in 0..shot.len() {
        row.clear();
        row.push((t as f64 * shot.step_s).to_string());
        row.extend((0..N_FEATURES).map(|c| shot.channel(c)[t].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelCounts {
    pub disruptive: usize,
    pub nondisruptive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub path: String,
    pub label: Label,
    pub duration_s: f64,
    pub machine: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub config: SynthConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub feature_names: Vec<String>,
    pub step_s: f64,
    pub counts: LabelCounts,
    pub shots: Vec<ShotRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorRecord>,
}

impl DatasetManifest {
    /// Manifest for `shots`, stored under `shots/<id>.csv`.
    pub fn for_shots(shots: &[Shot], generator: Option<GeneratorRecord>) -> Self {
        let records: Vec<ShotRecord> = shots
            .iter()
            .map(|s| ShotRecord {
                id: s.id.clone(),
                path: format!("shots/{}.csv", s.id),
                label: s.label,
                duration_s: s.duration_s(),
                machine: s.machine.clone(),
            })
            .collect();
        let step_s = shots.first().map_or(DEFAULT_STEP_S, |s| s.step_s);
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            step_s,
            counts: count_labels(records.iter().map(|r| r.label)),
            shots: records,
            generator,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.schema_version.into(),
                supported: MANIFEST_SCHEMA_VERSION.into(),
            });
        }
        if self.feature_names != FEATURE_NAMES {
            return Err(Error::Schema {
                message: format!("manifest lists features {}", self.feature_names.join(",")),
                expected: FEATURE_NAMES.join(","),
            });
        }
        if !(self.step_s.is_finite() && self.step_s > 0.0) {
            return Err(Error::Input(format!("invalid step_s {}", self.step_s)));
        }
        let counts = count_labels(self.shots.iter().map(|r| r.label));
        if counts != self.counts {
            return Err(Error::Input(format!(
                "manifest counts {:?} do not match its records {:?}",
                self.counts, counts
            )));
        }
        let mut ids = HashSet::new();
        for r in &self.shots {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Input(format!("duplicate shot id {}", r.id)));
            }
            if !(r.duration_s.is_finite() && r.duration_s >= 0.0) {
                return Err(Error::Input(format!("shot {}: invalid duration", r.id)));
            }
            check_relative(&r.path)?;
        }
        Ok(())
    }
}

fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let ok = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "shot path {path:?} must be relative and stay inside the dataset directory"
        )))
    }
}

fn count_labels(labels: impl Iterator<Item = Label>) -> LabelCounts {
    let mut counts = LabelCounts {
        disruptive: 0,
        nondisruptive: 0,
    };
    for l in labels {
        match l {
            Label::Disruptive => counts.disruptive += 1,
            Label::Nondisruptive => counts.nondisruptive += 1,
        }
    }
    counts
}

/// Writes `manifest.json` and one CSV per shot into `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, shots: &[Shot]) -> Result<()> {
    manifest.validate()?;
    if manifest.shots.len() != shots.len() {
        return Err(Error::Input(
            "manifest and shot list differ in length".into(),
        ));
    }
    for (record, shot) in manifest.shots.iter().zip(shots) {
        let path = dir.join(&record.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::File::create(&path)?;
        write_shot_csv(std::io::BufWriter::new(file), shot)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(())
}

/// A loaded dataset: resampled, truncated shots in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub shots: Vec<Shot>,
    /// Ids of shots dropped for being too short after truncation.
    pub excluded: Vec<String>,
}

/// Reads a dataset directory, resampling and truncating each shot.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest = DatasetManifest::from_json(&text)?;
    let paths: Vec<PathBuf> = manifest.shots.iter().map(|r| dir.join(&r.path)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Error::Input(format!(
            "missing shot file {}",
            missing.display()
        )));
    }
    let loaded: Vec<Result<Option<Shot>>> = manifest
        .shots
        .par_iter()
        .zip(paths.par_iter())
        .map(|(record, path)| {
            let table = parse_shot_csv(fs::File::open(path)?).map_err(|e| match e {
                Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
                other => other,
            })?;
            let channels = table.to_channels(manifest.step_s)?;
            let shot = Shot::new(
                record.id.clone(),
                channels,
                manifest.step_s,
                record.label,
                record.machine.clone(),
            )?;
            Ok(prepare_shot(shot))
        })
        .collect();
    let mut shots = Vec::with_capacity(loaded.len());
    let mut excluded = Vec::new();
    for (record, result) in manifest.shots.iter().zip(loaded) {
        match result? {
            Some(shot) => shots.push(shot),
            None => excluded.push(record.id.clone()),
        }
    }
    if !excluded.is_empty() {
        log::info!(
            "excluded {} shots shorter than the minimum duration",
            excluded.len()
        );
    }
    Ok(Dataset {
        manifest,
        shots,
        excluded,
    })
}
