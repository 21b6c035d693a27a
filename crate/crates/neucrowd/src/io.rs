//! Dataset CSV and manifest serialization.
//!
//! CSV layout: header row with columns `f0..f{p-1}` (decimal features),
//! `w0..w{d-1}` (0/1 crowd labels) and an optional trailing `truth` column
//! (0/1/empty). One file per split. The manifest (JSON) records feature
//! count, worker count, split file names and the generation seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crowd::{CrowdExample, Dataset, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_features: usize,
    pub n_workers: usize,
    pub seed: u64,
    /// Split name -> CSV file name, relative to the manifest's directory.
    pub splits: BTreeMap<String, String>,
    /// Which labels test metrics are computed against.
    pub test_label_source: String,
}

impl Manifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Manifest =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("bad manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        if m.n_features == 0 || m.n_workers == 0 {
            return Err(Error::Parse("manifest has zero feature or worker count".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Parse one split's CSV from raw bytes.
pub fn parse_dataset_csv(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("bad csv header: {e}")))?
        .clone();
    let mut n_features = 0usize;
    let mut n_workers = 0usize;
    let mut has_truth = false;
    for col in headers.iter() {
        if let Some(rest) = col.strip_prefix('f') {
            if n_workers > 0 || has_truth {
                return Err(Error::Parse(format!("feature column {col} out of order")));
            }
            if rest.parse::<usize>() != Ok(n_features) {
                return Err(Error::Parse(format!("unexpected feature column {col}")));
            }
            n_features += 1;
        } else if let Some(rest) = col.strip_prefix('w') {
            if has_truth {
                return Err(Error::Parse(format!("worker column {col} after truth")));
            }
            if rest.parse::<usize>() != Ok(n_workers) {
                return Err(Error::Parse(format!("unexpected worker column {col}")));
            }
            n_workers += 1;
        } else if col == "truth" {
            if has_truth {
                return Err(Error::Parse("duplicate truth column".into()));
            }
            has_truth = true;
        } else {
            return Err(Error::Parse(format!("unknown column {col}")));
        }
    }
    if n_features == 0 || n_workers == 0 {
        return Err(Error::Parse("csv needs f* and w* columns".into()));
    }
    let mut examples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {row_idx}: {e}")))?;
        let mut features = Vec::with_capacity(n_features);
        for i in 0..n_features {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| Error::Parse(format!("row {row_idx}: bad feature {}", &record[i])))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("row {row_idx}: non-finite feature")));
            }
            features.push(v);
        }
        let mut crowd_labels = Vec::with_capacity(n_workers);
        for i in 0..n_workers {
            match &record[n_features + i] {
                "0" => crowd_labels.push(0),
                "1" => crowd_labels.push(1),
                other => {
                    return Err(Error::Parse(format!(
                        "row {row_idx}: crowd label must be 0/1, got {other}"
                    )))
                }
            }
        }
        let truth = if has_truth {
            match &record[n_features + n_workers] {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => {
                    return Err(Error::Parse(format!(
                        "row {row_idx}: truth must be 0/1/empty, got {other}"
                    )))
                }
            }
        } else {
            None
        };
        examples.push(CrowdExample {
            features,
            crowd_labels,
            truth,
        });
    }
    Dataset::new(examples, split)
}

pub fn dataset_to_csv(dataset: &Dataset) -> Vec<u8> {
    let p = dataset.n_features();
    let d = dataset.n_workers;
    let mut out = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut out);
        let mut header: Vec<String> = (0..p).map(|i| format!("f{i}")).collect();
        header.extend((0..d).map(|i| format!("w{i}")));
        header.push("truth".into());
        writer.write_record(&header).expect("csv header");
        for ex in &dataset.examples {
            let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v}")).collect();
            row.extend(ex.crowd_labels.iter().map(|v| format!("{v}")));
            row.push(ex.truth.map(|t| format!("{t}")).unwrap_or_default());
            writer.write_record(&row).expect("csv row");
        }
        writer.flush().expect("csv flush");
    }
    out
}

/// Write bytes via a sibling temp file plus rename, so readers never see a
/// partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Usage(format!("path {} has no parent", path.display())))?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Manifest::from_json(&bytes)
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Dataset> {
    let file = manifest
        .splits
        .get(split.name())
        .ok_or_else(|| Error::Data(format!("manifest has no {} split", split.name())))?;
    let bytes = fs::read(dir.join(file))?;
    let ds = parse_dataset_csv(&bytes, split)?;
    if ds.n_features() != manifest.n_features || ds.n_workers != manifest.n_workers {
        return Err(Error::Data(format!(
            "{} split does not match manifest dimensions",
            split.name()
        )));
    }
    Ok(ds)
}

pub fn save_splits(
    dir: &Path,
    seed: u64,
    splits: &[(Split, &Dataset)],
) -> Result<()> {
    let first = splits
        .first()
        .ok_or_else(|| Error::Usage("no splits to save".into()))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        n_features: first.1.n_features(),
        n_workers: first.1.n_workers,
        seed,
        splits: splits
            .iter()
            .map(|(s, _)| (s.name().to_string(), format!("{}.csv", s.name())))
            .collect(),
        test_label_source: "truth".into(),
    };
    for (split, ds) in splits {
        write_atomic(&dir.join(format!("{}.csv", split.name())), &dataset_to_csv(ds))?;
    }
    write_atomic(&dir.join(MANIFEST_FILE), &manifest.to_json())?;
    Ok(())
}

pub fn dataset_dir_paths(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join(MANIFEST_FILE)]
}
