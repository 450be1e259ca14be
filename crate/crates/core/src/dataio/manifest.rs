//! Patient manifest: comma-separated text with a header row
//!
//! ```text
//! patient_id,volume_path,label,nose_slice,acromion_slice,mask_path
//! p000,volumes/p000.gmgv,1,4,16,masks/p000.gmgv
//! p001,volumes/p001.gmgv,0,,,
//! ```
//!
//! Label 1 is the positive class. Landmark columns are either both present
//! or both empty. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::ctprep::Landmarks;
use crate::error::{Error, Result};

const HEADER: [&str; 6] = [
    "patient_id",
    "volume_path",
    "label",
    "nose_slice",
    "acromion_slice",
    "mask_path",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub label: u8,
    pub landmarks: Option<Landmarks>,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.patient_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.patient_id == id)
    }
}

/// Reads and validates a manifest, checking that referenced files exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, true)
}

pub fn parse_manifest(text: &str, base_dir: &Path, check_files: bool) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Manifest {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != HEADER[..3] || cols.iter().zip(HEADER).any(|(c, h)| *c != h) {
        return Err(Error::Manifest {
            row: 0,
            reason: format!("header must be {}", HEADER.join(",")),
        });
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let err = |reason: String| Error::Manifest { row, reason };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let col = |k: usize| rec.get(k).unwrap_or("");
        let id = col(0).to_string();
        if id.is_empty() {
            return Err(err("empty patient_id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate patient_id {id}")));
        }
        let label = match col(2) {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label {other:?} is not 0 or 1"))),
        };
        let slice = |k: usize| -> Result<Option<usize>> {
            match col(k) {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|_| err(format!("{} {s:?} is not a slice index", HEADER[k]))),
            }
        };
        let landmarks = match (slice(3)?, slice(4)?) {
            (Some(n), Some(a)) if n != a => Some(Landmarks {
                nose_slice: n,
                acromion_slice: a,
            }),
            (None, None) => None,
            _ => return Err(err("nose_slice and acromion_slice must both be given and differ".into())),
        };
        let resolve = |s: &str| {
            let p = Path::new(s);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        if col(1).is_empty() {
            return Err(err("empty volume_path".into()));
        }
        let volume_path = resolve(col(1));
        let mask_path = (!col(5).is_empty()).then(|| resolve(col(5)));
        if check_files {
            for p in std::iter::once(&volume_path).chain(mask_path.as_ref()) {
                if !p.is_file() {
                    return Err(err(format!("missing file {}", p.display())));
                }
            }
        }
        entries.push(ManifestEntry {
            patient_id: id,
            volume_path,
            label,
            landmarks,
            mask_path,
        });
    }
    Ok(Manifest { entries })
}

/// Writes paths relative to `path`'s directory when they live under it.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(HEADER).map_err(io_err)?;
    for e in &manifest.entries {
        let (n, a) = e
            .landmarks
            .map(|l| (l.nose_slice.to_string(), l.acromion_slice.to_string()))
            .unwrap_or_default();
        w.write_record([
            e.patient_id.clone(),
            rel(&e.volume_path),
            e.label.to_string(),
            n,
            a,
            e.mask_path.as_deref().map(rel).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
