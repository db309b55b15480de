//! Manifest-driven volume storage.
//!
//! `manifest.json` lists one entry per patient; voxel blobs are row-major
//! `[T,Z,H,W]` little-endian `f32`, label blobs the same order as `u8`.
//! Blob paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AuditCounter, HiddenLabels, Vendor, VolumeRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    vendor: String,
    dims: [usize; 4],
    spacing: [f64; 2],
    ed_frame: usize,
    es_frame: usize,
    image_blob_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_blob_path: Option<String>,
    /// Ground truth withheld from training (synthetic cohorts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audit_label_blob_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    entries: Vec<serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// The first bad entry aborts the load.
    Strict,
    /// Bad entries are skipped and reported.
    Lenient,
}

#[derive(Debug)]
pub struct LoadedManifest {
    pub records: Vec<VolumeRecord>,
    /// `(entry id, diagnostic)` for every skipped entry.
    pub skipped: Vec<(String, String)>,
    /// Counts reads of any audit labels loaded with the records.
    pub audit: AuditCounter,
}

fn read_blob(dir: &Path, rel: &str, expected: usize, entry: &str) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::Manifest {
        entry: entry.into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    if bytes.len() != expected {
        return Err(Error::Manifest {
            entry: entry.into(),
            reason: format!(
                "{} has {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

fn load_entry(dir: &Path, raw: serde_json::Value, audit: &AuditCounter) -> Result<VolumeRecord> {
    let entry: ManifestEntry = serde_json::from_value(raw).map_err(|e| Error::Manifest {
        entry: "?".into(),
        reason: e.to_string(),
    })?;
    let vendor: Vendor = entry.vendor.parse().map_err(|e: Error| Error::Manifest {
        entry: entry.id.clone(),
        reason: e.to_string(),
    })?;
    let n: usize = entry.dims.iter().product();
    let voxels = read_blob(dir, &entry.image_blob_path, n * 4, &entry.id)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = entry
        .label_blob_path
        .as_deref()
        .map(|p| read_blob(dir, p, n, &entry.id))
        .transpose()?;
    let hidden_labels = entry
        .audit_label_blob_path
        .as_deref()
        .map(|p| read_blob(dir, p, n, &entry.id))
        .transpose()?
        .map(|l| HiddenLabels::new(l, audit));
    let rec = VolumeRecord {
        patient_id: entry.id,
        vendor,
        dims: entry.dims,
        voxels,
        spacing: (entry.spacing[0], entry.spacing[1]),
        ed_frame: entry.ed_frame,
        es_frame: entry.es_frame,
        labels,
        hidden_labels,
    };
    rec.validate()?;
    Ok(rec)
}

/// Reads `path` (a manifest file, or a directory containing one).
pub fn load_manifest(path: &Path, mode: LoadMode) -> Result<LoadedManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        entry: file.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            entry: file.display().to_string(),
            reason: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    let audit = AuditCounter::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, raw) in manifest.entries.into_iter().enumerate() {
        let id = raw
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("#{i}"), str::to_string);
        match load_entry(&dir, raw, &audit) {
            Ok(r) => records.push(r),
            Err(e) if mode == LoadMode::Lenient => skipped.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(LoadedManifest {
        records,
        skipped,
        audit,
    })
}

/// Writes blobs for every record plus `manifest.json` into `dir`.
/// Returns the manifest path.
pub fn write_manifest(dir: &Path, records: &[VolumeRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        let image_rel = format!("{}.img.f32", rec.patient_id);
        let bytes: Vec<u8> = rec.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(&image_rel);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let label_blob_path = match &rec.labels {
            Some(l) => {
                let rel = format!("{}.lbl.u8", rec.patient_id);
                let p = dir.join(&rel);
                fs::write(&p, l).map_err(|e| Error::io(&p, e))?;
                Some(rel)
            }
            None => None,
        };
        let audit_label_blob_path = match &rec.hidden_labels {
            Some(h) => {
                let rel = format!("{}.audit.u8", rec.patient_id);
                let p = dir.join(&rel);
                fs::write(&p, h.labels.as_slice()).map_err(|e| Error::io(&p, e))?;
                Some(rel)
            }
            None => None,
        };
        let entry = ManifestEntry {
            id: rec.patient_id.clone(),
            vendor: rec.vendor.to_string(),
            dims: rec.dims,
            spacing: [rec.spacing.0, rec.spacing.1],
            ed_frame: rec.ed_frame,
            es_frame: rec.es_frame,
            image_blob_path: image_rel,
            label_blob_path,
            audit_label_blob_path,
        };
        entries.push(serde_json::to_value(entry).expect("serialisable"));
    }
    let file = ManifestFile {
        format_version: MANIFEST_VERSION,
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&file).expect("serialisable");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, vendor: Vendor, labeled: bool) -> VolumeRecord {
        let dims = [2, 3, 16, 16];
        let n: usize = dims.iter().product();
        VolumeRecord {
            patient_id: id.into(),
            vendor,
            dims,
            voxels: (0..n).map(|i| (i % 97) as f32 / 97.0).collect(),
            spacing: (1.25, 1.5),
            ed_frame: 0,
            es_frame: 1,
            labels: labeled.then(|| (0..n).map(|i| (i % 4) as u8).collect()),
            hidden_labels: None,
        }
    }

    fn meta(r: &VolumeRecord) -> (String, Vendor, [usize; 4], (f64, f64), usize, usize, bool) {
        (
            r.patient_id.clone(),
            r.vendor,
            r.dims,
            r.spacing,
            r.ed_frame,
            r.es_frame,
            r.labels.is_some(),
        )
    }

    #[test]
    fn write_then_load_preserves_metadata_and_data() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record("a1", Vendor::A, true), record("c1", Vendor::C, false)];
        write_manifest(dir.path(), &recs).unwrap();
        let loaded = load_manifest(dir.path(), LoadMode::Strict).unwrap();
        assert_eq!(loaded.records.len(), 2);
        for (a, b) in recs.iter().zip(&loaded.records) {
            assert_eq!(meta(a), meta(b));
            assert_eq!(a.voxels, b.voxels);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn wrong_blob_length_rejects_entry() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record("a1", Vendor::A, true), record("b1", Vendor::B, true)];
        write_manifest(dir.path(), &recs).unwrap();
        fs::write(dir.path().join("b1.img.f32"), [0u8; 10]).unwrap();
        assert!(load_manifest(dir.path(), LoadMode::Strict).is_err());
        let lenient = load_manifest(dir.path(), LoadMode::Lenient).unwrap();
        assert_eq!(lenient.records.len(), 1);
        assert_eq!(lenient.skipped[0].0, "b1");
        assert!(lenient.skipped[0].1.contains("bytes"));
    }

    #[test]
    fn unknown_vendor_and_missing_blob_are_per_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &[record("a1", Vendor::A, true)]).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let mut bad_vendor = m["entries"][0].clone();
        bad_vendor["id"] = "x1".into();
        bad_vendor["vendor"] = "Q".into();
        let mut missing = m["entries"][0].clone();
        missing["id"] = "x2".into();
        missing["image_blob_path"] = "nope.f32".into();
        m["entries"].as_array_mut().unwrap().extend([bad_vendor, missing]);
        fs::write(&path, m.to_string()).unwrap();
        let loaded = load_manifest(&path, LoadMode::Lenient).unwrap();
        assert_eq!(loaded.records.len(), 1);
        let ids: Vec<_> = loaded.skipped.iter().map(|s| s.0.as_str()).collect();
        assert_eq!(ids, ["x1", "x2"]);
    }
}
