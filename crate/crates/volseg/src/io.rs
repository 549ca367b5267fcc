//! On-disk layout: one raw little-endian file per frame with a JSON sidecar
//! header, plus a JSON manifest per subject listing ordered frames and the
//! labeled-frame indices.
//!
//! Volumes are float32, labels uint8, displacement fields float32 with a
//! leading component axis. Intensities are min-max normalized to [0, 1] at
//! load time; normalization is exactly idempotent, so save-then-load
//! round-trips loaded data bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolsegError};
use crate::volume::{LabelMap, TimeSeries, Volume3D};
use crate::warp::DisplacementField;

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelHeader {
    shape: [usize; 3],
    num_classes: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    shape: [usize; 4],
    dtype: String,
}

/// Per-subject manifest: ordered frame files and labeled-frame indices.
#[derive(Debug, Serialize, Deserialize)]
pub struct SeriesManifest {
    pub subject_id: String,
    pub frames: Vec<String>,
    pub labels: BTreeMap<usize, String>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| VolsegError::io(path, e))?;
    f.write_all(bytes).map_err(|e| VolsegError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| VolsegError::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| VolsegError::io(path, e))?;
    Ok(buf)
}

fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

pub fn save_volume(path: &Path, v: &Volume3D) -> Result<()> {
    let (h, w, d) = v.shape();
    let header = VolumeHeader {
        shape: [h, w, d],
        spacing: v.spacing(),
        dtype: "float32-le".into(),
    };
    let hdr = serde_json::to_vec_pretty(&header)
        .map_err(|e| VolsegError::Validation(format!("header encode: {}", e)))?;
    write_bytes(&sidecar_path(path), &hdr)?;
    let mut bytes = Vec::with_capacity(h * w * d * 4);
    for val in v.data().iter() {
        bytes.extend_from_slice(&(*val as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let hdr_bytes = read_bytes(&sidecar_path(path))?;
    let header: VolumeHeader = serde_json::from_slice(&hdr_bytes)
        .map_err(|e| VolsegError::Validation(format!("bad volume header {:?}: {}", path, e)))?;
    let [h, w, d] = header.shape;
    let bytes = read_bytes(path)?;
    if bytes.len() != h * w * d * 4 {
        return Err(VolsegError::Validation(format!(
            "volume file {:?} has {} bytes, expected {}",
            path,
            bytes.len(),
            h * w * d * 4
        )));
    }
    let mut data = Vec::with_capacity(h * w * d);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let arr = Array3::from_shape_vec((h, w, d), data)
        .map_err(|e| VolsegError::Validation(format!("volume reshape: {}", e)))?;
    Volume3D::new(arr, header.spacing)
}

pub fn save_label(path: &Path, l: &LabelMap) -> Result<()> {
    let (h, w, d) = l.shape();
    let header = LabelHeader {
        shape: [h, w, d],
        num_classes: l.num_classes(),
        dtype: "uint8".into(),
    };
    let hdr = serde_json::to_vec_pretty(&header)
        .map_err(|e| VolsegError::Validation(format!("header encode: {}", e)))?;
    write_bytes(&sidecar_path(path), &hdr)?;
    let bytes: Vec<u8> = l.data().iter().cloned().collect();
    write_bytes(path, &bytes)
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    let hdr_bytes = read_bytes(&sidecar_path(path))?;
    let header: LabelHeader = serde_json::from_slice(&hdr_bytes)
        .map_err(|e| VolsegError::Validation(format!("bad label header {:?}: {}", path, e)))?;
    let [h, w, d] = header.shape;
    let bytes = read_bytes(path)?;
    if bytes.len() != h * w * d {
        return Err(VolsegError::Validation(format!(
            "label file {:?} has {} bytes, expected {}",
            path,
            bytes.len(),
            h * w * d
        )));
    }
    let arr = Array3::from_shape_vec((h, w, d), bytes)
        .map_err(|e| VolsegError::Validation(format!("label reshape: {}", e)))?;
    LabelMap::new(arr, header.num_classes)
}

pub fn save_field(path: &Path, f: &DisplacementField) -> Result<()> {
    let dim = f.data().dim();
    let header = FieldHeader {
        shape: [dim.0, dim.1, dim.2, dim.3],
        dtype: "float32-le".into(),
    };
    let hdr = serde_json::to_vec_pretty(&header)
        .map_err(|e| VolsegError::Validation(format!("header encode: {}", e)))?;
    write_bytes(&sidecar_path(path), &hdr)?;
    let mut bytes = Vec::with_capacity(dim.0 * dim.1 * dim.2 * dim.3 * 4);
    for val in f.data().iter() {
        bytes.extend_from_slice(&(*val as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let hdr_bytes = read_bytes(&sidecar_path(path))?;
    let header: FieldHeader = serde_json::from_slice(&hdr_bytes)
        .map_err(|e| VolsegError::Validation(format!("bad field header {:?}: {}", path, e)))?;
    let [c, h, w, d] = header.shape;
    if c != 3 {
        return Err(VolsegError::Validation(format!(
            "displacement field must have 3 components, got {}",
            c
        )));
    }
    let bytes = read_bytes(path)?;
    if bytes.len() != c * h * w * d * 4 {
        return Err(VolsegError::Validation(format!(
            "field file {:?} has {} bytes, expected {}",
            path,
            bytes.len(),
            c * h * w * d * 4
        )));
    }
    let mut data = Vec::with_capacity(c * h * w * d);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let arr = Array4::from_shape_vec((c, h, w, d), data)
        .map_err(|e| VolsegError::Validation(format!("field reshape: {}", e)))?;
    DisplacementField::new(arr)
}

/// Write a series to `dir` in the manifest layout.
pub fn save_series(dir: &Path, series: &TimeSeries) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VolsegError::io(dir, e))?;
    let mut frames = Vec::new();
    for (t, frame) in series.frames().iter().enumerate() {
        let name = format!("frame_{:04}.raw", t);
        save_volume(&dir.join(&name), frame)?;
        frames.push(name);
    }
    let mut labels = BTreeMap::new();
    for (t, label) in series.labels() {
        let name = format!("label_{:04}.raw", t);
        save_label(&dir.join(&name), label)?;
        labels.insert(*t, name);
    }
    let manifest = SeriesManifest {
        subject_id: series.subject_id().to_string(),
        frames,
        labels,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| VolsegError::Validation(format!("manifest encode: {}", e)))?;
    write_bytes(&dir.join("manifest.json"), &bytes)
}

/// Read a series from `dir`, normalizing intensities to [0, 1].
pub fn load_series(dir: &Path) -> Result<TimeSeries> {
    let manifest_path = dir.join("manifest.json");
    let bytes = read_bytes(&manifest_path)?;
    let manifest: SeriesManifest = serde_json::from_slice(&bytes)
        .map_err(|e| VolsegError::Validation(format!("bad manifest {:?}: {}", manifest_path, e)))?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for name in &manifest.frames {
        let v = load_volume(&dir.join(name))?;
        frames.push(v.normalized());
    }
    let mut labels = BTreeMap::new();
    for (t, name) in &manifest.labels {
        labels.insert(*t, load_label(&dir.join(name))?);
    }
    TimeSeries::new(manifest.subject_id, frames, labels)
}

/// Load every subject directory under `root` (any directory containing a
/// manifest), sorted by subject id.
pub fn load_cohort(root: &Path) -> Result<Vec<TimeSeries>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| VolsegError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    for dir in dirs {
        out.push(load_series(&dir)?);
    }
    if out.is_empty() {
        return Err(VolsegError::Validation(format!(
            "no subject directories with manifests under {:?}",
            root
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::collections::BTreeMap;

    fn toy_series() -> TimeSeries {
        let mut f0 = Array3::zeros((4, 4, 4));
        f0[[0, 0, 0]] = 1.0;
        f0[[1, 2, 3]] = 0.5;
        let mut f1 = Array3::zeros((4, 4, 4));
        f1[[2, 2, 2]] = 1.0;
        let mut f2 = Array3::zeros((4, 4, 4));
        f2[[3, 3, 3]] = 1.0;
        f2[[0, 1, 0]] = 0.25;
        let frames = vec![
            Volume3D::new(f0, [3.0, 3.0, 3.0]).unwrap(),
            Volume3D::new(f1, [3.0, 3.0, 3.0]).unwrap(),
            Volume3D::new(f2, [3.0, 3.0, 3.0]).unwrap(),
        ];
        let mut mask = Array3::<u8>::zeros((4, 4, 4));
        mask[[2, 2, 2]] = 1;
        let mut labels = BTreeMap::new();
        labels.insert(1usize, LabelMap::binary(mask).unwrap());
        TimeSeries::new("toy".into(), frames, labels).unwrap()
    }

    #[test]
    fn series_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = toy_series();
        save_series(dir.path(), &s).unwrap();
        let loaded = load_series(dir.path()).unwrap();
        assert_eq!(loaded.num_frames(), 3);
        assert_eq!(loaded.labeled_indices(), vec![1]);
        // second round trip reproduces the first exactly
        let dir2 = tempfile::tempdir().unwrap();
        save_series(dir2.path(), &loaded).unwrap();
        let loaded2 = load_series(dir2.path()).unwrap();
        for t in 0..3 {
            assert_eq!(loaded.frame(t).data(), loaded2.frame(t).data());
        }
        assert_eq!(loaded.labels(), loaded2.labels());
    }

    #[test]
    fn missing_frame_file_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let s = toy_series();
        save_series(dir.path(), &s).unwrap();
        fs::remove_file(dir.path().join("frame_0001.raw")).unwrap();
        let err = load_series(dir.path()).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("frame_0001"), "error was: {}", msg);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = toy_series();
        save_series(dir.path(), &s).unwrap();
        // overwrite one frame with a different shape
        let small = Volume3D::new(Array3::zeros((2, 2, 2)), [3.0; 3]).unwrap();
        save_volume(&dir.path().join("frame_0002.raw"), &small).unwrap();
        let err = load_series(dir.path()).unwrap_err();
        assert!(matches!(err, VolsegError::Validation(_)));
    }

    #[test]
    fn field_round_trip() {
        use crate::warp::DisplacementField;
        let dir = tempfile::tempdir().unwrap();
        let f = DisplacementField::new(Array4::from_shape_fn((3, 2, 2, 2), |(c, i, j, k)| {
            (c + i + j + k) as f64 * 0.5
        }))
        .unwrap();
        let p = dir.path().join("field.raw");
        save_field(&p, &f).unwrap();
        let g = load_field(&p).unwrap();
        assert_eq!(f.data(), g.data());
    }
}
