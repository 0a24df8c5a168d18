//! Dataset directory layout:
//!
//! ```text
//! manifest.json
//! img_<id>_<severity>.f64   (1, 3, H, W) fogged image per severity
//! lab_<id>.u16              (H, W) class labels
//! dep_<id>.f64              (H, W) scene depth
//! ```
//!
//! Each blob starts with an 8-byte magic, a `u32` rank and `rank` `u64`
//! extents, followed by little-endian row-major values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_fog, FogParams, Grid, LabelMap, SceneSample, Severity};
use super::scene::class_names;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
const VERSION: u32 = 1;
const MAGIC_F64: &[u8; 8] = b"DNSGF64\0";
const MAGIC_U16: &[u8; 8] = b"DNSGU16\0";
const SEVERITY_PLACEHOLDER: &str = "<sev>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub fog: Vec<FogParams>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u64,
    /// File name with a literal `<sev>` where the severity goes.
    pub image: String,
    pub labels: String,
    pub depth: String,
    pub severities: Vec<Severity>,
    /// CRC-32 of every blob belonging to this sample, keyed by file name.
    pub checksums: BTreeMap<String, u32>,
}

impl SampleEntry {
    pub fn image_file(&self, severity: Severity) -> String {
        self.image.replace(SEVERITY_PLACEHOLDER, severity.as_str())
    }

    pub fn files(&self) -> Vec<String> {
        let mut files: Vec<String> = self.severities.iter().map(|s| self.image_file(*s)).collect();
        files.push(self.labels.clone());
        files.push(self.depth.clone());
        files
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn severities(&self) -> Vec<Severity> {
        self.fog.iter().map(|f| f.severity).collect()
    }
}

/// One fogged view of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: u64,
    pub severity: Severity,
    pub image: Tensor<f64>,
    pub labels: LabelMap,
}

/// Writes every sample under every fog variant. Sample ids are slice indices.
pub fn write_dataset(
    samples: &[SceneSample],
    fog_variants: &[FogParams],
    num_classes: usize,
    dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    let first = samples.first().ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    if fog_variants.is_empty() {
        return Err(Error::invalid("at least one fog variant is required"));
    }
    for (i, f) in fog_variants.iter().enumerate() {
        f.validate()?;
        if fog_variants[..i].iter().any(|g| g.severity == f.severity) {
            return Err(Error::invalid(format!("fog severity {} listed twice", f.severity)));
        }
    }
    let (height, width) = (first.height(), first.width());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(samples.len());
    for (id, sample) in samples.iter().enumerate() {
        if (sample.height(), sample.width()) != (height, width) {
            return Err(Error::ShapeMismatch {
                op: "write_dataset",
                expected: format!("{height}x{width} scenes"),
                found: format!("sample {id} of {}x{}", sample.height(), sample.width()),
            });
        }
        if let Some(l) = sample.labels.data().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!("sample {id} has label {l} with only {num_classes} classes")));
        }
        let mut entry = SampleEntry {
            id: id as u64,
            image: format!("img_{id:05}_{SEVERITY_PLACEHOLDER}.f64"),
            labels: format!("lab_{id:05}.u16"),
            depth: format!("dep_{id:05}.f64"),
            severities: fog_variants.iter().map(|f| f.severity).collect(),
            checksums: BTreeMap::new(),
        };
        for fog in fog_variants {
            let img = apply_fog(sample, fog)?;
            let name = entry.image_file(fog.severity);
            let bytes = encode_f64(&img.shape().dims(), img.data());
            entry.checksums.insert(name.clone(), write_blob(dir, &name, &bytes)?);
        }
        let hw = [height, width];
        let lab = encode_u16(&hw, sample.labels.data());
        entry.checksums.insert(entry.labels.clone(), write_blob(dir, &entry.labels, &lab)?);
        let dep = encode_f64(&hw, sample.depth.data());
        entry.checksums.insert(entry.depth.clone(), write_blob(dir, &entry.depth, &dep)?);
        entries.push(entry);
    }

    let manifest = Manifest {
        version: VERSION,
        height,
        width,
        num_classes,
        classes: class_names(num_classes),
        fog: fog_variants.to_vec(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetReader> {
    DatasetReader::open(dir)
}

/// Streams samples from a dataset directory, one blob at a time.
#[derive(Debug)]
pub struct DatasetReader {
    dir: PathBuf,
    manifest: Manifest,
}

impl DatasetReader {
    /// Parses the manifest and checks that every listed blob exists.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.version != VERSION {
            return Err(Error::VersionMismatch {
                path,
                expected: VERSION.to_string(),
                found: manifest.version.to_string(),
            });
        }
        for entry in &manifest.samples {
            for name in entry.files() {
                if !dir.join(&name).is_file() {
                    return Err(Error::MissingBlob { name, dir });
                }
            }
        }
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn read_labels(&self, index: usize) -> Result<LabelMap> {
        let entry = self.entry(index)?;
        let (dims, data) = decode_u16(&self.read_blob(entry, &entry.labels)?, &self.dir.join(&entry.labels))?;
        self.check_shape(&entry.labels, &dims, &[self.manifest.height, self.manifest.width])?;
        Grid::new(dims[0], dims[1], data)
    }

    pub fn read_depth(&self, index: usize) -> Result<Grid<f64>> {
        let entry = self.entry(index)?;
        let (dims, data) = decode_f64(&self.read_blob(entry, &entry.depth)?, &self.dir.join(&entry.depth))?;
        self.check_shape(&entry.depth, &dims, &[self.manifest.height, self.manifest.width])?;
        Grid::new(dims[0], dims[1], data)
    }

    pub fn read_image(&self, index: usize, severity: Severity) -> Result<Tensor<f64>> {
        let entry = self.entry(index)?;
        if !entry.severities.contains(&severity) {
            return Err(Error::invalid(format!("sample {} has no {severity} rendering", entry.id)));
        }
        let name = entry.image_file(severity);
        let (dims, data) = decode_f64(&self.read_blob(entry, &name)?, &self.dir.join(&name))?;
        let (h, w) = (self.manifest.height, self.manifest.width);
        self.check_shape(&name, &dims, &[1, 3, h, w])?;
        Tensor::new(Shape::new(1, 3, h, w), data)
    }

    pub fn read_item(&self, index: usize, severity: Severity) -> Result<DatasetItem> {
        Ok(DatasetItem {
            id: self.entry(index)?.id,
            severity,
            image: self.read_image(index, severity)?,
            labels: self.read_labels(index)?,
        })
    }

    /// Every stored `(sample, severity)` pair, sample-major.
    pub fn iter(&self) -> impl Iterator<Item = Result<DatasetItem>> + '_ {
        (0..self.len()).flat_map(move |i| {
            let severities = self.manifest.samples[i].severities.clone();
            severities.into_iter().map(move |s| self.read_item(i, s))
        })
    }

    /// All samples rendered at one severity.
    pub fn iter_severity(&self, severity: Severity) -> impl Iterator<Item = Result<DatasetItem>> + '_ {
        (0..self.len()).map(move |i| self.read_item(i, severity))
    }

    fn entry(&self, index: usize) -> Result<&SampleEntry> {
        self.manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range ({} samples)", self.len())))
    }

    fn read_blob(&self, entry: &SampleEntry, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBlob {
                name: name.to_string(),
                dir: self.dir.clone(),
            },
            _ => Error::io(&path, e),
        })?;
        if let Some(&stored) = entry.checksums.get(name) {
            let computed = crc32fast::hash(&bytes);
            if stored != computed {
                return Err(Error::ChecksumMismatch { path, stored, computed });
            }
        }
        Ok(bytes)
    }

    fn check_shape(&self, name: &str, found: &[usize], expected: &[usize]) -> Result<()> {
        if found != expected {
            return Err(Error::BlobShape {
                path: self.dir.join(name),
                expected: expected.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(())
    }
}

fn write_blob(dir: &Path, name: &str, bytes: &[u8]) -> Result<u32> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(crc32fast::hash(bytes))
}

fn header(magic: &[u8; 8], dims: &[usize], values: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + values * width);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

fn encode_f64(dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = header(MAGIC_F64, dims, data.len(), 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_u16(dims: &[usize], data: &[u16]) -> Vec<u8> {
    let mut out = header(MAGIC_U16, dims, data.len(), 2);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns the extents and the raw payload.
fn decode_header<'a>(bytes: &'a [u8], magic: &[u8; 8], width: usize, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let truncated = |context: &str| Error::Truncated {
        path: path.to_path_buf(),
        context: context.into(),
    };
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: if width == 8 { "f64 blob" } else { "u16 blob" },
        });
    }
    let rank = u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| truncated("rank"))?.try_into().expect("4 bytes")) as usize;
    let dims_end = 12 + 8 * rank;
    let dims: Vec<usize> = bytes
        .get(12..dims_end)
        .ok_or_else(|| truncated("extents"))?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        reason: format!("extents {dims:?} overflow"),
    })?;
    let payload = &bytes[dims_end..];
    if payload.len() != count * width {
        return Err(if payload.len() < count * width {
            truncated(&format!("{} of {} payload bytes", payload.len(), count * width))
        } else {
            Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", payload.len() - count * width),
            }
        });
    }
    Ok((dims, payload))
}

fn decode_f64(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let (dims, payload) = decode_header(bytes, MAGIC_F64, 8, path)?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((dims, data))
}

fn decode_u16(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u16>)> {
    let (dims, payload) = decode_header(bytes, MAGIC_U16, 2, path)?;
    let data = payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes"))).collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;

    fn small_set(dir: &Path) -> (Vec<SceneSample>, Manifest) {
        let samples: Vec<_> = (0..3).map(|i| generate_scene(100 + i, 16, 24, 4).unwrap()).collect();
        let m = write_dataset(&samples, &FogParams::presets(), 4, dir).unwrap();
        (samples, m)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, manifest) = small_set(dir.path());
        let reader = read_dataset(dir.path()).unwrap();
        assert_eq!(reader.manifest(), &manifest);
        let items: Vec<DatasetItem> = reader.iter().collect::<Result<_>>().unwrap();
        assert_eq!(items.len(), 3 * 4);
        for item in &items {
            let s = &samples[item.id as usize];
            assert_eq!(item.labels, s.labels);
            let expected = apply_fog(s, &FogParams::preset(item.severity)).unwrap();
            assert_eq!(item.image, expected);
        }
        assert_eq!(reader.read_image(1, Severity::None).unwrap(), samples[1].image);
        assert_eq!(reader.read_depth(2).unwrap(), samples[2].depth);
    }

    #[test]
    fn manifest_counts_match_files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (_, manifest) = small_set(dir.path());
        let blobs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != MANIFEST_FILE)
            .count();
        let listed: usize = manifest.samples.iter().map(|s| s.files().len()).sum();
        assert_eq!(blobs, listed);
        assert_eq!(manifest.len(), 3);
        let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(json["H"], 16);
        assert_eq!(json["samples"][0]["image"], "img_00000_<sev>.f64");
    }

    #[test]
    fn missing_blob_is_named() {
        let dir = tempfile::tempdir().unwrap();
        small_set(dir.path());
        fs::remove_file(dir.path().join("lab_00001.u16")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::MissingBlob { name, .. } if name == "lab_00001.u16"), "{err}");
    }

    #[test]
    fn corruption_and_shape_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        small_set(dir.path());
        let path = dir.path().join("dep_00000.f64");
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        fs::write(&path, &bytes).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert!(matches!(reader.read_depth(0), Err(Error::ChecksumMismatch { .. })));

        // A well-formed blob of the wrong extent, with the checksum updated to match.
        let wrong = encode_f64(&[8, 24], &vec![1.0; 8 * 24]);
        fs::write(&path, &wrong).unwrap();
        let mut manifest = reader.manifest().clone();
        manifest.samples[0].checksums.insert("dep_00000.f64".into(), crc32fast::hash(&wrong));
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&manifest).unwrap()).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert!(matches!(reader.read_depth(0), Err(Error::BlobShape { .. })));
    }

    #[test]
    fn rejects_duplicate_or_missing_fog_variants() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![generate_scene(1, 8, 8, 3).unwrap()];
        let dup = [FogParams::preset(Severity::Low), FogParams::preset(Severity::Low)];
        assert!(write_dataset(&s, &dup, 3, dir.path()).is_err());
        assert!(write_dataset(&s, &[], 3, dir.path()).is_err());
        assert!(write_dataset(&[], &FogParams::presets(), 3, dir.path()).is_err());
    }
}
