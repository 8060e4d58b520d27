//! Versioned on-disk artifacts.
//!
//! Each artifact is one file `<root>/<stage>/<name>.v<FORMAT_VERSION>.bin`:
//!
//! ```text
//! "DIGZ" | u32 format version | u32 header length | header (JSON) | payload
//! ```
//!
//! All integers are little-endian. The payload is the bincode encoding of the
//! value (fixed-width little-endian integers, IEEE-754 `f64` bit patterns), so a
//! reload is bit-exact. The header is self-describing: type tag, stage,
//! config hash, seed, dtype, and the value's leading dimensions.
//!
//! `manifest.json` at the root lists one [`ArtifactHandle`] per artifact. The
//! creation timestamp lives only in the manifest, so artifact files themselves
//! are byte-identical across reruns with the same configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DIGZ";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prototypes,
    Cdm,
    Generator,
    Dct,
    Generated,
    Classifier,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Prototypes,
        Stage::Cdm,
        Stage::Generator,
        Stage::Dct,
        Stage::Generated,
        Stage::Classifier,
        Stage::Metrics,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Prototypes => "prototypes",
            Stage::Cdm => "cdm",
            Stage::Generator => "generator",
            Stage::Dct => "dct",
            Stage::Generated => "generated",
            Stage::Classifier => "classifier",
            Stage::Metrics => "metrics",
        }
    }
}

/// Implemented by every persisted type.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Leading dimensions recorded in the header (informational).
    fn dims(&self) -> Vec<usize> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub kind: String,
    pub stage: Stage,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub payload_len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHandle {
    pub stage: Stage,
    pub name: String,
    pub kind: String,
    pub path: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub created: String,
}

#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    pub fn path_of(&self, stage: Stage, name: &str) -> PathBuf {
        self.stage_dir(stage).join(format!("{name}.v{FORMAT_VERSION}.bin"))
    }

    pub fn exists(&self, stage: Stage, name: &str) -> bool {
        self.path_of(stage, name).is_file()
    }

    pub fn save<T: Artifact>(&self, stage: Stage, name: &str, config_hash: &str, seed: u64, value: &T) -> Result<ArtifactHandle> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let payload = bincode::serialize(value)?;
        let header = ArtifactHeader {
            kind: T::KIND.to_string(),
            stage,
            name: name.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            dtype: "f64-le".to_string(),
            dims: value.dims(),
            payload_len: payload.len() as u64,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(12 + header_bytes.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        bytes.extend_from_slice(&payload);

        let path = self.path_of(stage, name);
        write_atomic(&path, &bytes)?;
        let handle = ArtifactHandle {
            stage,
            name: name.to_string(),
            kind: T::KIND.to_string(),
            path: path.strip_prefix(&self.root).unwrap_or(&path).to_path_buf(),
            config_hash: config_hash.to_string(),
            seed,
            created: chrono::Utc::now().to_rfc3339(),
        };
        self.record(&handle)?;
        Ok(handle)
    }

    /// Read only the header of an artifact.
    pub fn header(&self, stage: Stage, name: &str) -> Result<ArtifactHeader> {
        let path = self.path_of(stage, name);
        let bytes = self.read(stage, name, &path)?;
        Ok(split_container(&path, &bytes)?.0)
    }

    /// Load an artifact, checking its type tag and (when given) config hash.
    pub fn load<T: Artifact>(&self, stage: Stage, name: &str, expected_hash: Option<&str>) -> Result<T> {
        let path = self.path_of(stage, name);
        let bytes = self.read(stage, name, &path)?;
        let (header, payload) = split_container(&path, &bytes)?;
        if header.kind != T::KIND {
            return Err(Error::Version {
                path,
                detail: format!("expected a {} artifact, found {}", T::KIND, header.kind),
            });
        }
        if let Some(expected) = expected_hash {
            if header.config_hash != expected {
                return Err(Error::Version {
                    path,
                    detail: format!(
                        "artifact was produced under config hash {} but {} was requested; rerun the {} stage",
                        header.config_hash,
                        expected,
                        stage.dir_name()
                    ),
                });
            }
        }
        Ok(bincode::deserialize(payload)?)
    }

    fn read(&self, stage: Stage, name: &str, path: &Path) -> Result<Vec<u8>> {
        match fs::read(path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Dependency(format!(
                "artifact {}/{name} not found at {}",
                stage.dir_name(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn manifest(&self) -> Result<Vec<ArtifactHandle>> {
        let path = self.root.join(MANIFEST);
        match fs::read(&path) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn record(&self, handle: &ArtifactHandle) -> Result<()> {
        let mut entries = self.manifest()?;
        entries.retain(|h| !(h.stage == handle.stage && h.name == handle.name));
        entries.push(handle.clone());
        entries.sort_by(|a, b| (a.stage, &a.name).cmp(&(b.stage, &b.name)));
        let bytes = serde_json::to_vec_pretty(&entries)?;
        write_atomic(&self.root.join(MANIFEST), &bytes)
    }
}

fn split_container<'a>(path: &Path, bytes: &'a [u8]) -> Result<(ArtifactHeader, &'a [u8])> {
    let bad = |detail: &str| Error::Version { path: path.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not an artifact container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            detail: format!("format version {version}, this build reads version {FORMAT_VERSION}"),
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12 + hlen;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: ArtifactHeader = serde_json::from_slice(&bytes[12..header_end])?;
    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_len {
        return Err(bad("payload length does not match header"));
    }
    Ok((header, payload))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Blob {
        values: Vec<f64>,
        label: String,
    }

    impl Artifact for Blob {
        const KIND: &'static str = "test-blob";
        fn dims(&self) -> Vec<usize> {
            vec![self.values.len()]
        }
    }

    #[test]
    fn save_load_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let blob = Blob { values: vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300], label: "x".into() };
        let handle = store.save(Stage::Prototypes, "bank", "abc", 7, &blob).unwrap();
        assert_eq!(handle.path, PathBuf::from("prototypes/bank.v1.bin"));
        let back: Blob = store.load(Stage::Prototypes, "bank", Some("abc")).unwrap();
        assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), blob.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let header = store.header(Stage::Prototypes, "bank").unwrap();
        assert_eq!((header.seed, header.dims.as_slice(), header.config_hash.as_str()), (7, &[4usize][..], "abc"));
        assert_eq!(store.manifest().unwrap(), vec![handle]);
    }

    #[test]
    fn hash_mismatch_and_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        store.save(Stage::Cdm, "model", "A", 0, &Blob { values: vec![], label: String::new() }).unwrap();
        let err = store.load::<Blob>(Stage::Cdm, "model", Some("B")).unwrap_err();
        assert!(matches!(err, Error::Version { .. }), "{err}");
        let err = store.load::<Blob>(Stage::Dct, "tokens", None).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        store.save(Stage::Cdm, "model", "A", 0, &Blob { values: vec![1.0], label: String::new() }).unwrap();
        let path = store.path_of(Stage::Cdm, "model");
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = store.load::<Blob>(Stage::Cdm, "model", None).unwrap_err();
        assert!(err.to_string().contains("format version 99"), "{err}");
    }

    #[test]
    fn unwritable_root_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not-a-dir");
        fs::write(&file, b"x").unwrap();
        let store = ArtifactStore::new(&file);
        let err = store.save(Stage::Cdm, "m", "h", 0, &Blob { values: vec![], label: String::new() }).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn same_value_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let blob = Blob { values: vec![1.5, 2.5], label: "y".into() };
        store.save(Stage::Dct, "t", "h", 1, &blob).unwrap();
        let first = fs::read(store.path_of(Stage::Dct, "t")).unwrap();
        store.save(Stage::Dct, "t", "h", 1, &blob).unwrap();
        assert_eq!(first, fs::read(store.path_of(Stage::Dct, "t")).unwrap());
    }
}
