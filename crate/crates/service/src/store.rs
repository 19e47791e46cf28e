//! File-backed artifact store.
//!
//! Layout under the root:
//!
//! ```text
//! episodes/<id>.jsonl      trajectory stream
//! trees/<id>.json          distilled tree with its run report
//! trees/current/<b>-<r>    id of the tree used for behavior b, role r
//! explanations/<id>.json   explanation record
//! labels/<key>.json        labels for one record (key hashes the record id)
//! ```
//!
//! Episode and tree ids hash the serialized artifact. Writes go to a temp
//! file in the target directory and are renamed into place.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use brex_core::distill::{DistillConfig, IterationReport};
use brex_core::env::{EnvConfig, Role};
use brex_core::eval::LabeledItem;
use brex_core::llm::{ExplanationRecord, RECORD_SCHEMA_VERSION};
use brex_core::policy::Behavior;
use brex_core::rollout::{read_trajectory, write_trajectory, Trajectory};
use brex_core::tree::DecisionTree;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;
use thiserror::Error;

pub const STORE_SCHEMA_VERSION: u32 = 1;
const ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Episode,
    Tree,
    Explanation,
    Labels,
}

impl Kind {
    fn dir(self) -> &'static str {
        match self {
            Kind::Episode => "episodes",
            Kind::Tree => "trees",
            Kind::Explanation => "explanations",
            Kind::Labels => "labels",
        }
    }

    fn ext(self) -> &'static str {
        match self {
            Kind::Episode => "jsonl",
            _ => "json",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Episode => "episode",
            Kind::Tree => "tree",
            Kind::Explanation => "explanation",
            Kind::Labels => "labels",
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{} '{id}' not found", kind.name())]
    NotFound { kind: Kind, id: String },
    #[error("malformed {} id '{id}'", kind.name())]
    BadId { kind: Kind, id: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt artifact {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("artifact {path} has schema version {found}, expected {expected}")]
    Schema { path: PathBuf, found: u32, expected: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn content_id(bytes: &[u8]) -> String {
    let mut h = hex::encode(Sha256::digest(bytes));
    h.truncate(ID_LEN);
    h
}

fn is_id(s: &str) -> bool {
    s.len() == ID_LEN && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub behavior: Behavior,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub episodes: usize,
    pub matches: u64,
    pub total: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeArtifact {
    pub schema_version: u32,
    pub behavior: Behavior,
    pub role: Role,
    pub config: DistillConfig,
    pub best_iteration: usize,
    pub iterations: Vec<IterationReport>,
    pub fidelity: FidelitySummary,
    pub tree: DecisionTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelFile {
    schema_version: u32,
    #[serde(flatten)]
    item: LabeledItem,
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for kind in [Kind::Episode, Kind::Tree, Kind::Explanation, Kind::Labels] {
            let dir = root.join(kind.dir());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let current = root.join("trees/current");
        fs::create_dir_all(&current).map_err(io_err(&current))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, kind: Kind, id: &str) -> Result<PathBuf, StoreError> {
        if !is_id(id) {
            return Err(StoreError::BadId {
                kind,
                id: id.to_string(),
            });
        }
        Ok(self.root.join(kind.dir()).join(format!("{id}.{}", kind.ext())))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let lock = {
            let mut locks = self.locks.lock().expect("lock table poisoned");
            locks.entry(path.to_path_buf()).or_default().clone()
        };
        let _guard = lock.lock().expect("artifact lock poisoned");
        let dir = path.parent().expect("artifact paths have a parent");
        let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        tmp.write_all(bytes).map_err(io_err(tmp.path()))?;
        tmp.as_file().sync_all().map_err(io_err(path))?;
        tmp.persist(path).map_err(|e| StoreError::Io {
            path: path.to_path_buf(),
            source: e.error,
        })?;
        Ok(())
    }

    fn read(&self, kind: Kind, id: &str) -> Result<(PathBuf, Vec<u8>), StoreError> {
        let path = self.path(kind, id)?;
        match fs::read(&path) {
            Ok(b) => Ok((path, b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(StoreError::NotFound {
                kind,
                id: id.to_string(),
            }),
            Err(source) => Err(StoreError::Io { path, source }),
        }
    }

    pub fn exists(&self, kind: Kind, id: &str) -> bool {
        self.path(kind, id).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Ids of every stored artifact of a kind, sorted.
    pub fn ids(&self, kind: Kind) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(kind.dir());
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let name = entry.map_err(io_err(&dir))?.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(&format!(".{}", kind.ext())) {
                if is_id(stem) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn decode<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T, StoreError> {
        serde_json::from_slice(bytes).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn check_schema(path: &Path, found: u32, expected: u32) -> Result<(), StoreError> {
        if found != expected {
            return Err(StoreError::Schema {
                path: path.to_path_buf(),
                found,
                expected,
            });
        }
        Ok(())
    }

    // episodes

    pub fn put_episode(&self, header: &EpisodeHeader, traj: &Trajectory) -> Result<String, StoreError> {
        let mut bytes = Vec::new();
        write_trajectory(&mut bytes, header, traj).map_err(|e| StoreError::Corrupt {
            path: self.root.join(Kind::Episode.dir()),
            message: e.to_string(),
        })?;
        let id = content_id(&bytes);
        let path = self.path(Kind::Episode, &id)?;
        if !path.is_file() {
            self.write_atomic(&path, &bytes)?;
        }
        Ok(id)
    }

    pub fn get_episode(&self, id: &str) -> Result<(EpisodeHeader, Trajectory), StoreError> {
        let (path, bytes) = self.read(Kind::Episode, id)?;
        read_trajectory(BufReader::new(bytes.as_slice())).map_err(|e| StoreError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    // trees

    pub fn put_tree(&self, art: &TreeArtifact) -> Result<String, StoreError> {
        let bytes = serde_json::to_vec_pretty(art).expect("tree artifacts serialize");
        let id = content_id(&bytes);
        let path = self.path(Kind::Tree, &id)?;
        if !path.is_file() {
            self.write_atomic(&path, &bytes)?;
        }
        Ok(id)
    }

    pub fn get_tree(&self, id: &str) -> Result<TreeArtifact, StoreError> {
        let (path, bytes) = self.read(Kind::Tree, id)?;
        let art: TreeArtifact = Self::decode(&path, &bytes)?;
        Self::check_schema(&path, art.schema_version, STORE_SCHEMA_VERSION)?;
        Ok(art)
    }

    fn current_path(&self, behavior: Behavior, role: Role) -> PathBuf {
        self.root.join("trees/current").join(format!("{behavior}-{role}"))
    }

    pub fn set_current_tree(&self, behavior: Behavior, role: Role, id: &str) -> Result<(), StoreError> {
        self.path(Kind::Tree, id)?;
        self.write_atomic(&self.current_path(behavior, role), id.as_bytes())
    }

    pub fn current_tree(&self, behavior: Behavior, role: Role) -> Result<Option<String>, StoreError> {
        let path = self.current_path(behavior, role);
        match fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StoreError::Io { path, source }),
        }
    }

    // explanation records

    pub fn put_record(&self, rec: &ExplanationRecord) -> Result<(), StoreError> {
        let path = self.path(Kind::Explanation, &rec.id)?;
        let bytes = serde_json::to_vec_pretty(rec).expect("records serialize");
        self.write_atomic(&path, &bytes)
    }

    pub fn get_record(&self, id: &str) -> Result<ExplanationRecord, StoreError> {
        let (path, bytes) = self.read(Kind::Explanation, id)?;
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = Self::decode(&path, &bytes)?;
        Self::check_schema(&path, v.schema_version, RECORD_SCHEMA_VERSION)?;
        let rec: ExplanationRecord = Self::decode(&path, &bytes)?;
        if rec.id != id {
            return Err(StoreError::Corrupt {
                path,
                message: format!("record id '{}' does not match its file", rec.id),
            });
        }
        Ok(rec)
    }

    // labels

    /// Stores labels for one record, replacing earlier ones.
    pub fn put_labels(&self, item: &LabeledItem) -> Result<(), StoreError> {
        let key = content_id(item.labels.record_id.as_bytes());
        let path = self.path(Kind::Labels, &key)?;
        let file = LabelFile {
            schema_version: STORE_SCHEMA_VERSION,
            item: item.clone(),
        };
        self.write_atomic(&path, &serde_json::to_vec_pretty(&file).expect("labels serialize"))
    }

    pub fn get_labels(&self, record_id: &str) -> Result<LabeledItem, StoreError> {
        let (path, bytes) = self.read(Kind::Labels, &content_id(record_id.as_bytes()))?;
        let f: LabelFile = Self::decode(&path, &bytes)?;
        Self::check_schema(&path, f.schema_version, STORE_SCHEMA_VERSION)?;
        Ok(f.item)
    }

    /// All label items ordered by record id.
    pub fn all_labels(&self) -> Result<Vec<LabeledItem>, StoreError> {
        let mut items = Vec::new();
        for key in self.ids(Kind::Labels)? {
            let (path, bytes) = self.read(Kind::Labels, &key)?;
            let f: LabelFile = Self::decode(&path, &bytes)?;
            Self::check_schema(&path, f.schema_version, STORE_SCHEMA_VERSION)?;
            items.push(f.item);
        }
        items.sort_by(|a, b| a.labels.record_id.cmp(&b.labels.record_id));
        Ok(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use brex_core::rollout::rollout;

    fn episode(seed: u64) -> (EpisodeHeader, Trajectory) {
        let header = EpisodeHeader {
            behavior: Behavior::Explore,
            env: EnvConfig::default().with_seed(seed),
        };
        let p = Behavior::Explore.policy();
        let traj = rollout(p, p, &header.env).unwrap();
        (header, traj)
    }

    #[test]
    fn episode_ids_follow_content() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let (h, t) = episode(3);
        let a = store.put_episode(&h, &t).unwrap();
        let b = store.put_episode(&h, &t).unwrap();
        assert_eq!(a, b);
        let (h2, t2) = episode(4);
        assert_ne!(a, store.put_episode(&h2, &t2).unwrap());
        assert_eq!(store.get_episode(&a).unwrap(), (h, t));
        assert_eq!(store.ids(Kind::Episode).unwrap().len(), 2);
    }

    #[test]
    fn reopen_sees_the_same_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let store = ArtifactStore::open(dir.path()).unwrap();
            let (h, t) = episode(5);
            store.put_episode(&h, &t).unwrap()
        };
        let store = ArtifactStore::open(dir.path()).unwrap();
        assert_eq!(store.ids(Kind::Episode).unwrap(), vec![id.clone()]);
        assert_eq!(store.get_episode(&id).unwrap().1, episode(5).1);
    }

    #[test]
    fn bad_ids_and_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        assert!(matches!(store.get_episode("../../etc/passwd"), Err(StoreError::BadId { .. })));
        assert!(matches!(store.get_tree("0123456789abcdef"), Err(StoreError::NotFound { .. })));
        assert_eq!(store.current_tree(Behavior::Fixed, Role::Medic).unwrap(), None);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let item: LabeledItem = serde_json::from_str(
            r#"{"behavior":"fixed","br_kind":"path","state_category":null,"record_id":"r1","annotator_id":"a","action":true}"#,
        )
        .unwrap();
        store.put_labels(&item).unwrap();
        assert_eq!(store.all_labels().unwrap(), vec![item]);
        let path = dir.path().join("labels").join(format!("{}.json", content_id(b"r1")));
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(store.all_labels(), Err(StoreError::Schema { found: 7, .. })));
    }

    #[test]
    fn temp_files_are_not_listed() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        fs::write(dir.path().join("episodes/.tmpXYZ"), b"partial").unwrap();
        fs::write(dir.path().join("episodes/notes.txt"), b"x").unwrap();
        assert!(store.ids(Kind::Episode).unwrap().is_empty());
    }
}
