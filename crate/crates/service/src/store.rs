//! File-per-project persistence.
//!
//! Each project lives in `<data_dir>/projects/<id>.json`. Writes go to a
//! temporary file in the same directory which is then renamed over the
//! target, so a crash never leaves a half-written project behind.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use protoflow::{DesignInput, GenerationTrace};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub input: DesignInput,
    pub trace: Option<GenerationTrace>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub revision: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("project `{0}` not found")]
    NotFound(String),
    #[error("stale revision: expected {expected}, project is at {actual}")]
    Stale { expected: u64, actual: u64 },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> StoreError {
    let context = context.into();
    move |source| StoreError::Io { context, source }
}

pub struct ProjectStore {
    dir: PathBuf,
    projects: RwLock<BTreeMap<String, Project>>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl ProjectStore {
    /// Opens (creating if needed) the store under `data_dir` and loads every
    /// project file.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = data_dir.as_ref().join("projects");
        fs::create_dir_all(&dir).map_err(io(format!("creating {}", dir.display())))?;
        let mut projects = BTreeMap::new();
        let entries = fs::read_dir(&dir).map_err(io(format!("listing {}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(io("reading directory entry"))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io(format!("reading {}", path.display())))?;
            let project: Project =
                serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            projects.insert(project.id.clone(), project);
        }
        Ok(ProjectStore {
            dir,
            projects: RwLock::new(projects),
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn write(&self, project: &Project) -> Result<(), StoreError> {
        let json = serde_json::to_vec_pretty(project).expect("project serializes");
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)
            .map_err(io(format!("creating temp file in {}", self.dir.display())))?;
        tmp.write_all(&json).map_err(io("writing project"))?;
        tmp.as_file().sync_all().map_err(io("syncing project"))?;
        let target = self.path_for(&project.id);
        tmp.persist(&target)
            .map_err(|e| e.error)
            .map_err(io(format!("renaming into {}", target.display())))?;
        Ok(())
    }

    pub fn create(&self, input: DesignInput) -> Result<Project, StoreError> {
        let now = Utc::now();
        let project = Project {
            id: uuid::Uuid::new_v4().simple().to_string(),
            input,
            trace: None,
            created_at: now,
            updated_at: now,
            revision: 1,
        };
        self.write(&project)?;
        self.projects
            .write()
            .unwrap()
            .insert(project.id.clone(), project.clone());
        Ok(project)
    }

    pub fn get(&self, id: &str) -> Result<Project, StoreError> {
        self.projects
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<Project> {
        self.projects.read().unwrap().values().cloned().collect()
    }

    /// The mutex that serializes mutations of one project.
    pub fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    pub fn check_revision(project: &Project, expected: Option<u64>) -> Result<(), StoreError> {
        match expected {
            Some(expected) if expected != project.revision => Err(StoreError::Stale {
                expected,
                actual: project.revision,
            }),
            _ => Ok(()),
        }
    }

    /// Applies `change` to the stored project, bumps its revision and
    /// persists it. Nothing is written when the revision check fails.
    pub fn update(
        &self,
        id: &str,
        expected: Option<u64>,
        change: impl FnOnce(&mut Project),
    ) -> Result<Project, StoreError> {
        let mut projects = self.projects.write().unwrap();
        let current = projects
            .get(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        Self::check_revision(current, expected)?;
        let mut next = current.clone();
        change(&mut next);
        next.id = id.to_string();
        next.revision = current.revision + 1;
        next.updated_at = Utc::now();
        self.write(&next)?;
        projects.insert(id.to_string(), next.clone());
        Ok(next)
    }
}
