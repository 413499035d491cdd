//! On-disk corpus format.
//!
//! A corpus is a directory:
//!
//! ```text
//! corpus/
//!   manifest.json          {"version":1,"mesh_dir":"meshes","objects":[{"id","category","split","file"}]}
//!   objects/<id>.json      one object document
//!   meshes/<mesh_ref>      OBJ files referenced by parts
//! ```
//!
//! An object document:
//!
//! ```json
//! {"id": "storage_0000", "category": "Storage",
//!  "parts": [{"label": "base", "bbox_min": [-1,-1,-1], "bbox_max": [1,1,1],
//!             "joint": {"type": "fixed", "axis_dir": [0,0,1], "axis_origin": [0,0,0], "range": [0,0]},
//!             "parent": null, "mesh_ref": "storage_0000_0.obj"}]}
//! ```
//!
//! Revolute ranges are in degrees; translational ranges and all positions are
//! in normalized object units.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{MeshError, TriMesh};
use crate::schema::{
    ArticulatedObject, ArticulationGraph, Category, JointSpec, JointType, PartAbstraction, SchemaError, SemanticLabel,
    Vec3,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed document: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Schema {
        path: String,
        #[source]
        source: SchemaError,
    },
    #[error("{path}: unknown category '{value}'")]
    UnknownCategory { path: String, value: String },
    #[error("{path}: unsupported manifest version {version}")]
    Version { path: String, version: u32 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("object '{0}' not found in corpus")]
    UnknownObject(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDocument {
    #[serde(rename = "type")]
    pub kind: String,
    pub axis_dir: Vec3,
    pub axis_origin: Vec3,
    pub range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartDocument {
    pub label: String,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub joint: JointDocument,
    pub parent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_ref: Option<String>,
}

/// Serialized form of an [`ArticulatedObject`]; also the JSON body used by
/// the HTTP service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectDocument {
    pub id: String,
    pub category: String,
    pub parts: Vec<PartDocument>,
}

impl ObjectDocument {
    pub fn from_object(obj: &ArticulatedObject) -> Self {
        let parts = obj
            .parts
            .iter()
            .enumerate()
            .map(|(i, p)| PartDocument {
                label: p.label.name().to_string(),
                bbox_min: p.bbox_min,
                bbox_max: p.bbox_max,
                joint: JointDocument {
                    kind: p.joint.kind.name().to_string(),
                    axis_dir: p.joint.axis_dir,
                    axis_origin: p.joint.axis_origin,
                    range: p.joint.range,
                },
                parent: obj.graph.parent(i),
                mesh_ref: obj.mesh_refs[i].clone(),
            })
            .collect();
        ObjectDocument {
            id: obj.id.clone(),
            category: obj.category().name().to_string(),
            parts,
        }
    }

    /// Converts and validates every invariant.
    pub fn to_object(&self) -> Result<ArticulatedObject, SchemaError> {
        let category: Category = self.category.parse().map_err(|_| SchemaError::UnknownEnum {
            node: 0,
            kind: "category",
            value: self.category.clone(),
        })?;
        let mut parts = Vec::with_capacity(self.parts.len());
        for (node, doc) in self.parts.iter().enumerate() {
            let label: SemanticLabel = doc.label.parse().map_err(|_| SchemaError::UnknownEnum {
                node,
                kind: "semantic label",
                value: doc.label.clone(),
            })?;
            let kind: JointType = doc.joint.kind.parse().map_err(|_| SchemaError::UnknownEnum {
                node,
                kind: "joint type",
                value: doc.joint.kind.clone(),
            })?;
            parts.push(PartAbstraction {
                bbox_min: doc.bbox_min,
                bbox_max: doc.bbox_max,
                joint: JointSpec {
                    kind,
                    axis_dir: doc.joint.axis_dir,
                    axis_origin: doc.joint.axis_origin,
                    range: doc.joint.range,
                },
                label,
            });
        }
        let graph = ArticulationGraph::new(self.parts.iter().map(|p| p.parent).collect(), category)?;
        let mut obj = ArticulatedObject::new(self.id.clone(), graph, parts)?;
        obj.mesh_refs = self.parts.iter().map(|p| p.mesh_ref.clone()).collect();
        Ok(obj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default = "default_mesh_dir")]
    pub mesh_dir: String,
    pub objects: Vec<ManifestEntry>,
}

fn default_mesh_dir() -> String {
    "meshes".to_string()
}

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub object: ArticulatedObject,
    pub split: Split,
}

/// A loaded corpus, ordered as in its manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub mesh_dir: String,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn objects(&self) -> impl Iterator<Item = &ArticulatedObject> {
        self.entries.iter().map(|e| &e.object)
    }

    pub fn split(&self, split: Split) -> Vec<ArticulatedObject> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.object.clone())
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&ArticulatedObject> {
        self.objects().find(|o| o.id == id)
    }

    pub fn mesh_path(&self, mesh_ref: &str) -> PathBuf {
        self.root.join(&self.mesh_dir).join(mesh_ref)
    }

    pub fn load_mesh(&self, mesh_ref: &str) -> Result<TriMesh, CorpusError> {
        Ok(TriMesh::read_obj(&self.mesh_path(mesh_ref))?)
    }
}

pub fn load_object(path: &Path) -> Result<ArticulatedObject, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_object(&text, &path.display().to_string())
}

pub fn parse_object(text: &str, origin: &str) -> Result<ArticulatedObject, CorpusError> {
    let doc: ObjectDocument = serde_json::from_str(text).map_err(|source| CorpusError::Json {
        path: origin.to_string(),
        source,
    })?;
    doc.to_object().map_err(|source| CorpusError::Schema {
        path: origin.to_string(),
        source,
    })
}

pub fn save_object(obj: &ArticulatedObject, path: &Path) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text =
        serde_json::to_string_pretty(&ObjectDocument::from_object(obj)).expect("object documents always serialize");
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: manifest_path.display().to_string(),
        source,
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CorpusError::Version {
            path: manifest_path.display().to_string(),
            version: manifest.version,
        });
    }
    let mut entries = Vec::with_capacity(manifest.objects.len());
    for entry in &manifest.objects {
        if entry.category.parse::<Category>().is_err() {
            return Err(CorpusError::UnknownCategory {
                path: manifest_path.display().to_string(),
                value: entry.category.clone(),
            });
        }
        let object = load_object(&dir.join(&entry.file))?;
        entries.push(CorpusEntry {
            object,
            split: entry.split,
        });
    }
    Ok(Corpus {
        root: dir.to_path_buf(),
        mesh_dir: manifest.mesh_dir,
        entries,
    })
}

/// Writes the manifest and every object document. Meshes are written by the
/// caller into `dir/<mesh_dir>/`.
pub fn save_corpus(dir: &Path, entries: &[CorpusEntry], mesh_dir: &str) -> Result<(), CorpusError> {
    fs::create_dir_all(dir.join("objects")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join(mesh_dir)).map_err(io_err(dir))?;
    let mut objects = Vec::with_capacity(entries.len());
    for e in entries {
        let file = format!("objects/{}.json", e.object.id);
        save_object(&e.object, &dir.join(&file))?;
        objects.push(ManifestEntry {
            id: e.object.id.clone(),
            category: e.object.category().name().to_string(),
            split: e.split,
            file,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        mesh_dir: mesh_dir.to_string(),
        objects,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
}

/// Deterministic per-category split: within each category, the first
/// `train_fraction` of objects in id order go to train.
pub fn split_by_category(objects: &[ArticulatedObject], train_fraction: f64) -> Vec<Split> {
    let mut splits = vec![Split::Train; objects.len()];
    for cat in Category::ALL {
        let mut idx: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].category() == *cat).collect();
        idx.sort_by(|&a, &b| objects[a].id.cmp(&objects[b].id));
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            if rank >= n_train {
                splits[i] = Split::Test;
            }
        }
    }
    splits
}
