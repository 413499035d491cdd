//! Mesh retrieval for generated abstractions.
//!
//! Candidates share the Weisfeiler-Lehman hash of the generated tree;
//! the closest one by AID supplies the base part, and for every other
//! semantic label one part is picked (preferring the top candidates, for a
//! consistent style) and resized into each generated box of that label.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{save_object, Corpus, CorpusError};
use crate::kinematics::{world_transforms, KinematicsError};
use crate::mesh::{MeshError, TriMesh};
use crate::metrics::{abstract_instantiation_distance, MetricConfig, MetricsError};
use crate::schema::{ArticulatedObject, ArticulationGraph, Category, SemanticLabel, Vec3};

/// How many ranked candidates are kept for style-consistent retrieval.
pub const TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("retrieval corpus is empty")]
    EmptyCorpus,
    #[error("no part labelled '{0}' anywhere in the corpus")]
    MissingLabel(SemanticLabel),
    #[error("no pick for label '{0}'")]
    MissingPick(SemanticLabel),
    #[error("node {node}: generated box has zero extent on axis {axis}")]
    DegenerateBox { node: usize, axis: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn digest(s: &str) -> String {
    let out = Sha256::digest(s.as_bytes());
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn neighbours(graph: &ArticulationGraph) -> Vec<Vec<usize>> {
    let n = graph.num_parts();
    let mut adj = vec![Vec::new(); n];
    for (i, p) in graph.parents().iter().enumerate() {
        if let Some(p) = *p {
            adj[i].push(p);
            adj[p].push(i);
        }
    }
    adj
}

/// Longest path length (in edges) of the undirected tree.
pub fn diameter(graph: &ArticulationGraph) -> usize {
    let adj = neighbours(graph);
    let bfs = |start: usize| {
        let mut dist = vec![usize::MAX; adj.len()];
        dist[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let far = (0..adj.len()).max_by_key(|&i| (dist[i], std::cmp::Reverse(i))).unwrap();
        (far, dist[far])
    };
    let (far, _) = bfs(0);
    bfs(far).1
}

/// Weisfeiler-Lehman hash of the unlabeled, undirected tree.
///
/// The refinement runs `diameter + 1` rounds, which depends only on the
/// topology (unlike the depth from the current root), and the hash
/// aggregates the sorted color multiset of every round.
pub fn wl_hash(graph: &ArticulationGraph) -> String {
    let adj = neighbours(graph);
    let n = adj.len();
    let mut colors = vec![String::from("1"); n];
    let mut summary = Vec::new();
    for _ in 0..diameter(graph) + 1 {
        let next: Vec<String> = (0..n)
            .map(|i| {
                let mut nb: Vec<&str> = adj[i].iter().map(|&j| colors[j].as_str()).collect();
                nb.sort_unstable();
                digest(&format!("{}({})", colors[i], nb.join(",")))
            })
            .collect();
        colors = next;
        let mut sorted = colors.clone();
        sorted.sort_unstable();
        summary.push(sorted.join(","));
    }
    digest(&format!("n={n};{}", summary.join(";")))
}

/// A mesh piece that can be resized into a generated box.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshPart {
    pub mesh: TriMesh,
    pub label: SemanticLabel,
    pub source_id: String,
    pub source_node: usize,
    pub rest_min: Vec3,
    pub rest_max: Vec3,
}

/// Retrieval corpus: objects in id order plus where their meshes live.
#[derive(Clone, Debug)]
pub struct Library {
    objects: Vec<ArticulatedObject>,
    hashes: Vec<String>,
    mesh_dir: Option<PathBuf>,
}

impl Library {
    /// Objects without a mesh directory; parts are materialised as boxes.
    pub fn in_memory(objects: Vec<ArticulatedObject>) -> Self {
        let hashes = objects.iter().map(|o| wl_hash(&o.graph)).collect();
        Library {
            objects,
            hashes,
            mesh_dir: None,
        }
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut lib = Self::in_memory(corpus.objects().cloned().collect());
        lib.mesh_dir = Some(corpus.root.join(&corpus.mesh_dir));
        lib
    }

    pub fn objects(&self) -> &[ArticulatedObject] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// The mesh of one part; parts without a mesh file fall back to their box.
    pub fn part(&self, index: usize, node: usize) -> Result<MeshPart, RetrievalError> {
        let obj = &self.objects[index];
        let p = &obj.parts[node];
        let mesh = match (&self.mesh_dir, &obj.mesh_refs[node]) {
            (Some(dir), Some(r)) => TriMesh::read_obj(&dir.join(r))?,
            _ => TriMesh::cuboid(p.bbox_min, p.bbox_max),
        };
        let (rest_min, rest_max) = mesh.bounds();
        Ok(MeshPart {
            mesh,
            label: p.label,
            source_id: obj.id.clone(),
            source_node: node,
            rest_min,
            rest_max,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub id: String,
    pub aid: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseSelection {
    pub base: MeshPart,
    /// Up to [`TOP_K`] candidates, best first.
    pub top: Vec<RankedCandidate>,
    /// True when no corpus object shared the hash (and category).
    pub fallback: bool,
}

fn base_node(obj: &ArticulatedObject) -> usize {
    (0..obj.num_parts())
        .find(|&i| obj.parts[i].label == SemanticLabel::Base)
        .unwrap_or_else(|| obj.graph.root())
}

/// Step one: hash filter, AID ranking and base-part choice.
pub fn select_base(
    gen: &ArticulatedObject,
    lib: &Library,
    category: Option<Category>,
    cfg: &MetricConfig,
) -> Result<BaseSelection, RetrievalError> {
    if lib.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let h = wl_hash(&gen.graph);
    let mut candidates: Vec<usize> = (0..lib.len())
        .filter(|&i| lib.hashes[i] == h && category.is_none_or(|c| lib.objects[i].category() == c))
        .collect();
    let fallback = candidates.is_empty();
    if fallback {
        candidates = (0..lib.len()).collect();
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    for i in candidates {
        let aid = abstract_instantiation_distance(gen, &lib.objects[i], cfg)?;
        ranked.push(RankedCandidate {
            index: i,
            id: lib.objects[i].id.clone(),
            aid,
        });
    }
    // equal AIDs fall back to corpus id order
    ranked.sort_by(|a, b| a.aid.total_cmp(&b.aid).then_with(|| a.id.cmp(&b.id)));
    ranked.truncate(TOP_K);
    let best = ranked[0].index;
    let base = lib.part(best, base_node(&lib.objects[best]))?;
    Ok(BaseSelection {
        base,
        top: ranked,
        fallback,
    })
}

/// Step two: one part per non-base label, searched in the ranked
/// candidates, then the same category, then the whole corpus.
pub fn retrieve_parts(
    gen: &ArticulatedObject,
    top: &[RankedCandidate],
    lib: &Library,
    category: Option<Category>,
) -> Result<BTreeMap<SemanticLabel, MeshPart>, RetrievalError> {
    let category = category.unwrap_or(gen.category());
    let mut seen = HashSet::new();
    let labels: Vec<SemanticLabel> = gen
        .parts
        .iter()
        .map(|p| p.label)
        .filter(|&l| l != SemanticLabel::Base && seen.insert(l))
        .collect();
    let mut by_id: Vec<usize> = (0..lib.len()).collect();
    by_id.sort_by(|&a, &b| lib.objects[a].id.cmp(&lib.objects[b].id));
    let search: Vec<usize> = top
        .iter()
        .map(|c| c.index)
        .chain(by_id.iter().copied().filter(|&i| lib.objects[i].category() == category))
        .chain(by_id.iter().copied())
        .collect();
    let mut picks = BTreeMap::new();
    for label in labels {
        let found = search.iter().find_map(|&i| {
            lib.objects[i]
                .parts
                .iter()
                .position(|p| p.label == label)
                .map(|node| (i, node))
        });
        let (i, node) = found.ok_or(RetrievalError::MissingLabel(label))?;
        picks.insert(label, lib.part(i, node)?);
    }
    Ok(picks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledPart {
    pub node: usize,
    pub label: SemanticLabel,
    pub source_id: String,
    pub source_node: usize,
    pub mesh: TriMesh,
}

/// Retrieved meshes resized into the generated boxes, with the generated
/// joints and tree.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledObject {
    pub object: ArticulatedObject,
    pub parts: Vec<AssembledPart>,
}

impl AssembledObject {
    /// Abstraction whose boxes are the bounds of the assembled meshes.
    pub fn as_abstraction(&self) -> ArticulatedObject {
        let mut obj = self.object.clone();
        for p in &self.parts {
            let (lo, hi) = p.mesh.bounds();
            obj.parts[p.node].bbox_min = lo;
            obj.parts[p.node].bbox_max = hi;
        }
        obj
    }

    /// Meshes posed at articulation state `tau`.
    pub fn posed(&self, tau: f64) -> Result<Vec<TriMesh>, RetrievalError> {
        let world = world_transforms(&self.object, tau)?;
        Ok(self
            .parts
            .iter()
            .map(|p| p.mesh.transformed(|v| world[p.node].apply(v)))
            .collect())
    }

    /// Writes `part_<node>.obj` per part and `object.json` with the joints.
    pub fn write(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir).map_err(|source| RetrievalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut obj = self.object.clone();
        for p in &self.parts {
            let name = format!("part_{}.obj", p.node);
            p.mesh.write_obj(&dir.join(&name))?;
            obj.mesh_refs[p.node] = Some(name);
        }
        save_object(&obj, &dir.join("object.json"))?;
        Ok(())
    }
}

/// Resizes each pick (per-axis affine) into every generated box of its label.
pub fn assemble(
    gen: &ArticulatedObject,
    base: &MeshPart,
    picks: &BTreeMap<SemanticLabel, MeshPart>,
) -> Result<AssembledObject, RetrievalError> {
    let mut parts = Vec::with_capacity(gen.num_parts());
    for (node, p) in gen.parts.iter().enumerate() {
        let e = p.extent();
        if let Some(axis) = (0..3).find(|&i| e[i] <= 1e-9) {
            return Err(RetrievalError::DegenerateBox { node, axis });
        }
        let pick = if p.label == SemanticLabel::Base {
            base
        } else {
            picks.get(&p.label).ok_or(RetrievalError::MissingPick(p.label))?
        };
        parts.push(AssembledPart {
            node,
            label: p.label,
            source_id: pick.source_id.clone(),
            source_node: pick.source_node,
            mesh: pick
                .mesh
                .remapped((pick.rest_min, pick.rest_max), (p.bbox_min, p.bbox_max)),
        });
    }
    let mut object = gen.clone();
    object.mesh_refs = (0..gen.num_parts()).map(|i| Some(format!("part_{i}.obj"))).collect();
    Ok(AssembledObject { object, parts })
}

/// Full pipeline: base selection, part retrieval, assembly.
pub fn retrieve_and_assemble(
    gen: &ArticulatedObject,
    lib: &Library,
    category: Option<Category>,
    cfg: &MetricConfig,
) -> Result<(AssembledObject, BaseSelection), RetrievalError> {
    let sel = select_base(gen, lib, category, cfg)?;
    let picks = retrieve_parts(gen, &sel.top, lib, category)?;
    Ok((assemble(gen, &sel.base, &picks)?, sel))
}
