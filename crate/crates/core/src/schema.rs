//! Canonical data model for articulated-object abstractions and the
//! normalized attribute tensor the diffusion model operates on.
//!
//! Tensor layout is `[attribute][node][slot]` with five attributes in fixed
//! order (box, joint type, joint axis, joint range, semantic label), `K` node
//! slots and `M = 6` values per attribute:
//!
//! | attribute | slots |
//! |-----------|-------|
//! | box | `min.xyz, max.xyz` |
//! | joint type | scalar code repeated six times |
//! | joint axis | `direction.xyz, origin.xyz` |
//! | joint range | `(lo, hi)` repeated three times |
//! | semantic label | scalar code repeated six times |
//!
//! Enum codes map to `2·code/(n−1) − 1`. Revolute ranges are stored in
//! degrees divided by 360; translational ranges are stored in normalized
//! length units. Padded node slots hold zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of parts (`K`).
pub const MAX_PARTS: usize = 32;
/// Values per attribute token (`M`).
pub const ATTR_WIDTH: usize = 6;
/// Number of attribute tokens per part.
pub const NUM_ATTRIBUTES: usize = 5;

pub type Vec3 = [f64; 3];

/// Slack allowed when checking that encoded values lie in `[-1, 1]`.
const RANGE_SLACK: f64 = 1e-9;
const UNIT_TOLERANCE: f64 = 1e-6;
/// Directions shorter than this cannot be renormalized.
const MIN_AXIS_NORM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("object has no parts")]
    Empty,
    #[error("{0} parts exceeds K={MAX_PARTS}")]
    TooManyParts(usize),
    #[error("{parts} parts do not fit in {slots} node slots")]
    SlotOverflow { parts: usize, slots: usize },
    #[error("multiple roots: nodes {0} and {1} have no parent")]
    MultipleRoots(usize, usize),
    #[error("no root node")]
    NoRoot,
    #[error("node {node}: parent index {parent} out of range")]
    ParentOutOfRange { node: usize, parent: usize },
    #[error("node {0}: cycle in parent pointers")]
    Cycle(usize),
    #[error("node {node}: unknown {kind} '{value}'")]
    UnknownEnum {
        node: usize,
        kind: &'static str,
        value: String,
    },
    #[error("node {node}: {attribute} value {value} outside [-1, 1] after normalization")]
    OutOfRange {
        node: usize,
        attribute: &'static str,
        value: f64,
    },
    #[error("node {node}: {message}")]
    InvalidPart { node: usize, message: String },
    #[error("node {0}: zero-length joint axis on a moving joint")]
    DegenerateAxis(usize),
    #[error("non-finite value in attribute tensor at node {0}")]
    NonFinite(usize),
    #[error("{0} graph nodes but {1} parts")]
    PartCountMismatch(usize, usize),
}

macro_rules! code_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal, [$($variant:ident => $text:literal),+ $(,)?]) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> usize {
                self as usize
            }

            pub fn from_code(code: usize) -> Option<Self> {
                Self::ALL.get(code).copied()
            }

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                }
            }

            /// Normalized scalar in `[-1, 1]` for this code.
            pub fn encoded(self) -> f64 {
                encode_code(self.code(), Self::ALL.len())
            }

            /// Nearest code to a normalized scalar, ties toward the lower code.
            pub fn snap(value: f64) -> Self {
                Self::ALL[snap_code(value, Self::ALL.len())]
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name().eq_ignore_ascii_case(s))
                    .ok_or_else(|| format!("unknown {} '{}'", $kind, s))
            }
        }
    };
}

code_enum!(
    /// Joint kinds, in code order.
    JointType, "joint type", [
        Fixed => "fixed",
        Revolute => "revolute",
        Prismatic => "prismatic",
        Continuous => "continuous",
        Screw => "screw",
    ]
);

code_enum!(
    SemanticLabel, "semantic label", [
        Base => "base",
        Drawer => "drawer",
        Door => "door",
        Tray => "tray",
        Shelf => "shelf",
        Knob => "knob",
        Wheel => "wheel",
        Handle => "handle",
    ]
);

code_enum!(
    Category, "category", [
        Storage => "Storage",
        Table => "Table",
        Refrigerator => "Refrigerator",
        Dishwasher => "Dishwasher",
        Safe => "Safe",
        Oven => "Oven",
        Washer => "Washer",
        Microwave => "Microwave",
    ]
);

impl JointType {
    pub fn is_moving(self) -> bool {
        self != JointType::Fixed
    }

    /// Joints whose range is a rotation angle in degrees.
    pub fn has_angular_range(self) -> bool {
        self == JointType::Revolute
    }

    /// Joints that store no range.
    pub fn is_unbounded_or_static(self) -> bool {
        matches!(self, JointType::Fixed | JointType::Continuous)
    }
}

fn encode_code(code: usize, count: usize) -> f64 {
    2.0 * code as f64 / (count - 1) as f64 - 1.0
}

fn snap_code(value: f64, count: usize) -> usize {
    let pos = (value + 1.0) * (count - 1) as f64 / 2.0;
    if !pos.is_finite() || pos <= 0.0 {
        return 0;
    }
    let lower = pos.floor();
    let code = if pos - lower > 0.5 { lower + 1.0 } else { lower };
    (code as usize).min(count - 1)
}

/// Joint parameters of a part relative to its parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    #[serde(rename = "type")]
    pub kind: JointType,
    pub axis_dir: Vec3,
    pub axis_origin: Vec3,
    /// Degrees for revolute joints, normalized length units for prismatic and
    /// screw joints, `(0, 0)` for fixed and continuous joints.
    pub range: [f64; 2],
}

impl JointSpec {
    pub fn fixed() -> Self {
        JointSpec {
            kind: JointType::Fixed,
            axis_dir: [0.0, 0.0, 1.0],
            axis_origin: [0.0; 3],
            range: [0.0, 0.0],
        }
    }

    pub fn revolute(axis_dir: Vec3, axis_origin: Vec3, range_deg: [f64; 2]) -> Self {
        JointSpec {
            kind: JointType::Revolute,
            axis_dir,
            axis_origin,
            range: range_deg,
        }
    }

    pub fn prismatic(axis_dir: Vec3, axis_origin: Vec3, range: [f64; 2]) -> Self {
        JointSpec {
            kind: JointType::Prismatic,
            axis_dir,
            axis_origin,
            range,
        }
    }

    pub fn continuous(axis_dir: Vec3, axis_origin: Vec3) -> Self {
        JointSpec {
            kind: JointType::Continuous,
            axis_dir,
            axis_origin,
            range: [0.0, 0.0],
        }
    }

    pub fn screw(axis_dir: Vec3, axis_origin: Vec3, range: [f64; 2]) -> Self {
        JointSpec {
            kind: JointType::Screw,
            axis_dir,
            axis_origin,
            range,
        }
    }
}

/// One part: resting axis-aligned box, joint to the parent, semantic label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAbstraction {
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub joint: JointSpec,
    pub label: SemanticLabel,
}

impl PartAbstraction {
    pub fn new(bbox_min: Vec3, bbox_max: Vec3, joint: JointSpec, label: SemanticLabel) -> Self {
        PartAbstraction {
            bbox_min,
            bbox_max,
            joint,
            label,
        }
    }

    pub fn center(&self) -> Vec3 {
        std::array::from_fn(|i| 0.5 * (self.bbox_min[i] + self.bbox_max[i]))
    }

    pub fn extent(&self) -> Vec3 {
        std::array::from_fn(|i| self.bbox_max[i] - self.bbox_min[i])
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    /// Checks the part-level invariants.
    pub fn validate(&self, node: usize) -> Result<(), SchemaError> {
        let invalid = |message: String| SchemaError::InvalidPart { node, message };
        let finite = self
            .bbox_min
            .iter()
            .chain(&self.bbox_max)
            .chain(&self.joint.axis_dir)
            .chain(&self.joint.axis_origin)
            .chain(&self.joint.range)
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("non-finite value".into()));
        }
        if (0..3).any(|i| self.bbox_min[i] > self.bbox_max[i]) {
            return Err(invalid("bbox_min exceeds bbox_max".into()));
        }
        let [lo, hi] = self.joint.range;
        if lo > hi {
            return Err(invalid(format!("joint range lo {lo} > hi {hi}")));
        }
        if self.joint.kind.is_moving() {
            let norm = norm3(self.joint.axis_dir);
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(invalid(format!("axis direction has length {norm}")));
            }
        }
        if self.joint.kind.is_unbounded_or_static() && (lo != 0.0 || hi != 0.0) {
            return Err(invalid(format!("{} joint must store range (0, 0)", self.joint.kind)));
        }
        Ok(())
    }
}

pub(crate) fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Kinematic tree over `N ≤ K` parts plus the object category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticulationGraph {
    parents: Vec<Option<usize>>,
    category: Category,
}

impl ArticulationGraph {
    pub fn new(parents: Vec<Option<usize>>, category: Category) -> Result<Self, SchemaError> {
        validate_tree(&parents)?;
        Ok(ArticulationGraph { parents, category })
    }

    pub fn num_parts(&self) -> usize {
        self.parents.len()
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn with_category(mut self, category: Category) -> Self {
        self.category = category;
        self
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node]
    }

    pub fn root(&self) -> usize {
        self.parents
            .iter()
            .position(Option::is_none)
            .expect("validated tree has a root")
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(node))
            .map(|(i, _)| i)
    }

    /// Whether node `i` attends to node `k` in graph-relation attention:
    /// parent/child pairs plus the root's self-loop.
    pub fn is_adjacent(&self, i: usize, k: usize) -> bool {
        if i == k {
            return self.parents[i].is_none();
        }
        self.parents[i] == Some(k) || self.parents[k] == Some(i)
    }

    /// `slots × slots` attention adjacency; padded rows and columns are zero.
    pub fn attn_adjacency(&self, slots: usize) -> Vec<Vec<bool>> {
        let n = self.num_parts();
        (0..slots)
            .map(|i| (0..slots).map(|k| i < n && k < n && self.is_adjacent(i, k)).collect())
            .collect()
    }

    pub fn valid_mask(&self, slots: usize) -> Vec<bool> {
        (0..slots).map(|i| i < self.num_parts()).collect()
    }

    /// Number of edges on the path from `node` to the root.
    pub fn node_depth(&self, mut node: usize) -> usize {
        let mut depth = 0;
        while let Some(p) = self.parents[node] {
            node = p;
            depth += 1;
        }
        depth
    }

    /// Height of the tree measured from its root.
    pub fn depth(&self) -> usize {
        (0..self.num_parts()).map(|i| self.node_depth(i)).max().unwrap_or(0)
    }

    /// Nodes ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root()];
        let mut head = 0;
        while head < order.len() {
            let node = order[head];
            head += 1;
            order.extend(self.children(node));
        }
        order
    }

    /// Relabels nodes: old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_parts();
        assert_eq!(perm.len(), n, "permutation length must match node count");
        let mut parents = vec![None; n];
        for (old, p) in self.parents.iter().enumerate() {
            parents[perm[old]] = p.map(|p| perm[p]);
        }
        ArticulationGraph {
            parents,
            category: self.category,
        }
    }
}

fn validate_tree(parents: &[Option<usize>]) -> Result<(), SchemaError> {
    let n = parents.len();
    if n == 0 {
        return Err(SchemaError::Empty);
    }
    if n > MAX_PARTS {
        return Err(SchemaError::TooManyParts(n));
    }
    let mut root = None;
    for (node, p) in parents.iter().enumerate() {
        match p {
            None => {
                if let Some(first) = root {
                    return Err(SchemaError::MultipleRoots(first, node));
                }
                root = Some(node);
            }
            Some(p) if *p >= n => {
                return Err(SchemaError::ParentOutOfRange { node, parent: *p });
            }
            Some(_) => {}
        }
    }
    if root.is_none() {
        return Err(SchemaError::NoRoot);
    }
    for start in 0..n {
        let mut node = start;
        let mut steps = 0;
        while let Some(p) = parents[node] {
            node = p;
            steps += 1;
            if steps > n {
                return Err(SchemaError::Cycle(start));
            }
        }
    }
    Ok(())
}

/// A complete abstraction: graph, per-node parts and optional mesh references.
#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedObject {
    pub id: String,
    pub graph: ArticulationGraph,
    pub parts: Vec<PartAbstraction>,
    pub mesh_refs: Vec<Option<String>>,
}

impl ArticulatedObject {
    pub fn new(
        id: impl Into<String>,
        graph: ArticulationGraph,
        parts: Vec<PartAbstraction>,
    ) -> Result<Self, SchemaError> {
        let mesh_refs = vec![None; parts.len()];
        let obj = ArticulatedObject {
            id: id.into(),
            graph,
            parts,
            mesh_refs,
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn category(&self) -> Category {
        self.graph.category()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.graph.num_parts() != self.parts.len() {
            return Err(SchemaError::PartCountMismatch(self.graph.num_parts(), self.parts.len()));
        }
        if self.mesh_refs.len() != self.parts.len() {
            return Err(SchemaError::PartCountMismatch(self.parts.len(), self.mesh_refs.len()));
        }
        validate_tree(self.graph.parents())?;
        for (i, part) in self.parts.iter().enumerate() {
            part.validate(i)?;
        }
        Ok(())
    }

    /// Overall resting bounding box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.parts {
            for i in 0..3 {
                lo[i] = lo[i].min(p.bbox_min[i]);
                hi[i] = hi[i].max(p.bbox_max[i]);
            }
        }
        (lo, hi)
    }

    /// Applies `p ↦ (p − center)·scale` to every position and scales
    /// translational ranges accordingly.
    pub fn transformed(&self, center: Vec3, scale: f64) -> Self {
        let map = |p: Vec3| -> Vec3 { std::array::from_fn(|i| (p[i] - center[i]) * scale) };
        let mut out = self.clone();
        for part in &mut out.parts {
            part.bbox_min = map(part.bbox_min);
            part.bbox_max = map(part.bbox_max);
            if part.joint.kind.is_moving() {
                part.joint.axis_origin = map(part.joint.axis_origin);
            }
            if matches!(part.joint.kind, JointType::Prismatic | JointType::Screw) {
                part.joint.range = [part.joint.range[0] * scale, part.joint.range[1] * scale];
            }
        }
        out
    }

    /// Translates the object to its bounding-box center and scales it
    /// uniformly so that it fits `[-1, 1]^3`.
    pub fn canonicalized(&self) -> Self {
        let (lo, hi) = self.bounds();
        let center = std::array::from_fn(|i| 0.5 * (lo[i] + hi[i]));
        let half = (0..3).map(|i| 0.5 * (hi[i] - lo[i])).fold(0.0, f64::max);
        let scale = if half > 0.0 { 1.0 / half } else { 1.0 };
        self.transformed(center, scale)
    }

    /// Relabels nodes: old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_parts();
        let mut parts = self.parts.clone();
        let mut mesh_refs = self.mesh_refs.clone();
        for old in 0..n {
            parts[perm[old]] = self.parts[old].clone();
            mesh_refs[perm[old]] = self.mesh_refs[old].clone();
        }
        ArticulatedObject {
            id: self.id.clone(),
            graph: self.graph.permuted(perm),
            parts,
            mesh_refs,
        }
    }

    pub fn encode(&self, slots: usize) -> Result<AttributeTensor, SchemaError> {
        encode(&self.parts, &self.graph, slots)
    }
}

/// Attribute rows, in tensor order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    BBox = 0,
    JointType = 1,
    JointAxis = 2,
    JointRange = 3,
    Label = 4,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [
        Attribute::BBox,
        Attribute::JointType,
        Attribute::JointAxis,
        Attribute::JointRange,
        Attribute::Label,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::BBox => "bbox",
            Attribute::JointType => "joint_type",
            Attribute::JointAxis => "joint_axis",
            Attribute::JointRange => "joint_range",
            Attribute::Label => "semantic_label",
        }
    }
}

/// The `5 × K × M` diffusion state.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTensor {
    slots: usize,
    data: Vec<f64>,
}

impl AttributeTensor {
    pub fn zeros(slots: usize) -> Self {
        AttributeTensor {
            slots,
            data: vec![0.0; NUM_ATTRIBUTES * slots * ATTR_WIDTH],
        }
    }

    pub fn from_vec(slots: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), NUM_ATTRIBUTES * slots * ATTR_WIDTH);
        AttributeTensor { slots, data }
    }

    /// Number of node slots (`K`).
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, attr: usize, node: usize) -> usize {
        (attr * self.slots + node) * ATTR_WIDTH
    }

    pub fn index(&self, attr: usize, node: usize, slot: usize) -> usize {
        self.offset(attr, node) + slot
    }

    pub fn row(&self, attr: usize, node: usize) -> &[f64] {
        let o = self.offset(attr, node);
        &self.data[o..o + ATTR_WIDTH]
    }

    pub fn row_mut(&mut self, attr: usize, node: usize) -> &mut [f64] {
        let o = self.offset(attr, node);
        &mut self.data[o..o + ATTR_WIDTH]
    }

    /// Node index of a flat entry.
    pub fn node_of(&self, flat: usize) -> usize {
        (flat / ATTR_WIDTH) % self.slots
    }

    /// Zeroes every entry of nodes `>= valid`.
    pub fn zero_padding(&mut self, valid: usize) {
        for attr in 0..NUM_ATTRIBUTES {
            for node in valid..self.slots {
                self.row_mut(attr, node).fill(0.0);
            }
        }
    }
}

/// Encodes an object into the normalized tensor with `slots` node slots.
pub fn encode(
    parts: &[PartAbstraction],
    graph: &ArticulationGraph,
    slots: usize,
) -> Result<AttributeTensor, SchemaError> {
    if graph.num_parts() != parts.len() {
        return Err(SchemaError::PartCountMismatch(graph.num_parts(), parts.len()));
    }
    if parts.len() > slots {
        return Err(SchemaError::SlotOverflow {
            parts: parts.len(),
            slots,
        });
    }
    let mut x = AttributeTensor::zeros(slots);
    for (node, part) in parts.iter().enumerate() {
        let joint = &part.joint;
        let (dir, origin) = if joint.kind.is_moving() {
            (joint.axis_dir, joint.axis_origin)
        } else {
            let f = JointSpec::fixed();
            (f.axis_dir, f.axis_origin)
        };
        let range = if joint.kind.is_unbounded_or_static() {
            [0.0, 0.0]
        } else if joint.kind.has_angular_range() {
            [joint.range[0] / 360.0, joint.range[1] / 360.0]
        } else {
            joint.range
        };
        let rows: [(Attribute, [f64; ATTR_WIDTH]); NUM_ATTRIBUTES] = [
            (
                Attribute::BBox,
                [
                    part.bbox_min[0],
                    part.bbox_min[1],
                    part.bbox_min[2],
                    part.bbox_max[0],
                    part.bbox_max[1],
                    part.bbox_max[2],
                ],
            ),
            (Attribute::JointType, [joint.kind.encoded(); ATTR_WIDTH]),
            (
                Attribute::JointAxis,
                [dir[0], dir[1], dir[2], origin[0], origin[1], origin[2]],
            ),
            (
                Attribute::JointRange,
                [range[0], range[1], range[0], range[1], range[0], range[1]],
            ),
            (Attribute::Label, [part.label.encoded(); ATTR_WIDTH]),
        ];
        for (attr, values) in rows {
            for &v in &values {
                if !(v.abs() <= 1.0 + RANGE_SLACK) {
                    return Err(SchemaError::OutOfRange {
                        node,
                        attribute: attr.name(),
                        value: v,
                    });
                }
            }
            x.row_mut(attr.index(), node).copy_from_slice(&values);
        }
    }
    Ok(x)
}

fn mean(values: &[f64]) -> f64 {
    // exact when the repeated entries agree, so clean rows decode losslessly
    if values.iter().all(|&v| v == values[0]) {
        return values[0];
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Decodes the valid nodes of a tensor back into part abstractions.
///
/// Repeated scalars are averaged before snapping, axis directions are
/// renormalized and box corners reordered so that `min ≤ max`.
pub fn decode(x: &AttributeTensor, graph: &ArticulationGraph) -> Result<Vec<PartAbstraction>, SchemaError> {
    let n = graph.num_parts();
    if n > x.slots() {
        return Err(SchemaError::SlotOverflow {
            parts: n,
            slots: x.slots(),
        });
    }
    (0..n)
        .map(|node| {
            for attr in 0..NUM_ATTRIBUTES {
                if x.row(attr, node).iter().any(|v| !v.is_finite()) {
                    return Err(SchemaError::NonFinite(node));
                }
            }
            decode_node(x, node)
        })
        .collect()
}

fn decode_node(x: &AttributeTensor, node: usize) -> Result<PartAbstraction, SchemaError> {
    let b = x.row(Attribute::BBox.index(), node);
    let mut bbox_min = [0.0; 3];
    let mut bbox_max = [0.0; 3];
    for i in 0..3 {
        bbox_min[i] = b[i].min(b[i + 3]);
        bbox_max[i] = b[i].max(b[i + 3]);
    }
    let kind = JointType::snap(mean(x.row(Attribute::JointType.index(), node)));
    let label = SemanticLabel::snap(mean(x.row(Attribute::Label.index(), node)));

    let joint = if kind.is_moving() {
        let a = x.row(Attribute::JointAxis.index(), node);
        let raw = [a[0], a[1], a[2]];
        let norm = norm3(raw);
        if norm < MIN_AXIS_NORM {
            return Err(SchemaError::DegenerateAxis(node));
        }
        let axis_dir = if (norm - 1.0).abs() <= 1e-12 {
            raw
        } else {
            raw.map(|v| v / norm)
        };
        let axis_origin = [a[3], a[4], a[5]];
        let range = if kind.is_unbounded_or_static() {
            [0.0, 0.0]
        } else {
            let r = x.row(Attribute::JointRange.index(), node);
            let lo = mean(&[r[0], r[2], r[4]]);
            let hi = mean(&[r[1], r[3], r[5]]);
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            if kind.has_angular_range() {
                [lo * 360.0, hi * 360.0]
            } else {
                [lo, hi]
            }
        };
        JointSpec {
            kind,
            axis_dir,
            axis_origin,
            range,
        }
    } else {
        JointSpec::fixed()
    };
    Ok(PartAbstraction {
        bbox_min,
        bbox_max,
        joint,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_part() -> PartAbstraction {
        PartAbstraction::new(
            [-1.0, -1.0, -1.0],
            [1.0, 1.0, 1.0],
            JointSpec::fixed(),
            SemanticLabel::Base,
        )
    }

    fn door_object() -> ArticulatedObject {
        let graph = ArticulationGraph::new(vec![None, Some(0), Some(1)], Category::Storage).unwrap();
        let parts = vec![
            PartAbstraction::new(
                [-1.0, -1.0, -1.0],
                [1.0, 1.0, 0.8],
                JointSpec::fixed(),
                SemanticLabel::Base,
            ),
            PartAbstraction::new(
                [-1.0, -1.0, 0.8],
                [1.0, 1.0, 1.0],
                JointSpec::revolute([0.0, -1.0, 0.0], [-1.0, 0.0, 0.8], [0.0, 90.0]),
                SemanticLabel::Door,
            ),
            PartAbstraction::new(
                [0.7, -0.2, 1.0],
                [0.8, 0.2, 1.0],
                JointSpec::fixed(),
                SemanticLabel::Handle,
            ),
        ];
        ArticulatedObject::new("door", graph, parts).unwrap()
    }

    #[test]
    fn single_fixed_base_encoding() {
        let graph = ArticulationGraph::new(vec![None], Category::Storage).unwrap();
        let x = encode(&[base_part()], &graph, MAX_PARTS).unwrap();
        assert_eq!(x.row(0, 0), &[-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(x.row(1, 0), &[-1.0; 6]);
        assert!(x.as_slice()[x.offset(0, 1)..].iter().take(6).all(|v| *v == 0.0));
        assert_eq!(x.len(), 5 * 32 * 6);
    }

    #[test]
    fn enum_code_mapping() {
        assert_eq!(JointType::Revolute.encoded(), -0.5);
        assert_eq!(JointType::Screw.encoded(), 1.0);
        assert_eq!(SemanticLabel::Handle.encoded(), 1.0);
        assert_eq!(SemanticLabel::snap(1.0), SemanticLabel::Handle);
        // exactly between fixed (-1) and revolute (-0.5)
        assert_eq!(JointType::snap(-0.75), JointType::Fixed);
        assert_eq!(JointType::snap(-0.74), JointType::Revolute);
        assert_eq!(JointType::snap(-7.0), JointType::Fixed);
        assert_eq!(JointType::snap(9.0), JointType::Screw);
        assert_eq!(JointType::snap(f64::NAN), JointType::Fixed);
    }

    #[test]
    fn joint_type_slots_average_before_snapping() {
        let graph = ArticulationGraph::new(vec![None], Category::Storage).unwrap();
        let mut x = encode(&[base_part()], &graph, 4).unwrap();
        x.row_mut(1, 0)
            .copy_from_slice(&[-0.52, -0.49, -0.50, -0.50, -0.51, -0.48]);
        x.row_mut(2, 0).copy_from_slice(&[0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let parts = decode(&x, &graph).unwrap();
        assert_eq!(parts[0].joint.kind, JointType::Revolute);
        assert_eq!(parts[0].joint.axis_dir, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn box_corners_are_reordered() {
        let graph = ArticulationGraph::new(vec![None], Category::Storage).unwrap();
        let mut x = encode(&[base_part()], &graph, 1).unwrap();
        x.row_mut(0, 0).copy_from_slice(&[0.2, 0.0, 0.0, -0.2, 0.5, 0.5]);
        let p = &decode(&x, &graph).unwrap()[0];
        assert_eq!(p.bbox_min, [-0.2, 0.0, 0.0]);
        assert_eq!(p.bbox_max, [0.2, 0.5, 0.5]);
    }

    #[test]
    fn zero_axis_on_moving_joint_is_flagged() {
        let obj = door_object();
        let mut x = obj.encode(8).unwrap();
        x.row_mut(2, 1)[..3].fill(0.0);
        assert_eq!(decode(&x, &obj.graph), Err(SchemaError::DegenerateAxis(1)));
    }

    #[test]
    fn out_of_range_names_node_and_attribute() {
        let mut obj = door_object();
        obj.parts[1].joint.range = [0.0, 400.0];
        let err = obj.encode(8).unwrap_err();
        assert!(matches!(
            err,
            SchemaError::OutOfRange {
                node: 1,
                attribute: "joint_range",
                ..
            }
        ));
    }

    #[test]
    fn decode_encode_round_trip() {
        let obj = door_object();
        let x = obj.encode(MAX_PARTS).unwrap();
        let parts = decode(&x, &obj.graph).unwrap();
        assert_eq!(parts, obj.parts);
    }

    #[test]
    fn tree_validation_errors() {
        assert_eq!(
            ArticulationGraph::new(vec![None, None], Category::Safe),
            Err(SchemaError::MultipleRoots(0, 1))
        );
        assert_eq!(
            ArticulationGraph::new(vec![None, Some(2), Some(1)], Category::Safe),
            Err(SchemaError::Cycle(1))
        );
        assert_eq!(
            ArticulationGraph::new(vec![Some(1), Some(0)], Category::Safe),
            Err(SchemaError::NoRoot)
        );
        let mut big = vec![None];
        big.extend((0..32).map(|_| Some(0)));
        let err = ArticulationGraph::new(big, Category::Safe).unwrap_err();
        assert!(err.to_string().contains("exceeds K=32"));
    }

    #[test]
    fn adjacency_has_root_self_loop_only() {
        let g = ArticulationGraph::new(vec![None, Some(0)], Category::Oven).unwrap();
        let a = g.attn_adjacency(4);
        assert!(a[0][0] && a[0][1] && a[1][0] && !a[1][1]);
        for row in &a[2..] {
            assert!(row.iter().all(|v| !v));
        }
    }

    #[test]
    fn canonicalization_fits_unit_cube() {
        let graph = ArticulationGraph::new(vec![None, Some(0)], Category::Storage).unwrap();
        let parts = vec![
            PartAbstraction::new([0.0; 3], [4.0, 2.0, 2.0], JointSpec::fixed(), SemanticLabel::Base),
            PartAbstraction::new(
                [1.0, 1.0, 2.0],
                [3.0, 2.0, 2.5],
                JointSpec::prismatic([0.0, 0.0, 1.0], [2.0, 1.5, 2.5], [0.0, 1.0]),
                SemanticLabel::Drawer,
            ),
        ];
        let obj = ArticulatedObject::new("c", graph, parts).unwrap().canonicalized();
        let (lo, hi) = obj.bounds();
        assert_eq!(lo[0], -1.0);
        assert_eq!(hi[0], 1.0);
        assert_eq!(obj.parts[1].joint.range, [0.0, 0.5]);
        assert_eq!(obj.parts[1].joint.axis_origin, [0.0, 0.25, 0.625]);
    }

    fn arb_tree() -> impl Strategy<Value = Vec<Option<usize>>> {
        (1usize..12).prop_flat_map(|n| {
            proptest::collection::vec(any::<prop::sample::Index>(), n - 1).prop_map(move |idx| {
                let mut parents = vec![None];
                for (i, ix) in idx.iter().enumerate() {
                    parents.push(Some(ix.index(i + 1)));
                }
                parents
            })
        })
    }

    fn arb_object() -> impl Strategy<Value = ArticulatedObject> {
        arb_tree().prop_flat_map(|parents| {
            let n = parents.len();
            let part = (
                proptest::array::uniform3(-1.0f64..1.0),
                proptest::array::uniform3(-1.0f64..1.0),
                0usize..5,
                0usize..8,
                proptest::array::uniform3(-1.0f64..1.0),
                proptest::array::uniform3(-1.0f64..1.0),
                (-0.5f64..0.5, -0.5f64..0.5),
            );
            proptest::collection::vec(part, n).prop_map(move |raw| {
                let parts = raw
                    .into_iter()
                    .map(|(a, b, jt, lab, dir, origin, (r0, r1))| {
                        let kind = JointType::from_code(jt).unwrap();
                        let norm = norm3(dir).max(1e-3);
                        let dir = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
                        let dir = if norm3(dir) < 0.5 { [1.0, 0.0, 0.0] } else { dir };
                        let (lo, hi) = (r0.min(r1), r0.max(r1));
                        let joint = match kind {
                            JointType::Fixed => JointSpec::fixed(),
                            JointType::Continuous => JointSpec::continuous(dir, origin),
                            JointType::Revolute => JointSpec::revolute(dir, origin, [lo * 360.0, hi * 360.0]),
                            _ => JointSpec {
                                kind,
                                axis_dir: dir,
                                axis_origin: origin,
                                range: [lo, hi],
                            },
                        };
                        PartAbstraction::new(
                            std::array::from_fn(|i| a[i].min(b[i])),
                            std::array::from_fn(|i| a[i].max(b[i])),
                            joint,
                            SemanticLabel::from_code(lab).unwrap(),
                        )
                    })
                    .collect();
                let graph = ArticulationGraph::new(parents.clone(), Category::Storage).unwrap();
                ArticulatedObject::new("p", graph, parts).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_stable(obj in arb_object()) {
            let x = obj.encode(MAX_PARTS).unwrap();
            prop_assert!(x.as_slice().iter().all(|v| v.abs() <= 1.0));
            let parts = decode(&x, &obj.graph).unwrap();
            let x2 = encode(&parts, &obj.graph, MAX_PARTS).unwrap();
            for (a, b) in x.as_slice().iter().zip(x2.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (p, q) in parts.iter().zip(&obj.parts) {
                prop_assert_eq!(p.label, q.label);
                prop_assert_eq!(p.joint.kind, q.joint.kind);
                for i in 0..3 {
                    prop_assert!((p.bbox_min[i] - q.bbox_min[i]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn permutation_permutes_node_axis(obj in arb_object(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = obj.num_parts();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let x = obj.encode(MAX_PARTS).unwrap();
            let y = obj.permuted(&perm).encode(MAX_PARTS).unwrap();
            for attr in 0..NUM_ATTRIBUTES {
                for node in 0..n {
                    prop_assert_eq!(x.row(attr, node), y.row(attr, perm[node]));
                }
            }
            let a = obj.graph.attn_adjacency(MAX_PARTS);
            let b = obj.graph.permuted(&perm).attn_adjacency(MAX_PARTS);
            for i in 0..n {
                for k in 0..n {
                    prop_assert_eq!(a[i][k], b[perm[i]][perm[k]]);
                }
            }
        }

        #[test]
        fn adjacency_symmetric_except_root(parents in arb_tree()) {
            let g = ArticulationGraph::new(parents, Category::Table).unwrap();
            let a = g.attn_adjacency(MAX_PARTS);
            let root = g.root();
            for i in 0..MAX_PARTS {
                for k in 0..MAX_PARTS {
                    prop_assert_eq!(a[i][k], a[k][i]);
                    if i == k {
                        prop_assert_eq!(a[i][i], i == root);
                    }
                }
                if i >= g.num_parts() {
                    prop_assert!(a[i].iter().all(|v| !v));
                }
            }
        }
    }
}
