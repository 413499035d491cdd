//! Graph-conditioned generation requests.
//!
//! A request fixes the category, the tree and every node's semantic label;
//! any subset of box, joint type, joint axis and joint range may also be
//! pinned per node. Pinned rows are inpainted during sampling and copied
//! verbatim into the decoded result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    sample_many, ConditionMask, DiffusionError, NoisePredictor, NoiseSchedule, SampleRequest, SamplerConfig,
};
use crate::schema::{
    decode, ArticulatedObject, ArticulationGraph, Attribute, AttributeTensor, Category, JointSpec, JointType,
    PartAbstraction, SchemaError, SemanticLabel, Vec3, ATTR_WIDTH,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCondition {
    pub min: Vec3,
    pub max: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisCondition {
    pub direction: Vec3,
    pub origin: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRequest {
    pub parent: Option<usize>,
    pub label: SemanticLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_type: Option<JointType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_axis: Option<AxisCondition>,
    /// Degrees for revolute and screw joints, normalized length for
    /// prismatic ones. Requires `joint_type`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_range: Option<[f64; 2]>,
}

impl NodeRequest {
    pub fn new(parent: Option<usize>, label: SemanticLabel) -> Self {
        NodeRequest {
            parent,
            label,
            bbox: None,
            joint_type: None,
            joint_axis: None,
            joint_range: None,
        }
    }
}

fn default_count() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub category: Category,
    pub nodes: Vec<NodeRequest>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid request: {}", join(.0))]
    Request(Vec<FieldError>),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("decoding sample {index}: {source}")]
    Decode {
        index: usize,
        #[source]
        source: SchemaError,
    },
}

fn join(errors: &[FieldError]) -> String {
    errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

fn in_unit(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite() && x.abs() <= 1.0)
}

impl GenerateRequest {
    /// The request's tree, with structural and attribute checks reported
    /// per field.
    pub fn validate(&self, slots: usize) -> Result<ArticulationGraph, GenerateError> {
        let mut errs = Vec::new();
        let mut push = |field: String, message: String| errs.push(FieldError { field, message });
        if self.count == 0 {
            push("count".into(), "must be at least 1".into());
        }
        if self.nodes.len() > slots {
            push(
                "nodes".into(),
                format!("{} nodes exceed the model's {slots} slots", self.nodes.len()),
            );
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let f = |name: &str| format!("nodes[{i}].{name}");
            if let Some(b) = &n.bbox {
                if !in_unit(&b.min) || !in_unit(&b.max) {
                    push(f("bbox"), "coordinates must lie in [-1, 1]".into());
                } else if (0..3).any(|k| b.min[k] > b.max[k]) {
                    push(f("bbox"), "min exceeds max".into());
                }
            }
            if let Some(a) = &n.joint_axis {
                let len = a.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !in_unit(&a.direction) || (len - 1.0).abs() > 1e-6 {
                    push(
                        f("joint_axis"),
                        format!("direction must be a unit vector (length {len})"),
                    );
                }
                if !in_unit(&a.origin) {
                    push(f("joint_axis"), "origin must lie in [-1, 1]".into());
                }
            }
            if let Some([lo, hi]) = n.joint_range {
                match n.joint_type {
                    None => push(f("joint_range"), "requires joint_type".into()),
                    Some(k) if k.is_unbounded_or_static() && (lo != 0.0 || hi != 0.0) => {
                        push(f("joint_range"), format!("{k} joint must use range [0, 0]"))
                    }
                    Some(k) => {
                        let s = if k.has_angular_range() { 360.0 } else { 1.0 };
                        if !(lo <= hi) || !in_unit(&[lo / s, hi / s]) {
                            push(
                                f("joint_range"),
                                "must satisfy lo <= hi within the normalized range".into(),
                            );
                        }
                    }
                }
            }
        }
        let graph = ArticulationGraph::new(self.nodes.iter().map(|n| n.parent).collect(), self.category);
        let graph = match graph {
            Ok(g) => Some(g),
            Err(e) => {
                push("nodes".into(), e.to_string());
                None
            }
        };
        match graph {
            Some(g) if errs.is_empty() => Ok(g),
            _ => Err(GenerateError::Request(errs)),
        }
    }

    /// Inpainting mask: labels always, plus every pinned attribute.
    pub fn condition(&self, slots: usize) -> ConditionMask {
        let mut known = AttributeTensor::zeros(slots);
        let mut rows = Vec::new();
        for (node, n) in self.nodes.iter().enumerate() {
            let mut set = |attr: Attribute, values: [f64; ATTR_WIDTH]| {
                known.row_mut(attr.index(), node).copy_from_slice(&values);
                rows.push((attr.index(), node));
            };
            set(Attribute::Label, [n.label.encoded(); ATTR_WIDTH]);
            if let Some(b) = &n.bbox {
                set(
                    Attribute::BBox,
                    [b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]],
                );
            }
            if let Some(k) = n.joint_type {
                set(Attribute::JointType, [k.encoded(); ATTR_WIDTH]);
            }
            if let Some(a) = &n.joint_axis {
                let (d, o) = (a.direction, a.origin);
                set(Attribute::JointAxis, [d[0], d[1], d[2], o[0], o[1], o[2]]);
            }
            if let (Some([lo, hi]), Some(k)) = (n.joint_range, n.joint_type) {
                let s = if k.has_angular_range() { 360.0 } else { 1.0 };
                let (lo, hi) = (lo / s, hi / s);
                set(Attribute::JointRange, [lo, hi, lo, hi, lo, hi]);
            }
        }
        let mut mask = ConditionMask::empty(known);
        for (attr, node) in rows {
            mask.condition_row(attr, node);
        }
        mask
    }

    /// Request reproducing `obj`'s tree and labels with the listed
    /// attributes pinned on every node.
    pub fn from_object(obj: &ArticulatedObject, pinned: &[Attribute], count: usize, seed: u64) -> Self {
        let nodes = obj
            .parts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut n = NodeRequest::new(obj.graph.parent(i), p.label);
                let moving = p.joint.kind.is_moving();
                for a in pinned {
                    match a {
                        Attribute::BBox => {
                            n.bbox = Some(BoxCondition {
                                min: p.bbox_min,
                                max: p.bbox_max,
                            })
                        }
                        Attribute::JointType => n.joint_type = Some(p.joint.kind),
                        Attribute::JointAxis => {
                            let f = JointSpec::fixed();
                            n.joint_axis = Some(AxisCondition {
                                direction: if moving { p.joint.axis_dir } else { f.axis_dir },
                                origin: if moving { p.joint.axis_origin } else { f.axis_origin },
                            })
                        }
                        Attribute::JointRange => n.joint_range = Some(p.joint.range),
                        Attribute::Label => {}
                    }
                }
                if n.joint_range.is_some() {
                    n.joint_type = Some(p.joint.kind);
                }
                n
            })
            .collect();
        GenerateRequest {
            category: obj.category(),
            nodes,
            count,
            seed,
        }
    }

    /// Seed of the `i`-th sample.
    pub fn sample_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub object: ArticulatedObject,
    pub seed: u64,
    pub tensor: AttributeTensor,
}

/// Copies pinned request values over a decoded part.
fn restore(part: &mut PartAbstraction, n: &NodeRequest) {
    part.label = n.label;
    if let Some(b) = &n.bbox {
        part.bbox_min = b.min;
        part.bbox_max = b.max;
    }
    if let Some(k) = n.joint_type {
        if k != part.joint.kind {
            part.joint = match k {
                JointType::Fixed => JointSpec::fixed(),
                _ => JointSpec {
                    kind: k,
                    range: if k.is_unbounded_or_static() {
                        [0.0, 0.0]
                    } else {
                        part.joint.range
                    },
                    ..part.joint
                },
            };
        }
    }
    if part.joint.kind.is_moving() {
        if let Some(a) = &n.joint_axis {
            part.joint.axis_dir = a.direction;
            part.joint.axis_origin = a.origin;
        }
    }
    if let Some(r) = n.joint_range {
        part.joint.range = r;
    }
}

/// Samples `req.count` objects; sample `i` uses seed `req.sample_seed(i)`.
pub fn generate<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: SamplerConfig,
    req: &GenerateRequest,
    id_prefix: &str,
) -> Result<Vec<Generated>, GenerateError> {
    let slots = predictor.slots();
    let graph = req.validate(slots)?;
    let cond = req.condition(slots);
    let jobs: Vec<SampleRequest<'_>> = (0..req.count)
        .map(|i| SampleRequest {
            graph: &graph,
            condition: Some(&cond),
            seed: req.sample_seed(i),
        })
        .collect();
    let tensors = sample_many(predictor, schedule, sampler, &jobs)?;
    tensors
        .into_iter()
        .enumerate()
        .map(|(index, tensor)| {
            let err = |source| GenerateError::Decode { index, source };
            let mut parts = decode(&tensor, &graph).map_err(err)?;
            for (p, n) in parts.iter_mut().zip(&req.nodes) {
                restore(p, n);
            }
            let object =
                ArticulatedObject::new(format!("{id_prefix}_{index:03}"), graph.clone(), parts).map_err(err)?;
            Ok(Generated {
                object,
                seed: req.sample_seed(index),
                tensor,
            })
        })
        .collect()
}
