//! Posing articulated abstractions.
//!
//! Joint axes are expressed in the resting frame of the object. A part's world
//! transform is its parent's world transform composed with its own joint
//! transform, and every joint is driven by the same normalized state `τ ∈ [0,1]`
//! (joint value `lerp(lo, hi, τ)`).

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::TriMesh;
use crate::schema::{norm3, ArticulatedObject, JointType, PartAbstraction, Vec3};

/// Translation per full turn of a screw joint, in normalized units.
pub const SCREW_PITCH: f64 = 0.1;

/// Articulation states used by the metrics.
pub const ARTICULATION_STATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

const AXIS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("part {part}: joint axis has length {norm}, expected unit length")]
    NonUnitAxis { part: usize, norm: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(v: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: v,
        }
    }

    /// Rotation by `angle` radians about the line through `origin` along the
    /// unit vector `dir`.
    pub fn rotation_about_line(dir: Vector3<f64>, origin: Vector3<f64>, angle: f64) -> Self {
        let rotation = *Rotation3::from_axis_angle(&Unit::new_unchecked(dir), angle).matrix();
        RigidTransform {
            rotation,
            translation: origin - rotation * origin,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q.x, q.y, q.z]
    }

    pub fn apply_inverse(&self, p: Vec3) -> Vec3 {
        let q = self.rotation.transpose() * (Vector3::from(p) - self.translation);
        [q.x, q.y, q.z]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
    }
}

fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    lo + (hi - lo) * t
}

/// Transform of a single joint at state `tau`, using [`SCREW_PITCH`].
pub fn joint_transform(part: &PartAbstraction, tau: f64) -> Result<RigidTransform, KinematicsError> {
    joint_transform_indexed(part, 0, tau, SCREW_PITCH)
}

pub fn joint_transform_indexed(
    part: &PartAbstraction,
    index: usize,
    tau: f64,
    pitch: f64,
) -> Result<RigidTransform, KinematicsError> {
    let joint = &part.joint;
    if !joint.kind.is_moving() {
        return Ok(RigidTransform::identity());
    }
    let norm = norm3(joint.axis_dir);
    if (norm - 1.0).abs() > AXIS_TOLERANCE {
        return Err(KinematicsError::NonUnitAxis { part: index, norm });
    }
    let dir = Vector3::from(joint.axis_dir);
    let origin = Vector3::from(joint.axis_origin);
    let [lo, hi] = joint.range;
    Ok(match joint.kind {
        JointType::Fixed => unreachable!(),
        JointType::Revolute => RigidTransform::rotation_about_line(dir, origin, lerp(lo, hi, tau).to_radians()),
        JointType::Continuous => RigidTransform::rotation_about_line(dir, origin, (tau * 360.0).to_radians()),
        JointType::Prismatic => RigidTransform::translation(dir * lerp(lo, hi, tau)),
        JointType::Screw => {
            let s = lerp(lo, hi, tau);
            let spin = RigidTransform::rotation_about_line(dir, origin, (s / pitch * 360.0).to_radians());
            RigidTransform::translation(dir * s).compose(&spin)
        }
    })
}

/// An oriented box: a resting axis-aligned box carried by a rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosedBox {
    pub part: usize,
    pub local_min: Vec3,
    pub local_max: Vec3,
    pub transform: RigidTransform,
}

impl PosedBox {
    pub fn resting(part: usize, p: &PartAbstraction) -> Self {
        PosedBox {
            part,
            local_min: p.bbox_min,
            local_max: p.bbox_max,
            transform: RigidTransform::identity(),
        }
    }

    pub fn extent(&self) -> Vec3 {
        std::array::from_fn(|i| self.local_max[i] - self.local_min[i])
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    pub fn center(&self) -> Vec3 {
        self.transform
            .apply(std::array::from_fn(|i| 0.5 * (self.local_min[i] + self.local_max[i])))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        std::array::from_fn(|c| {
            self.transform.apply([
                if c & 1 == 0 {
                    self.local_min[0]
                } else {
                    self.local_max[0]
                },
                if c & 2 == 0 {
                    self.local_min[1]
                } else {
                    self.local_max[1]
                },
                if c & 4 == 0 {
                    self.local_min[2]
                } else {
                    self.local_max[2]
                },
            ])
        })
    }

    /// World-space axis-aligned hull of the corners.
    pub fn world_aabb(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in self.corners() {
            for i in 0..3 {
                lo[i] = lo[i].min(c[i]);
                hi[i] = hi[i].max(c[i]);
            }
        }
        (lo, hi)
    }

    /// Point membership, tested in the box frame.
    pub fn contains(&self, p: Vec3) -> bool {
        let q = self.transform.apply_inverse(p);
        (0..3).all(|i| q[i] >= self.local_min[i] && q[i] <= self.local_max[i])
    }

    /// Uniform point inside the box.
    pub fn sample_interior<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let q: Vec3 = std::array::from_fn(|i| lerp(self.local_min[i], self.local_max[i], rng.gen::<f64>()));
        self.transform.apply(q)
    }

    /// `n` points on the box surface, allocated to faces in proportion to
    /// area (largest remainder) and uniform within each face.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        let e = self.extent();
        let areas = [
            e[1] * e[2],
            e[1] * e[2],
            e[0] * e[2],
            e[0] * e[2],
            e[0] * e[1],
            e[0] * e[1],
        ];
        let total: f64 = areas.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return vec![self.center(); n];
        }
        let counts = apportion(&areas, n);
        let mut out = Vec::with_capacity(n);
        for (face, &count) in counts.iter().enumerate() {
            let axis = face / 2;
            let value = if face % 2 == 0 {
                self.local_min[axis]
            } else {
                self.local_max[axis]
            };
            for _ in 0..count {
                let mut q: Vec3 = std::array::from_fn(|i| lerp(self.local_min[i], self.local_max[i], rng.gen::<f64>()));
                q[axis] = value;
                out.push(self.transform.apply(q));
            }
        }
        out
    }

    pub fn to_mesh(&self) -> TriMesh {
        TriMesh::cuboid(self.local_min, self.local_max).transformed(|p| self.transform.apply(p))
    }
}

fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// World transforms of every part at state `tau`.
pub fn world_transforms(obj: &ArticulatedObject, tau: f64) -> Result<Vec<RigidTransform>, KinematicsError> {
    world_transforms_with_pitch(obj, tau, SCREW_PITCH)
}

pub fn world_transforms_with_pitch(
    obj: &ArticulatedObject,
    tau: f64,
    pitch: f64,
) -> Result<Vec<RigidTransform>, KinematicsError> {
    let mut world = vec![RigidTransform::identity(); obj.num_parts()];
    for node in obj.graph.topological_order() {
        let local = joint_transform_indexed(&obj.parts[node], node, tau, pitch)?;
        world[node] = match obj.graph.parent(node) {
            Some(p) => world[p].compose(&local),
            None => local,
        };
    }
    Ok(world)
}

/// Posed boxes of every part at state `tau`, in node order.
pub fn instantiate(obj: &ArticulatedObject, tau: f64) -> Result<Vec<PosedBox>, KinematicsError> {
    let world = world_transforms(obj, tau)?;
    Ok(obj
        .parts
        .iter()
        .zip(world)
        .enumerate()
        .map(|(i, (p, transform))| PosedBox {
            part: i,
            local_min: p.bbox_min,
            local_max: p.bbox_max,
            transform,
        })
        .collect())
}

/// Surface samples of every box (`n_per_part` each), deterministic for a seed.
pub fn sample_surface_points(boxes: &[PosedBox], n_per_part: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    boxes
        .iter()
        .flat_map(|b| b.sample_surface(n_per_part, &mut rng))
        .collect()
}

/// Single mesh of all posed boxes, for viewers and debugging.
pub fn posed_mesh(boxes: &[PosedBox]) -> TriMesh {
    let meshes: Vec<TriMesh> = boxes.iter().map(PosedBox::to_mesh).collect();
    TriMesh::merged(&meshes)
}
