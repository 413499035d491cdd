//! Minimal triangle meshes with Wavefront OBJ import/export.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::schema::Vec3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("mesh has no triangles")]
    Empty,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty() || self.vertices.is_empty()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    /// Closed box with 12 triangles, outward winding.
    pub fn cuboid(min: Vec3, max: Vec3) -> Self {
        let vertices = (0..8)
            .map(|c| {
                [
                    if c & 1 == 0 { min[0] } else { max[0] },
                    if c & 2 == 0 { min[1] } else { max[1] },
                    if c & 4 == 0 { min[2] } else { max[2] },
                ]
            })
            .collect();
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        TriMesh { vertices, faces }
    }

    /// Prism with an elliptic `sides`-gon cross-section inscribed in the box,
    /// extruded along `axis`. Touches every box face when `sides % 4 == 0`.
    pub fn prism(min: Vec3, max: Vec3, axis: usize, sides: usize) -> Self {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let c = [0.5 * (min[u] + max[u]), 0.5 * (min[v] + max[v])];
        let r = [0.5 * (max[u] - min[u]), 0.5 * (max[v] - min[v])];
        let mut vertices = Vec::with_capacity(2 * sides + 2);
        for end in [min[axis], max[axis]] {
            for s in 0..sides {
                let a = std::f64::consts::TAU * s as f64 / sides as f64;
                let mut p = [0.0; 3];
                p[axis] = end;
                p[u] = (c[0] + r[0] * a.cos()).clamp(min[u], max[u]);
                p[v] = (c[1] + r[1] * a.sin()).clamp(min[v], max[v]);
                vertices.push(p);
            }
        }
        for end in [min[axis], max[axis]] {
            let mut p = [0.0; 3];
            p[axis] = end;
            p[u] = c[0];
            p[v] = c[1];
            vertices.push(p);
        }
        let n = sides as u32;
        let (cap0, cap1) = (2 * n, 2 * n + 1);
        let mut faces = Vec::new();
        for s in 0..n {
            let t = (s + 1) % n;
            faces.push([s, t, n + t]);
            faces.push([s, n + t, n + s]);
            faces.push([cap0, t, s]);
            faces.push([cap1, n + s, n + t]);
        }
        TriMesh { vertices, faces }
    }

    /// Per-axis affine map taking the box `from` onto the box `to`.
    /// Flat source axes are mapped onto the target center.
    pub fn remapped(&self, from: (Vec3, Vec3), to: (Vec3, Vec3)) -> Self {
        let map = |p: &Vec3| -> Vec3 {
            std::array::from_fn(|i| {
                let src = from.1[i] - from.0[i];
                if src.abs() < 1e-12 {
                    0.5 * (to.0[i] + to.1[i])
                } else {
                    to.0[i] + (p[i] - from.0[i]) * (to.1[i] - to.0[i]) / src
                }
            })
        };
        TriMesh {
            vertices: self.vertices.iter().map(map).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn transformed(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        TriMesh {
            vertices: self.vertices.iter().map(|v| f(*v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Concatenates meshes into one.
    pub fn merged<'a>(meshes: impl IntoIterator<Item = &'a TriMesh>) -> TriMesh {
        let mut out = TriMesh::default();
        for m in meshes {
            let base = out.vertices.len() as u32;
            out.vertices.extend_from_slice(&m.vertices);
            out.faces
                .extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        out
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(32 * (self.vertices.len() + self.faces.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parses vertices and faces; polygons are fan-triangulated and
    /// `v/vt/vn` references reduced to the vertex index.
    pub fn parse_obj(text: &str, path: &str) -> Result<Self, MeshError> {
        let mut mesh = TriMesh::default();
        let err = |line: usize, message: String| MeshError::Parse {
            path: path.to_string(),
            line,
            message,
        };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let coords: Vec<f64> = tokens
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| err(lineno, e.to_string()))?;
                    if coords.len() != 3 {
                        return Err(err(lineno, "vertex needs three coordinates".into()));
                    }
                    mesh.vertices.push([coords[0], coords[1], coords[2]]);
                }
                Some("f") => {
                    let idx: Vec<u32> = tokens
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let v: i64 = head.parse().map_err(|_| err(lineno, format!("bad face index '{t}'")))?;
                            let n = mesh.vertices.len() as i64;
                            let resolved = if v < 0 { n + v } else { v - 1 };
                            if resolved < 0 || resolved >= n {
                                return Err(err(lineno, format!("face index {v} out of range")));
                            }
                            Ok(resolved as u32)
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(err(lineno, "face needs at least three vertices".into()));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn read_obj(path: &Path) -> Result<Self, MeshError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
            path: p.clone(),
            source,
        })?;
        let mesh = Self::parse_obj(&text, &p)?;
        if mesh.is_empty() {
            return Err(MeshError::Empty);
        }
        Ok(mesh)
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), MeshError> {
        fs::write(path, self.to_obj()).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
