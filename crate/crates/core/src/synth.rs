//! Procedural articulated objects for desk-scale training.
//!
//! Objects are laid out with `+y` up and the front facing `+z`, built in
//! metre-like units and then canonicalized into `[-1, 1]^3`. Every template
//! places movable parts in disjoint cells on the front of a base body:
//!
//! | category     | parts                                                     |
//! |--------------|-----------------------------------------------------------|
//! | Storage      | base + 1..=4 drawers/doors, each with a handle            |
//! | Table        | base + 1..=3 drawers with handles, optional 4 wheels      |
//! | Refrigerator | base + 1..=2 doors with handles + 0..=2 shelves           |
//! | Dishwasher   | base + door with handle + 1..=2 trays                     |
//! | Safe         | base + door with handle and knob                          |
//! | Oven         | base + door with handle + 1..=4 knobs + 0..=2 trays       |
//! | Washer       | base + door with handle + 1..=2 knobs + optional drawer   |
//! | Microwave    | base + door with handle + 1..=3 knobs                     |
//!
//! Doors hinge on a vertical edge of their own box and open toward `+z`;
//! drawers and trays slide along `+z`; knobs spin about `z`, wheels about `x`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_corpus, split_by_category, CorpusEntry, CorpusError};
use crate::mesh::TriMesh;
use crate::schema::{
    ArticulatedObject, ArticulationGraph, Category, JointSpec, JointType, PartAbstraction, SchemaError, SemanticLabel,
    Vec3,
};

/// Joint type every template assigns to a label.
pub fn expected_joint(label: SemanticLabel) -> JointType {
    match label {
        SemanticLabel::Base | SemanticLabel::Shelf | SemanticLabel::Handle => JointType::Fixed,
        SemanticLabel::Door => JointType::Revolute,
        SemanticLabel::Drawer | SemanticLabel::Tray => JointType::Prismatic,
        SemanticLabel::Knob | SemanticLabel::Wheel => JointType::Continuous,
    }
}

#[derive(Default)]
struct Builder {
    parents: Vec<Option<usize>>,
    parts: Vec<PartAbstraction>,
}

#[derive(Clone, Copy)]
struct Body {
    x: [f64; 2],
    y: [f64; 2],
    z: [f64; 2],
}

impl Body {
    fn front(&self) -> f64 {
        self.z[1]
    }
    fn depth(&self) -> f64 {
        self.z[1] - self.z[0]
    }
}

/// Rectangle on the front face: x range, y range.
type Cell = ([f64; 2], [f64; 2]);

const DOOR_T: f64 = 0.03;
const HANDLE_T: f64 = 0.04;

impl Builder {
    fn add(&mut self, parent: Option<usize>, min: Vec3, max: Vec3, joint: JointSpec, label: SemanticLabel) -> usize {
        self.parents.push(parent);
        self.parts.push(PartAbstraction::new(min, max, joint, label));
        self.parts.len() - 1
    }

    fn base(&mut self, body: Body) -> usize {
        self.add(
            None,
            [body.x[0], body.y[0], body.z[0]],
            [body.x[1], body.y[1], body.z[1]],
            JointSpec::fixed(),
            SemanticLabel::Base,
        )
    }

    fn handle(&mut self, parent: usize, x: [f64; 2], y: [f64; 2], z0: f64) {
        self.add(
            Some(parent),
            [x[0], y[0], z0],
            [x[1], y[1], z0 + HANDLE_T],
            JointSpec::fixed(),
            SemanticLabel::Handle,
        );
    }

    fn drawer(&mut self, base: usize, body: Body, cell: Cell, rng: &mut ChaCha8Rng) -> usize {
        let ([x0, x1], [y0, y1]) = cell;
        let z0 = body.z[0] + 0.1 * body.depth();
        let z1 = body.front() + DOOR_T;
        let travel = rng.gen_range(0.3..0.45) * (z1 - z0);
        let center = [0.5 * (x0 + x1), 0.5 * (y0 + y1), z1];
        let d = self.add(
            Some(base),
            [x0, y0, z0],
            [x1, y1, z1],
            JointSpec::prismatic([0.0, 0.0, 1.0], center, [0.0, travel]),
            SemanticLabel::Drawer,
        );
        let (w, h) = (x1 - x0, y1 - y0);
        let hw = rng.gen_range(0.25..0.5) * w;
        let hh = (0.12 * h).min(0.05);
        let yc = y0 + rng.gen_range(0.5..0.7) * h;
        self.handle(
            d,
            [center[0] - 0.5 * hw, center[0] + 0.5 * hw],
            [yc - 0.5 * hh, yc + 0.5 * hh],
            z1,
        );
        d
    }

    fn door(&mut self, base: usize, body: Body, cell: Cell, hinge_left: bool, rng: &mut ChaCha8Rng) -> usize {
        let ([x0, x1], [y0, y1]) = cell;
        let z0 = body.front();
        let z1 = z0 + DOOR_T;
        let open = rng.gen_range(80.0..120.0f64).round();
        let (axis, edge) = if hinge_left {
            ([0.0, -1.0, 0.0], x0)
        } else {
            ([0.0, 1.0, 0.0], x1)
        };
        let door = self.add(
            Some(base),
            [x0, y0, z0],
            [x1, y1, z1],
            JointSpec::revolute(axis, [edge, 0.5 * (y0 + y1), z0], [0.0, open]),
            SemanticLabel::Door,
        );
        let (w, h) = (x1 - x0, y1 - y0);
        let hw = (0.06 * w).clamp(0.015, 0.04);
        let far = if hinge_left { x1 - 0.08 * w } else { x0 + 0.08 * w };
        let hh = rng.gen_range(0.2..0.4) * h;
        let yc = 0.5 * (y0 + y1);
        self.handle(
            door,
            [far - 0.5 * hw, far + 0.5 * hw],
            [yc - 0.5 * hh, yc + 0.5 * hh],
            z1,
        );
        door
    }

    fn knob(&mut self, parent: usize, center: [f64; 2], r: f64, z0: f64) {
        let c = [center[0], center[1], z0 + 0.5 * HANDLE_T];
        self.add(
            Some(parent),
            [center[0] - r, center[1] - r, z0],
            [center[0] + r, center[1] + r, z0 + HANDLE_T],
            JointSpec::continuous([0.0, 0.0, 1.0], c),
            SemanticLabel::Knob,
        );
    }

    fn inner_slab(&mut self, base: usize, body: Body, y: [f64; 2], label: SemanticLabel, rng: &mut ChaCha8Rng) {
        let inset = 0.04 * (body.x[1] - body.x[0]);
        let z0 = body.z[0] + 0.05 * body.depth();
        let z1 = body.front() - 0.05 * body.depth();
        let joint = if label == SemanticLabel::Tray {
            let travel = rng.gen_range(0.3..0.45) * (z1 - z0);
            JointSpec::prismatic([0.0, 0.0, 1.0], [0.0, 0.5 * (y[0] + y[1]), z1], [0.0, travel])
        } else {
            JointSpec::fixed()
        };
        self.add(
            Some(base),
            [body.x[0] + inset, y[0], z0],
            [body.x[1] - inset, y[1], z1],
            joint,
            label,
        );
    }

    fn wheel(&mut self, base: usize, x: f64, z: f64, r: f64, y_top: f64) {
        let w = 0.4 * r;
        let c = [x, y_top - r, z];
        self.add(
            Some(base),
            [x - 0.5 * w, y_top - 2.0 * r, z - r],
            [x + 0.5 * w, y_top, z + r],
            JointSpec::continuous([1.0, 0.0, 0.0], c),
            SemanticLabel::Wheel,
        );
    }

    fn finish(self, id: &str, category: Category) -> Result<ArticulatedObject, SchemaError> {
        let graph = ArticulationGraph::new(self.parents, category)?;
        let obj = ArticulatedObject::new(id, graph, self.parts)?.canonicalized();
        obj.validate()?;
        Ok(obj)
    }
}

fn body(rng: &mut ChaCha8Rng, w: [f64; 2], h: [f64; 2], d: [f64; 2], lift: f64) -> Body {
    let (w, h, d) = (
        rng.gen_range(w[0]..w[1]),
        rng.gen_range(h[0]..h[1]),
        rng.gen_range(d[0]..d[1]),
    );
    Body {
        x: [-0.5 * w, 0.5 * w],
        y: [lift, lift + h],
        z: [-0.5 * d, 0.5 * d],
    }
}

/// Splits a rectangle into a `rows × cols` grid with `gap` margins.
fn grid(x: [f64; 2], y: [f64; 2], rows: usize, cols: usize, gap: f64) -> Vec<Cell> {
    let cw = (x[1] - x[0]) / cols as f64;
    let ch = (y[1] - y[0]) / rows as f64;
    let mut cells = Vec::with_capacity(rows * cols);
    for r in (0..rows).rev() {
        for c in 0..cols {
            let cx = x[0] + c as f64 * cw;
            let cy = y[0] + r as f64 * ch;
            cells.push(([cx + gap, cx + cw - gap], [cy + gap, cy + ch - gap]));
        }
    }
    cells
}

fn storage(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [1.0, 2.0], [1.0, 2.2], [0.6, 1.0], 0.0);
    let base = b.base(body);
    let k = rng.gen_range(1..=4usize);
    let cols = if k >= 2 && rng.gen_bool(0.4) { 2 } else { 1 };
    let rows = k.div_ceil(cols);
    let cells = grid(body.x, body.y, rows, cols, 0.02);
    let all_doors = rng.gen_bool(0.3);
    for (i, cell) in cells.into_iter().take(k).enumerate() {
        let door = all_doors || (cols == 1 && rows == 1 && rng.gen_bool(0.5)) || (rows <= 2 && rng.gen_bool(0.3));
        if door {
            let left = if cols == 2 { i % 2 == 0 } else { rng.gen_bool(0.5) };
            b.door(base, body, cell, left, rng);
        } else {
            b.drawer(base, body, cell, rng);
        }
    }
}

fn table(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let wheels = rng.gen_bool(0.4);
    let r = 0.06;
    let body = body(
        rng,
        [1.2, 2.0],
        [0.6, 0.9],
        [0.7, 1.1],
        if wheels { 2.0 * r + 0.01 } else { 0.0 },
    );
    let base = b.base(body);
    let k = rng.gen_range(1..=3usize);
    let apron = [body.y[1] - 0.22, body.y[1] - 0.04];
    for cell in grid(body.x, apron, 1, k, 0.03) {
        b.drawer(base, body, cell, rng);
    }
    if wheels {
        let (xs, zs) = (body.x, body.z);
        for (x, z) in [
            (xs[0] + r, zs[0] + r),
            (xs[1] - r, zs[0] + r),
            (xs[0] + r, zs[1] - r),
            (xs[1] - r, zs[1] - r),
        ] {
            b.wheel(base, x, z, r, body.y[0]);
        }
    }
}

fn refrigerator(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [0.7, 1.1], [1.5, 2.0], [0.65, 0.85], 0.0);
    let base = b.base(body);
    let doors = rng.gen_range(1..=2usize);
    if doors == 1 {
        b.door(base, body, grid(body.x, body.y, 1, 1, 0.01)[0], rng.gen_bool(0.5), rng);
    } else if rng.gen_bool(0.5) {
        for (i, cell) in grid(body.x, body.y, 1, 2, 0.01).into_iter().enumerate() {
            b.door(base, body, cell, i == 0, rng);
        }
    } else {
        let split = body.y[0] + rng.gen_range(0.6..0.7) * (body.y[1] - body.y[0]);
        let left = rng.gen_bool(0.5);
        b.door(base, body, grid(body.x, [split, body.y[1]], 1, 1, 0.01)[0], left, rng);
        b.door(base, body, grid(body.x, [body.y[0], split], 1, 1, 0.01)[0], left, rng);
    }
    let shelves = rng.gen_range(0..=2usize);
    let h = body.y[1] - body.y[0];
    for s in 0..shelves {
        let y = body.y[0] + h * (s + 1) as f64 / (shelves + 1) as f64;
        b.inner_slab(base, body, [y - 0.01, y + 0.01], SemanticLabel::Shelf, rng);
    }
}

fn dishwasher(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [0.55, 0.65], [0.8, 0.9], [0.55, 0.65], 0.0);
    let base = b.base(body);
    let panel = body.y[1] - 0.1;
    b.door(
        base,
        body,
        grid(body.x, [body.y[0], panel], 1, 1, 0.01)[0],
        rng.gen_bool(0.5),
        rng,
    );
    let trays = rng.gen_range(1..=2usize);
    let h = panel - body.y[0];
    for t in 0..trays {
        let y = body.y[0] + h * (t as f64 + 0.5) / trays as f64;
        b.inner_slab(base, body, [y - 0.04, y + 0.04], SemanticLabel::Tray, rng);
    }
}

fn safe(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [0.5, 0.9], [0.5, 0.9], [0.5, 0.8], 0.0);
    let base = b.base(body);
    let cell = grid(body.x, body.y, 1, 1, 0.04)[0];
    let left = rng.gen_bool(0.5);
    let door = b.door(base, body, cell, left, rng);
    let ([x0, x1], [y0, y1]) = cell;
    let kx = if left {
        x0 + 0.4 * (x1 - x0)
    } else {
        x1 - 0.4 * (x1 - x0)
    };
    let r = 0.06 * (x1 - x0);
    b.knob(door, [kx, y0 + 0.65 * (y1 - y0)], r, body.front() + DOOR_T);
    if rng.gen_bool(0.5) {
        b.inner_slab(
            base,
            body,
            [
                body.y[0] + 0.45 * (body.y[1] - body.y[0]),
                body.y[0] + 0.47 * (body.y[1] - body.y[0]),
            ],
            SemanticLabel::Shelf,
            rng,
        );
    }
}

fn oven(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [0.6, 0.9], [0.6, 0.9], [0.55, 0.7], 0.0);
    let base = b.base(body);
    let panel = body.y[1] - rng.gen_range(0.1..0.15);
    b.door(
        base,
        body,
        grid(body.x, [body.y[0], panel], 1, 1, 0.02)[0],
        rng.gen_bool(0.5),
        rng,
    );
    let knobs = rng.gen_range(1..=4usize);
    let r = 0.025;
    let yc = 0.5 * (panel + body.y[1]);
    for (k, cell) in grid(body.x, [panel, body.y[1]], 1, knobs, 0.0).into_iter().enumerate() {
        let _ = k;
        b.knob(base, [0.5 * (cell.0[0] + cell.0[1]), yc], r, body.front());
    }
    let trays = rng.gen_range(0..=2usize);
    let h = panel - body.y[0];
    for t in 0..trays {
        let y = body.y[0] + h * (t as f64 + 1.0) / (trays as f64 + 1.0);
        b.inner_slab(base, body, [y - 0.015, y + 0.015], SemanticLabel::Tray, rng);
    }
}

fn washer(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [0.55, 0.7], [0.8, 0.95], [0.55, 0.7], 0.0);
    let base = b.base(body);
    let panel = body.y[1] - 0.15;
    let door_w = 0.75 * (body.x[1] - body.x[0]);
    let xc = 0.5 * (body.x[0] + body.x[1]);
    let door_cell = ([xc - 0.5 * door_w, xc + 0.5 * door_w], [body.y[0] + 0.1, panel - 0.05]);
    b.door(base, body, door_cell, rng.gen_bool(0.5), rng);
    let drawer = rng.gen_bool(0.5);
    let mid = body.x[0] + 0.45 * (body.x[1] - body.x[0]);
    if drawer {
        b.drawer(
            base,
            body,
            ([body.x[0] + 0.02, mid - 0.02], [panel + 0.02, body.y[1] - 0.02]),
            rng,
        );
    }
    let knobs = rng.gen_range(1..=2usize);
    let yc = 0.5 * (panel + body.y[1]);
    for cell in grid([mid, body.x[1]], [panel, body.y[1]], 1, knobs, 0.0) {
        b.knob(base, [0.5 * (cell.0[0] + cell.0[1]), yc], 0.03, body.front());
    }
}

fn microwave(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let body = body(rng, [0.5, 0.8], [0.3, 0.45], [0.35, 0.5], 0.0);
    let base = b.base(body);
    let split = body.x[1] - rng.gen_range(0.1..0.16);
    b.door(base, body, grid([body.x[0], split], body.y, 1, 1, 0.01)[0], true, rng);
    let knobs = rng.gen_range(1..=3usize);
    let xc = 0.5 * (split + body.x[1]);
    for cell in grid([split, body.x[1]], body.y, knobs, 1, 0.0) {
        b.knob(base, [xc, 0.5 * (cell.1[0] + cell.1[1])], 0.02, body.front());
    }
}

/// One procedurally generated object, canonicalized and validated.
pub fn generate_object(category: Category, id: &str, seed: u64) -> Result<ArticulatedObject, SchemaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((category.code() as u64 + 1) << 56));
    let mut b = Builder::default();
    match category {
        Category::Storage => storage(&mut b, &mut rng),
        Category::Table => table(&mut b, &mut rng),
        Category::Refrigerator => refrigerator(&mut b, &mut rng),
        Category::Dishwasher => dishwasher(&mut b, &mut rng),
        Category::Safe => safe(&mut b, &mut rng),
        Category::Oven => oven(&mut b, &mut rng),
        Category::Washer => washer(&mut b, &mut rng),
        Category::Microwave => microwave(&mut b, &mut rng),
    }
    let mut obj = b.finish(id, category)?;
    obj.mesh_refs = (0..obj.num_parts()).map(|i| Some(format!("{id}_{i}.obj"))).collect();
    Ok(obj)
}

/// Generates `n` objects. `mix` weights categories; an empty mix is uniform
/// over all eight. Ids are `<category>_<index>`.
pub fn generate_synthetic_corpus(
    n: usize,
    mix: &[(Category, f64)],
    seed: u64,
) -> Result<Vec<ArticulatedObject>, SchemaError> {
    let weights: Vec<(Category, f64)> = if mix.is_empty() {
        Category::ALL.iter().map(|&c| (c, 1.0)).collect()
    } else {
        mix.to_vec()
    };
    let total: f64 = weights.iter().map(|w| w.1).sum();
    // Largest-remainder quotas keep the mix exact rather than sampled.
    let mut quotas: Vec<(Category, usize, f64)> = weights
        .iter()
        .map(|&(c, w)| {
            let q = n as f64 * w / total;
            (c, q.floor() as usize, q - q.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        quotas[i].1 += 1;
    }
    let mut objects = Vec::with_capacity(n);
    let mut index = 0u64;
    for (cat, count, _) in quotas {
        for j in 0..count {
            let id = format!("{}_{:04}", cat.name().to_lowercase(), j);
            objects.push(generate_object(
                cat,
                &id,
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index),
            )?);
            index += 1;
        }
    }
    Ok(objects)
}

/// Stand-in geometry for a part: prisms for knobs and wheels, boxes otherwise.
pub fn part_mesh(part: &PartAbstraction) -> TriMesh {
    match part.label {
        SemanticLabel::Knob => TriMesh::prism(part.bbox_min, part.bbox_max, 2, 12),
        SemanticLabel::Wheel => TriMesh::prism(part.bbox_min, part.bbox_max, 0, 16),
        _ => TriMesh::cuboid(part.bbox_min, part.bbox_max),
    }
}

/// Writes objects, a per-category split and one mesh per part.
pub fn write_synthetic_corpus(
    dir: &Path,
    objects: &[ArticulatedObject],
    train_fraction: f64,
) -> Result<(), CorpusError> {
    let splits = split_by_category(objects, train_fraction);
    let entries: Vec<CorpusEntry> = objects
        .iter()
        .zip(splits)
        .map(|(o, split)| CorpusEntry {
            object: o.clone(),
            split,
        })
        .collect();
    save_corpus(dir, &entries, "meshes")?;
    for obj in objects {
        for (part, mesh_ref) in obj.parts.iter().zip(&obj.mesh_refs) {
            if let Some(r) = mesh_ref {
                let path = dir.join("meshes").join(r);
                part_mesh(part).write_obj(&path)?;
            }
        }
    }
    Ok(())
}
