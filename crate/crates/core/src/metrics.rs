//! Distances between articulated objects and set-level metrics.
//!
//! All sampling seeds are derived from box contents combined with a caller
//! seed, so results do not depend on node order and `d(A, B)` uses exactly
//! the same samples as `d(B, A)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_range, Execution};
use crate::kinematics::{instantiate, KinematicsError, PosedBox, ARTICULATION_STATES};
use crate::knn::KdTree;
use crate::schema::{ArticulatedObject, Vec3};

/// Surface points per part for the instantiation distance.
pub const ID_POINTS_PER_PART: usize = 2048;
/// Interior samples per box for sampled vIoU.
pub const VIOU_SAMPLES: usize = 10_000;
/// Overall box diagonal both objects are scaled to before AID matching.
const AID_DIAGONAL: f64 = 2.0 * 1.732_050_807_568_877_2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("object '{0}' has no parts")]
    EmptyObject(String),
    #[error("empty object set")]
    EmptySet,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix(h: u64, v: u64) -> u64 {
    splitmix(h ^ splitmix(v))
}

/// Content hash of a posed box.
fn box_hash(b: &PosedBox) -> u64 {
    let mut h = 0x51_7C_C1_B7_27_22_0A_95;
    for v in b.local_min.iter().chain(&b.local_max) {
        h = mix(h, v.to_bits());
    }
    for v in b.transform.rotation.iter().chain(b.transform.translation.iter()) {
        // round away sub-ulp noise from composing transforms
        h = mix(h, ((v * 1e12).round() as i64) as u64);
    }
    h
}

/// Sampled volumetric IoU: `n` uniform interior points are drawn in each
/// box and tested against the other box. The intersection volume estimate
/// averages the two directions.
pub fn viou(a: &PosedBox, b: &PosedBox, n: usize, seed: u64) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if va <= 0.0 || vb <= 0.0 || n == 0 {
        return 0.0;
    }
    let (la, ha) = a.world_aabb();
    let (lb, hb) = b.world_aabb();
    if (0..3).any(|i| ha[i] < lb[i] || hb[i] < la[i]) {
        return 0.0;
    }
    let (hash_a, hash_b) = (box_hash(a), box_hash(b));
    let frac = |inside: &PosedBox, other: &PosedBox, s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let hits = (0..n)
            .filter(|_| other.contains(inside.sample_interior(&mut rng)))
            .count();
        hits as f64 / n as f64
    };
    let fa = frac(a, b, mix(mix(seed, hash_a), hash_b));
    let fb = frac(b, a, mix(mix(seed, hash_b), hash_a));
    let inter = 0.5 * (fa * va + fb * vb);
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Exact IoU of two axis-aligned boxes.
pub fn aabb_iou(a: (Vec3, Vec3), b: (Vec3, Vec3)) -> f64 {
    let vol = |lo: Vec3, hi: Vec3| (0..3).map(|i| (hi[i] - lo[i]).max(0.0)).product::<f64>();
    let inter = vol(
        std::array::from_fn(|i| a.0[i].max(b.0[i])),
        std::array::from_fn(|i| a.1[i].min(b.1[i])),
    );
    let union = vol(a.0, a.1) + vol(b.0, b.1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub points_per_part: usize,
    pub viou_samples: usize,
    pub states: Vec<f64>,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            points_per_part: ID_POINTS_PER_PART,
            viou_samples: VIOU_SAMPLES,
            states: ARTICULATION_STATES.to_vec(),
            seed: 0,
        }
    }
}

fn non_empty(obj: &ArticulatedObject) -> Result<(), MetricsError> {
    if obj.num_parts() == 0 {
        Err(MetricsError::EmptyObject(obj.id.clone()))
    } else {
        Ok(())
    }
}

fn surface_cloud(boxes: &[PosedBox], n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(boxes.len() * n);
    for b in boxes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, box_hash(b)));
        pts.extend(b.sample_surface(n, &mut rng));
    }
    pts
}

fn mean_nn(from: &[[f64; 3]], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest_sq(p).sqrt()).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer-L1: the mean of the two directed mean
/// nearest-neighbour Euclidean distances.
pub fn chamfer_l1(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let ta = KdTree::new(a);
    let tb = KdTree::new(b);
    0.5 * (mean_nn(a, &tb) + mean_nn(b, &ta))
}

/// Instantiation distance with separate sampling seeds for each side.
pub fn instantiation_distance_seeded(
    a: &ArticulatedObject,
    b: &ArticulatedObject,
    cfg: &MetricConfig,
    seed_a: u64,
    seed_b: u64,
) -> Result<f64, MetricsError> {
    non_empty(a)?;
    non_empty(b)?;
    let mut total = 0.0;
    for (s, &tau) in cfg.states.iter().enumerate() {
        let pa = surface_cloud(&instantiate(a, tau)?, cfg.points_per_part, mix(seed_a, s as u64));
        let pb = surface_cloud(&instantiate(b, tau)?, cfg.points_per_part, mix(seed_b, s as u64));
        total += chamfer_l1(&pa, &pb);
    }
    Ok(total / cfg.states.len() as f64)
}

/// ID: Chamfer-L1 between whole-object surface clouds at synchronized
/// articulation states, averaged over states.
pub fn instantiation_distance(
    a: &ArticulatedObject,
    b: &ArticulatedObject,
    cfg: &MetricConfig,
) -> Result<f64, MetricsError> {
    instantiation_distance_seeded(a, b, cfg, cfg.seed, cfg.seed)
}

/// Minimum-cost assignment of rows to columns (Kuhn-Munkres with
/// potentials). Returns, for each row, its column; with more rows than
/// columns the surplus rows get `None`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let col_of = hungarian(&t);
        let mut out = vec![None; rows];
        for (j, r) in col_of.into_iter().enumerate() {
            if let Some(i) = r {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // 1-based potentials formulation; rows <= cols.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

fn dist3(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>().sqrt()
}

/// Uniform scale about the origin taking the resting bounding-box
/// diagonal to a fixed length.
fn aid_scaled(obj: &ArticulatedObject) -> ArticulatedObject {
    let (lo, hi) = obj.bounds();
    let diag = dist3(lo, hi);
    let s = if diag > 0.0 { AID_DIAGONAL / diag } else { 1.0 };
    obj.transformed([0.0; 3], s)
}

/// Part indices in a content-derived order, so that pairing never depends
/// on how nodes happen to be numbered. Keys are snapped to the matching grid
/// so coincident parts stay tied after rescaling.
fn canonical_order(obj: &ArticulatedObject) -> Vec<usize> {
    let keys: Vec<Vec<f64>> = obj
        .parts
        .iter()
        .map(|p| {
            let j = &p.joint;
            let mut k = Vec::with_capacity(21);
            k.extend(p.center());
            k.extend(p.bbox_min);
            k.extend(p.bbox_max);
            k.push(p.label.code() as f64);
            k.push(j.kind.code() as f64);
            k.extend(j.axis_dir);
            k.extend(j.axis_origin);
            k.extend(j.range);
            k.iter_mut().for_each(|v| *v = (*v / MATCH_QUANTUM).round());
            k
        })
        .collect();
    let mut order: Vec<usize> = (0..obj.num_parts()).collect();
    order.sort_by(|&x, &y| {
        keys[x]
            .iter()
            .zip(&keys[y])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Matching costs are snapped to this grid so that rounding noise from
/// rescaling cannot flip a tie.
const MATCH_QUANTUM: f64 = 1e-9;

/// `(part of a, matched part of b)` in the canonical order of `a`.
fn aid_pairs(a: &ArticulatedObject, b: &ArticulatedObject) -> Vec<(usize, Option<usize>)> {
    let (sa, sb) = (aid_scaled(a), aid_scaled(b));
    // scaling keeps part indices, so the order of the scaled copy applies
    let (oa, ob) = (canonical_order(&sa), canonical_order(&sb));
    let cost: Vec<Vec<f64>> = oa
        .iter()
        .map(|&i| {
            ob.iter()
                .map(|&j| (dist3(sa.parts[i].center(), sb.parts[j].center()) / MATCH_QUANTUM).round())
                .collect()
        })
        .collect();
    hungarian(&cost)
        .into_iter()
        .zip(&oa)
        .map(|(c, &i)| (i, c.map(|c| ob[c])))
        .collect()
}

/// Part correspondence used by AID: optimal matching on resting box
/// centers after both objects are scaled to a common diagonal. Entry `i`
/// is the part of `b` matched to part `i` of `a`.
pub fn aid_matching(a: &ArticulatedObject, b: &ArticulatedObject) -> Vec<Option<usize>> {
    let mut out = vec![None; a.num_parts()];
    for (i, j) in aid_pairs(a, b) {
        out[i] = j;
    }
    out
}

/// AID: `1 −` mean sampled vIoU over matched part pairs and states;
/// unmatched parts count as zero overlap.
pub fn abstract_instantiation_distance(
    a: &ArticulatedObject,
    b: &ArticulatedObject,
    cfg: &MetricConfig,
) -> Result<f64, MetricsError> {
    non_empty(a)?;
    non_empty(b)?;
    let (sa, sb) = (aid_scaled(a), aid_scaled(b));
    let pairs = aid_pairs(a, b);
    let denom = a.num_parts().max(b.num_parts()) * cfg.states.len();
    let mut sum = 0.0;
    for &tau in &cfg.states {
        let ba = instantiate(&sa, tau)?;
        let bb = instantiate(&sb, tau)?;
        for &(i, j) in &pairs {
            if let Some(j) = j {
                sum += viou(&ba[i], &bb[j], cfg.viou_samples, cfg.seed);
            }
        }
    }
    Ok(1.0 - sum / denom as f64)
}

/// Sibling overlap of one object at the given states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AorReport {
    pub mean: f64,
    pub max: f64,
    pub pairs: usize,
}

pub fn aor_at_states(
    obj: &ArticulatedObject,
    states: &[f64],
    samples: usize,
    seed: u64,
) -> Result<AorReport, MetricsError> {
    let n = obj.num_parts();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if obj.graph.parent(i).is_some() && obj.graph.parent(i) == obj.graph.parent(j) {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() || states.is_empty() {
        return Ok(AorReport {
            mean: 0.0,
            max: 0.0,
            pairs: 0,
        });
    }
    let (mut sum, mut max) = (0.0, 0.0f64);
    for &tau in states {
        let boxes = instantiate(obj, tau)?;
        for &(i, j) in &pairs {
            let v = viou(&boxes[i], &boxes[j], samples, seed);
            sum += v;
            max = max.max(v);
        }
    }
    Ok(AorReport {
        mean: sum / (pairs.len() * states.len()) as f64,
        max,
        pairs: pairs.len(),
    })
}

/// AOR over the configured states; objects without sibling pairs score 0.
pub fn aor(obj: &ArticulatedObject, cfg: &MetricConfig) -> Result<AorReport, MetricsError> {
    aor_at_states(obj, &cfg.states, cfg.viou_samples, cfg.seed)
}

/// Dense `rows × cols` distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        DistanceMatrix { rows, cols, data }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

/// Which object distance a set metric uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Id,
    Aid,
}

pub fn object_distance(
    a: &ArticulatedObject,
    b: &ArticulatedObject,
    d: Distance,
    cfg: &MetricConfig,
) -> Result<f64, MetricsError> {
    match d {
        Distance::Id => instantiation_distance(a, b, cfg),
        Distance::Aid => abstract_instantiation_distance(a, b, cfg),
    }
}

pub fn distance_matrix(
    rows: &[ArticulatedObject],
    cols: &[ArticulatedObject],
    d: Distance,
    cfg: &MetricConfig,
    exec: Execution,
) -> Result<DistanceMatrix, MetricsError> {
    let c = cols.len();
    let data = map_range(exec, rows.len() * c, |k| {
        object_distance(&rows[k / c], &cols[k % c], d, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(DistanceMatrix {
        rows: rows.len(),
        cols: c,
        data,
    })
}

fn argmin(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best
}

/// MMD: mean over ground-truth columns of the minimum distance to any
/// generated row.
pub fn mmd(gen_to_gt: &DistanceMatrix) -> Result<f64, MetricsError> {
    if gen_to_gt.rows == 0 || gen_to_gt.cols == 0 {
        return Err(MetricsError::EmptySet);
    }
    let sum: f64 = (0..gen_to_gt.cols)
        .map(|j| argmin((0..gen_to_gt.rows).map(|i| gen_to_gt.get(i, j))).unwrap().1)
        .sum();
    Ok(sum / gen_to_gt.cols as f64)
}

/// COV: fraction of ground-truth columns that are the nearest neighbour
/// of at least one generated row (ties go to the lower index).
pub fn cov(gen_to_gt: &DistanceMatrix) -> Result<f64, MetricsError> {
    if gen_to_gt.rows == 0 || gen_to_gt.cols == 0 {
        return Err(MetricsError::EmptySet);
    }
    let mut hit = vec![false; gen_to_gt.cols];
    for i in 0..gen_to_gt.rows {
        let (j, _) = argmin((0..gen_to_gt.cols).map(|j| gen_to_gt.get(i, j))).unwrap();
        hit[j] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / gen_to_gt.cols as f64)
}

/// 1-NNA: leave-one-out 1-NN accuracy of predicting set membership over the
/// union of both sets. Ties go to the earlier element (generated first).
pub fn one_nna(gen_gen: &DistanceMatrix, gen_gt: &DistanceMatrix, gt_gt: &DistanceMatrix) -> Result<f64, MetricsError> {
    let (ng, nt) = (gen_gen.rows, gt_gt.rows);
    if ng == 0 || nt == 0 {
        return Err(MetricsError::EmptySet);
    }
    let d = |i: usize, j: usize| -> f64 {
        match (i < ng, j < ng) {
            (true, true) => gen_gen.get(i, j),
            (true, false) => gen_gt.get(i, j - ng),
            (false, true) => gen_gt.get(j, i - ng),
            (false, false) => gt_gt.get(i - ng, j - ng),
        }
    };
    let total = ng + nt;
    let mut correct = 0;
    for i in 0..total {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..total).filter(|&j| j != i) {
            let v = d(i, j);
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            if (j < ng) == (i < ng) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd_id: f64,
    pub mmd_aid: f64,
    pub cov_id: f64,
    pub cov_aid: f64,
    pub one_nna_aid: f64,
    pub mean_aor: f64,
    pub max_aor: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mmd_id,mmd_aid,cov_id,cov_aid,one_nna_aid,mean_aor,max_aor";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mmd_id, self.mmd_aid, self.cov_id, self.cov_aid, self.one_nna_aid, self.mean_aor, self.max_aor
        )
    }
}

/// All set metrics for generated objects against ground truth.
pub fn evaluate(
    generated: &[ArticulatedObject],
    ground_truth: &[ArticulatedObject],
    cfg: &MetricConfig,
    exec: Execution,
) -> Result<MetricReport, MetricsError> {
    let cols = evaluate_selected(generated, ground_truth, &[Distance::Id, Distance::Aid], cfg, exec)?;
    let get = |name: &str| {
        cols.iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| v)
            .unwrap_or(f64::NAN)
    };
    Ok(MetricReport {
        mmd_id: get("mmd_id"),
        mmd_aid: get("mmd_aid"),
        cov_id: get("cov_id"),
        cov_aid: get("cov_aid"),
        one_nna_aid: get("one_nna_aid"),
        mean_aor: get("mean_aor"),
        max_aor: get("max_aor"),
    })
}

/// Set metrics for the chosen distances only, as named report columns in CSV order.
/// AOR does not depend on a distance and is always included.
pub fn evaluate_selected(
    generated: &[ArticulatedObject],
    ground_truth: &[ArticulatedObject],
    distances: &[Distance],
    cfg: &MetricConfig,
    exec: Execution,
) -> Result<Vec<(&'static str, f64)>, MetricsError> {
    if generated.is_empty() || ground_truth.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut cols = Vec::new();
    let id = distances.contains(&Distance::Id);
    let aid = distances.contains(&Distance::Aid);
    let id_m = id
        .then(|| distance_matrix(generated, ground_truth, Distance::Id, cfg, exec))
        .transpose()?;
    let aid_m = aid
        .then(|| distance_matrix(generated, ground_truth, Distance::Aid, cfg, exec))
        .transpose()?;
    if let Some(m) = &id_m {
        cols.push(("mmd_id", mmd(m)?));
    }
    if let Some(m) = &aid_m {
        cols.push(("mmd_aid", mmd(m)?));
    }
    if let Some(m) = &id_m {
        cols.push(("cov_id", cov(m)?));
    }
    if let Some(m) = &aid_m {
        cols.push(("cov_aid", cov(m)?));
        let gg = distance_matrix(generated, generated, Distance::Aid, cfg, exec)?;
        let tt = distance_matrix(ground_truth, ground_truth, Distance::Aid, cfg, exec)?;
        cols.push(("one_nna_aid", one_nna(&gg, m, &tt)?));
    }
    let aors = map_range(exec, generated.len(), |i| aor(&generated[i], cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    cols.push(("mean_aor", aors.iter().map(|a| a.mean).sum::<f64>() / aors.len() as f64));
    cols.push(("max_aor", aors.iter().map(|a| a.max).fold(0.0, f64::max)));
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ArticulationGraph, Category, JointSpec, PartAbstraction, SemanticLabel};
    use rand::Rng;

    fn single(min: Vec3, max: Vec3) -> ArticulatedObject {
        ArticulatedObject::new(
            "b",
            ArticulationGraph::new(vec![None], Category::Storage).unwrap(),
            vec![PartAbstraction::new(min, max, JointSpec::fixed(), SemanticLabel::Base)],
        )
        .unwrap()
    }

    fn resting(min: Vec3, max: Vec3) -> PosedBox {
        PosedBox::resting(
            0,
            &PartAbstraction::new(min, max, JointSpec::fixed(), SemanticLabel::Base),
        )
    }

    #[test]
    fn viou_half_shift_is_one_third() {
        let a = resting([0.0; 3], [1.0; 3]);
        let b = resting([0.5, 0.0, 0.0], [1.5, 1.0, 1.0]);
        let v = viou(&a, &b, VIOU_SAMPLES, 0);
        assert!((v - 1.0 / 3.0).abs() < 0.02, "{v}");
        assert_eq!(v, viou(&b, &a, VIOU_SAMPLES, 0));
        assert_eq!(viou(&a, &a, 1000, 3), 1.0);
        assert_eq!(viou(&a, &resting([2.0; 3], [3.0; 3]), 1000, 3), 0.0);
    }

    #[test]
    fn aabb_iou_oracle() {
        assert!((aabb_iou(([0.0; 3], [1.0; 3]), ([0.5, 0.0, 0.0], [1.5, 1.0, 1.0])) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(aabb_iou(([0.0; 3], [1.0; 3]), ([1.0, 0.0, 0.0], [2.0, 1.0, 1.0])), 0.0);
    }

    #[test]
    fn aid_of_shifted_boxes() {
        let cfg = MetricConfig::default();
        let a = single([-0.5; 3], [0.5; 3]);
        let b = single([0.0, -0.5, -0.5], [1.0, 0.5, 0.5]);
        let d = abstract_instantiation_distance(&a, &b, &cfg).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 0.02, "{d}");
        assert_eq!(abstract_instantiation_distance(&a, &a, &cfg).unwrap(), 0.0);
        let far = single([3.0; 3], [4.0; 3]);
        assert_eq!(abstract_instantiation_distance(&a, &far, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn chamfer_oracle_small() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[0.0, 0.0, 0.5]];
        // a→b: (0.5 + sqrt(1.25))/2, b→a: 0.5
        let expect = 0.5 * ((0.5 + 1.25f64.sqrt()) / 2.0 + 0.5);
        assert!((chamfer_l1(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn chamfer_handles_duplicate_points() {
        let a = vec![[0.2, 0.2, 0.2]; 3000];
        let b = vec![[0.2, 0.2, 0.7]; 100];
        assert!((chamfer_l1(&a, &b) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(3, 3), (2, 4), (4, 2), (5, 5)] {
            let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.gen::<f64>()).collect()).collect();
            let got = hungarian(&cost);
            let got_cost: f64 = got.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[i][j])).sum();
            let k = r.min(c);
            assert_eq!(got.iter().filter(|j| j.is_some()).count(), k);
            // brute force over injective maps from the smaller side
            let best = brute(&cost, r, c);
            assert!((got_cost - best).abs() < 1e-12, "{r}x{c}");
        }
    }

    fn brute(cost: &[Vec<f64>], r: usize, c: usize) -> f64 {
        fn rec(
            cost: &[Vec<f64>],
            i: usize,
            used: &mut Vec<bool>,
            r: usize,
            c: usize,
            acc: f64,
            best: &mut f64,
            skips: usize,
        ) {
            if i == r {
                *best = best.min(acc);
                return;
            }
            if skips > 0 {
                rec(cost, i + 1, used, r, c, acc, best, skips - 1);
            }
            for j in 0..c {
                if !used[j] {
                    used[j] = true;
                    rec(cost, i + 1, used, r, c, acc + cost[i][j], best, skips);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; c], r, c, 0.0, &mut best, r.saturating_sub(c));
        best
    }

    #[test]
    fn set_metrics_basics() {
        let d = DistanceMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(mmd(&d).unwrap(), 0.0);
        assert_eq!(cov(&d).unwrap(), 1.0);
        let one = DistanceMatrix::from_fn(1, 4, |_, j| j as f64);
        assert_eq!(cov(&one).unwrap(), 0.25);
        // two far clusters
        let gg = DistanceMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.1 });
        let tt = gg.clone();
        let gt = DistanceMatrix::from_fn(3, 3, |_, _| 10.0);
        assert_eq!(one_nna(&gg, &gt, &tt).unwrap(), 1.0);
        // identical sets are indistinguishable through ties going generated-first
        let z = DistanceMatrix::from_fn(2, 2, |_, _| 0.0);
        assert_eq!(one_nna(&z, &z, &z).unwrap(), 0.5);
    }

    #[test]
    fn aor_static_overlaps() {
        let g = ArticulationGraph::new(vec![None, Some(0), Some(0)], Category::Storage).unwrap();
        let base = PartAbstraction::new([-2.0; 3], [2.0; 3], JointSpec::fixed(), SemanticLabel::Base);
        let mk = |min: Vec3, max: Vec3| PartAbstraction::new(min, max, JointSpec::fixed(), SemanticLabel::Shelf);
        let same = ArticulatedObject::new(
            "s",
            g.clone(),
            vec![base.clone(), mk([0.0; 3], [1.0; 3]), mk([0.0; 3], [1.0; 3])],
        )
        .unwrap();
        let r = aor(&same, &MetricConfig::default()).unwrap();
        assert!((r.mean - 1.0).abs() < 0.02);
        let half = ArticulatedObject::new(
            "h",
            g,
            vec![base, mk([0.0; 3], [1.0; 3]), mk([0.5, 0.0, 0.0], [1.5, 1.0, 1.0])],
        )
        .unwrap();
        let r = aor(&half, &MetricConfig::default()).unwrap();
        assert!((r.mean - 1.0 / 3.0).abs() < 0.02, "{}", r.mean);
        assert_eq!(r.pairs, 1);
        let lone = single([0.0; 3], [1.0; 3]);
        assert_eq!(aor(&lone, &MetricConfig::default()).unwrap().mean, 0.0);
    }
}
