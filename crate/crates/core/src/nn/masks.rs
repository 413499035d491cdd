//! Attention masks for the three attention stages, in dense form for
//! inspection and as sparse key lists for the forward pass.

use crate::schema::{ArticulationGraph, NUM_ATTRIBUTES};

/// Attention stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Local,
    Global,
    GraphRelation,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Local, Stage::Global, Stage::GraphRelation];
}

/// Token index of `(attr, node)` in a `5·K` sequence.
pub fn token_index(attr: usize, node: usize, slots: usize) -> usize {
    attr * slots + node
}

/// Dense `(5K)×(5K)` masks. Row = query token, column = key token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMasks {
    slots: usize,
    local: Vec<bool>,
    global: Vec<bool>,
    graph_relation: Vec<bool>,
}

impl AttentionMasks {
    pub fn tokens(&self) -> usize {
        NUM_ATTRIBUTES * self.slots
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn stage(&self, stage: Stage) -> &[bool] {
        match stage {
            Stage::Local => &self.local,
            Stage::Global => &self.global,
            Stage::GraphRelation => &self.graph_relation,
        }
    }

    pub fn get(&self, stage: Stage, query: usize, key: usize) -> bool {
        self.stage(stage)[query * self.tokens() + key]
    }

    /// Number of active entries.
    pub fn count(&self, stage: Stage) -> usize {
        self.stage(stage).iter().filter(|&&b| b).count()
    }

    /// Fully permissive masks; used to show that identity-at-init does not
    /// depend on masking.
    pub fn dense(slots: usize) -> Self {
        let n = NUM_ATTRIBUTES * slots;
        AttentionMasks {
            slots,
            local: vec![true; n * n],
            global: vec![true; n * n],
            graph_relation: vec![true; n * n],
        }
    }

    pub(crate) fn to_csr(&self) -> [Csr; 3] {
        let n = self.tokens();
        Stage::ALL.map(|s| {
            let m = self.stage(s);
            Csr::from_rows((0..n).map(|r| {
                let keys: Vec<u32> = (0..n).filter(|&c| m[r * n + c]).map(|c| c as u32).collect();
                if keys.is_empty() {
                    vec![r as u32]
                } else {
                    keys
                }
            }))
        })
    }
}

/// Builds the three masks for `graph` padded to `slots` nodes. Padded
/// query rows fall back to attending to themselves.
pub fn build_masks(graph: &ArticulationGraph, slots: usize) -> AttentionMasks {
    let n = graph.num_parts();
    let tokens = NUM_ATTRIBUTES * slots;
    let mut local = vec![false; tokens * tokens];
    let mut global = vec![false; tokens * tokens];
    let mut graph_relation = vec![false; tokens * tokens];
    for qa in 0..NUM_ATTRIBUTES {
        for qi in 0..slots {
            let q = token_index(qa, qi, slots);
            if qi >= n {
                local[q * tokens + q] = true;
                global[q * tokens + q] = true;
                graph_relation[q * tokens + q] = true;
                continue;
            }
            for ka in 0..NUM_ATTRIBUTES {
                for ki in 0..n {
                    let k = token_index(ka, ki, slots);
                    global[q * tokens + k] = true;
                    if ki == qi {
                        local[q * tokens + k] = true;
                    }
                    if graph.is_adjacent(qi, ki) {
                        graph_relation[q * tokens + k] = true;
                    }
                }
            }
        }
    }
    AttentionMasks {
        slots,
        local,
        global,
        graph_relation,
    }
}

/// Compressed sparse rows of key indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Csr {
    pub start: Vec<usize>,
    pub keys: Vec<u32>,
}

impl Csr {
    pub fn from_rows(rows: impl Iterator<Item = Vec<u32>>) -> Self {
        let mut csr = Csr {
            start: vec![0],
            keys: Vec::new(),
        };
        for r in rows {
            csr.keys.extend_from_slice(&r);
            csr.start.push(csr.keys.len());
        }
        csr
    }

    pub fn rows(&self) -> usize {
        self.start.len() - 1
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.keys[self.start[r]..self.start[r + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    /// Appends `other` with its key indices shifted by `offset`.
    pub fn append(&mut self, other: &Csr, offset: usize) {
        let base = self.keys.len();
        self.keys.extend(other.keys.iter().map(|k| k + offset as u32));
        self.start.extend(other.start[1..].iter().map(|s| s + base));
    }
}

/// Sparse keys for one sample laid out attribute-major over `nodes` node
/// positions, of which the first `graph.num_parts()` are valid.
pub(crate) fn sample_keys(graph: &ArticulationGraph, nodes: usize) -> [Csr; 3] {
    let n = graph.num_parts();
    let tok = |a: usize, i: usize| (a * nodes + i) as u32;
    let rows = NUM_ATTRIBUTES * nodes;
    let build = |f: &dyn Fn(usize, usize) -> Vec<u32>| {
        Csr::from_rows((0..rows).map(|r| {
            let (a, i) = (r / nodes, r % nodes);
            if i >= n {
                vec![r as u32]
            } else {
                f(a, i)
            }
        }))
    };
    let local = build(&|_, i| (0..NUM_ATTRIBUTES).map(|a| tok(a, i)).collect());
    let global = build(&|_, _| {
        (0..NUM_ATTRIBUTES)
            .flat_map(|a| (0..n).map(move |k| tok(a, k)))
            .collect()
    });
    let neighbours = |i: usize| -> Vec<usize> { (0..n).filter(|&k| graph.is_adjacent(i, k)).collect() };
    let graph_relation = build(&|_, i| {
        let nb = neighbours(i);
        (0..NUM_ATTRIBUTES)
            .flat_map(|a| nb.iter().map(move |&k| tok(a, k)))
            .collect()
    });
    [local, global, graph_relation]
}
