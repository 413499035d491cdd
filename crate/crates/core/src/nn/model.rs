//! The attribute-attention denoiser.
//!
//! Tokens are one per `(attribute, node)` pair. Each block runs local,
//! global and graph-relation attention followed by a feed-forward layer,
//! every sublayer wrapped in adaLN-Zero modulation regressed from the
//! summed timestep and category embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::masks::{sample_keys, AttentionMasks, Csr};
use super::real::{matmul, matmul_nt, matmul_tn, Real};
use super::NnError;
use crate::diffusion::NoisePredictor;
use crate::exec::{map_slice, Execution};
use crate::schema::{ArticulationGraph, AttributeTensor, Category, ATTR_WIDTH, MAX_PARTS, NUM_ATTRIBUTES};

const LN_EPS: f64 = 1e-6;
const SUBLAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub token_dim: usize,
    /// Node slots `K`.
    pub slots: usize,
    /// Attribute row width `M`.
    pub attr_width: usize,
    pub num_attributes: usize,
    pub num_categories: usize,
    /// Feed-forward hidden width as a multiple of `token_dim`.
    pub ffn_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl DenoiserConfig {
    pub fn full() -> Self {
        DenoiserConfig {
            layers: 12,
            heads: 32,
            token_dim: 128,
            slots: MAX_PARTS,
            attr_width: ATTR_WIDTH,
            num_attributes: NUM_ATTRIBUTES,
            num_categories: Category::ALL.len(),
            ffn_mult: 4,
        }
    }

    /// Desk-scale preset.
    pub fn desk() -> Self {
        DenoiserConfig {
            layers: 6,
            heads: 8,
            token_dim: 64,
            ..Self::full()
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn tiny() -> Self {
        DenoiserConfig {
            layers: 1,
            heads: 2,
            token_dim: 8,
            slots: 3,
            ..Self::full()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.layers == 0 || self.heads == 0 || self.token_dim == 0 || self.ffn_mult == 0 {
            return bad("layers, heads, token_dim and ffn_mult must be positive".into());
        }
        if self.token_dim % self.heads != 0 {
            return bad(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            ));
        }
        if self.token_dim % 2 != 0 {
            return bad("token_dim must be even for the timestep features".into());
        }
        if self.slots == 0 || self.slots > MAX_PARTS {
            return bad(format!("slots must be in 1..={MAX_PARTS}"));
        }
        if self.attr_width != ATTR_WIDTH || self.num_attributes != NUM_ATTRIBUTES {
            return bad(format!("tensor rows are fixed at {NUM_ATTRIBUTES}x{ATTR_WIDTH}"));
        }
        if self.num_categories < Category::ALL.len() {
            return bad(format!("num_categories must be at least {}", Category::ALL.len()));
        }
        Ok(())
    }
}

/// Which of the four sublayers (LA, GA, GRA, FFN) run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub sublayers: [bool; SUBLAYERS],
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            sublayers: [true; SUBLAYERS],
        }
    }
}

impl ForwardOptions {
    pub fn only(index: usize) -> Self {
        let mut sublayers = [false; SUBLAYERS];
        sublayers[index] = true;
        ForwardOptions { sublayers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    #[serde(skip, default = "default_init")]
    init: Init,
}

fn default_init() -> Init {
    Init::Zeros
}

impl PartialEq for TensorInfo {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.offset == other.offset
    }
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    modulation: Lin,
    qkv: [Lin; 3],
    proj: [Lin; 3],
    ff1: Lin,
    ff2: Lin,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Lin,
    attr_emb: usize,
    node_emb: usize,
    time: Lin,
    cat_emb: usize,
    blocks: Vec<BlockLayout>,
    final_gamma: usize,
    final_beta: usize,
    out: Lin,
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Layout {
    fn new(c: &DenoiserConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut alloc = |name: String, shape: Vec<usize>, init: Init| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                offset,
                init,
            });
            offset
        };
        let lin = |alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                   name: &str,
                   din: usize,
                   dout: usize,
                   init: Init| {
            let w = alloc(format!("{name}.weight"), vec![din, dout], init);
            let b = alloc(format!("{name}.bias"), vec![dout], Init::Zeros);
            Lin { w, b, din, dout }
        };
        let d = c.token_dim;
        let input = lin(&mut alloc, "embed.input", c.attr_width, d, Init::Xavier);
        let attr_emb = alloc("embed.attribute".into(), vec![c.num_attributes, d], Init::Normal(0.5));
        let node_emb = alloc("embed.node".into(), vec![c.slots, d], Init::Normal(0.5));
        let time = lin(&mut alloc, "embed.time", d, d, Init::Xavier);
        let cat_emb = alloc("embed.category".into(), vec![c.num_categories, d], Init::Normal(0.5));
        let blocks = (0..c.layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                BlockLayout {
                    modulation: lin(
                        &mut alloc,
                        &format!("{p}.modulation"),
                        d,
                        3 * SUBLAYERS * d,
                        Init::Zeros,
                    ),
                    qkv: ["local", "global", "graph"]
                        .map(|s| lin(&mut alloc, &format!("{p}.{s}.qkv"), d, 3 * d, Init::Xavier)),
                    proj: ["local", "global", "graph"]
                        .map(|s| lin(&mut alloc, &format!("{p}.{s}.proj"), d, d, Init::Xavier)),
                    ff1: lin(&mut alloc, &format!("{p}.ffn.fc1"), d, c.ffn_mult * d, Init::Xavier),
                    ff2: lin(&mut alloc, &format!("{p}.ffn.fc2"), c.ffn_mult * d, d, Init::Xavier),
                }
            })
            .collect();
        let final_gamma = alloc("final_norm.weight".into(), vec![d], Init::Ones);
        let final_beta = alloc("final_norm.bias".into(), vec![d], Init::Zeros);
        let out = lin(&mut alloc, "head", d, c.attr_width, Init::Normal(0.02));
        Layout {
            input,
            attr_emb,
            node_emb,
            time,
            cat_emb,
            blocks,
            final_gamma,
            final_beta,
            out,
            tensors,
            total,
        }
    }
}

/// A ragged batch of token rows from one or more samples.
pub(crate) struct Batch<R> {
    rows: usize,
    x: Vec<R>,
    row_attr: Vec<usize>,
    row_node: Vec<usize>,
    row_sample: Vec<usize>,
    t: Vec<usize>,
    cat: Vec<usize>,
    sample_start: Vec<usize>,
    sample_nodes: Vec<usize>,
    keys: [Csr; 3],
}

impl<R: Real> Batch<R> {
    /// Rows are laid out sample by sample, attribute-major within a sample.
    /// With `valid_only` padded nodes are dropped entirely.
    fn new(items: &[(&AttributeTensor, usize, &ArticulationGraph)], valid_only: bool) -> Self {
        let mut b = Batch {
            rows: 0,
            x: Vec::new(),
            row_attr: Vec::new(),
            row_node: Vec::new(),
            row_sample: Vec::new(),
            t: Vec::new(),
            cat: Vec::new(),
            sample_start: vec![0],
            sample_nodes: Vec::new(),
            keys: [
                Csr::from_rows(std::iter::empty()),
                Csr::from_rows(std::iter::empty()),
                Csr::from_rows(std::iter::empty()),
            ],
        };
        for (s, (x, t, g)) in items.iter().enumerate() {
            let nodes = if valid_only { g.num_parts() } else { x.slots() };
            let offset = b.rows;
            for a in 0..NUM_ATTRIBUTES {
                for i in 0..nodes {
                    b.x.extend(x.row(a, i).iter().map(|&v| R::of(v)));
                    b.row_attr.push(a);
                    b.row_node.push(i);
                    b.row_sample.push(s);
                }
            }
            b.rows += NUM_ATTRIBUTES * nodes;
            let keys = sample_keys(g, nodes);
            for (dst, src) in b.keys.iter_mut().zip(&keys) {
                dst.append(src, offset);
            }
            b.t.push(*t);
            b.cat.push(g.category().code());
            b.sample_start.push(b.rows);
            b.sample_nodes.push(nodes);
        }
        b
    }

    fn samples(&self) -> usize {
        self.t.len()
    }
}

struct SubCache<R> {
    u: Vec<R>,
    rstd: Vec<R>,
    v: Vec<R>,
    y: Vec<R>,
    inner: Inner<R>,
}

enum Inner<R> {
    Attn { qkv: Vec<R>, probs: Vec<R>, a: Vec<R> },
    Ffn { z: Vec<R>, th: Vec<R>, g: Vec<R> },
}

pub(crate) struct Cache<R> {
    tfeat: Vec<R>,
    cvec: Vec<R>,
    sc: Vec<R>,
    mods: Vec<Vec<R>>,
    subs: Vec<Vec<Option<SubCache<R>>>>,
    fin_u: Vec<R>,
    fin_rstd: Vec<R>,
    fin_o: Vec<R>,
}

/// One noised training example.
pub struct NoisedSample<'a> {
    pub x_t: AttributeTensor,
    pub t: usize,
    pub graph: &'a ArticulationGraph,
    pub eps: AttributeTensor,
    /// Multiplier of this sample's masked MSE in the total loss.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Denoiser<R: Real = f32> {
    config: DenoiserConfig,
    layout: Layout,
    params: Vec<R>,
}

impl<R: Real> Denoiser<R> {
    /// Fresh network with zero-initialised adaLN gates.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![R::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &layout.tensors {
            let slice = &mut params[t.offset..t.offset + t.len()];
            match t.init {
                Init::Zeros => {}
                Init::Ones => slice.fill(R::one()),
                Init::Xavier => {
                    let (fan_in, fan_out) = (t.shape[0], t.shape[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new(-a, a);
                    slice.iter_mut().for_each(|p| *p = R::of(dist.sample(&mut rng)));
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).unwrap();
                    slice.iter_mut().for_each(|p| *p = R::of(dist.sample(&mut rng)));
                }
            }
        }
        Ok(Denoiser { config, layout, params })
    }

    /// Rebuilds a network from a flat parameter vector.
    pub fn from_params(config: DenoiserConfig, params: Vec<R>) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(NnError::ShapeMismatch {
                expected: layout.total,
                found: params.len(),
            });
        }
        Ok(Denoiser { config, layout, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    /// Overwrites every parameter, gates included, with `N(0, std²)` draws.
    pub fn randomize_all(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).unwrap();
        for p in &mut self.params {
            *p = R::of(dist.sample(&mut rng));
        }
    }

    /// Sets the adaLN modulation regressor of every block to zero.
    pub fn zero_gates(&mut self) {
        for b in self.layout.blocks.clone() {
            let m = b.modulation;
            self.params[m.w..m.w + m.din * m.dout].fill(R::zero());
            self.params[m.b..m.b + m.dout].fill(R::zero());
        }
    }

    /// Zeroes only the gate outputs of the given sublayer in every block.
    pub fn zero_sublayer_gate(&mut self, sublayer: usize) {
        let d = self.config.token_dim;
        for b in self.layout.blocks.clone() {
            let m = b.modulation;
            let cols = (3 * sublayer + 2) * d..(3 * sublayer + 3) * d;
            for r in 0..m.din {
                for c in cols.clone() {
                    self.params[m.w + r * m.dout + c] = R::zero();
                }
            }
            for c in cols {
                self.params[m.b + c] = R::zero();
            }
        }
    }

    fn p(&self, offset: usize, len: usize) -> &[R] {
        &self.params[offset..offset + len]
    }

    fn linear(&self, l: Lin, x: &[R], rows: usize) -> Vec<R> {
        let mut y = vec![R::zero(); rows * l.dout];
        for r in 0..rows {
            y[r * l.dout..(r + 1) * l.dout].copy_from_slice(self.p(l.b, l.dout));
        }
        matmul(x, self.p(l.w, l.din * l.dout), &mut y, rows, l.din, l.dout, true);
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn linear_backward(&self, l: Lin, x: &[R], dy: &[R], rows: usize, grad: &mut [R], need_dx: bool) -> Vec<R> {
        matmul_tn(x, dy, &mut grad[l.w..l.w + l.din * l.dout], rows, l.din, l.dout, true);
        let gb = &mut grad[l.b..l.b + l.dout];
        for r in 0..rows {
            for (g, v) in gb.iter_mut().zip(&dy[r * l.dout..(r + 1) * l.dout]) {
                *g += *v;
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let mut dx = vec![R::zero(); rows * l.din];
        matmul_nt(dy, self.p(l.w, l.din * l.dout), &mut dx, rows, l.dout, l.din, false);
        dx
    }

    fn time_features(&self, t: usize) -> Vec<R> {
        let d = self.config.token_dim;
        let half = d / 2;
        let mut f = vec![R::zero(); d];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            f[i] = R::of(arg.cos());
            f[half + i] = R::of(arg.sin());
        }
        f
    }

    /// Timestep and category embeddings `(t̂, ĉ)`.
    pub fn embed_condition(&self, t: usize, category: usize) -> Result<(Vec<R>, Vec<R>), NnError> {
        if category >= self.config.num_categories {
            return Err(NnError::UnknownCategory(category));
        }
        let d = self.config.token_dim;
        let t_hat = self.linear(self.layout.time, &self.time_features(t), 1);
        let c_hat = self.p(self.layout.cat_emb + category * d, d).to_vec();
        Ok((t_hat, c_hat))
    }

    /// Embeds all `5·K` tokens of `x`, ordered `attr·K + node`.
    pub fn embed_tokens(&self, x: &AttributeTensor) -> Vec<R> {
        let k = x.slots();
        let rows = NUM_ATTRIBUTES * k;
        let xs: Vec<R> = x.as_slice().iter().map(|&v| R::of(v)).collect();
        let mut h = self.linear(self.layout.input, &xs, rows);
        self.add_positions(&mut h, (0..rows).map(|r| (r / k, r % k)));
        h
    }

    fn add_positions(&self, h: &mut [R], rows: impl Iterator<Item = (usize, usize)>) {
        let d = self.config.token_dim;
        for (r, (a, i)) in rows.enumerate() {
            let ae = self.p(self.layout.attr_emb + a * d, d);
            let ne = self.p(self.layout.node_emb + i * d, d);
            for c in 0..d {
                h[r * d + c] += ae[c] + ne[c];
            }
        }
    }

    /// One attribute-attention block applied to a single token sequence.
    pub fn aab_forward(
        &self,
        block: usize,
        tokens: &[R],
        t_hat: &[R],
        c_hat: &[R],
        masks: &AttentionMasks,
        opts: &ForwardOptions,
    ) -> Vec<R> {
        let d = self.config.token_dim;
        let rows = masks.tokens();
        assert_eq!(tokens.len(), rows * d);
        let cvec: Vec<R> = t_hat.iter().zip(c_hat).map(|(a, b)| *a + *b).collect();
        let sc: Vec<R> = cvec.iter().map(|&v| silu(v)).collect();
        let batch = Batch::<R> {
            rows,
            x: Vec::new(),
            row_attr: Vec::new(),
            row_node: Vec::new(),
            row_sample: vec![0; rows],
            t: vec![0],
            cat: vec![0],
            sample_start: vec![0, rows],
            sample_nodes: vec![masks.slots()],
            keys: masks.to_csr(),
        };
        let mut h = tokens.to_vec();
        let mods = self.linear(self.layout.blocks[block].modulation, &sc, 1);
        for j in 0..SUBLAYERS {
            if opts.sublayers[j] {
                self.sublayer_forward(block, j, &mut h, &mods, &batch);
            }
        }
        h
    }

    /// Noise prediction over all `5·K` slots, padded ones included.
    pub fn denoise(&self, x_t: &AttributeTensor, t: usize, graph: &ArticulationGraph) -> AttributeTensor {
        self.denoise_with(x_t, t, graph, &ForwardOptions::default())
    }

    pub fn denoise_with(
        &self,
        x_t: &AttributeTensor,
        t: usize,
        graph: &ArticulationGraph,
        opts: &ForwardOptions,
    ) -> AttributeTensor {
        let batch = Batch::new(&[(x_t, t, graph)], false);
        let (out, _) = self.forward(&batch, opts);
        AttributeTensor::from_vec(x_t.slots(), out.iter().map(|v| v.as_f64()).collect())
    }

    /// Noise prediction computed on valid nodes only; padded slots are 0.
    pub fn predict_valid(&self, x_t: &AttributeTensor, t: usize, graph: &ArticulationGraph) -> AttributeTensor {
        let batch = Batch::new(&[(x_t, t, graph)], true);
        let (out, _) = self.forward(&batch, &ForwardOptions::default());
        let mut eps = AttributeTensor::zeros(x_t.slots());
        let m = self.config.attr_width;
        for r in 0..batch.rows {
            let row = eps.row_mut(batch.row_attr[r], batch.row_node[r]);
            for (dst, src) in row.iter_mut().zip(&out[r * m..(r + 1) * m]) {
                *dst = src.as_f64();
            }
        }
        eps
    }

    fn forward(&self, batch: &Batch<R>, opts: &ForwardOptions) -> (Vec<R>, Cache<R>) {
        let cfg = &self.config;
        let d = cfg.token_dim;
        let s = batch.samples();
        let rows = batch.rows;

        let mut tfeat = Vec::with_capacity(s * d);
        for &t in &batch.t {
            tfeat.extend(self.time_features(t));
        }
        let mut cvec = self.linear(self.layout.time, &tfeat, s);
        for (i, &c) in batch.cat.iter().enumerate() {
            let ce = self.p(self.layout.cat_emb + c * d, d);
            for k in 0..d {
                cvec[i * d + k] += ce[k];
            }
        }
        let sc: Vec<R> = cvec.iter().map(|&v| silu(v)).collect();

        let mut h = self.linear(self.layout.input, &batch.x, rows);
        self.add_positions(
            &mut h,
            batch.row_attr.iter().copied().zip(batch.row_node.iter().copied()),
        );

        let mut mods = Vec::with_capacity(cfg.layers);
        let mut subs = Vec::with_capacity(cfg.layers);
        for b in 0..cfg.layers {
            let m = self.linear(self.layout.blocks[b].modulation, &sc, s);
            let mut caches = Vec::with_capacity(SUBLAYERS);
            for j in 0..SUBLAYERS {
                caches.push(opts.sublayers[j].then(|| self.sublayer_forward(b, j, &mut h, &m, batch)));
            }
            mods.push(m);
            subs.push(caches);
        }

        let (fin_u, fin_rstd) = layer_norm(&h, d);
        let gamma = self.p(self.layout.final_gamma, d);
        let beta = self.p(self.layout.final_beta, d);
        let mut fin_o = fin_u.clone();
        for r in 0..rows {
            for c in 0..d {
                fin_o[r * d + c] = fin_u[r * d + c] * gamma[c] + beta[c];
            }
        }
        let out = self.linear(self.layout.out, &fin_o, rows);
        let cache = Cache {
            tfeat,
            cvec,
            sc,
            mods,
            subs,
            fin_u,
            fin_rstd,
            fin_o,
        };
        (out, cache)
    }

    fn sublayer_forward(&self, b: usize, j: usize, h: &mut [R], mods: &[R], batch: &Batch<R>) -> SubCache<R> {
        let d = self.config.token_dim;
        let rows = batch.rows;
        let md = 3 * SUBLAYERS * d;
        let (u, rstd) = layer_norm(h, d);
        let mut v = u.clone();
        for r in 0..rows {
            let m = &mods[batch.row_sample[r] * md..];
            let (shift, scale) = (&m[3 * j * d..], &m[(3 * j + 1) * d..]);
            for c in 0..d {
                v[r * d + c] = u[r * d + c] * (R::one() + scale[c]) + shift[c];
            }
        }
        let blk = &self.layout.blocks[b];
        let (y, inner) = if j < 3 {
            let qkv = self.linear(blk.qkv[j], &v, rows);
            let mut probs = Vec::new();
            let mut a = vec![R::zero(); rows * d];
            attention_forward(&qkv, &batch.keys[j], self.config.heads, d, &mut probs, &mut a);
            let y = self.linear(blk.proj[j], &a, rows);
            (y, Inner::Attn { qkv, probs, a })
        } else {
            let z = self.linear(blk.ff1, &v, rows);
            let th: Vec<R> = z.iter().map(|&x| gelu_tanh(x)).collect();
            let g: Vec<R> = z
                .iter()
                .zip(&th)
                .map(|(&x, &t)| R::of(0.5) * x * (R::one() + t))
                .collect();
            let y = self.linear(blk.ff2, &g, rows);
            (y, Inner::Ffn { z, th, g })
        };
        for r in 0..rows {
            let gate = &mods[batch.row_sample[r] * md + (3 * j + 2) * d..];
            for c in 0..d {
                h[r * d + c] += gate[c] * y[r * d + c];
            }
        }
        SubCache { u, rstd, v, y, inner }
    }

    fn backward(&self, batch: &Batch<R>, cache: &Cache<R>, dout: &[R], grad: &mut [R]) {
        let cfg = &self.config;
        let d = cfg.token_dim;
        let rows = batch.rows;
        let s = batch.samples();
        let md = 3 * SUBLAYERS * d;

        let dfin = self.linear_backward(self.layout.out, &cache.fin_o, dout, rows, grad, true);
        let gamma = self.p(self.layout.final_gamma, d).to_vec();
        let mut du = vec![R::zero(); rows * d];
        for r in 0..rows {
            for c in 0..d {
                let g = dfin[r * d + c];
                grad[self.layout.final_gamma + c] += g * cache.fin_u[r * d + c];
                grad[self.layout.final_beta + c] += g;
                du[r * d + c] = g * gamma[c];
            }
        }
        let mut dh = layer_norm_backward(&du, &cache.fin_u, &cache.fin_rstd, d);

        let mut dsc = vec![R::zero(); s * d];
        for b in (0..cfg.layers).rev() {
            let blk = &self.layout.blocks[b];
            let mods = &cache.mods[b];
            let mut dmods = vec![R::zero(); s * md];
            for j in (0..SUBLAYERS).rev() {
                let Some(sub) = &cache.subs[b][j] else { continue };
                let mut dy = vec![R::zero(); rows * d];
                for r in 0..rows {
                    let si = batch.row_sample[r];
                    let go = (3 * j + 2) * d;
                    for c in 0..d {
                        let g = dh[r * d + c];
                        dmods[si * md + go + c] += g * sub.y[r * d + c];
                        dy[r * d + c] = g * mods[si * md + go + c];
                    }
                }
                let dv = match &sub.inner {
                    Inner::Attn { qkv, probs, a } => {
                        let da = self.linear_backward(blk.proj[j], a, &dy, rows, grad, true);
                        let mut dqkv = vec![R::zero(); rows * 3 * d];
                        attention_backward(qkv, &batch.keys[j], probs, &da, cfg.heads, d, &mut dqkv);
                        self.linear_backward(blk.qkv[j], &sub.v, &dqkv, rows, grad, true)
                    }
                    Inner::Ffn { z, th, g } => {
                        let dg = self.linear_backward(blk.ff2, g, &dy, rows, grad, true);
                        let dz: Vec<R> = dg
                            .iter()
                            .zip(z.iter().zip(th))
                            .map(|(&a, (&x, &t))| a * gelu_grad_tanh(x, t))
                            .collect();
                        self.linear_backward(blk.ff1, &sub.v, &dz, rows, grad, true)
                    }
                };
                let mut du = vec![R::zero(); rows * d];
                for r in 0..rows {
                    let si = batch.row_sample[r];
                    let (so, ko) = (3 * j * d, (3 * j + 1) * d);
                    for c in 0..d {
                        let g = dv[r * d + c];
                        dmods[si * md + so + c] += g;
                        dmods[si * md + ko + c] += g * sub.u[r * d + c];
                        du[r * d + c] = g * (R::one() + mods[si * md + ko + c]);
                    }
                }
                let dln = layer_norm_backward(&du, &sub.u, &sub.rstd, d);
                for (a, b) in dh.iter_mut().zip(&dln) {
                    *a += *b;
                }
            }
            let dsc_b = self.linear_backward(blk.modulation, &cache.sc, &dmods, s, grad, true);
            for (a, b) in dsc.iter_mut().zip(&dsc_b) {
                *a += *b;
            }
        }

        let dcvec: Vec<R> = dsc.iter().zip(&cache.cvec).map(|(&g, &x)| g * silu_grad(x)).collect();
        self.linear_backward(self.layout.time, &cache.tfeat, &dcvec, s, grad, false);
        for (i, &c) in batch.cat.iter().enumerate() {
            for k in 0..d {
                grad[self.layout.cat_emb + c * d + k] += dcvec[i * d + k];
            }
        }

        self.linear_backward(self.layout.input, &batch.x, &dh, rows, grad, false);
        for r in 0..rows {
            let (a, i) = (batch.row_attr[r], batch.row_node[r]);
            for c in 0..d {
                let g = dh[r * d + c];
                grad[self.layout.attr_emb + a * d + c] += g;
                grad[self.layout.node_emb + i * d + c] += g;
            }
        }
    }

    /// Weighted masked-MSE loss over `samples`; gradients are accumulated
    /// into `grad` (same layout as [`Denoiser::params`]).
    pub fn loss_and_grad(&self, samples: &[NoisedSample<'_>], grad: &mut [R]) -> f64 {
        assert_eq!(grad.len(), self.params.len());
        let items: Vec<_> = samples.iter().map(|s| (&s.x_t, s.t, s.graph)).collect();
        let batch = Batch::new(&items, true);
        let (out, cache) = self.forward(&batch, &ForwardOptions::default());
        let m = self.config.attr_width;
        let mut dout = vec![R::zero(); out.len()];
        let mut loss = 0.0;
        for (si, s) in samples.iter().enumerate() {
            let n = batch.sample_nodes[si];
            let count = (NUM_ATTRIBUTES * n * m) as f64;
            let mut sse = 0.0;
            for r in batch.sample_start[si]..batch.sample_start[si + 1] {
                let target = s.eps.row(batch.row_attr[r], batch.row_node[r]);
                for c in 0..m {
                    let diff = out[r * m + c].as_f64() - target[c];
                    sse += diff * diff;
                    dout[r * m + c] = R::of(s.weight * 2.0 * diff / count);
                }
            }
            loss += s.weight * sse / count;
        }
        self.backward(&batch, &cache, &dout, grad);
        loss
    }

    /// Same objective as [`Denoiser::loss_and_grad`] without the backward pass.
    pub fn loss(&self, samples: &[NoisedSample<'_>]) -> f64 {
        samples
            .iter()
            .map(|s| {
                let eps_hat = self.predict_valid(&s.x_t, s.t, s.graph);
                s.weight * crate::diffusion::masked_mse(&s.eps, &eps_hat, s.graph.num_parts())
            })
            .sum()
    }
}

impl<R: Real> NoisePredictor for Denoiser<R> {
    fn slots(&self) -> usize {
        self.config.slots
    }

    fn predict(&self, x_t: &AttributeTensor, t: usize, graph: &ArticulationGraph) -> AttributeTensor {
        self.predict_valid(x_t, t, graph)
    }

    fn predict_batch(&self, items: &[(&AttributeTensor, usize, &ArticulationGraph)]) -> Vec<AttributeTensor> {
        map_slice(Execution::Parallel, items, |(x, t, g)| self.predict_valid(x, *t, g))
    }
}

fn silu<R: Real>(x: R) -> R {
    x / (R::one() + (-x).exp())
}

fn silu_grad<R: Real>(x: R) -> R {
    let s = R::one() / (R::one() + (-x).exp());
    s * (R::one() + x * (R::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<R: Real>(x: R) -> R {
    (R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x)).tanh()
}

#[cfg(test)]
fn gelu<R: Real>(x: R) -> R {
    R::of(0.5) * x * (R::one() + gelu_tanh(x))
}

#[cfg(test)]
fn gelu_grad<R: Real>(x: R) -> R {
    gelu_grad_tanh(x, gelu_tanh(x))
}

/// GELU derivative given the forward `tanh` value.
fn gelu_grad_tanh<R: Real>(x: R, th: R) -> R {
    let dinner = R::of(GELU_C) * (R::one() + R::of(3.0 * GELU_A) * x * x);
    R::of(0.5) * (R::one() + th) + R::of(0.5) * x * (R::one() - th * th) * dinner
}

/// Row-wise normalisation without affine terms; returns `(u, 1/σ)`.
fn layer_norm<R: Real>(h: &[R], d: usize) -> (Vec<R>, Vec<R>) {
    let rows = h.len() / d;
    let mut u = vec![R::zero(); h.len()];
    let mut rstd = vec![R::zero(); rows];
    let inv_d = R::of(1.0 / d as f64);
    for r in 0..rows {
        let x = &h[r * d..(r + 1) * d];
        let mean = x.iter().copied().sum::<R>() * inv_d;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
        let rs = R::one() / (var + R::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            u[r * d + c] = (x[c] - mean) * rs;
        }
    }
    (u, rstd)
}

fn layer_norm_backward<R: Real>(du: &[R], u: &[R], rstd: &[R], d: usize) -> Vec<R> {
    let rows = du.len() / d;
    let mut dh = vec![R::zero(); du.len()];
    let inv_d = R::of(1.0 / d as f64);
    for r in 0..rows {
        let g = &du[r * d..(r + 1) * d];
        let x = &u[r * d..(r + 1) * d];
        let mg = g.iter().copied().sum::<R>() * inv_d;
        let mgu = g.iter().zip(x).map(|(&a, &b)| a * b).sum::<R>() * inv_d;
        for c in 0..d {
            dh[r * d + c] = rstd[r] * (g[c] - mg - x[c] * mgu);
        }
    }
    dh
}

fn attention_forward<R: Real>(qkv: &[R], keys: &Csr, heads: usize, d: usize, probs: &mut Vec<R>, a: &mut [R]) {
    let dh = d / heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    probs.clear();
    probs.resize(keys.nnz() * heads, R::zero());
    for r in 0..keys.rows() {
        let ks = keys.row(r);
        let base = keys.start[r];
        for h in 0..heads {
            let q = &qkv[r * 3 * d + h * dh..r * 3 * d + (h + 1) * dh];
            let mut mx = R::neg_infinity();
            for (e, &j) in ks.iter().enumerate() {
                let jo = j as usize * 3 * d + d + h * dh;
                let k = &qkv[jo..jo + dh];
                let s = q.iter().zip(k).map(|(&x, &y)| x * y).sum::<R>() * scale;
                probs[(base + e) * heads + h] = s;
                mx = mx.max(s);
            }
            let mut sum = R::zero();
            for e in 0..ks.len() {
                let p = &mut probs[(base + e) * heads + h];
                *p = (*p - mx).exp();
                sum += *p;
            }
            let out = &mut a[r * d + h * dh..r * d + (h + 1) * dh];
            out.fill(R::zero());
            for (e, &j) in ks.iter().enumerate() {
                let p = &mut probs[(base + e) * heads + h];
                *p /= sum;
                let vo = j as usize * 3 * d + 2 * d + h * dh;
                for (o, &v) in out.iter_mut().zip(&qkv[vo..vo + dh]) {
                    *o += *p * v;
                }
            }
        }
    }
}

fn attention_backward<R: Real>(qkv: &[R], keys: &Csr, probs: &[R], da: &[R], heads: usize, d: usize, dqkv: &mut [R]) {
    let dh = d / heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let mut dps: Vec<R> = Vec::new();
    let mut dq = vec![R::zero(); dh];
    for r in 0..keys.rows() {
        let ks = keys.row(r);
        let base = keys.start[r];
        for h in 0..heads {
            let g = &da[r * d + h * dh..r * d + (h + 1) * dh];
            dps.clear();
            let mut sum_pdp = R::zero();
            for (e, &j) in ks.iter().enumerate() {
                let p = probs[(base + e) * heads + h];
                let vo = j as usize * 3 * d + 2 * d + h * dh;
                let v = &qkv[vo..vo + dh];
                let mut dp = R::zero();
                for ((dv, &gc), &vc) in dqkv[vo..vo + dh].iter_mut().zip(g).zip(v) {
                    dp += gc * vc;
                    *dv += p * gc;
                }
                dps.push(dp);
                sum_pdp += p * dp;
            }
            let qo = r * 3 * d + h * dh;
            let q = &qkv[qo..qo + dh];
            dq.fill(R::zero());
            for (e, &j) in ks.iter().enumerate() {
                let p = probs[(base + e) * heads + h];
                let ds = p * (dps[e] - sum_pdp) * scale;
                if ds == R::zero() {
                    continue;
                }
                let ko = j as usize * 3 * d + d + h * dh;
                let k = &qkv[ko..ko + dh];
                for (a, &kc) in dq.iter_mut().zip(k) {
                    *a += ds * kc;
                }
                for (dk, &qc) in dqkv[ko..ko + dh].iter_mut().zip(q) {
                    *dk += ds * qc;
                }
            }
            for (a, &b) in dqkv[qo..qo + dh].iter_mut().zip(&dq) {
                *a += b;
            }
        }
    }
}
