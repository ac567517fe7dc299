//! The recommendation network: item embedding, one or more associative
//! Mamba blocks (a forward and a time-reversed selective-scan channel with
//! shared weights), and a weight-tied next-item prediction head.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::params::{LayerMap, ParameterVector};
use crate::tensor::{Graph, Tensor, Var};

/// Network hyperparameters. Item ids run 1..=vocab_size; id 0 is padding and
/// always embeds to the zero vector.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub state_size: usize,
    pub conv_kernel: usize,
    pub expansion: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub vocab_size: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            state_size: 16,
            conv_kernel: 4,
            expansion: 4,
            num_blocks: 1,
            dropout: 0.1,
            max_seq_len: 50,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1
            || self.state_size < 1
            || self.conv_kernel < 1
            || self.expansion < 1
            || self.num_blocks < 1
        {
            return Err(Error::Config(
                "embed_dim, state_size, conv_kernel, expansion, num_blocks must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.vocab_size < 1 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be >= 3".into()));
        }
        Ok(())
    }

    /// Scan width: expansion * embed_dim.
    pub fn inner_dim(&self) -> usize {
        self.expansion * self.embed_dim
    }

    /// Low-rank width of the step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.embed_dim.div_ceil(16).max(1)
    }
}

/// Which scan channels contribute to a block's output. Production code uses
/// [`ChannelMode::Both`]; the single-channel modes exist so tests can witness
/// each direction's information flow in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Both,
    ForwardOnly,
    BackwardOnly,
}

/// Index of each group's leaf within [`Leaves`], per block.
#[derive(Clone, Copy)]
struct BlockVars {
    w_in: usize,
    conv_w: usize,
    w_x: usize,
    w_dt: usize,
    b_dt: usize,
    a_raw: usize,
    d_skip: usize,
    w_out: usize,
}

/// Graph leaves for every parameter group, aligned with the layer map.
pub struct Leaves {
    vars: Vec<Var>,
}

impl Leaves {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct GroupSpec {
    name: String,
    shape: Vec<usize>,
}

pub struct Model {
    cfg: ModelConfig,
    layout: Arc<LayerMap>,
    groups: Vec<GroupSpec>,
    blocks: Vec<BlockVars>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let inner = cfg.inner_dim();
        let r = cfg.dt_rank();
        let s = cfg.state_size;
        let k = cfg.conv_kernel;
        let v = cfg.vocab_size as usize;

        let mut groups = vec![GroupSpec {
            name: "embedding".into(),
            shape: vec![v + 1, d],
        }];
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let base = groups.len();
            let mut push = |suffix: &str, shape: Vec<usize>| {
                groups.push(GroupSpec {
                    name: format!("block{i}.{suffix}"),
                    shape,
                });
            };
            push("w_in", vec![d, 2 * inner]);
            push("conv_w", vec![inner, k]);
            push("w_x", vec![inner, r + 2 * s]);
            push("w_dt", vec![r, inner]);
            push("b_dt", vec![inner]);
            push("a_raw", vec![inner, s]);
            push("d_skip", vec![inner]);
            push("w_out", vec![inner, d]);
            blocks.push(BlockVars {
                w_in: base,
                conv_w: base + 1,
                w_x: base + 2,
                w_dt: base + 3,
                b_dt: base + 4,
                a_raw: base + 5,
                d_skip: base + 6,
                w_out: base + 7,
            });
        }
        let layout = Arc::new(LayerMap::new(
            groups
                .iter()
                .map(|g| (g.name.clone(), g.shape.iter().product())),
        ));
        Ok(Model {
            cfg,
            layout,
            groups,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<LayerMap> {
        &self.layout
    }

    /// Deterministic initialization. Embeddings and projections are uniform
    /// in ±1/sqrt(fan_in); the raw scan matrix is set so -exp(a_raw) spans
    /// [-1, -S] per channel; step-size biases put softplus output in
    /// [1e-3, 1e-1]; skip connections start at one. The padding embedding row
    /// stays all-zero.
    pub fn init_parameters(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParameterVector::zeros(Arc::clone(&self.layout));
        let d = self.cfg.embed_dim;
        let inner = self.cfg.inner_dim();
        let r = self.cfg.dt_rank();
        let s = self.cfg.state_size;
        let k = self.cfg.conv_kernel;

        let layout = Arc::clone(&self.layout);
        for (spec, group) in self.groups.iter().zip(layout.groups()) {
            let values = params.group_slice_mut(group);
            let suffix = spec.name.rsplit('.').next().unwrap_or(&spec.name);
            match suffix {
                "embedding" => {
                    let bound = 1.0 / (d as f64).sqrt();
                    // Row 0 is the padding item and stays zero.
                    for v in values[d..].iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                "w_in" => fill_uniform(values, &mut rng, 1.0 / (d as f64).sqrt()),
                "conv_w" => fill_uniform(values, &mut rng, 1.0 / (k as f64).sqrt()),
                "w_x" => fill_uniform(values, &mut rng, 1.0 / (inner as f64).sqrt()),
                "w_dt" => fill_uniform(values, &mut rng, 1.0 / (r as f64).sqrt()),
                "b_dt" => {
                    // softplus(b_dt) log-uniform in [1e-3, 1e-1].
                    let (lo, hi) = ((1e-3f64).ln(), (1e-1f64).ln());
                    for v in values.iter_mut() {
                        let dt = rng.random_range(lo..hi).exp();
                        *v = (dt.exp() - 1.0).ln();
                    }
                }
                "a_raw" => {
                    for (i, v) in values.iter_mut().enumerate() {
                        *v = ((i % s) as f64 + 1.0).ln();
                    }
                }
                "d_skip" => values.fill(1.0),
                "w_out" => fill_uniform(values, &mut rng, 1.0 / (inner as f64).sqrt()),
                other => unreachable!("unknown parameter group {other}"),
            }
        }
        params
    }

    /// Insert one differentiable leaf per parameter group.
    pub fn leaves(&self, graph: &mut Graph, params: &ParameterVector) -> Result<Leaves> {
        if !Arc::ptr_eq(params.layout(), &self.layout) && *params.layout().as_ref() != *self.layout
        {
            return Err(Error::Contract(
                "parameter vector layout does not match the model".into(),
            ));
        }
        let mut vars = Vec::with_capacity(self.groups.len());
        for (spec, group) in self.groups.iter().zip(self.layout.groups()) {
            let tensor = Tensor::new(spec.shape.clone(), params.group_slice(group).to_vec())?;
            vars.push(graph.leaf(tensor));
        }
        Ok(Leaves { vars })
    }

    /// Embed a sequence of item ids as an L×d tensor. Id 0 maps to the zero
    /// row. Dropout is applied only in train mode.
    pub fn embed(
        &self,
        graph: &mut Graph,
        leaves: &Leaves,
        seq: &[u32],
        train_mode: bool,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Contract("embed: empty sequence".into()));
        }
        if let Some(&bad) = seq.iter().find(|&&id| id > self.cfg.vocab_size) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                vocab: self.cfg.vocab_size,
            });
        }
        let mut h = graph.embedding(leaves.vars[0], seq)?;
        if train_mode && self.cfg.dropout > 0.0 {
            let rng = rng.ok_or_else(|| {
                Error::Contract("embed: train mode with dropout needs an RNG".into())
            })?;
            let p = self.cfg.dropout;
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..seq.len() * self.cfg.embed_dim)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            let mask = graph.constant(Tensor::new(vec![seq.len(), self.cfg.embed_dim], mask)?);
            h = graph.mul(h, mask)?;
        }
        Ok(h)
    }

    /// One scan channel: conv -> SiLU -> input-dependent (delta, B, C) -> scan.
    fn scan_channel(
        &self,
        graph: &mut Graph,
        leaves: &Leaves,
        bv: BlockVars,
        x: Var,
    ) -> Result<Var> {
        let r = self.cfg.dt_rank();
        let s = self.cfg.state_size;
        let xc = graph.causal_depthwise_conv(x, leaves.vars[bv.conv_w])?;
        let xa = graph.silu(xc);
        let proj = graph.matmul(xa, leaves.vars[bv.w_x])?;
        let dt_low = graph.slice_cols(proj, 0, r)?;
        let b = graph.slice_cols(proj, r, s)?;
        let c = graph.slice_cols(proj, r + s, s)?;
        let dt_pre = graph.matmul(dt_low, leaves.vars[bv.w_dt])?;
        let dt_pre = graph.add_row(dt_pre, leaves.vars[bv.b_dt])?;
        let delta = graph.softplus(dt_pre);
        let a = graph.neg_exp(leaves.vars[bv.a_raw]);
        graph.selective_scan(xa, delta, a, b, c, leaves.vars[bv.d_skip])
    }

    /// Pre-gate channel outputs of one block: the forward channel and the
    /// re-reversed backward channel. Exposed for direction-isolation tests.
    pub fn block_channels(
        &self,
        graph: &mut Graph,
        leaves: &Leaves,
        block: usize,
        stream: Var,
    ) -> Result<(Var, Var)> {
        let bv = self.blocks[block];
        let fwd = self.scan_channel(graph, leaves, bv, stream)?;
        let rev = graph.reverse_rows(stream)?;
        let bwd_rev = self.scan_channel(graph, leaves, bv, rev)?;
        let bwd = graph.reverse_rows(bwd_rev)?;
        Ok((fwd, bwd))
    }

    /// One associative Mamba block: expand, run both scan channels over the
    /// stream, sum them, gate with SiLU, project back, add the residual.
    pub fn block_forward(
        &self,
        graph: &mut Graph,
        leaves: &Leaves,
        block: usize,
        h: Var,
        mode: ChannelMode,
    ) -> Result<Var> {
        let inner = self.cfg.inner_dim();
        let bv = self.blocks[block];
        let xz = graph.matmul(h, leaves.vars[bv.w_in])?;
        let stream = graph.slice_cols(xz, 0, inner)?;
        let gate = graph.slice_cols(xz, inner, inner)?;
        let (fwd, bwd) = self.block_channels(graph, leaves, block, stream)?;
        let summed = match mode {
            ChannelMode::Both => graph.add(fwd, bwd)?,
            ChannelMode::ForwardOnly => fwd,
            ChannelMode::BackwardOnly => bwd,
        };
        let gate = graph.silu(gate);
        let gated = graph.mul(summed, gate)?;
        let out = graph.matmul(gated, leaves.vars[bv.w_out])?;
        graph.add(h, out)
    }

    /// Full encoder: embedding plus every block.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        graph: &mut Graph,
        leaves: &Leaves,
        seq: &[u32],
        train_mode: bool,
        rng: Option<&mut ChaCha12Rng>,
        mode: ChannelMode,
    ) -> Result<Var> {
        let mut h = self.embed(graph, leaves, seq, train_mode, rng)?;
        for block in 0..self.cfg.num_blocks {
            h = self.block_forward(graph, leaves, block, h, mode)?;
        }
        Ok(h)
    }

    /// Scores over items 1..=vocab_size from the final hidden row, weight-tied
    /// to the embedding table.
    pub fn predict_scores(&self, graph: &mut Graph, leaves: &Leaves, h: Var) -> Result<Var> {
        let last = graph.last_row(h)?;
        graph.tied_logits(leaves.vars[0], last)
    }

    /// Cross-entropy of the next-item prediction for one (prefix, target)
    /// example. `target` is a 1-based item id.
    pub fn example_loss(
        &self,
        graph: &mut Graph,
        leaves: &Leaves,
        seq: &[u32],
        target: u32,
        train_mode: bool,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Var> {
        if target == 0 || target > self.cfg.vocab_size {
            return Err(Error::Contract(format!(
                "target item {target} outside 1..={}",
                self.cfg.vocab_size
            )));
        }
        let h = self.encode(graph, leaves, seq, train_mode, rng, ChannelMode::Both)?;
        let scores = self.predict_scores(graph, leaves, h)?;
        graph.cross_entropy(scores, target as usize - 1)
    }

    /// Forward-only scores for evaluation.
    pub fn scores_vec(&self, params: &ParameterVector, seq: &[u32]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let leaves = self.leaves(&mut graph, params)?;
        let h = self.encode(&mut graph, &leaves, seq, false, None, ChannelMode::Both)?;
        let scores = self.predict_scores(&mut graph, &leaves, h)?;
        Ok(graph.value(scores).data().to_vec())
    }

    /// Add each leaf's gradient into a flat d_theta accumulator.
    pub fn accumulate_grads(&self, graph: &Graph, leaves: &Leaves, out: &mut [f64]) -> Result<()> {
        if out.len() != self.layout.total_len() {
            return Err(Error::Dimension(format!(
                "gradient accumulator has {} values, expected {}",
                out.len(),
                self.layout.total_len()
            )));
        }
        for (var, group) in leaves.vars.iter().zip(self.layout.groups()) {
            if let Some(g) = graph.grad(*var) {
                let dst = &mut out[group.offset..group.offset + group.len];
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        Ok(())
    }
}

fn fill_uniform(values: &mut [f64], rng: &mut ChaCha12Rng, bound: f64) {
    for v in values.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
}
