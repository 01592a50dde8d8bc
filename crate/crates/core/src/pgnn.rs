//! Prototype graph neural network: attention-weighted real-node updates,
//! gated prototype updates with cross-graph alignment, and an optional linear
//! projection of the final prototypes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Preset;
use crate::error::{Error, Result};
use crate::graph::{ClassGraph, Role};
use crate::numerics::{softmax_in_place, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgnnConfig {
    /// Input width followed by the output width of every layer.
    pub layer_dims: Vec<usize>,
    /// Weight of the cross-graph alignment term in the support prototype update.
    pub align_strength: f64,
    /// Replace the prototype node by the mean of the node features.
    pub no_prototype_node: bool,
    pub no_cross_graph_alignment: bool,
    /// Align query prototypes with each other as well.
    pub query_alignment_enabled: bool,
    /// When false every node and prototype is transformed on its own.
    pub message_passing: bool,
    /// Square linear map applied to the final prototypes.
    pub projection: bool,
}

impl Default for PgnnConfig {
    fn default() -> Self {
        PgnnConfig::preset(Preset::Paper)
    }
}

impl PgnnConfig {
    pub fn preset(p: Preset) -> Self {
        let layer_dims = match p {
            Preset::Paper => vec![512, 256, 128, 128],
            Preset::Tiny => vec![64, 32, 16, 16],
        };
        PgnnConfig {
            layer_dims,
            align_strength: 1.0,
            no_prototype_node: false,
            no_cross_graph_alignment: false,
            query_alignment_enabled: false,
            message_passing: true,
            projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "pgnn layer_dims {:?} needs an input width and at least one positive layer width",
                self.layer_dims
            )));
        }
        if !(self.align_strength >= 0.0 && self.align_strength.is_finite()) {
            return Err(Error::Config(format!(
                "align_strength {} must be >= 0",
                self.align_strength
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn aligns(&self) -> bool {
        self.message_passing && !self.no_prototype_node && !self.no_cross_graph_alignment && self.align_strength != 0.0
    }

    /// Scalar parameter count of the stack.
    pub fn num_params(&self) -> usize {
        let layers: usize = self
            .layer_dims
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                6 * o * i + i * i + 4 * i
            })
            .sum();
        layers + if self.projection { self.output_dim().pow(2) } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub d_in: usize,
    pub d_out: usize,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub u_p: ParamId,
    pub w_p: ParamId,
    pub u_r2: ParamId,
    pub u_p2: ParamId,
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    pub w_gamma: ParamId,
    pub w_w: ParamId,
}

const LAYER_TENSORS: [&str; 10] = [
    "w_r", "u_r", "u_p", "w_p", "u_r2", "u_p2", "w_alpha", "w_beta", "w_gamma", "w_w",
];

const ZERO_INIT: [&str; 4] = ["u_r", "u_p", "u_r2", "u_p2"];

fn layer_shapes(i: usize, o: usize) -> [[usize; 2]; 10] {
    [
        [o, i],
        [o, i],
        [o, i],
        [o, i],
        [o, i],
        [o, i],
        [i, i],
        [1, i],
        [1, i],
        [1, 2 * i],
    ]
}

impl LayerParams {
    fn from_ids(d_in: usize, d_out: usize, ids: &[ParamId]) -> Self {
        LayerParams {
            d_in,
            d_out,
            w_r: ids[0],
            u_r: ids[1],
            u_p: ids[2],
            w_p: ids[3],
            u_r2: ids[4],
            u_p2: ids[5],
            w_alpha: ids[6],
            w_beta: ids[7],
            w_gamma: ids[8],
            w_w: ids[9],
        }
    }
}

/// Every graph of an episode stacked on one tape: `nodes [T x d]` with the
/// graphs' rows back to back, `protos [G x d]`.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub nodes: Var,
    pub protos: Var,
    pub sizes: Vec<usize>,
    pub roles: Vec<Role>,
}

impl GraphBatch {
    pub fn from_graphs(tape: &mut Tape, graphs: &[ClassGraph]) -> Result<Self> {
        let nodes: Vec<Var> = graphs.iter().map(|g| g.nodes).collect();
        let protos: Vec<Var> = graphs.iter().map(|g| g.proto).collect();
        Ok(GraphBatch {
            nodes: tape.stack_rows(&nodes)?,
            protos: tape.stack_rows(&protos)?,
            sizes: graphs.iter().map(|g| g.adjacency.num_real()).collect(),
            roles: graphs.iter().map(|g| g.role).collect(),
        })
    }

    fn num_nodes(&self) -> usize {
        self.sizes.iter().sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PgnnOutput {
    /// Refined real nodes `[T x d_out]`.
    pub nodes: Var,
    /// Refined (and projected) prototypes `[G x d_out]`.
    pub protos: Var,
}

/// Index structure shared by all layers of one batch.
struct Layout {
    graph_of: Vec<usize>,
    cycle_mask: Vec<bool>,
    member_sum: Tensor,
    member_mean: Tensor,
    pair_src: Vec<usize>,
    pair_dst: Vec<usize>,
    pair_member: Option<Tensor>,
}

impl Layout {
    fn new(batch: &GraphBatch, align_queries: bool) -> Result<Self> {
        let g = batch.sizes.len();
        let t = batch.num_nodes();
        let mut graph_of = Vec::with_capacity(t);
        let mut offsets = Vec::with_capacity(g);
        for (k, &n) in batch.sizes.iter().enumerate() {
            if n == 0 {
                return Err(Error::Empty("graph with no real nodes"));
            }
            offsets.push(graph_of.len());
            graph_of.extend(std::iter::repeat_n(k, n));
        }
        let mut cycle_mask = vec![false; t * t];
        let mut member_sum = vec![0.0; g * t];
        let mut member_mean = vec![0.0; g * t];
        for (k, &n) in batch.sizes.iter().enumerate() {
            let o = offsets[k];
            for i in 0..n {
                for j in [(i + 1) % n, (i + n - 1) % n] {
                    if j != i {
                        cycle_mask[(o + i) * t + o + j] = true;
                    }
                }
                member_sum[k * t + o + i] = 1.0;
                member_mean[k * t + o + i] = 1.0 / n as f64;
            }
        }
        let mut pair_src = Vec::new();
        let mut pair_dst = Vec::new();
        for a in 0..g {
            for b in 0..g {
                let same_group = batch.roles[a] == batch.roles[b];
                let enabled = batch.roles[a] == Role::Support || align_queries;
                if a != b && same_group && enabled {
                    pair_src.push(a);
                    pair_dst.push(b);
                }
            }
        }
        let pair_member = if pair_src.is_empty() {
            None
        } else {
            let np = pair_src.len();
            let mut m = vec![0.0; g * np];
            for (p, &a) in pair_src.iter().enumerate() {
                m[a * np + p] = 1.0;
            }
            Some(Tensor::matrix(g, np, m)?)
        };
        Ok(Layout {
            graph_of,
            cycle_mask,
            member_sum: Tensor::matrix(g, t, member_sum)?,
            member_mean: Tensor::matrix(g, t, member_mean)?,
            pair_src,
            pair_dst,
            pair_member,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgnn {
    cfg: PgnnConfig,
    layers: Vec<LayerParams>,
    projection: Option<ParamId>,
}

impl Pgnn {
    pub fn new<R: Rng + ?Sized>(cfg: PgnnConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (l, w) in cfg.layer_dims.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            let ids: Vec<ParamId> = LAYER_TENSORS
                .iter()
                .zip(layer_shapes(i, o))
                .map(|(name, shape)| {
                    // Correction branches start at zero so every layer begins as a
                    // plain per-node map; summing many random branches otherwise
                    // inflates the feature scale layer after layer.
                    let t = if ZERO_INIT.contains(name) {
                        Tensor::zeros(&shape)
                    } else {
                        Tensor::uniform_init(&shape, shape[1], rng)
                    };
                    params.add(format!("pgnn.layer{l}.{name}"), t)
                })
                .collect();
            layers.push(LayerParams::from_ids(i, o, &ids));
        }
        let projection = cfg.projection.then(|| {
            let d = cfg.output_dim();
            params.add("pgnn.projection", Tensor::uniform_init(&[d, d], d, rng))
        });
        Ok(Pgnn {
            cfg,
            layers,
            projection,
        })
    }

    pub fn from_params(cfg: PgnnConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::WidthMismatch {
                    checkpoint: format!("{name} {:?}", params.get(id).shape()),
                    config: format!("{shape:?}"),
                });
            }
            Ok(id)
        };
        let mut layers = Vec::new();
        for (l, w) in cfg.layer_dims.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            let ids = LAYER_TENSORS
                .iter()
                .zip(layer_shapes(i, o))
                .map(|(name, shape)| find(format!("pgnn.layer{l}.{name}"), &shape))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerParams::from_ids(i, o, &ids));
        }
        let projection = if cfg.projection {
            let d = cfg.output_dim();
            Some(find("pgnn.projection".into(), &[d, d])?)
        } else {
            None
        };
        Ok(Pgnn {
            cfg,
            layers,
            projection,
        })
    }

    pub fn config(&self) -> &PgnnConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn projection(&self) -> Option<ParamId> {
        self.projection
    }

    /// Runs every layer synchronously over the whole batch: each layer reads
    /// only the previous layer's node and prototype features.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, batch: &GraphBatch) -> Result<PgnnOutput> {
        let width = tape.value(batch.nodes).cols();
        if width != self.cfg.input_dim() {
            return Err(Error::shape("pgnn input", &[self.cfg.input_dim()], &[width]));
        }
        let layout = Layout::new(batch, self.cfg.query_alignment_enabled)?;
        let member_sum = tape.constant(layout.member_sum.clone());
        let member_mean = tape.constant(layout.member_mean.clone());
        let pair_member = layout.pair_member.clone().map(|m| tape.constant(m));
        let (mut h, mut p) = (batch.nodes, batch.protos);
        for lp in &self.layers {
            let (h2, p2) = self.layer(tape, params, lp, &layout, member_sum, member_mean, pair_member, h, p)?;
            h = h2;
            p = p2;
        }
        if let Some(w) = self.projection {
            let w = tape.param(params, w);
            p = tape.linear(p, w)?;
        }
        Ok(PgnnOutput { nodes: h, protos: p })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        lp: &LayerParams,
        layout: &Layout,
        member_sum: Var,
        member_mean: Var,
        pair_member: Option<Var>,
        h: Var,
        p: Var,
    ) -> Result<(Var, Var)> {
        let w_r = tape.param(params, lp.w_r);
        let w_p = tape.param(params, lp.w_p);
        let self_h = tape.linear(h, w_r)?;
        if !self.cfg.message_passing {
            let h_next = tape.relu(self_h);
            let p_next = if self.cfg.no_prototype_node {
                tape.matmul(member_mean, h_next)?
            } else {
                let self_p = tape.linear(p, w_p)?;
                tape.relu(self_p)
            };
            return Ok((h_next, p_next));
        }

        // Real nodes: self term + attention over cycle neighbors + gated pull
        // toward the prototype.
        let w_alpha = tape.param(params, lp.w_alpha);
        let u_r = tape.param(params, lp.u_r);
        let a = tape.linear(h, w_alpha)?;
        let scores = tape.linear(a, a)?;
        let alpha = tape.masked_softmax_rows(scores, layout.cycle_mask.clone())?;
        let u_r_h = tape.linear(h, u_r)?;
        let messages = tape.matmul(alpha, u_r_h)?;
        let mut pre_h = tape.add(self_h, messages)?;
        if !self.cfg.no_prototype_node {
            let u_p = tape.param(params, lp.u_p);
            let w_beta = tape.param(params, lp.w_beta);
            let p_nodes = tape.gather_rows(p, &layout.graph_of)?;
            let to_proto = tape.sub(p_nodes, h)?;
            let beta_logit = tape.linear(h, w_beta)?;
            let beta = tape.logistic(beta_logit);
            let pull = tape.linear(to_proto, u_p)?;
            let gated = tape.scale_rows(pull, beta)?;
            pre_h = tape.add(pre_h, gated)?;
        }
        let h_next = tape.relu(pre_h);

        if self.cfg.no_prototype_node {
            let p_next = tape.matmul(member_mean, h_next)?;
            return Ok((h_next, p_next));
        }

        // Prototypes: self term + gated feedback from the graph's own nodes +
        // alignment with the other prototypes of the same group.
        let u_r2 = tape.param(params, lp.u_r2);
        let w_gamma = tape.param(params, lp.w_gamma);
        let self_p = tape.linear(p, w_p)?;
        let p_nodes = tape.gather_rows(p, &layout.graph_of)?;
        let from_nodes = tape.sub(h, p_nodes)?;
        let residual_sum = tape.matmul(member_sum, from_nodes)?;
        let gamma_logit = tape.linear(p, w_gamma)?;
        let gamma = tape.logistic(gamma_logit);
        let feedback = tape.linear(residual_sum, u_r2)?;
        let feedback = tape.scale_rows(feedback, gamma)?;
        let mut pre_p = tape.add(self_p, feedback)?;
        if let (true, Some(pm)) = (self.cfg.aligns(), pair_member) {
            let w_w = tape.param(params, lp.w_w);
            let u_p2 = tape.param(params, lp.u_p2);
            let own = tape.gather_rows(p, &layout.pair_src)?;
            let other = tape.gather_rows(p, &layout.pair_dst)?;
            let both = tape.concat_cols(own, other)?;
            let w_logit = tape.linear(both, w_w)?;
            let w = tape.logistic(w_logit);
            let diff = tape.sub(other, own)?;
            let weighted = tape.scale_rows(diff, w)?;
            let summed = tape.matmul(pm, weighted)?;
            let aligned = tape.linear(summed, u_p2)?;
            let aligned = tape.scale(aligned, self.cfg.align_strength);
            pre_p = tape.add(pre_p, aligned)?;
        }
        Ok((h_next, tape.relu(pre_p)))
    }
}

/// Attention of node `h_i` over `neighbors`: softmax over j of
/// `(W h_i) . (W h_j)`, with `w_alpha` a row-major `d x d` matrix.
pub fn attention_weights(h_i: &[f64], neighbors: &[&[f64]], w_alpha: &[f64]) -> Result<Vec<f64>> {
    let d = h_i.len();
    if neighbors.is_empty() {
        return Err(Error::Empty("attention over an empty neighborhood"));
    }
    if w_alpha.len() != d * d {
        return Err(Error::shape("attention_weights", &[d, d], &[w_alpha.len()]));
    }
    let project = |v: &[f64]| -> Result<Vec<f64>> {
        if v.len() != d {
            return Err(Error::shape("attention_weights", &[d], &[v.len()]));
        }
        Ok((0..d)
            .map(|r| w_alpha[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    };
    let a = project(h_i)?;
    let mut logits = neighbors
        .iter()
        .map(|n| Ok(project(n)?.iter().zip(&a).map(|(x, y)| x * y).sum()))
        .collect::<Result<Vec<f64>>>()?;
    softmax_in_place(&mut logits, None);
    Ok(logits)
}
