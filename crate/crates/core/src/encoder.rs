//! Pattern-enhanced graph encoder.
//!
//! Each layer reads the fused multi-behavior embeddings of the previous
//! layer (the base tables for the first) and, for every behavior,
//!
//! 1. sums neighbor embeddings over the user-item graph,
//! 2. optionally aggregates the user and item relation graphs and blends
//!    them into the interaction view through a learned gate,
//! 3. optionally injects a prompt into the target-behavior branch.
//!
//! The behavior outputs are averaged into the next fused embeddings. The
//! readout concatenates layers and applies a ReLU feed-forward map.

use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graphs::{MultiBehaviorGraph, RelationGraphs};
use crate::numcore::{ParameterStore, Rng, SparseMatrix, Tape, Var};

pub const USER_EMBED: &str = "embed.user";
pub const ITEM_EMBED: &str = "embed.item";
pub const AUX_BEHAVIOR_EMBED: &str = "embed.behavior_aux";
pub const TARGET_BEHAVIOR_EMBED: &str = "embed.behavior_target";
pub const USER_READOUT: &str = "readout.user";
pub const ITEM_READOUT: &str = "readout.item";

/// Lower and upper clamp of the fusion gate β.
pub const GATE_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

pub fn layer_param(layer: usize, what: &str) -> String {
    format!("layer{layer}.{what}")
}

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub dim: usize,
    pub layers: usize,
    /// Concatenate the base embeddings ahead of layers `1..=L` in the readout.
    pub include_layer0: bool,
}

impl ModelShape {
    pub fn readout_rows(&self) -> usize {
        let blocks = self.layers + usize::from(self.include_layer0);
        blocks * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.num_behaviors == 0 {
            return Err(Error::InvalidArgument(format!(
                "dim, layers and behaviors must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Xavier-initialized embedding tables and encoder parameters.
pub fn init_parameters(shape: &ModelShape, seed: u64) -> Result<ParameterStore> {
    shape.validate()?;
    let d = shape.dim;
    let mut store = ParameterStore::new(seed);
    store.insert_xavier(USER_EMBED, shape.num_users, d);
    store.insert_xavier(ITEM_EMBED, shape.num_items, d);
    store.insert_xavier(AUX_BEHAVIOR_EMBED, shape.num_behaviors - 1, d);
    store.insert_xavier(TARGET_BEHAVIOR_EMBED, 1, d);
    for l in 0..shape.layers {
        store.insert_xavier(&layer_param(l, "conv_user"), 1, 3);
        store.insert_xavier(&layer_param(l, "conv_item"), 1, 3);
        store.insert_xavier(&layer_param(l, "attn_in"), d, d);
        store.insert_xavier(&layer_param(l, "attn_out"), d, d);
        store.insert_xavier(&layer_param(l, "gate_user"), 2 * d, 1);
        store.insert_xavier(&layer_param(l, "gate_item"), 2 * d, 1);
    }
    store.insert_xavier(USER_READOUT, shape.readout_rows(), d);
    store.insert_xavier(ITEM_READOUT, shape.readout_rows(), d);
    Ok(store)
}

/// Fixed sparse operators of the relation graphs for one behavior.
#[derive(Debug, Clone)]
pub struct RelationOperators {
    pub users: Rc<SparseMatrix>,
    pub items_in: Rc<SparseMatrix>,
    pub items_out: Rc<SparseMatrix>,
}

/// Fixed sparse operators for one behavior.
#[derive(Debug, Clone)]
pub struct BehaviorOperators {
    pub behavior: usize,
    /// `|U|×|I|`: sums each user's items.
    pub user_sum: Rc<SparseMatrix>,
    /// `|I|×|U|`: sums each item's users.
    pub item_sum: Rc<SparseMatrix>,
    pub relations: Option<RelationOperators>,
}

/// Every graph operator the encoder needs, for the active behaviors only.
#[derive(Debug, Clone)]
pub struct EncoderGraph {
    pub behaviors: Vec<BehaviorOperators>,
    pub target: usize,
}

impl EncoderGraph {
    /// `relations` must already be normalized. Behaviors outside `active`
    /// take no part in encoding.
    pub fn new(
        graph: &MultiBehaviorGraph,
        relations: Option<&RelationGraphs>,
        active: &[usize],
    ) -> Result<Self> {
        let target = graph.num_behaviors() - 1;
        if !active.contains(&target) {
            return Err(Error::InvalidArgument(
                "the target behavior must stay active".into(),
            ));
        }
        let behaviors = active
            .iter()
            .map(|&b| {
                let g = graph.behavior(b);
                BehaviorOperators {
                    behavior: b,
                    user_sum: Rc::new(g.user_operator()),
                    item_sum: Rc::new(g.item_operator()),
                    relations: relations.map(|r| RelationOperators {
                        users: Rc::new(r.users.per_behavior[b].to_sparse()),
                        items_in: Rc::new(r.items.per_behavior[b].incoming.to_sparse()),
                        items_out: Rc::new(r.items.per_behavior[b].outgoing.to_sparse()),
                    }),
                }
            })
            .collect();
        Ok(Self { behaviors, target })
    }

    pub fn has_relations(&self) -> bool {
        self.behaviors.iter().any(|b| b.relations.is_some())
    }
}

/// Per-layer parameters as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub conv_user: Var,
    pub conv_item: Var,
    pub attn_in: Var,
    pub attn_out: Var,
    pub gate_user: Var,
    pub gate_item: Var,
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub user_embed: Var,
    pub item_embed: Var,
    /// Present only when relation aggregation runs.
    pub layers: Vec<LayerVars>,
    pub user_readout: Var,
    pub item_readout: Var,
}

impl EncoderVars {
    pub fn load(tape: &Tape, store: &ParameterStore, layers: usize, with_relations: bool) -> Result<Self> {
        let layers = if with_relations {
            (0..layers)
                .map(|l| {
                    Ok(LayerVars {
                        conv_user: tape.param(store, &layer_param(l, "conv_user"))?,
                        conv_item: tape.param(store, &layer_param(l, "conv_item"))?,
                        attn_in: tape.param(store, &layer_param(l, "attn_in"))?,
                        attn_out: tape.param(store, &layer_param(l, "attn_out"))?,
                        gate_user: tape.param(store, &layer_param(l, "gate_user"))?,
                        gate_item: tape.param(store, &layer_param(l, "gate_item"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            user_embed: tape.param(store, USER_EMBED)?,
            item_embed: tape.param(store, ITEM_EMBED)?,
            layers,
            user_readout: tape.param(store, USER_READOUT)?,
            item_readout: tape.param(store, ITEM_READOUT)?,
        })
    }
}

/// Row lookup into an embedding table.
pub fn embed_lookup(tape: &Tape, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather(table, Rc::new(ids.to_vec()))
}

/// The 2×1 stride-1 convolution over `[neighbors ∥ self]`:
/// `f₁·neighbors + f₂·self + bias`, with `filter = [f₁, f₂, bias]` shared
/// across coordinates.
pub fn conv_pair(tape: &Tape, neighbors: Var, own: Var, filter: Var) -> Var {
    let f1 = tape.select_col(filter, 0);
    let f2 = tape.select_col(filter, 1);
    let bias = tape.select_col(filter, 2);
    let mixed = tape.add(tape.mul_bcast(neighbors, f1), tape.mul_bcast(own, f2));
    tape.add_bcast(mixed, bias)
}

/// User relation view: weighted neighbor sum over the normalized user
/// graph, passed through the user convolution with the user's own embedding.
pub fn user_relation_aggregate(
    tape: &Tape,
    users: Var,
    relation: &Rc<SparseMatrix>,
    conv: Var,
) -> Var {
    let neighbors = tape.spmm(Rc::clone(relation), users);
    conv_pair(tape, neighbors, users, conv)
}

/// `[α_IN, α_OUT]` per item: a softmax over the bilinear scores
/// `eᵀ W_n e / √d`, returned as two `n×1` columns.
pub fn direction_attention(tape: &Tape, items: Var, attn_in: Var, attn_out: Var) -> (Var, Var) {
    let d = tape.shape(items).1 as f64;
    let score = |w: Var| {
        let projected = tape.matmul(items, w);
        tape.scale(tape.row_sum(tape.mul(projected, items)), 1.0 / d.sqrt())
    };
    // softmax over two entries: α_IN = σ(s_IN − s_OUT).
    let alpha_in = tape.sigmoid(tape.sub(score(attn_in), score(attn_out)));
    let alpha_out = tape.affine(alpha_in, -1.0, 1.0);
    (alpha_in, alpha_out)
}

/// Item relation view: attention-weighted incoming and outgoing neighbor
/// sums, passed through the item convolution with the item's own embedding.
pub fn item_relation_aggregate(
    tape: &Tape,
    items: Var,
    relation: &RelationOperators,
    attn_in: Var,
    attn_out: Var,
    conv: Var,
) -> Var {
    let (alpha_in, alpha_out) = direction_attention(tape, items, attn_in, attn_out);
    let incoming = tape.spmm(Rc::clone(&relation.items_in), items);
    let outgoing = tape.spmm(Rc::clone(&relation.items_out), items);
    let neighbors = tape.add(
        tape.mul_bcast(incoming, alpha_in),
        tape.mul_bcast(outgoing, alpha_out),
    );
    conv_pair(tape, neighbors, items, conv)
}

/// Plain neighbor sums over one behavior's user-item graph:
/// `(users ← Σ items, items ← Σ users)`.
pub fn interaction_aggregate(
    tape: &Tape,
    users: Var,
    items: Var,
    ops: &BehaviorOperators,
) -> (Var, Var) {
    (
        tape.spmm(Rc::clone(&ops.user_sum), items),
        tape.spmm(Rc::clone(&ops.item_sum), users),
    )
}

/// Gate β per node (clamped), `n×1`.
pub fn fusion_gate(tape: &Tape, interaction: Var, relation: Var, gate: Var) -> Var {
    let logits = tape.matmul(tape.concat(&[interaction, relation]), gate);
    tape.clamp(tape.sigmoid(logits), GATE_CLAMP.0, GATE_CLAMP.1)
}

/// `a + ((1 − β) / β) · b` with β from [`fusion_gate`].
pub fn gated_fuse(tape: &Tape, interaction: Var, relation: Var, gate: Var) -> Var {
    let beta = fusion_gate(tape, interaction, relation, gate);
    let ratio = tape.affine(tape.recip(beta), 1.0, -1.0);
    tape.add(interaction, tape.mul_bcast(relation, ratio))
}

/// Arithmetic mean of the per-behavior outputs.
pub fn fuse_behaviors(tape: &Tape, outputs: &[Var]) -> Var {
    tape.mean_all(outputs)
}

/// `ReLU([layer₁ ∥ … ∥ layer_L] · W)`.
pub fn readout(tape: &Tape, layers: &[Var], weight: Var) -> Var {
    tape.relu(tape.matmul(tape.concat(layers), weight))
}

/// How a prompt enters the target-behavior branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptVariant {
    /// Added to the target aggregation at every layer.
    #[default]
    Add,
    /// Added at the first layer only.
    Shallow,
    /// Target aggregation scaled elementwise by `1 + prompt` at every layer.
    Projection,
}

impl PromptVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptVariant::Add => "add",
            PromptVariant::Shallow => "shallow",
            PromptVariant::Projection => "projection",
        }
    }

    pub const ALL: [PromptVariant; 3] = [
        PromptVariant::Add,
        PromptVariant::Shallow,
        PromptVariant::Projection,
    ];
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(PromptVariant::Add),
            "shallow" => Ok(PromptVariant::Shallow),
            "projection" => Ok(PromptVariant::Projection),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

impl std::fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A `1×d` prompt and its injection rule.
#[derive(Debug, Clone, Copy)]
pub struct Prompt {
    pub vector: Var,
    pub variant: PromptVariant,
}

impl Prompt {
    fn apply(&self, tape: &Tape, layer: usize, x: Var) -> Var {
        match self.variant {
            PromptVariant::Add => tape.add_bcast(x, self.vector),
            PromptVariant::Shallow if layer == 0 => tape.add_bcast(x, self.vector),
            PromptVariant::Shallow => x,
            PromptVariant::Projection => {
                let scale = tape.affine(self.vector, 1.0, 1.0);
                tape.mul_bcast(x, scale)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    /// Apply dropout to fused layer outputs.
    pub training: bool,
    pub keep_prob: f64,
    pub include_layer0: bool,
    /// Also produce per-behavior readouts.
    pub behavior_aware: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            training: false,
            keep_prob: 1.0,
            include_layer0: false,
            behavior_aware: true,
        }
    }
}

/// Embeddings of every layer. Behavior streams are indexed by position in
/// [`EncoderGraph::behaviors`].
#[derive(Debug, Clone)]
pub struct LayerState {
    pub layer: usize,
    pub behavior_users: Vec<Var>,
    pub behavior_items: Vec<Var>,
    pub users: Var,
    pub items: Var,
}

/// Final representations on the tape.
#[derive(Debug, Clone)]
pub struct Representations {
    pub users: Var,
    pub items: Var,
    /// Empty unless [`EncodeOptions::behavior_aware`] was set.
    pub behavior_users: Vec<Var>,
    pub behavior_items: Vec<Var>,
    /// Behavior id of each behavior-aware stream.
    pub behaviors: Vec<usize>,
}

/// Runs one encoder layer.
pub fn encode_layer(
    tape: &Tape,
    layer: usize,
    users: Var,
    items: Var,
    vars: &EncoderVars,
    graph: &EncoderGraph,
    prompt: Option<&Prompt>,
) -> LayerState {
    let mut behavior_users = Vec::with_capacity(graph.behaviors.len());
    let mut behavior_items = Vec::with_capacity(graph.behaviors.len());
    for ops in &graph.behaviors {
        let (mut u, mut i) = interaction_aggregate(tape, users, items, ops);
        if let (Some(p), true) = (prompt, ops.behavior == graph.target) {
            u = p.apply(tape, layer, u);
            i = p.apply(tape, layer, i);
        }
        if let (Some(rel), Some(lv)) = (&ops.relations, vars.layers.get(layer)) {
            let ru = user_relation_aggregate(tape, users, &rel.users, lv.conv_user);
            let ri = item_relation_aggregate(tape, items, rel, lv.attn_in, lv.attn_out, lv.conv_item);
            u = gated_fuse(tape, u, ru, lv.gate_user);
            i = gated_fuse(tape, i, ri, lv.gate_item);
        }
        behavior_users.push(u);
        behavior_items.push(i);
    }
    LayerState {
        layer,
        users: fuse_behaviors(tape, &behavior_users),
        items: fuse_behaviors(tape, &behavior_items),
        behavior_users,
        behavior_items,
    }
}

/// Full encoder pass followed by the readout.
pub fn encode(
    tape: &Tape,
    vars: &EncoderVars,
    graph: &EncoderGraph,
    layers: usize,
    prompt: Option<&Prompt>,
    options: &EncodeOptions,
    rng: &mut Rng,
) -> Result<Representations> {
    if graph.has_relations() && vars.layers.len() < layers {
        return Err(Error::InvalidArgument(
            "relation graphs supplied without relation-layer parameters".into(),
        ));
    }
    let streams = graph.behaviors.len();
    let mut fused_users = Vec::new();
    let mut fused_items = Vec::new();
    let mut per_users: Vec<Vec<Var>> = vec![Vec::new(); streams];
    let mut per_items: Vec<Vec<Var>> = vec![Vec::new(); streams];
    if options.include_layer0 {
        fused_users.push(vars.user_embed);
        fused_items.push(vars.item_embed);
        for b in 0..streams {
            per_users[b].push(vars.user_embed);
            per_items[b].push(vars.item_embed);
        }
    }

    let (mut users, mut items) = (vars.user_embed, vars.item_embed);
    for l in 0..layers {
        let state = encode_layer(tape, l, users, items, vars, graph, prompt);
        users = tape.dropout(state.users, options.keep_prob, options.training, rng)?;
        items = tape.dropout(state.items, options.keep_prob, options.training, rng)?;
        fused_users.push(users);
        fused_items.push(items);
        for b in 0..streams {
            per_users[b].push(state.behavior_users[b]);
            per_items[b].push(state.behavior_items[b]);
        }
    }

    let (behavior_users, behavior_items) = if options.behavior_aware {
        (
            per_users
                .iter()
                .map(|l| readout(tape, l, vars.user_readout))
                .collect(),
            per_items
                .iter()
                .map(|l| readout(tape, l, vars.item_readout))
                .collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let reps = Representations {
        users: readout(tape, &fused_users, vars.user_readout),
        items: readout(tape, &fused_items, vars.item_readout),
        behavior_users,
        behavior_items,
        behaviors: graph.behaviors.iter().map(|b| b.behavior).collect(),
    };
    tape.check_finite()?;
    Ok(reps)
}

/// Representations copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationArrays {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
    pub behavior_users: Vec<Array2<f64>>,
    pub behavior_items: Vec<Array2<f64>>,
    pub behaviors: Vec<usize>,
}

impl RepresentationArrays {
    pub fn from_tape(tape: &Tape, reps: &Representations) -> Self {
        let copy = |v: &Var| tape.value(*v).clone();
        Self {
            users: copy(&reps.users),
            items: copy(&reps.items),
            behavior_users: reps.behavior_users.iter().map(copy).collect(),
            behavior_items: reps.behavior_items.iter().map(copy).collect(),
            behaviors: reps.behaviors.clone(),
        }
    }

    /// Position of `behavior` among the behavior-aware streams.
    pub fn stream_of(&self, behavior: usize) -> Option<usize> {
        self.behaviors.iter().position(|&b| b == behavior)
    }
}
