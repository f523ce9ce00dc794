//! Three-stage training: joint encoder and denoiser training, frozen-embedding
//! readout retuning on the denoised graph, and prompt tuning of the target
//! behavior.

use std::rc::Rc;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::denoise::{binarize_and_prune, check_delta, reconstruction_loss, DenoisedGraph, ReconstructionBatch};
use crate::encoder::{
    encode, init_parameters, EncodeOptions, EncoderGraph, EncoderVars, ModelShape, Prompt,
    PromptVariant, RepresentationArrays, Representations, AUX_BEHAVIOR_EMBED, ITEM_READOUT,
    TARGET_BEHAVIOR_EMBED, USER_READOUT,
};
use crate::error::{Error, Result};
use crate::graphs::{
    build_multi_behavior_graph, BipartiteGraph, MultiBehaviorGraph, RelationGraphs, TransitionCount,
};
use crate::ingest::Dataset;
use crate::numcore::{
    check_gradients, sub_rng, xavier_uniform, AdamW, AdamWConfig, GradCheckReport, Parameter,
    ParameterStore, Rng, Tape, Var,
};

/// Probability clip inside the BPR log-sigmoid.
pub const BPR_CLIP: f64 = 1e-12;

/// Rejection-sampling attempts before enumerating non-neighbors.
pub const NEGATIVE_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }

    fn validate(&self, stage: u8) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!("stage {stage}: invalid settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dim: usize,
    pub layers: usize,
    pub keep_prob: f64,
    pub include_layer0: bool,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    /// Weight of the reconstruction loss in stage 1.
    pub lambda_rec: f64,
    pub delta: f64,
    pub prompt_variant: PromptVariant,
    pub seed: u64,
    /// Behaviors left out entirely (ablation). Never the target.
    pub dropped_behaviors: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            layers: 2,
            keep_prob: 0.8,
            include_layer0: false,
            stage1: StageConfig {
                epochs: 40,
                batch_size: 256,
                learning_rate: 5e-3,
                weight_decay: 0.0,
            },
            stage2: StageConfig {
                epochs: 20,
                batch_size: 256,
                learning_rate: 5e-3,
                weight_decay: 0.0,
            },
            stage3: StageConfig {
                epochs: 20,
                batch_size: 256,
                learning_rate: 5e-3,
                weight_decay: 0.0,
            },
            lambda_rec: 1.0,
            delta: crate::denoise::DEFAULT_DELTA,
            prompt_variant: PromptVariant::Add,
            seed: 7,
            dropped_behaviors: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn shape(&self, graph: &MultiBehaviorGraph) -> ModelShape {
        ModelShape {
            num_users: graph.num_users(),
            num_items: graph.num_items(),
            num_behaviors: graph.num_behaviors(),
            dim: self.dim,
            layers: self.layers,
            include_layer0: self.include_layer0,
        }
    }

    pub fn validate(&self, num_behaviors: usize) -> Result<()> {
        if self.dim == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument("dim and layers must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_prob must lie in (0, 1], got {}",
                self.keep_prob
            )));
        }
        if self.lambda_rec < 0.0 {
            return Err(Error::InvalidArgument("lambda_rec must be nonnegative".into()));
        }
        check_delta(self.delta)?;
        if let Some(&b) = self.dropped_behaviors.iter().find(|&&b| b + 1 >= num_behaviors) {
            return Err(Error::InvalidArgument(format!(
                "behavior {b} cannot be dropped (target or out of range)"
            )));
        }
        self.stage1.validate(1)?;
        self.stage2.validate(2)?;
        self.stage3.validate(3)
    }

    fn encode_options(&self, training: bool, behavior_aware: bool) -> EncodeOptions {
        EncodeOptions {
            training,
            keep_prob: self.keep_prob,
            include_layer0: self.include_layer0,
            behavior_aware,
        }
    }
}

/// Behaviors that take part in training: not dropped and with at least one edge.
pub fn active_behaviors(graph: &MultiBehaviorGraph, dropped: &[usize]) -> Result<Vec<usize>> {
    let target = graph.num_behaviors() - 1;
    if graph.behavior(target).edge_count() == 0 {
        return Err(Error::EmptyDataset("the target behavior has no edges".into()));
    }
    Ok((0..graph.num_behaviors())
        .filter(|b| !dropped.contains(b) && graph.behavior(*b).edge_count() > 0)
        .collect())
}

/// Copy of `graph` with the given behaviors emptied.
pub fn without_behaviors(graph: &MultiBehaviorGraph, dropped: &[usize]) -> MultiBehaviorGraph {
    MultiBehaviorGraph::from_edges(
        graph.num_users(),
        graph.num_items(),
        graph.num_behaviors(),
        graph.triples().filter(|(_, _, b)| !dropped.contains(b)).collect::<Vec<_>>(),
    )
}

/// `−log σ(s_ui − s_uj)` for one triple.
pub fn bpr_loss(positive_score: f64, negative_score: f64) -> f64 {
    let p = crate::numcore::sigmoid(positive_score - negative_score);
    -p.clamp(BPR_CLIP, 1.0 - BPR_CLIP).ln()
}

/// One `(user, positive, negative)` batch in column form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleBatch {
    pub users: Rc<Vec<usize>>,
    pub positives: Rc<Vec<usize>>,
    pub negatives: Rc<Vec<usize>>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.len()).map(|k| (self.users[k], self.positives[k], self.negatives[k]))
    }
}

/// Draws BPR triples from one behavior graph.
#[derive(Debug, Clone)]
pub struct TripleSampler<'a> {
    graph: &'a BipartiteGraph,
    edges: Vec<(usize, usize)>,
}

impl<'a> TripleSampler<'a> {
    pub fn new(graph: &'a BipartiteGraph) -> Self {
        Self {
            graph,
            edges: graph.edges().collect(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Positives uniform over edges (with replacement); one negative per
    /// positive, uniform over the user's non-neighbors. Users adjacent to
    /// every item are skipped.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<TripleBatch> {
        if self.edges.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "behavior {} has no edges to sample",
                self.graph.behavior
            )));
        }
        let num_items = self.graph.num_items();
        let (mut users, mut positives, mut negatives) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..batch {
            let (u, i) = self.edges[rng.gen_range(0..self.edges.len())];
            let Some(j) = self.negative(u, num_items, rng) else {
                log::warn!("user {u} interacts with every item; skipping");
                continue;
            };
            users.push(u);
            positives.push(i);
            negatives.push(j);
        }
        Ok(TripleBatch {
            users: Rc::new(users),
            positives: Rc::new(positives),
            negatives: Rc::new(negatives),
        })
    }

    fn negative(&self, user: usize, num_items: usize, rng: &mut Rng) -> Option<usize> {
        for _ in 0..NEGATIVE_TRIES {
            let j = rng.gen_range(0..num_items);
            if !self.graph.has_edge(user, j) {
                return Some(j);
            }
        }
        let free: Vec<usize> = (0..num_items).filter(|&j| !self.graph.has_edge(user, j)).collect();
        (!free.is_empty()).then(|| free[rng.gen_range(0..free.len())])
    }
}

pub fn sample_bpr_triples(graph: &BipartiteGraph, batch: usize, rng: &mut Rng) -> Result<TripleBatch> {
    TripleSampler::new(graph).sample(batch, rng)
}

/// Mean BPR loss of `batch` on inner-product scores.
pub fn bpr_loss_on_tape(tape: &Tape, users: Var, items: Var, batch: &TripleBatch) -> Result<Var> {
    let hu = tape.gather(users, Rc::clone(&batch.users))?;
    let hi = tape.gather(items, Rc::clone(&batch.positives))?;
    let hj = tape.gather(items, Rc::clone(&batch.negatives))?;
    let diff = tape.sub(tape.row_sum(tape.mul(hu, hi)), tape.row_sum(tape.mul(hu, hj)));
    let p = tape.clamp(tape.sigmoid(diff), BPR_CLIP, 1.0 - BPR_CLIP);
    Ok(tape.scale(tape.mean(tape.log(p)), -1.0))
}

/// Rows of every behavior embedding, target last.
pub fn behavior_embeddings(store: &ParameterStore) -> Result<Array2<f64>> {
    let aux = store.value(AUX_BEHAVIOR_EMBED)?;
    let target = store.value(TARGET_BEHAVIOR_EMBED)?;
    Ok(concatenate(Axis(0), &[aux.view(), target.view()]).expect("equal widths"))
}

/// `1×d` embedding of `behavior` on the tape.
fn behavior_row(tape: &Tape, store: &ParameterStore, behavior: usize, target: usize) -> Result<Var> {
    if behavior == target {
        tape.param(store, TARGET_BEHAVIOR_EMBED)
    } else {
        let aux = tape.param(store, AUX_BEHAVIOR_EMBED)?;
        tape.gather(aux, Rc::new(vec![behavior]))
    }
}

/// Prompt `e_p`: mean of the active behavior embeddings, computed on the tape
/// so gradients reach whichever embeddings are unfrozen.
pub fn prompt_vector(tape: &Tape, store: &ParameterStore, active: &[usize], target: usize) -> Result<Var> {
    let rows = active
        .iter()
        .map(|&b| behavior_row(tape, store, b, target))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.mean_all(&rows))
}

/// Trainable entry count per stage.
///
/// * stage 1: `(|U|+|I|)·d + K·d + L·(2d² + 4d + 6) + 2·R·d`
/// * stage 2: `2·R·d`
/// * stage 3: `d`
///
/// where `R` is the readout width (`L·d`, or `(L+1)·d` with layer 0).
pub fn count_trainable(shape: &ModelShape, stage: u8) -> Result<usize> {
    let d = shape.dim;
    let readout = 2 * shape.readout_rows() * d;
    match stage {
        1 => Ok((shape.num_users + shape.num_items) * d
            + shape.num_behaviors * d
            + shape.layers * (2 * d * d + 4 * d + 6)
            + readout),
        2 => Ok(readout),
        3 => Ok(d),
        other => Err(Error::InvalidArgument(format!("no stage {other}"))),
    }
}

/// Per-run diagnostics that do not belong in a checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Mean reconstruction loss per epoch (stage 1 only).
    pub rec_trace: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl TrainReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub checkpoint: Checkpoint,
    pub denoised: DenoisedGraph,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

fn steps_per_epoch(samplers: &[TripleSampler], batch: usize) -> usize {
    let largest = samplers.iter().map(TripleSampler::edge_count).max().unwrap_or(0);
    largest.div_ceil(batch).max(1)
}

/// Shared loop: sample, build the loss, step the optimizer.
fn run_epochs<F>(
    stage: u8,
    settings: &StageConfig,
    store: &mut ParameterStore,
    samplers: &[TripleSampler],
    rng: &mut Rng,
    mut step_loss: F,
) -> Result<TrainReport>
where
    F: FnMut(&Tape, &ParameterStore, &[TripleBatch], &mut Rng) -> Result<(Var, Option<Var>)>,
{
    let mut optimizer = settings.optimizer();
    let steps = steps_per_epoch(samplers, settings.batch_size);
    let mut report = TrainReport {
        steps_per_epoch: steps,
        ..TrainReport::default()
    };
    let mut dropout_rng = sub_rng(store.seed(), &format!("stage{stage}/dropout"));
    for epoch in 0..settings.epochs {
        let started = Instant::now();
        let (mut total, mut rec) = (0.0, 0.0);
        for _ in 0..steps {
            let batches = samplers
                .iter()
                .map(|s| s.sample(settings.batch_size, rng))
                .collect::<Result<Vec<_>>>()?;
            let tape = Tape::new();
            let (loss, rec_loss) = step_loss(&tape, store, &batches, &mut dropout_rng)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { stage, epoch, loss: value });
            }
            let grads = tape.backward(loss)?;
            store.zero_grads();
            grads.write_to(store);
            optimizer.step(store);
            total += value;
            rec += rec_loss.map_or(0.0, |r| tape.scalar(r));
        }
        report.loss_trace.push(total / steps as f64);
        report.rec_trace.push(rec / steps as f64);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!(
            "stage {stage} epoch {}/{}: loss {:.5}",
            epoch + 1,
            settings.epochs,
            total / steps as f64
        );
    }
    Ok(report)
}

/// Mean BPR over the non-empty batches, multi-behavior representations.
fn mean_bpr(tape: &Tape, reps: &Representations, batches: &[TripleBatch]) -> Result<Var> {
    let terms = batches
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| bpr_loss_on_tape(tape, reps.users, reps.items, b))
        .collect::<Result<Vec<_>>>()?;
    if terms.is_empty() {
        return Err(Error::EmptyDataset("every sampled batch was empty".into()));
    }
    Ok(tape.mean_all(&terms))
}

/// Stage-1 objective: mean multi-behavior BPR plus `λ_rec` times the
/// reconstruction loss on the same triples. `batches` follow the order of
/// `encoder_graph.behaviors`. Returns the total and, when used, the
/// reconstruction term.
pub fn stage1_loss(
    tape: &Tape,
    store: &ParameterStore,
    encoder_graph: &EncoderGraph,
    batches: &[TripleBatch],
    config: &PipelineConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<(Var, Option<Var>)> {
    let with_rec = config.lambda_rec > 0.0;
    let vars = EncoderVars::load(tape, store, config.layers, true)?;
    let options = config.encode_options(training, with_rec);
    let reps = encode(tape, &vars, encoder_graph, config.layers, None, &options, rng)?;
    let bpr = mean_bpr(tape, &reps, batches)?;
    if !with_rec {
        return Ok((bpr, None));
    }
    let rec_batches = batches
        .iter()
        .zip(&encoder_graph.behaviors)
        .enumerate()
        .filter(|(_, (b, _))| !b.is_empty())
        .map(|(stream, (b, ops))| {
            Ok(ReconstructionBatch {
                users: Rc::clone(&b.users),
                positives: Rc::clone(&b.positives),
                negatives: Rc::clone(&b.negatives),
                user_reps: reps.behavior_users[stream],
                item_reps: reps.behavior_items[stream],
                behavior: behavior_row(tape, store, ops.behavior, encoder_graph.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rec = reconstruction_loss(tape, &rec_batches)?;
    Ok((tape.add(bpr, tape.scale(rec, config.lambda_rec)), Some(rec)))
}

/// Stage 1: joint multi-behavior BPR and graph reconstruction over the
/// training graph with relation graphs, then threshold pruning.
pub fn stage1_train(
    graph: &MultiBehaviorGraph,
    relations: &RelationGraphs,
    config: &PipelineConfig,
    config_hash: &str,
) -> Result<Stage1Output> {
    config.validate(graph.num_behaviors())?;
    let graph = without_behaviors(graph, &config.dropped_behaviors);
    let active = active_behaviors(&graph, &config.dropped_behaviors)?;
    let target = graph.num_behaviors() - 1;
    let shape = config.shape(&graph);
    let mut store = init_parameters(&shape, config.seed)?;
    let encoder_graph = EncoderGraph::new(&graph, Some(relations), &active)?;
    let samplers: Vec<TripleSampler> = active.iter().map(|&b| TripleSampler::new(graph.behavior(b))).collect();
    let mut rng = sub_rng(config.seed, "stage1/sampling");

    let report = run_epochs(1, &config.stage1, &mut store, &samplers, &mut rng, |tape, store, batches, drop_rng| {
        stage1_loss(tape, store, &encoder_graph, batches, config, true, drop_rng)
    })?;

    let reps = infer(&store, &encoder_graph, config, None)?;
    let denoised = binarize_and_prune(&graph, &reps, &behavior_embeddings(&store)?, config.delta)?;
    log::info!(
        "stage 1 pruned {} of {} auxiliary edges",
        denoised.removed.len(),
        graph.total_edges() - graph.behavior(target).edge_count()
    );

    let mut checkpoint = Checkpoint::new(1, config_hash, store);
    checkpoint.loss_trace = report.loss_trace.clone();
    Ok(Stage1Output {
        checkpoint,
        denoised,
        report,
    })
}

/// Stage 2: frozen encoder, re-initialized readout trained with BPR on the
/// denoised graph without relation aggregation.
pub fn stage2_train(
    stage1: &Checkpoint,
    denoised: &MultiBehaviorGraph,
    config: &PipelineConfig,
    config_hash: &str,
) -> Result<StageOutput> {
    stage1.expect_stage(1)?;
    config.validate(denoised.num_behaviors())?;
    let graph = without_behaviors(denoised, &config.dropped_behaviors);
    let active = active_behaviors(&graph, &config.dropped_behaviors)?;
    let mut store = stage2_store(&stage1.store, &config.shape(&graph))?;
    let encoder_graph = EncoderGraph::new(&graph, None, &active)?;
    let samplers: Vec<TripleSampler> = active.iter().map(|&b| TripleSampler::new(graph.behavior(b))).collect();
    let mut rng = sub_rng(config.seed, "stage2/sampling");

    let report = run_epochs(2, &config.stage2, &mut store, &samplers, &mut rng, |tape, store, batches, drop_rng| {
        let vars = EncoderVars::load(tape, store, config.layers, false)?;
        let options = config.encode_options(true, false);
        let reps = encode(tape, &vars, &encoder_graph, config.layers, None, &options, drop_rng)?;
        Ok((mean_bpr(tape, &reps, batches)?, None))
    })?;

    let mut checkpoint = Checkpoint::new(2, config_hash, store);
    checkpoint.loss_trace = report.loss_trace.clone();
    Ok(StageOutput { checkpoint, report })
}

/// Stage-1 parameters, all frozen, with freshly initialized trainable readouts.
pub fn stage2_store(stage1: &ParameterStore, shape: &ModelShape) -> Result<ParameterStore> {
    let mut store = stage1.clone();
    store.freeze_all();
    for name in [USER_READOUT, ITEM_READOUT] {
        let rows = store.get(name)?.shape().0;
        if rows != shape.readout_rows() {
            return Err(Error::InvalidArgument(format!(
                "{name} has {rows} rows, the configuration expects {}",
                shape.readout_rows()
            )));
        }
        let value = xavier_uniform(store.seed(), &format!("stage2/{name}"), rows, shape.dim);
        store.insert_parameter(name, Parameter::new(value));
    }
    Ok(store)
}

/// Stage-2 parameters with only the target behavior embedding trainable.
pub fn stage3_store(stage2: &ParameterStore) -> Result<ParameterStore> {
    let mut store = stage2.clone();
    store.freeze_all();
    store.set_frozen(TARGET_BEHAVIOR_EMBED, false)?;
    Ok(store)
}

/// Stage 3: prompt tuning of the target behavior on the denoised graph.
pub fn stage3_train(
    stage2: &Checkpoint,
    denoised: &MultiBehaviorGraph,
    config: &PipelineConfig,
    config_hash: &str,
) -> Result<StageOutput> {
    stage2.expect_stage(2)?;
    config.validate(denoised.num_behaviors())?;
    let graph = without_behaviors(denoised, &config.dropped_behaviors);
    let active = active_behaviors(&graph, &config.dropped_behaviors)?;
    let target = graph.num_behaviors() - 1;
    let mut store = stage3_store(&stage2.store)?;
    let encoder_graph = EncoderGraph::new(&graph, None, &active)?;
    let samplers = [TripleSampler::new(graph.behavior(target))];
    let mut rng = sub_rng(config.seed, &format!("stage3/{}/sampling", config.prompt_variant));

    let report = run_epochs(3, &config.stage3, &mut store, &samplers, &mut rng, |tape, store, batches, drop_rng| {
        let vars = EncoderVars::load(tape, store, config.layers, false)?;
        let prompt = Prompt {
            vector: prompt_vector(tape, store, &active, target)?,
            variant: config.prompt_variant,
        };
        let options = config.encode_options(true, false);
        let reps = encode(tape, &vars, &encoder_graph, config.layers, Some(&prompt), &options, drop_rng)?;
        Ok((mean_bpr(tape, &reps, batches)?, None))
    })?;

    let mut checkpoint = Checkpoint::new(3, config_hash, store);
    checkpoint.loss_trace = report.loss_trace.clone();
    checkpoint
        .extra
        .insert("prompt_variant".into(), config.prompt_variant.to_string());
    Ok(StageOutput { checkpoint, report })
}

/// How stage-3 inference builds its prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSource {
    /// Mean of the active behavior embeddings.
    Learned(PromptVariant),
    /// An all-zero prompt; for equivalence checks.
    Zero(PromptVariant),
}

/// Eval-mode representations over `encoder_graph`.
pub fn infer(
    store: &ParameterStore,
    encoder_graph: &EncoderGraph,
    config: &PipelineConfig,
    prompt: Option<PromptSource>,
) -> Result<RepresentationArrays> {
    let tape = Tape::new();
    let with_relations = encoder_graph.has_relations();
    let vars = EncoderVars::load(&tape, store, config.layers, with_relations)?;
    let prompt = match prompt {
        None => None,
        Some(PromptSource::Learned(variant)) => {
            let active: Vec<usize> = encoder_graph.behaviors.iter().map(|b| b.behavior).collect();
            Some(Prompt {
                vector: prompt_vector(&tape, store, &active, encoder_graph.target)?,
                variant,
            })
        }
        Some(PromptSource::Zero(variant)) => Some(Prompt {
            vector: tape.constant(Array2::zeros((1, config.dim))),
            variant,
        }),
    };
    let options = config.encode_options(false, with_relations);
    // Dropout is off, so this generator is never drawn from.
    let mut rng = sub_rng(config.seed, "inference");
    let reps = encode(&tape, &vars, encoder_graph, config.layers, prompt.as_ref(), &options, &mut rng)?;
    Ok(RepresentationArrays::from_tape(&tape, &reps))
}

/// Eval-mode representations for a checkpoint of any stage. Stage 1 runs on
/// the training graph with relation graphs; later stages on the denoised graph.
pub fn checkpoint_representations(
    checkpoint: &Checkpoint,
    graph: &MultiBehaviorGraph,
    relations: Option<&RelationGraphs>,
    config: &PipelineConfig,
) -> Result<RepresentationArrays> {
    let graph = without_behaviors(graph, &config.dropped_behaviors);
    let active = active_behaviors(&graph, &config.dropped_behaviors)?;
    let (relations, prompt) = match checkpoint.stage {
        1 => (
            Some(relations.ok_or_else(|| {
                Error::InvalidArgument("stage-1 inference needs relation graphs".into())
            })?),
            None,
        ),
        2 => (None, None),
        3 => {
            let variant = checkpoint
                .extra
                .get("prompt_variant")
                .map(|v| v.parse())
                .transpose()?
                .unwrap_or(config.prompt_variant);
            (None, Some(PromptSource::Learned(variant)))
        }
        other => return Err(Error::InvalidArgument(format!("no stage {other}"))),
    };
    let encoder_graph = EncoderGraph::new(&graph, relations, &active)?;
    infer(&checkpoint.store, &encoder_graph, config, prompt)
}

/// Sizes of the gradient-check fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckFixture {
    pub users: usize,
    pub items: usize,
    pub behaviors: usize,
    pub dim: usize,
    pub layers: usize,
    /// Records per (user, behavior).
    pub per_user: usize,
    pub batch: usize,
}

impl Default for GradCheckFixture {
    fn default() -> Self {
        Self {
            users: 6,
            items: 8,
            behaviors: 3,
            dim: 4,
            layers: 2,
            per_user: 3,
            batch: 8,
        }
    }
}

/// Validates tape gradients of the full stage-1 objective (relation-aware
/// encoding, BPR and reconstruction) against central differences on a small
/// random dataset. Dropout is disabled so the objective is deterministic.
pub fn stage1_gradient_check(
    fixture: &GradCheckFixture,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let labels: Vec<String> = (0..fixture.behaviors).map(|b| format!("b{b}")).collect();
    let mut rng = sub_rng(seed, "gradcheck/data");
    let mut rows = Vec::new();
    let mut clock = 0u64;
    for u in 0..fixture.users {
        for b in 0..fixture.behaviors {
            for _ in 0..fixture.per_user {
                clock += 1;
                let item = rng.gen_range(0..fixture.items);
                rows.push((format!("u{u}"), format!("i{item}"), b, clock));
            }
        }
    }
    // Pin every id so the tables cover the full fixture.
    for i in 0..fixture.items {
        clock += 1;
        rows.push((format!("u{}", i % fixture.users), format!("i{i}"), 0, clock));
    }
    let dataset = Dataset::from_raw(labels, rows)?;
    let graph = build_multi_behavior_graph(&dataset);
    let relations = RelationGraphs::build(&dataset, 4, TransitionCount::Consecutive);
    let config = PipelineConfig {
        dim: fixture.dim,
        layers: fixture.layers,
        keep_prob: 1.0,
        seed,
        ..PipelineConfig::default()
    };
    let shape = config.shape(&graph);
    let store = init_parameters(&shape, seed)?;
    let active = active_behaviors(&graph, &[])?;
    let encoder_graph = EncoderGraph::new(&graph, Some(&relations), &active)?;
    let mut sample_rng = sub_rng(seed, "gradcheck/triples");
    let batches = active
        .iter()
        .map(|&b| sample_bpr_triples(graph.behavior(b), fixture.batch, &mut sample_rng))
        .collect::<Result<Vec<_>>>()?;
    check_gradients(&store, step, tolerance, |tape, store| {
        let mut rng = sub_rng(seed, "gradcheck/dropout");
        Ok(stage1_loss(tape, store, &encoder_graph, &batches, &config, false, &mut rng)?.0)
    })
}
