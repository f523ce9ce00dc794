use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dpt::checkpoint::Checkpoint;
use dpt::config::RunConfig;
use dpt::denoise::DenoisedGraph;
use dpt::eval::{denoise_quality, rank_all, write_rankings_csv, MetricReport};
use dpt::graphs::{build_multi_behavior_graph, MultiBehaviorGraph, RelationGraphs};
use dpt::ingest::{
    filter_min_target, generate_synthetic, leave_one_out_split, load_interactions, NoiseLabels,
    SplitDataset,
};
use dpt::pipeline::{
    checkpoint_representations, stage1_gradient_check, stage1_train, stage2_train, stage3_train,
    GradCheckFixture,
};

use crate::{Cli, Command};

const SYNTHETIC: &str = "synthetic.tsv";
const NOISE: &str = "synthetic.noise";
const SPLIT: &str = "split.tsv";
const DENOISED: &str = "denoised.tsv";
const REMOVED: &str = "removed.tsv";

struct Workspace {
    config: RunConfig,
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut config = RunConfig::load(&cli.config)
        .with_context(|| format!("reading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(mode) = cli.eval_mode {
        config.eval.mode = mode;
    }
    if let Some(variant) = cli.prompt_variant {
        config.set_prompt_variant(variant);
    }
    if !cli.drop_behavior.is_empty() {
        config.dropped = cli.drop_behavior.clone();
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ws = Workspace {
        config,
        out: cli.out,
    };
    match cli.command {
        Command::Synth => ws.synth(),
        Command::Prepare => ws.prepare(),
        Command::Stage1 => ws.stage1(),
        Command::Stage2 => ws.stage2(),
        Command::Stage3 => ws.stage3(),
        Command::Evaluate {
            stage,
            checkpoint,
            dump,
        } => ws.evaluate(stage, checkpoint, dump),
        Command::Gradcheck => ws.gradcheck(),
        Command::DenoiseReport { noise } => ws.denoise_report(noise),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, hint: &str) -> Result<PathBuf> {
        let path = self.path(name);
        ensure!(path.exists(), "{} is missing; {hint}", path.display());
        Ok(path)
    }

    fn stage3_name(&self) -> String {
        format!("stage3-{}.ckpt", self.config.pipeline.prompt_variant)
    }

    fn checkpoint_name(&self, stage: u8) -> Result<String> {
        Ok(match stage {
            1 => "stage1.ckpt".into(),
            2 => "stage2.ckpt".into(),
            3 => self.stage3_name(),
            other => bail!("no stage {other}"),
        })
    }

    /// Loads a checkpoint and rejects one written under another configuration.
    fn load_checkpoint(&self, path: &Path, stage: Option<u8>) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if let Some(stage) = stage {
            ckpt.expect_stage(stage)?;
        }
        let hash = self.config.hash();
        ensure!(
            ckpt.config_hash == hash,
            "{} was written under config {}, the current config is {hash}",
            path.display(),
            ckpt.config_hash
        );
        Ok(ckpt)
    }

    fn split(&self) -> Result<SplitDataset> {
        let path = self.require(SPLIT, "run prepare first")?;
        Ok(SplitDataset::read(open(&path)?)?)
    }

    fn prepared(&self) -> Result<(SplitDataset, RunConfig)> {
        let split = self.split()?;
        let mut config = self.config.clone();
        ensure!(
            split.train.behaviors() == config.data.behaviors.as_slice(),
            "split behaviors {:?} differ from the configured {:?}; rerun prepare",
            split.train.behaviors(),
            config.data.behaviors
        );
        config.resolve_dropped()?;
        Ok((split, config))
    }

    fn denoised(&self, hint: &str) -> Result<MultiBehaviorGraph> {
        let path = self.require(DENOISED, hint)?;
        Ok(DenoisedGraph::read_edges(open(&path)?)?.graph)
    }

    fn synth(&self) -> Result<()> {
        let spec = self
            .config
            .synth
            .as_ref()
            .context("the config has no [synth] section")?;
        let (dataset, noise) = generate_synthetic(spec)?;
        let mut out = create(&self.path(SYNTHETIC))?;
        dataset.write_tsv(&mut out)?;
        out.flush()?;
        let mut side = create(&self.path(NOISE))?;
        noise.write_sidecar(&dataset, &mut side)?;
        side.flush()?;
        println!(
            "wrote {} records ({} planted noisy edges) to {}",
            dataset.records().len(),
            noise.noisy.len(),
            self.path(SYNTHETIC).display()
        );
        Ok(())
    }

    fn prepare(&self) -> Result<()> {
        let source = match &self.config.data.interactions {
            Some(path) => path.clone(),
            None => self.require(SYNTHETIC, "run synth first")?,
        };
        let labels = &self.config.data.behaviors;
        ensure!(labels.len() >= 2, "[data] behaviors needs at least one auxiliary and the target");
        let raw = load_interactions(open(&source)?, labels)
            .with_context(|| format!("reading {}", source.display()))?;
        let filtered = filter_min_target(&raw, self.config.data.min_target)?;
        let split = leave_one_out_split(&filtered)?;
        let mut out = create(&self.path(SPLIT))?;
        split.write(&mut out)?;
        out.flush()?;

        let relations = self.relations(&split);
        let d = &split.train;
        let mut users = create(&self.path("user_relations.tsv"))?;
        relations.users.write_tsv(d.user_ids(), d.behaviors(), &mut users)?;
        users.flush()?;
        let mut items = create(&self.path("item_relations.tsv"))?;
        relations.items.write_tsv(d.item_ids(), d.behaviors(), &mut items)?;
        items.flush()?;
        println!(
            "{} users, {} items, {} training records, {} held-out",
            d.num_users(),
            d.num_items(),
            d.records().len(),
            split.test.len()
        );
        Ok(())
    }

    fn relations(&self, split: &SplitDataset) -> RelationGraphs {
        RelationGraphs::build(
            &split.train,
            self.config.data.relation_top_k,
            self.config.data.transitions,
        )
    }

    fn stage1(&self) -> Result<()> {
        let (split, config) = self.prepared()?;
        let graph = build_multi_behavior_graph(&split.train);
        let relations = self.relations(&split);
        let hash = config.hash();
        let out = stage1_train(&graph, &relations, &config.pipeline, &hash)?;
        let mut ckpt = out.checkpoint;
        ckpt.denoised_graph = Some(DENOISED.into());
        ckpt.save(&self.path("stage1.ckpt"))?;

        let mut edges = create(&self.path(DENOISED))?;
        out.denoised.write_edges(&mut edges)?;
        edges.flush()?;
        let d = &split.train;
        let mut removed = create(&self.path(REMOVED))?;
        out.denoised
            .write_removed(d.user_ids(), d.item_ids(), d.behaviors(), &mut removed)?;
        removed.flush()?;
        println!(
            "stage 1: final loss {:.5}, {:.3}s/epoch, pruned {} auxiliary edges",
            out.report.loss_trace.last().copied().unwrap_or(f64::NAN),
            out.report.mean_epoch_seconds(),
            out.denoised.removed.len()
        );
        Ok(())
    }

    fn stage2(&self) -> Result<()> {
        let (_, config) = self.prepared()?;
        let path = self.require("stage1.ckpt", "run stage 1 first")?;
        let stage1 = self.load_checkpoint(&path, Some(1))?;
        let denoised = self.denoised("run stage 1 first")?;
        let out = stage2_train(&stage1, &denoised, &config.pipeline, &config.hash())?;
        let mut ckpt = out.checkpoint;
        ckpt.denoised_graph = Some(DENOISED.into());
        ckpt.save(&self.path("stage2.ckpt"))?;
        println!(
            "stage 2: final loss {:.5}, {:.3}s/epoch",
            out.report.loss_trace.last().copied().unwrap_or(f64::NAN),
            out.report.mean_epoch_seconds()
        );
        Ok(())
    }

    fn stage3(&self) -> Result<()> {
        let (_, config) = self.prepared()?;
        let path = self.require("stage2.ckpt", "run stage 2 first")?;
        let stage2 = self.load_checkpoint(&path, Some(2))?;
        let denoised = self.denoised("run stage 1 first")?;
        let out = stage3_train(&stage2, &denoised, &config.pipeline, &config.hash())?;
        let mut ckpt = out.checkpoint;
        ckpt.denoised_graph = Some(DENOISED.into());
        ckpt.save(&self.path(&self.stage3_name()))?;
        println!(
            "stage 3 ({}): final loss {:.5}, {:.3}s/epoch",
            config.pipeline.prompt_variant,
            out.report.loss_trace.last().copied().unwrap_or(f64::NAN),
            out.report.mean_epoch_seconds()
        );
        Ok(())
    }

    fn evaluate(&self, stage: Option<u8>, checkpoint: Option<PathBuf>, dump: Option<PathBuf>) -> Result<()> {
        let (split, config) = self.prepared()?;
        let path = match (stage, checkpoint) {
            (_, Some(path)) => path,
            (Some(stage), None) => {
                let hint = if stage == 1 {
                    "run stage1 first".to_string()
                } else {
                    format!("run stage{stage} first")
                };
                self.require(&self.checkpoint_name(stage)?, &hint)?
            }
            (None, None) => bail!("pass --stage or --checkpoint"),
        };
        let ckpt = self.load_checkpoint(&path, stage)?;
        let train = build_multi_behavior_graph(&split.train);
        let reps = if ckpt.stage == 1 {
            let relations = self.relations(&split);
            checkpoint_representations(&ckpt, &train, Some(&relations), &config.pipeline)?
        } else {
            let denoised = self.denoised("run stage 1 first")?;
            checkpoint_representations(&ckpt, &denoised, None, &config.pipeline)?
        };
        let target = train.behavior(train.num_behaviors() - 1);
        let results = rank_all(
            &reps.users,
            &reps.items,
            target,
            &split.test_pairs(),
            config.eval.mode,
            config.seed,
        )?;
        let mut report = MetricReport::from_results(
            ckpt.stage,
            config.eval.k,
            &results,
            config.seed,
            &ckpt.config_hash,
            config.eval.mode,
        );
        report.prompt_variant = ckpt.extra.get("prompt_variant").cloned();
        let line = report.to_json_line();
        let name = match &report.prompt_variant {
            Some(v) => format!("metrics-stage3-{v}.jsonl"),
            None => format!("metrics-stage{}.jsonl", ckpt.stage),
        };
        let mut out = create(&self.path(&name))?;
        writeln!(out, "{line}")?;
        out.flush()?;
        if let Some(dump) = dump {
            let mut csv = create(&dump)?;
            write_rankings_csv(&results, &mut csv)?;
            csv.flush()?;
        }
        println!("{line}");
        Ok(())
    }

    fn gradcheck(&self) -> Result<()> {
        let fixture = GradCheckFixture::default();
        let report = stage1_gradient_check(&fixture, self.config.seed, 1e-6, 1e-4)?;
        for p in &report.params {
            println!(
                "{:<28} entries {:>4}  max rel err {:.3e}",
                p.name, p.entries, p.max_rel_error
            );
        }
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict}: {} entries, max relative error {:.3e} (tolerance {:.0e})",
            report.entries(),
            report.max_rel_error(),
            report.tolerance
        );
        ensure!(report.passed(), "gradient check failed");
        Ok(())
    }

    fn denoise_report(&self, noise: Option<PathBuf>) -> Result<()> {
        let (split, _) = self.prepared()?;
        let ckpt_path = self.require("stage1.ckpt", "run stage 1 first")?;
        let ckpt = self.load_checkpoint(&ckpt_path, Some(1))?;
        let graph_name = ckpt
            .denoised_graph
            .clone()
            .context("the stage-1 checkpoint names no denoised graph")?;
        let graph_path = ckpt_path.parent().unwrap_or(Path::new(".")).join(graph_name);
        let denoised = DenoisedGraph::read_edges(open(&graph_path)?)?.graph;
        let noise_path = match noise {
            Some(p) => p,
            None => self.require(NOISE, "run synth first or pass --noise")?,
        };
        let labels = NoiseLabels::read_sidecar(&split.train, open(&noise_path)?)?;

        let train = build_multi_behavior_graph(&split.train);
        let kept: BTreeSet<_> = denoised.triples().collect();
        let removed: Vec<_> = train
            .triples()
            .filter(|t| !kept.contains(t))
            .collect();
        let quality = denoise_quality(&removed, &labels.noisy);
        println!("{}", serde_json::to_string(&quality)?);
        Ok(())
    }
}
