//! Run configuration files.
//!
//! Plain text, one `key = value` per line, grouped under `[section]`
//! headers. `#` starts a comment. Keys before the first header belong to
//! `[run]`. Unknown sections and keys are rejected.
//!
//! ```text
//! seed = 7
//!
//! [data]
//! interactions = data/events.tsv
//! behaviors = click, fav, cart, buy
//!
//! [model]
//! dim = 16
//! layers = 2
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::PromptVariant;
use crate::error::{Error, Result};
use crate::eval::{CandidateMode, DEFAULT_K, DEFAULT_SAMPLED_NEGATIVES};
use crate::graphs::TransitionCount;
use crate::ingest::SyntheticSpec;
use crate::pipeline::{PipelineConfig, StageConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Interaction file; `None` means the synthetic dataset in the output directory.
    pub interactions: Option<PathBuf>,
    /// Ordered labels, target last.
    pub behaviors: Vec<String>,
    /// Users with fewer target interactions are dropped.
    pub min_target: usize,
    pub relation_top_k: usize,
    pub transitions: TransitionCount,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub mode: CandidateMode,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: Option<SyntheticSpec>,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    /// Behavior labels excluded from training.
    pub dropped: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        Self {
            seed: pipeline.seed,
            synth: None,
            data: DataConfig {
                interactions: None,
                behaviors: Vec::new(),
                min_target: 3,
                relation_top_k: 10,
                transitions: TransitionCount::Consecutive,
            },
            pipeline,
            eval: EvalConfig {
                mode: CandidateMode::Full,
                k: DEFAULT_K,
            },
            dropped: Vec::new(),
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut sections: Sections = BTreeMap::new();
    let mut current = "run".to_string();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        let previous = sections
            .entry(current.clone())
            .or_default()
            .insert(key.trim().to_string(), (n + 1, value.trim().to_string()));
        if previous.is_some() {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("duplicate key {:?} in [{current}]", key.trim()),
            });
        }
    }
    Ok(sections)
}

struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section<'_> {
    fn take<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, raw)) = self.entries.remove(key) {
            *into = raw.parse().map_err(|e| Error::Parse {
                line,
                message: format!("[{}] {key}: {e}", self.name),
            })?;
        }
        Ok(())
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((key, (line, _))) => Err(Error::Parse {
                line,
                message: format!("unknown key {key:?} in [{}]", self.name),
            }),
            None => Ok(()),
        }
    }
}

fn list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn stage_section(section: &mut Section, stage: &mut StageConfig) -> Result<()> {
    section.take("epochs", &mut stage.epochs)?;
    section.take("batch_size", &mut stage.batch_size)?;
    section.take("learning_rate", &mut stage.learning_rate)?;
    section.take("weight_decay", &mut stage.weight_decay)
}

impl RunConfig {
    /// Parses a config file. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let mut config = RunConfig::default();
        let mut open = |name: &'static str| Section {
            name,
            entries: sections.remove(name).unwrap_or_default(),
        };

        let mut run = open("run");
        run.take("seed", &mut config.seed)?;
        run.finish()?;

        let mut synth = open("synth");
        if !synth.entries.is_empty() {
            let mut spec = SyntheticSpec {
                num_users: 200,
                num_items: 200,
                num_aux_behaviors: 3,
                num_blocks: 2,
                density: vec![0.25, 0.2, 0.2, 0.05],
                noise_rate: 0.1,
                seed: config.seed,
            };
            synth.take("users", &mut spec.num_users)?;
            synth.take("items", &mut spec.num_items)?;
            synth.take("aux_behaviors", &mut spec.num_aux_behaviors)?;
            synth.take("blocks", &mut spec.num_blocks)?;
            synth.take("noise_rate", &mut spec.noise_rate)?;
            if let Some((line, raw)) = synth.take_raw("density") {
                spec.density = list(&raw)
                    .iter()
                    .map(|d| d.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        line,
                        message: format!("[synth] density: {e}"),
                    })?;
            }
            config.synth = Some(spec);
        }
        synth.finish()?;

        let mut data = open("data");
        if let Some((_, path)) = data.take_raw("interactions") {
            config.data.interactions = Some(base_dir.join(path));
        }
        if let Some((_, labels)) = data.take_raw("behaviors") {
            config.data.behaviors = list(&labels);
        }
        data.take("min_target", &mut config.data.min_target)?;
        data.take("relation_top_k", &mut config.data.relation_top_k)?;
        if let Some((line, mode)) = data.take_raw("transitions") {
            config.data.transitions = match mode.as_str() {
                "consecutive" => TransitionCount::Consecutive,
                "all-pairs" => TransitionCount::AllPairs,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("transitions must be consecutive or all-pairs, got {other:?}"),
                    })
                }
            };
        }
        if let Some((_, labels)) = data.take_raw("drop_behaviors") {
            config.dropped = list(&labels);
        }
        data.finish()?;

        let p = &mut config.pipeline;
        let mut model = open("model");
        model.take("dim", &mut p.dim)?;
        model.take("layers", &mut p.layers)?;
        model.take("keep_prob", &mut p.keep_prob)?;
        model.take("include_layer0", &mut p.include_layer0)?;
        model.finish()?;

        let mut s1 = open("stage1");
        stage_section(&mut s1, &mut p.stage1)?;
        s1.take("lambda_rec", &mut p.lambda_rec)?;
        s1.take("delta", &mut p.delta)?;
        s1.finish()?;

        let mut s2 = open("stage2");
        stage_section(&mut s2, &mut p.stage2)?;
        s2.finish()?;

        let mut s3 = open("stage3");
        stage_section(&mut s3, &mut p.stage3)?;
        s3.take("prompt_variant", &mut p.prompt_variant)?;
        s3.finish()?;

        let mut eval = open("eval");
        eval.take("mode", &mut config.eval.mode)?;
        eval.take("k", &mut config.eval.k)?;
        let mut negatives = DEFAULT_SAMPLED_NEGATIVES;
        eval.take("negatives", &mut negatives)?;
        if let CandidateMode::Sampled(_) = config.eval.mode {
            config.eval.mode = CandidateMode::Sampled(negatives);
        }
        eval.finish()?;

        if let Some((name, entries)) = sections.into_iter().next() {
            let line = entries.values().map(|(l, _)| *l).min().unwrap_or(1);
            return Err(Error::Parse {
                line,
                message: format!("unknown section [{name}]"),
            });
        }

        config.set_seed(config.seed);
        if config.data.behaviors.is_empty() {
            if let Some(spec) = &config.synth {
                config.data.behaviors = spec.behavior_labels();
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pipeline.seed = seed;
        if let Some(spec) = &mut self.synth {
            spec.seed = seed;
        }
    }

    pub fn set_prompt_variant(&mut self, variant: PromptVariant) {
        self.pipeline.prompt_variant = variant;
    }

    /// Resolves dropped labels to behavior indices and stores them in the
    /// pipeline configuration.
    pub fn resolve_dropped(&mut self) -> Result<()> {
        let labels = &self.data.behaviors;
        let mut indices = Vec::new();
        for label in &self.dropped {
            let index = labels.iter().position(|l| l == label).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown behavior {label:?} in drop list"))
            })?;
            if index + 1 == labels.len() {
                return Err(Error::InvalidArgument(format!(
                    "the target behavior {label:?} cannot be dropped"
                )));
            }
            indices.push(index);
        }
        indices.sort_unstable();
        indices.dedup();
        self.pipeline.dropped_behaviors = indices;
        Ok(())
    }

    /// Everything that determines training outputs, one `key=value` per
    /// line. Prompt variant, evaluation settings and output location are
    /// excluded so every variant and evaluation mode shares one hash.
    pub fn canonical(&self) -> String {
        let p = &self.pipeline;
        let stage = |s: &StageConfig| {
            format!(
                "{}/{}/{:?}/{:?}",
                s.epochs, s.batch_size, s.learning_rate, s.weight_decay
            )
        };
        let mut dropped = self.dropped.clone();
        dropped.sort();
        dropped.dedup();
        let mut lines = vec![
            format!("seed={}", self.seed),
            format!("synth={:?}", self.synth),
            format!("interactions={:?}", self.data.interactions),
            format!("behaviors={}", self.data.behaviors.join(",")),
            format!("min_target={}", self.data.min_target),
            format!("relation_top_k={}", self.data.relation_top_k),
            format!("transitions={:?}", self.data.transitions),
            format!("dropped={}", dropped.join(",")),
            format!("dim={}", p.dim),
            format!("layers={}", p.layers),
            format!("keep_prob={:?}", p.keep_prob),
            format!("include_layer0={}", p.include_layer0),
            format!("stage1={}", stage(&p.stage1)),
            format!("stage2={}", stage(&p.stage2)),
            format!("stage3={}", stage(&p.stage3)),
            format!("lambda_rec={:?}", p.lambda_rec),
            format!("delta={:?}", p.delta),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
seed = 11   # overall seed

[synth]
users = 50
items = 40
density = 0.2, 0.1, 0.05

aux_behaviors = 2

[data]
behaviors = aux1, aux2, target

[model]
dim = 8
layers = 1

[stage1]
epochs = 3
delta = 0.25

[stage3]
prompt_variant = projection

[eval]
mode = sampled
negatives = 20
";

    #[test]
    fn parses_every_section() {
        let c = RunConfig::parse(SAMPLE, Path::new("/cfg")).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.pipeline.seed, 11);
        let spec = c.synth.as_ref().unwrap();
        assert_eq!((spec.num_users, spec.num_items, spec.seed), (50, 40, 11));
        assert_eq!(spec.density, vec![0.2, 0.1, 0.05]);
        assert_eq!(c.data.behaviors, vec!["aux1", "aux2", "target"]);
        assert_eq!((c.pipeline.dim, c.pipeline.layers), (8, 1));
        assert_eq!(c.pipeline.stage1.epochs, 3);
        assert_eq!(c.pipeline.delta, 0.25);
        assert_eq!(c.pipeline.prompt_variant, PromptVariant::Projection);
        assert_eq!(c.eval.mode, CandidateMode::Sampled(20));
    }

    #[test]
    fn relative_paths_use_config_dir() {
        let c = RunConfig::parse("[data]\ninteractions = d/x.tsv\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.data.interactions, Some(PathBuf::from("/cfg/d/x.tsv")));
    }

    #[test]
    fn rejects_unknowns_and_typos() {
        for bad in [
            "[model]\ndims = 4\n",
            "[modle]\ndim = 4\n",
            "[model]\ndim = four\n",
            "[model]\ndim 4\n",
            "[model]\ndim = 4\ndim = 5\n",
            "[stage3]\nprompt_variant = deep\n",
        ] {
            assert!(RunConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
        match RunConfig::parse("\n\n[model]\nlayers = x\n", Path::new(".")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_variant_and_eval() {
        let base = RunConfig::parse(SAMPLE, Path::new(".")).unwrap();
        let mut other = base.clone();
        other.set_prompt_variant(PromptVariant::Shallow);
        other.eval.mode = CandidateMode::Full;
        assert_eq!(base.hash(), other.hash());
        assert_eq!(base.hash().len(), 16);
        let mut reseeded = base.clone();
        reseeded.set_seed(12);
        assert_ne!(base.hash(), reseeded.hash());
        let mut deeper = base.clone();
        deeper.pipeline.layers = 2;
        assert_ne!(base.hash(), deeper.hash());
    }

    #[test]
    fn dropped_labels_resolve() {
        let mut c = RunConfig::parse(SAMPLE, Path::new(".")).unwrap();
        c.dropped = vec!["aux2".into()];
        c.resolve_dropped().unwrap();
        assert_eq!(c.pipeline.dropped_behaviors, vec![1]);
        c.dropped = vec!["target".into()];
        assert!(c.resolve_dropped().is_err());
        c.dropped = vec!["nope".into()];
        assert!(c.resolve_dropped().is_err());
    }
}
