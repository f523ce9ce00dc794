//! Loading, filtering, splitting and synthesizing behavior-tagged
//! interaction logs.
//!
//! Raw user and item ids are arbitrary strings. They are remapped to dense
//! indices in order of first appearance, so the same input always yields the
//! same indices. Behaviors are indexed by their position in a declared label
//! list whose last entry is the target behavior.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::rng::sub_rng;

/// One `(user, item, behavior, timestamp)` event with dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    pub timestamp: u64,
}

/// A deduplicated interaction log with its id tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    behaviors: Vec<String>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    records: Vec<InteractionRecord>,
}

/// Builds dense id tables in first-appearance order.
#[derive(Default)]
struct Interner {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }
}

impl Dataset {
    /// Builds a dataset from raw rows, collapsing repeated
    /// `(user, item, behavior)` triples onto their earliest timestamp. The
    /// surviving record sits at the position of the first occurrence.
    pub fn from_raw<I, U, T>(behaviors: Vec<String>, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (U, T, usize, u64)>,
        U: AsRef<str>,
        T: AsRef<str>,
    {
        if behaviors.is_empty() {
            return Err(Error::InvalidArgument("no behavior labels declared".into()));
        }
        let mut users = Interner::default();
        let mut items = Interner::default();
        let mut records: Vec<InteractionRecord> = Vec::new();
        let mut seen: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for (user, item, behavior, timestamp) in rows {
            if behavior >= behaviors.len() {
                return Err(Error::OutOfRange {
                    what: "behaviors",
                    index: behavior,
                    len: behaviors.len(),
                });
            }
            let user = users.intern(user.as_ref());
            let item = items.intern(item.as_ref());
            match seen.get(&(user, item, behavior)) {
                Some(&at) => {
                    let kept = &mut records[at].timestamp;
                    *kept = (*kept).min(timestamp);
                }
                None => {
                    seen.insert((user, item, behavior), records.len());
                    records.push(InteractionRecord {
                        user,
                        item,
                        behavior,
                        timestamp,
                    });
                }
            }
        }
        Ok(Self {
            behaviors,
            user_ids: users.ids,
            item_ids: items.ids,
            records,
        })
    }

    fn with_tables(&self, records: Vec<InteractionRecord>) -> Self {
        Self {
            behaviors: self.behaviors.clone(),
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
            records,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    /// Index of the target behavior (the last declared label).
    pub fn target(&self) -> usize {
        self.behaviors.len() - 1
    }

    pub fn behaviors(&self) -> &[String] {
        &self.behaviors
    }

    pub fn behavior_index(&self, label: &str) -> Option<usize> {
        self.behaviors.iter().position(|b| b == label)
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    /// Records per behavior, indexed by behavior.
    pub fn counts_by_behavior(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_behaviors()];
        for r in &self.records {
            counts[r.behavior] += 1;
        }
        counts
    }

    /// Writes the log as `user<TAB>item<TAB>behavior<TAB>timestamp` lines
    /// with raw ids and labels.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.user_ids[r.user], self.item_ids[r.item], self.behaviors[r.behavior], r.timestamp
            )?;
        }
        Ok(())
    }

    /// Same dataset without the records of the given behaviors. Id tables
    /// and behavior indices are unchanged.
    pub fn without_behaviors(&self, dropped: &[usize]) -> Self {
        let records = self
            .records
            .iter()
            .filter(|r| !dropped.contains(&r.behavior))
            .copied()
            .collect();
        self.with_tables(records)
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split('\t').collect()
}

fn behavior_of(behaviors: &[String], label: &str, line: usize) -> Result<usize> {
    behaviors
        .iter()
        .position(|b| b == label)
        .ok_or_else(|| Error::UnknownBehavior {
            line,
            label: label.to_string(),
        })
}

fn parse_timestamp(raw: &str, line: usize) -> Result<u64> {
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("timestamp `{raw}` is not a non-negative integer"),
    })
}

/// Parses a `user<TAB>item<TAB>behavior<TAB>timestamp` log. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn load_interactions<R: BufRead>(source: R, behaviors: &[String]) -> Result<Dataset> {
    let mut rows = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let behavior = behavior_of(behaviors, fields[2], line_no)?;
        let timestamp = parse_timestamp(fields[3], line_no)?;
        rows.push((fields[0].to_string(), fields[1].to_string(), behavior, timestamp));
    }
    let dataset = Dataset::from_raw(behaviors.to_vec(), rows)?;
    log::info!(
        "loaded {} records: {} users, {} items, per-behavior {:?}",
        dataset.records.len(),
        dataset.num_users(),
        dataset.num_items(),
        dataset.counts_by_behavior()
    );
    Ok(dataset)
}

/// Drops users with fewer than `min_count` target-behavior records, along
/// with all their records, and re-densifies ids.
pub fn filter_min_target(dataset: &Dataset, min_count: usize) -> Result<Dataset> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let target = dataset.target();
    let mut per_user = vec![0usize; dataset.num_users()];
    for r in dataset.records.iter().filter(|r| r.behavior == target) {
        per_user[r.user] += 1;
    }
    let rows = dataset
        .records
        .iter()
        .filter(|r| per_user[r.user] >= min_count)
        .map(|r| {
            (
                dataset.user_ids[r.user].as_str(),
                dataset.item_ids[r.item].as_str(),
                r.behavior,
                r.timestamp,
            )
        });
    let filtered = Dataset::from_raw(dataset.behaviors.clone(), rows)?;
    if filtered.num_users() == 0 {
        return Err(Error::EmptyDataset(format!(
            "no user has {min_count} or more target interactions"
        )));
    }
    Ok(filtered)
}

/// Training log plus one held-out target interaction per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Dataset,
    /// Held-out records, one per user, ordered by user.
    pub test: Vec<InteractionRecord>,
}

impl SplitDataset {
    /// `(user, held-out item)` pairs.
    pub fn test_pairs(&self) -> Vec<(usize, usize)> {
        self.test.iter().map(|r| (r.user, r.item)).collect()
    }

    /// Writes the split with explicit id tables so that reloading reproduces
    /// every dense index, including items seen only in the test set.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let d = &self.train;
        writeln!(out, "#behaviors\t{}", d.behaviors.join("\t"))?;
        for u in &d.user_ids {
            writeln!(out, "#user\t{u}")?;
        }
        for i in &d.item_ids {
            writeln!(out, "#item\t{i}")?;
        }
        let rows = d
            .records
            .iter()
            .map(|r| ("train", r))
            .chain(self.test.iter().map(|r| ("test", r)));
        for (kind, r) in rows {
            writeln!(
                out,
                "{kind}\t{}\t{}\t{}\t{}",
                d.user_ids[r.user], d.item_ids[r.item], d.behaviors[r.behavior], r.timestamp
            )?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut behaviors = Vec::new();
        let mut users = Interner::default();
        let mut items = Interner::default();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (n, line) in source.lines().enumerate() {
            let line = line?;
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields = split_fields(&line);
            match fields[0] {
                "#behaviors" => behaviors = fields[1..].iter().map(|s| s.to_string()).collect(),
                "#user" if fields.len() == 2 => {
                    users.intern(fields[1]);
                }
                "#item" if fields.len() == 2 => {
                    items.intern(fields[1]);
                }
                kind @ ("train" | "test") if fields.len() == 5 => {
                    let lookup = |table: &Interner, raw: &str, what: &str| {
                        table.index.get(raw).copied().ok_or_else(|| Error::Parse {
                            line: line_no,
                            message: format!("{what} `{raw}` missing from the id table"),
                        })
                    };
                    let record = InteractionRecord {
                        user: lookup(&users, fields[1], "user")?,
                        item: lookup(&items, fields[2], "item")?,
                        behavior: behavior_of(&behaviors, fields[3], line_no)?,
                        timestamp: parse_timestamp(fields[4], line_no)?,
                    };
                    if kind == "train" {
                        train.push(record);
                    } else {
                        test.push(record);
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "unrecognized split line".into(),
                    })
                }
            }
        }
        if behaviors.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "missing #behaviors header".into(),
            });
        }
        Ok(Self {
            train: Dataset {
                behaviors,
                user_ids: users.ids,
                item_ids: items.ids,
                records: train,
            },
            test,
        })
    }
}

/// Holds out each user's latest target interaction (ties: larger item
/// index). Auxiliary records always stay in training.
pub fn leave_one_out_split(dataset: &Dataset) -> Result<SplitDataset> {
    let target = dataset.target();
    let mut latest: Vec<Option<(u64, usize, usize)>> = vec![None; dataset.num_users()];
    let mut counts = vec![0usize; dataset.num_users()];
    for (pos, r) in dataset.records.iter().enumerate() {
        if r.behavior != target {
            continue;
        }
        counts[r.user] += 1;
        let key = (r.timestamp, r.item, pos);
        let slot = &mut latest[r.user];
        if slot.is_none_or(|best| (key.0, key.1) > (best.0, best.1)) {
            *slot = Some(key);
        }
    }
    if let Some((user, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::TooFewTargets { user, count });
    }
    let held: BTreeSet<usize> = latest.iter().flatten().map(|&(_, _, pos)| pos).collect();
    let mut train = Vec::with_capacity(dataset.records.len() - held.len());
    let mut test = Vec::with_capacity(held.len());
    for (pos, r) in dataset.records.iter().enumerate() {
        if held.contains(&pos) {
            test.push(*r);
        } else {
            train.push(*r);
        }
    }
    test.sort_by_key(|r| r.user);
    Ok(SplitDataset {
        train: dataset.with_tables(train),
        test,
    })
}

/// Parameters of the planted-noise generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_aux_behaviors: usize,
    /// Latent preference clusters shared by users and items.
    pub num_blocks: usize,
    /// Per behavior (auxiliary first, target last): fraction of all items
    /// each user interacts with.
    pub density: Vec<f64>,
    /// Probability that an auxiliary edge is drawn outside the user's block.
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `aux1 … auxN, target`.
    pub fn behavior_labels(&self) -> Vec<String> {
        (1..=self.num_aux_behaviors)
            .map(|k| format!("aux{k}"))
            .chain(std::iter::once("target".to_string()))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if self.num_users == 0 || self.num_items == 0 {
            return invalid("synthetic spec needs at least one user and one item".into());
        }
        if self.num_blocks == 0 || self.num_blocks > self.num_users.min(self.num_items) {
            return invalid(format!(
                "num_blocks must lie in 1..={}",
                self.num_users.min(self.num_items)
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return invalid(format!("noise_rate must lie in [0, 1), got {}", self.noise_rate));
        }
        if self.density.len() != self.num_aux_behaviors + 1 {
            return invalid(format!(
                "expected {} densities (auxiliary then target), got {}",
                self.num_aux_behaviors + 1,
                self.density.len()
            ));
        }
        if self.density.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return invalid("densities must lie in [0, 1]".into());
        }
        if self.noise_rate > 0.0 && self.num_blocks == 1 {
            return invalid("planting noise needs at least two blocks".into());
        }
        Ok(())
    }

    fn per_user(&self, behavior: usize) -> usize {
        (self.density[behavior] * self.num_items as f64).round() as usize
    }
}

/// Ground truth for generated auxiliary edges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NoiseLabels {
    /// Noisy `(user, item, behavior)` edges in dense indices.
    pub noisy: BTreeSet<(usize, usize, usize)>,
    /// Total auxiliary edges, clean and noisy.
    pub aux_edges: usize,
}

impl NoiseLabels {
    pub fn is_noisy(&self, user: usize, item: usize, behavior: usize) -> bool {
        self.noisy.contains(&(user, item, behavior))
    }

    /// Writes one `user<TAB>item<TAB>behavior` line per noisy edge with raw
    /// ids and labels.
    pub fn write_sidecar<W: Write>(&self, dataset: &Dataset, mut out: W) -> Result<()> {
        for &(u, i, b) in &self.noisy {
            writeln!(
                out,
                "{}\t{}\t{}",
                dataset.user_ids[u], dataset.item_ids[i], dataset.behaviors[b]
            )?;
        }
        Ok(())
    }

    /// Reads a sidecar against the id tables of `dataset`. Lines naming
    /// unknown ids (for example users removed by filtering) are skipped.
    pub fn read_sidecar<R: BufRead>(dataset: &Dataset, source: R) -> Result<Self> {
        let users: HashMap<&str, usize> = index_of(&dataset.user_ids);
        let items: HashMap<&str, usize> = index_of(&dataset.item_ids);
        let mut noisy = BTreeSet::new();
        for (n, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields = split_fields(&line);
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let b = behavior_of(&dataset.behaviors, fields[2], n + 1)?;
            if let (Some(&u), Some(&i)) = (users.get(fields[0]), items.get(fields[1])) {
                noisy.insert((u, i, b));
            }
        }
        let aux_edges = dataset
            .records
            .iter()
            .filter(|r| r.behavior != dataset.target())
            .count();
        Ok(Self { noisy, aux_edges })
    }
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

/// Generates a block-structured multi-behavior log with planted auxiliary
/// noise.
///
/// Users and items are shuffled into `num_blocks` equal-as-possible blocks.
/// Each auxiliary edge slot of a user is, with probability `noise_rate`,
/// filled from items outside the user's block (noise) and otherwise from
/// inside it. Target edges are drawn from the user's clean auxiliary items,
/// modeling a click-to-purchase funnel. Timestamps follow generation order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, NoiseLabels)> {
    spec.validate()?;
    let mut rng = sub_rng(spec.seed, "synthetic");
    let target = spec.num_aux_behaviors;

    let user_block = assign_blocks(spec.num_users, spec.num_blocks, &mut rng);
    let item_block = assign_blocks(spec.num_items, spec.num_blocks, &mut rng);
    let mut block_items: Vec<Vec<usize>> = vec![Vec::new(); spec.num_blocks];
    for (item, &b) in item_block.iter().enumerate() {
        block_items[b].push(item);
    }
    let smallest = block_items.iter().map(Vec::len).min().unwrap_or(0);
    let largest = block_items.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..=target {
        let n = spec.per_user(k);
        if n > smallest {
            return Err(Error::Capacity(format!(
                "behavior {k} requests {n} items per user but the smallest block holds {smallest}"
            )));
        }
        if k < target && spec.noise_rate > 0.0 && n > spec.num_items - largest {
            return Err(Error::Capacity(format!(
                "behavior {k} requests {n} items per user but only {} lie outside the largest block",
                spec.num_items - largest
            )));
        }
    }

    let labels = spec.behavior_labels();
    let mut rows: Vec<(String, String, usize, u64)> = Vec::new();
    let mut raw_noisy: Vec<(String, String, usize)> = Vec::new();
    let mut clock = 0u64;
    for (user, &block) in user_block.iter().enumerate() {
        let inside = &block_items[block];
        let outside: Vec<usize> = (0..spec.num_items)
            .filter(|&i| item_block[i] != block)
            .collect();
        let mut clean_support = BTreeSet::new();
        for k in 0..target {
            let n = spec.per_user(k);
            let noisy_n = (0..n).filter(|_| rng.gen_bool(spec.noise_rate)).count();
            let clean: Vec<usize> = inside
                .choose_multiple(&mut rng, n - noisy_n)
                .copied()
                .collect();
            let noisy: Vec<usize> = outside.choose_multiple(&mut rng, noisy_n).copied().collect();
            let mut slots: Vec<(usize, bool)> = clean
                .iter()
                .map(|&i| (i, false))
                .chain(noisy.iter().map(|&i| (i, true)))
                .collect();
            slots.shuffle(&mut rng);
            for (item, is_noise) in slots {
                if is_noise {
                    raw_noisy.push((format!("u{user}"), format!("i{item}"), k));
                } else {
                    clean_support.insert(item);
                }
                rows.push((format!("u{user}"), format!("i{item}"), k, clock));
                clock += 1;
            }
        }
        let support: Vec<usize> = clean_support.into_iter().collect();
        let n = spec.per_user(target).min(support.len());
        for &item in support.choose_multiple(&mut rng, n) {
            rows.push((format!("u{user}"), format!("i{item}"), target, clock));
            clock += 1;
        }
    }

    let dataset = Dataset::from_raw(labels, rows)?;
    let users = index_of(&dataset.user_ids);
    let items = index_of(&dataset.item_ids);
    let noisy = raw_noisy
        .iter()
        .map(|(u, i, b)| (users[u.as_str()], items[i.as_str()], *b))
        .collect();
    let aux_edges = dataset
        .records
        .iter()
        .filter(|r| r.behavior != target)
        .count();
    Ok((dataset, NoiseLabels { noisy, aux_edges }))
}

fn assign_blocks(n: usize, blocks: usize, rng: &mut crate::numcore::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut block = vec![0; n];
    for (pos, &id) in order.iter().enumerate() {
        block[id] = pos * blocks / n;
    }
    block
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        vec!["click".into(), "buy".into()]
    }

    fn load(text: &str) -> Result<Dataset> {
        load_interactions(text.as_bytes(), &labels())
    }

    #[test]
    fn dense_remap_counts_distinct_users() {
        let d = load("alice\tx\tclick\t1\nbob\tx\tbuy\t2\nalice\ty\tbuy\t3\n").unwrap();
        assert_eq!(d.num_users(), 2);
        assert_eq!(d.num_items(), 2);
        assert_eq!(d.user_ids(), ["alice", "bob"]);
    }

    #[test]
    fn duplicates_keep_earliest_timestamp() {
        let d = load("u\ti\tclick\t5\nu\ti\tclick\t2\n").unwrap();
        assert_eq!(d.records().len(), 1);
        assert_eq!(d.records()[0].timestamp, 2);
    }

    #[test]
    fn short_line_names_the_line() {
        match load("u\ti\tclick\t1\nu\ti\tclick\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        match load("u\ti\tview\t1\n") {
            Err(Error::UnknownBehavior { line: 1, label }) => assert_eq!(label, "view"),
            other => panic!("expected unknown behavior, got {other:?}"),
        }
        assert!(matches!(load("u\ti\tclick\tsoon\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn filter_drops_light_users_everywhere() {
        let d = load(
            "a\t1\tbuy\t1\na\t2\tbuy\t2\na\t3\tbuy\t3\na\t9\tclick\t4\n\
             b\t1\tbuy\t1\nb\t2\tbuy\t2\nb\t7\tclick\t3\n",
        )
        .unwrap();
        let f = filter_min_target(&d, 3).unwrap();
        assert_eq!(f.user_ids(), ["a"]);
        assert!(f.item_ids().iter().all(|i| i != "7"));
        assert_eq!(f.records().len(), 4);

        let all = filter_min_target(&d, 1).unwrap();
        assert_eq!(all.records(), d.records());
        assert!(matches!(filter_min_target(&d, 4), Err(Error::EmptyDataset(_))));
        assert!(filter_min_target(&d, 0).is_err());
    }

    #[test]
    fn split_holds_out_latest_target() {
        let d = load("u\ti1\tbuy\t1\nu\ti2\tbuy\t5\nu\ti3\tbuy\t9\nu\ti8\tclick\t99\n").unwrap();
        let s = leave_one_out_split(&d).unwrap();
        assert_eq!(s.test.len(), 1);
        assert_eq!(d.item_ids()[s.test[0].item], "i3");
        assert_eq!(s.train.records().len(), 3);
    }

    #[test]
    fn split_tie_breaks_on_item_index() {
        let d = load("u\ti9\tbuy\t7\nu\ti4\tbuy\t7\n").unwrap();
        let s = leave_one_out_split(&d).unwrap();
        // i9 appears first, so it has the smaller dense index.
        assert_eq!(s.test[0].item, 1);
        assert_eq!(d.item_ids()[1], "i4");

        let d = load("u\ti4\tbuy\t7\nu\ti9\tbuy\t7\n").unwrap();
        let s = leave_one_out_split(&d).unwrap();
        assert_eq!(d.item_ids()[s.test[0].item], "i9");
    }

    #[test]
    fn split_requires_two_targets() {
        let d = load("u\ti1\tbuy\t1\nu\ti2\tclick\t2\n").unwrap();
        assert!(matches!(
            leave_one_out_split(&d),
            Err(Error::TooFewTargets { user: 0, count: 1 })
        ));
    }

    #[test]
    fn split_file_round_trip() {
        let d = load("u\ti1\tbuy\t1\nu\ti2\tbuy\t5\nv\ti3\tbuy\t2\nv\ti1\tbuy\t3\nv\ti4\tclick\t0\n")
            .unwrap();
        let s = leave_one_out_split(&d).unwrap();
        let mut bytes = Vec::new();
        s.write(&mut bytes).unwrap();
        assert_eq!(SplitDataset::read(bytes.as_slice()).unwrap(), s);
    }

    fn small_spec(noise_rate: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_users: 40,
            num_items: 60,
            num_aux_behaviors: 2,
            num_blocks: 3,
            density: vec![0.2, 0.1, 0.05],
            noise_rate,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_rate_plants_nothing() {
        let (d, labels) = generate_synthetic(&small_spec(0.0)).unwrap();
        assert!(labels.noisy.is_empty());
        assert_eq!(labels.aux_edges, 40 * (12 + 6));
        assert_eq!(d.num_behaviors(), 3);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let render = |spec: &SyntheticSpec| {
            let (d, l) = generate_synthetic(spec).unwrap();
            let mut bytes = Vec::new();
            d.write_tsv(&mut bytes).unwrap();
            l.write_sidecar(&d, &mut bytes).unwrap();
            bytes
        };
        assert_eq!(render(&small_spec(0.2)), render(&small_spec(0.2)));
        let mut other = small_spec(0.2);
        other.seed = 4;
        assert_ne!(render(&small_spec(0.2)), render(&other));
    }

    #[test]
    fn target_edges_lie_on_clean_aux_support() {
        let (d, labels) = generate_synthetic(&small_spec(0.3)).unwrap();
        let target = d.target();
        let clean: BTreeSet<(usize, usize)> = d
            .records()
            .iter()
            .filter(|r| r.behavior != target && !labels.is_noisy(r.user, r.item, r.behavior))
            .map(|r| (r.user, r.item))
            .collect();
        for r in d.records().iter().filter(|r| r.behavior == target) {
            assert!(clean.contains(&(r.user, r.item)));
        }
    }

    #[test]
    fn planted_noise_matches_rate() {
        // 500 users × 20 auxiliary edges = 10,000 edges.
        let spec = SyntheticSpec {
            num_users: 500,
            num_items: 400,
            num_aux_behaviors: 1,
            num_blocks: 2,
            density: vec![0.05, 0.01],
            noise_rate: 0.1,
            seed: 11,
        };
        let (_, labels) = generate_synthetic(&spec).unwrap();
        assert_eq!(labels.aux_edges, 10_000);
        // Binomial(10000, 0.1): σ = 30; allow 4σ.
        let noisy = labels.noisy.len() as i64;
        assert!((noisy - 1000).abs() <= 120, "noisy = {noisy}");
    }

    #[test]
    fn density_beyond_block_capacity_fails() {
        let mut spec = small_spec(0.1);
        spec.density[0] = 0.5;
        assert!(matches!(generate_synthetic(&spec), Err(Error::Capacity(_))));
        let mut spec = small_spec(1.0);
        spec.noise_rate = 1.0;
        assert!(generate_synthetic(&spec).is_err());
    }
}
