//! Per-behavior user-item graphs and the weighted user/item relation graphs
//! derived from them.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::Result;
use crate::ingest::Dataset;
use crate::numcore::SparseMatrix;

/// Bipartite user-item graph of a single behavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub behavior: usize,
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
    edges: usize,
}

impl BipartiteGraph {
    /// Builds from `(user, item)` pairs; duplicates collapse.
    pub fn from_edges<I>(behavior: usize, num_users: usize, num_items: usize, edges: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut user_items = vec![Vec::new(); num_users];
        for (u, i) in edges {
            user_items[u].push(i);
        }
        let mut item_users = vec![Vec::new(); num_items];
        let mut count = 0;
        for (u, items) in user_items.iter_mut().enumerate() {
            items.sort_unstable();
            items.dedup();
            count += items.len();
            for &i in items.iter() {
                item_users[i].push(u);
            }
        }
        Self {
            behavior,
            user_items,
            item_users,
            edges: count,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_users.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    /// Sorted items of `user`.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    /// Sorted users of `item`.
    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.item_users[item]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.user_items[user].binary_search(&item).is_ok()
    }

    /// Edges in `(user, item)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// `|U|×|I|` 0/1 operator: row `u` sums over the items of `u`.
    pub fn user_operator(&self) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .user_items
            .iter()
            .map(|items| items.iter().map(|&i| (i, 1.0)).collect())
            .collect();
        SparseMatrix::from_rows(self.num_items(), &rows)
    }

    /// `|I|×|U|` 0/1 operator: row `i` sums over the users of `i`.
    pub fn item_operator(&self) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .item_users
            .iter()
            .map(|users| users.iter().map(|&u| (u, 1.0)).collect())
            .collect();
        SparseMatrix::from_rows(self.num_users(), &rows)
    }
}

/// One bipartite graph per behavior over shared user and item sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiBehaviorGraph {
    num_users: usize,
    num_items: usize,
    graphs: Vec<BipartiteGraph>,
}

impl MultiBehaviorGraph {
    /// Builds from `(user, item, behavior)` triples.
    pub fn from_edges<I>(num_users: usize, num_items: usize, num_behaviors: usize, edges: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, usize)>,
    {
        let mut per: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_behaviors];
        for (u, i, b) in edges {
            per[b].push((u, i));
        }
        let graphs = per
            .into_iter()
            .enumerate()
            .map(|(b, edges)| {
                if edges.is_empty() {
                    log::warn!("behavior {b} has no edges");
                }
                BipartiteGraph::from_edges(b, num_users, num_items, edges)
            })
            .collect();
        Self {
            num_users,
            num_items,
            graphs,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_behaviors(&self) -> usize {
        self.graphs.len()
    }

    pub fn behavior(&self, b: usize) -> &BipartiteGraph {
        &self.graphs[b]
    }

    pub fn graphs(&self) -> &[BipartiteGraph] {
        &self.graphs
    }

    pub fn total_edges(&self) -> usize {
        self.graphs.iter().map(BipartiteGraph::edge_count).sum()
    }

    /// All edges as `(user, item, behavior)`, ordered by behavior then user.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.graphs
            .iter()
            .flat_map(|g| g.edges().map(move |(u, i)| (u, i, g.behavior)))
    }
}

/// Edge `(u, i)` is present under behavior `k` iff some record `(u, i, k)` exists.
pub fn build_multi_behavior_graph(dataset: &Dataset) -> MultiBehaviorGraph {
    MultiBehaviorGraph::from_edges(
        dataset.num_users(),
        dataset.num_items(),
        dataset.num_behaviors(),
        dataset.records().iter().map(|r| (r.user, r.item, r.behavior)),
    )
}

/// Weighted neighbor lists; `rows[n]` holds `(neighbor, weight)` sorted by neighbor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedAdjacency {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl WeightedAdjacency {
    fn new(nodes: usize) -> Self {
        Self {
            rows: vec![Vec::new(); nodes],
        }
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn weight(&self, from: usize, to: usize) -> Option<f64> {
        let row = &self.rows[from];
        row.binary_search_by_key(&to, |&(n, _)| n)
            .ok()
            .map(|at| row[at].1)
    }

    pub fn to_sparse(&self) -> SparseMatrix {
        SparseMatrix::from_rows(self.rows.len(), &self.rows)
    }

    fn sort_rows(&mut self) {
        for row in &mut self.rows {
            row.sort_by_key(|&(n, _)| n);
        }
    }

    fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(a, row)| row.iter().map(move |&(b, w)| (a, b, w)))
    }
}

/// Keeps the `top_k` heaviest entries; ties go to the lower neighbor id.
fn strongest(mut candidates: Vec<(usize, f64)>, top_k: usize) -> Vec<(usize, f64)> {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(top_k);
    candidates
}

/// Undirected Jaccard co-interaction graph over users, one per behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRelationGraph {
    pub per_behavior: Vec<WeightedAdjacency>,
}

/// Per behavior, links users whose item sets intersect, weighted by the
/// Jaccard similarity of those sets. Each user keeps its `top_k` strongest
/// neighbors and the result is symmetrized by union.
pub fn build_user_relation_graph(mbg: &MultiBehaviorGraph, top_k: usize) -> UserRelationGraph {
    let top_k = top_k.max(1);
    let per_behavior = mbg
        .graphs()
        .iter()
        .map(|g| {
            let n = g.num_users();
            let mut kept = WeightedAdjacency::new(n);
            let mut overlap = vec![0usize; n];
            let mut touched = Vec::new();
            for u in 0..n {
                for &i in g.items_of(u) {
                    for &v in g.users_of(i) {
                        if v != u {
                            if overlap[v] == 0 {
                                touched.push(v);
                            }
                            overlap[v] += 1;
                        }
                    }
                }
                let size_u = g.items_of(u).len();
                let candidates = touched
                    .drain(..)
                    .map(|v| {
                        let inter = std::mem::take(&mut overlap[v]);
                        let union = size_u + g.items_of(v).len() - inter;
                        (v, inter as f64 / union as f64)
                    })
                    .collect();
                kept.rows[u] = strongest(candidates, top_k);
            }
            let mut sym = WeightedAdjacency::new(n);
            let mut present: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for (u, v, w) in kept.edges() {
                present.insert((u, v), w);
                present.insert((v, u), w);
            }
            for ((u, v), w) in present {
                sym.rows[u].push((v, w));
            }
            sym.sort_rows();
            sym
        })
        .collect();
    UserRelationGraph { per_behavior }
}

impl UserRelationGraph {
    /// Rescales each user's incident weights to sum to one. Isolated users
    /// are left alone. The result is row-stochastic and no longer symmetric.
    pub fn normalized(&self) -> Self {
        let per_behavior = self
            .per_behavior
            .iter()
            .map(|adj| WeightedAdjacency {
                rows: adj
                    .rows
                    .iter()
                    .map(|row| {
                        let total: f64 = row.iter().map(|&(_, w)| w).sum();
                        row.iter().map(|&(n, w)| (n, w / total)).collect()
                    })
                    .collect(),
            })
            .collect();
        Self { per_behavior }
    }

    pub fn write_tsv<W: Write>(&self, user_ids: &[String], labels: &[String], mut out: W) -> Result<()> {
        for (b, adj) in self.per_behavior.iter().enumerate() {
            for (u, v, w) in adj.edges() {
                writeln!(out, "{}\t{}\t{}\t{w}", user_ids[u], user_ids[v], labels[b])?;
            }
        }
        Ok(())
    }
}

/// Directed item graph of one behavior with both edge directions indexed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectedAdjacency {
    /// `outgoing.rows[i]` holds `(j, w(i→j))`.
    pub outgoing: WeightedAdjacency,
    /// `incoming.rows[j]` holds `(i, w(i→j))`.
    pub incoming: WeightedAdjacency,
}

impl DirectedAdjacency {
    fn from_outgoing(outgoing: WeightedAdjacency) -> Self {
        let mut incoming = WeightedAdjacency::new(outgoing.rows.len());
        for (i, j, w) in outgoing.edges() {
            incoming.rows[j].push((i, w));
        }
        incoming.sort_rows();
        Self { outgoing, incoming }
    }
}

/// Directed sequential-transition graph over items, one per behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRelationGraph {
    pub per_behavior: Vec<DirectedAdjacency>,
}

/// How item transitions are counted within a user's time-ordered sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransitionCount {
    /// Only adjacent pairs `s[t] → s[t+1]`.
    #[default]
    Consecutive,
    /// Every ordered pair `s[a] → s[b]` with `a < b`.
    AllPairs,
}

/// Counts `Cnt(i→j)` over every user's sequence (records sorted by
/// timestamp, then item), per behavior.
pub fn transition_counts(
    dataset: &Dataset,
    mode: TransitionCount,
) -> Vec<BTreeMap<(usize, usize), usize>> {
    let mut sequences: BTreeMap<(usize, usize), Vec<(u64, usize)>> = BTreeMap::new();
    for r in dataset.records() {
        sequences
            .entry((r.behavior, r.user))
            .or_default()
            .push((r.timestamp, r.item));
    }
    let mut counts = vec![BTreeMap::new(); dataset.num_behaviors()];
    for ((b, _), mut seq) in sequences {
        seq.sort_unstable();
        let items: Vec<usize> = seq.into_iter().map(|(_, i)| i).collect();
        let mut bump = |i: usize, j: usize| {
            if i != j {
                *counts[b].entry((i, j)).or_insert(0) += 1;
            }
        };
        match mode {
            TransitionCount::Consecutive => {
                for w in items.windows(2) {
                    bump(w[0], w[1]);
                }
            }
            TransitionCount::AllPairs => {
                for a in 0..items.len() {
                    for b in a + 1..items.len() {
                        bump(items[a], items[b]);
                    }
                }
            }
        }
    }
    counts
}

/// Directed edge `i→j` exists iff `Cnt(i→j) > 0`, weighted
/// `Cnt(i→j) / (Cnt(i→j) + Cnt(j→i))`. Each item keeps its `top_k`
/// strongest out-neighbors.
pub fn build_item_relation_graph(
    dataset: &Dataset,
    top_k: usize,
    mode: TransitionCount,
) -> ItemRelationGraph {
    let top_k = top_k.max(1);
    let per_behavior = transition_counts(dataset, mode)
        .into_iter()
        .map(|counts| {
            let mut candidates: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dataset.num_items()];
            for (&(i, j), &c) in &counts {
                let back = counts.get(&(j, i)).copied().unwrap_or(0);
                candidates[i].push((j, c as f64 / (c + back) as f64));
            }
            let mut outgoing = WeightedAdjacency {
                rows: candidates
                    .into_iter()
                    .map(|c| strongest(c, top_k))
                    .collect(),
            };
            outgoing.sort_rows();
            DirectedAdjacency::from_outgoing(outgoing)
        })
        .collect();
    ItemRelationGraph { per_behavior }
}

impl ItemRelationGraph {
    /// Rescales every item's incoming weights to sum to one; items without
    /// incoming edges are left alone.
    pub fn normalized(&self) -> Self {
        let per_behavior = self
            .per_behavior
            .iter()
            .map(|adj| {
                let totals: Vec<f64> = adj
                    .incoming
                    .rows
                    .iter()
                    .map(|row| row.iter().map(|&(_, w)| w).sum())
                    .collect();
                let outgoing = WeightedAdjacency {
                    rows: adj
                        .outgoing
                        .rows
                        .iter()
                        .map(|row| row.iter().map(|&(j, w)| (j, w / totals[j])).collect())
                        .collect(),
                };
                DirectedAdjacency::from_outgoing(outgoing)
            })
            .collect();
        Self { per_behavior }
    }

    pub fn write_tsv<W: Write>(&self, item_ids: &[String], labels: &[String], mut out: W) -> Result<()> {
        for (b, adj) in self.per_behavior.iter().enumerate() {
            for (i, j, w) in adj.outgoing.edges() {
                writeln!(out, "{}\t{}\t{}\t{w}", item_ids[i], item_ids[j], labels[b])?;
            }
        }
        Ok(())
    }
}

/// Both relation graphs, normalized, as built for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraphs {
    pub users: UserRelationGraph,
    pub items: ItemRelationGraph,
}

impl RelationGraphs {
    pub fn build(dataset: &Dataset, top_k: usize, mode: TransitionCount) -> Self {
        let mbg = build_multi_behavior_graph(dataset);
        Self {
            users: build_user_relation_graph(&mbg, top_k).normalized(),
            items: build_item_relation_graph(dataset, top_k, mode).normalized(),
        }
    }
}
