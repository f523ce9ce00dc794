//! Behavior-aware graph decoder, reconstruction loss and threshold pruning.

use std::io::{BufRead, Write};
use std::rc::Rc;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::encoder::RepresentationArrays;
use crate::error::{Error, Result};
use crate::graphs::MultiBehaviorGraph;
use crate::numcore::{sigmoid, Tape, Var};

/// Probabilities are clipped to `[ε, 1 − ε]` inside the cross-entropy.
pub const BCE_CLIP: f64 = 1e-12;

/// Default pruning margin δ.
pub const DEFAULT_DELTA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeScore {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
    pub probability: f64,
}

/// `σ((h_u·e_b)(h_i·e_b))`.
pub fn decode_score(h_u: ArrayView1<f64>, h_i: ArrayView1<f64>, e_b: ArrayView1<f64>) -> f64 {
    sigmoid(h_u.dot(&e_b) * h_i.dot(&e_b))
}

/// Mean binary cross-entropy with clipped probabilities.
pub fn binary_cross_entropy(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "bce needs equal nonempty inputs, got {} and {}",
            probabilities.len(),
            labels.len()
        )));
    }
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probabilities.len() as f64)
}

/// One behavior's reconstruction batch: positive edges `(users[k], positives[k])`
/// and one sampled non-edge `(users[k], negatives[k])` per positive.
#[derive(Debug, Clone)]
pub struct ReconstructionBatch {
    pub users: Rc<Vec<usize>>,
    pub positives: Rc<Vec<usize>>,
    pub negatives: Rc<Vec<usize>>,
    /// Behavior-aware user and item representations.
    pub user_reps: Var,
    pub item_reps: Var,
    /// `1×d` behavior embedding.
    pub behavior: Var,
}

/// Decoder probabilities for `(users[k], items[k])`, `n×1`.
pub fn decode_on_tape(
    tape: &Tape,
    user_reps: Var,
    item_reps: Var,
    behavior: Var,
    users: &Rc<Vec<usize>>,
    items: &Rc<Vec<usize>>,
) -> Result<Var> {
    let hu = tape.gather(user_reps, Rc::clone(users))?;
    let hi = tape.gather(item_reps, Rc::clone(items))?;
    let a = tape.row_sum(tape.mul_bcast(hu, behavior));
    let b = tape.row_sum(tape.mul_bcast(hi, behavior));
    Ok(tape.sigmoid(tape.mul(a, b)))
}

/// Mean BCE per batch, averaged over batches (behaviors).
pub fn reconstruction_loss(tape: &Tape, batches: &[ReconstructionBatch]) -> Result<Var> {
    if batches.is_empty() || batches.iter().any(|b| b.users.is_empty()) {
        return Err(Error::InvalidArgument("empty reconstruction batch".into()));
    }
    let mut per_behavior = Vec::with_capacity(batches.len());
    for batch in batches {
        let clip = |p: Var| tape.clamp(p, BCE_CLIP, 1.0 - BCE_CLIP);
        let pos = clip(decode_on_tape(
            tape,
            batch.user_reps,
            batch.item_reps,
            batch.behavior,
            &batch.users,
            &batch.positives,
        )?);
        let neg = clip(decode_on_tape(
            tape,
            batch.user_reps,
            batch.item_reps,
            batch.behavior,
            &batch.users,
            &batch.negatives,
        )?);
        let pos_term = tape.mean(tape.log(pos));
        let neg_term = tape.mean(tape.log(tape.affine(neg, -1.0, 1.0)));
        // Equal counts, so the mean over all 2n terms is the mean of the two means.
        per_behavior.push(tape.scale(tape.add(pos_term, neg_term), -0.5));
    }
    Ok(tape.mean_all(&per_behavior))
}

/// Scores every existing edge of `behavior` with its behavior-aware
/// representations. Edges come back in graph order.
pub fn score_edges(
    graph: &MultiBehaviorGraph,
    reps: &RepresentationArrays,
    behavior_embeddings: &Array2<f64>,
    behavior: usize,
) -> Result<Vec<EdgeScore>> {
    let edges: Vec<(usize, usize)> = graph.behavior(behavior).edges().collect();
    if edges.is_empty() {
        return Ok(Vec::new());
    }
    let stream = reps.stream_of(behavior).ok_or_else(|| {
        Error::InvalidArgument(format!("no representations for behavior {behavior}"))
    })?;
    let hu = &reps.behavior_users[stream];
    let hi = &reps.behavior_items[stream];
    let e_b = behavior_embeddings.row(behavior);
    Ok(edges
        .par_iter()
        .map(|&(user, item)| EdgeScore {
            user,
            item,
            behavior,
            probability: decode_score(hu.row(user), hi.row(item), e_b),
        })
        .collect())
}

/// The graph after pruning plus the audit trail of removed edges.
#[derive(Debug, Clone)]
pub struct DenoisedGraph {
    pub graph: MultiBehaviorGraph,
    /// Sorted by `(behavior, user, item)`.
    pub removed: Vec<EdgeScore>,
    pub delta: f64,
}

pub fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must lie in (0, 0.5), got {delta}")))
    }
}

/// Drops every auxiliary edge whose decoder score falls below `0.5 − δ`.
/// Target edges are copied unchanged. `behavior_embeddings` has one row per
/// behavior, the target last.
pub fn binarize_and_prune(
    graph: &MultiBehaviorGraph,
    reps: &RepresentationArrays,
    behavior_embeddings: &Array2<f64>,
    delta: f64,
) -> Result<DenoisedGraph> {
    check_delta(delta)?;
    let scores = (0..graph.num_behaviors().saturating_sub(1))
        .map(|b| score_edges(graph, reps, behavior_embeddings, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(prune_scored(graph, scores.into_iter().flatten(), delta))
}

/// Pruning from precomputed auxiliary edge scores.
pub fn prune_scored<I>(graph: &MultiBehaviorGraph, scores: I, delta: f64) -> DenoisedGraph
where
    I: IntoIterator<Item = EdgeScore>,
{
    let threshold = 0.5 - delta;
    let target = graph.num_behaviors() - 1;
    let mut removed: Vec<EdgeScore> = scores
        .into_iter()
        .filter(|s| s.behavior != target && s.probability < threshold)
        .collect();
    removed.sort_by_key(|s| (s.behavior, s.user, s.item));
    let kept = graph.triples().filter(|&(u, i, b)| {
        b == target
            || removed
                .binary_search_by_key(&(b, u, i), |s| (s.behavior, s.user, s.item))
                .is_err()
    });
    let pruned = MultiBehaviorGraph::from_edges(
        graph.num_users(),
        graph.num_items(),
        graph.num_behaviors(),
        kept.collect::<Vec<_>>(),
    );
    DenoisedGraph {
        graph: pruned,
        removed,
        delta,
    }
}

impl DenoisedGraph {
    pub fn removed_triples(&self) -> Vec<(usize, usize, usize)> {
        self.removed.iter().map(|s| (s.user, s.item, s.behavior)).collect()
    }

    /// Dense edge list, one `user<TAB>item<TAB>behavior` line per edge.
    pub fn write_edges<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "#graph\t{}\t{}\t{}",
            self.graph.num_users(),
            self.graph.num_items(),
            self.graph.num_behaviors()
        )?;
        writeln!(out, "#delta\t{}", self.delta)?;
        for (u, i, b) in self.graph.triples() {
            writeln!(out, "{u}\t{i}\t{b}")?;
        }
        Ok(())
    }

    /// Reads a file written by [`DenoisedGraph::write_edges`]; the removed-edge
    /// list is not part of that file and comes back empty.
    pub fn read_edges<R: BufRead>(source: R) -> Result<Self> {
        let mut dims = None;
        let mut delta = DEFAULT_DELTA;
        let mut triples = Vec::new();
        for (n, line) in source.lines().enumerate() {
            let line = line?;
            let line_no = n + 1;
            let bad = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
            match fields.first().copied() {
                Some("#graph") if fields.len() == 4 => {
                    dims = Some((num(fields[1])?, num(fields[2])?, num(fields[3])?));
                }
                Some("#delta") if fields.len() == 2 => {
                    delta = fields[1].parse().map_err(|e| bad(format!("delta: {e}")))?;
                }
                Some("") => {}
                _ if fields.len() == 3 => {
                    triples.push((num(fields[0])?, num(fields[1])?, num(fields[2])?));
                }
                _ => return Err(bad(format!("unexpected line {line:?}"))),
            }
        }
        let (nu, ni, nb) = dims.ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing #graph header".into(),
        })?;
        if let Some(&(u, i, b)) = triples.iter().find(|&&(u, i, b)| u >= nu || i >= ni || b >= nb) {
            return Err(Error::InvalidArgument(format!(
                "edge ({u}, {i}, {b}) outside a {nu}x{ni}x{nb} graph"
            )));
        }
        Ok(Self {
            graph: MultiBehaviorGraph::from_edges(nu, ni, nb, triples),
            removed: Vec::new(),
            delta,
        })
    }

    /// Audit report: `user<TAB>item<TAB>behavior<TAB>score` with raw ids and labels.
    pub fn write_removed<W: Write>(
        &self,
        user_ids: &[String],
        item_ids: &[String],
        labels: &[String],
        mut out: W,
    ) -> Result<()> {
        for s in &self.removed {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}",
                user_ids[s.user], item_ids[s.item], labels[s.behavior], s.probability
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn decoder_examples() {
        let e = array![1.0, 0.0];
        assert_eq!(decode_score(array![0.0, 0.0].view(), array![3.0, 1.0].view(), e.view()), 0.5);
        let s = decode_score(array![2.0, 5.0].view(), array![1.0, -4.0].view(), e.view());
        assert!((s - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((s - 0.8808).abs() < 1e-4);
        let hu = array![0.3, -1.2];
        let hi = array![0.7, 0.4];
        let eb = array![0.5, 0.9];
        let neg: Array1<f64> = -&eb;
        assert_eq!(
            decode_score(hu.view(), hi.view(), eb.view()),
            decode_score(hu.view(), hi.view(), neg.view())
        );
    }

    #[test]
    fn bce_examples() {
        let half = binary_cross_entropy(&[0.5; 4], &[true, true, false, false]).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-15);
        let perfect = binary_cross_entropy(&[1.0, 0.0], &[true, false]).unwrap();
        assert!((0.0..1e-11).contains(&perfect));
        let hand = -0.25 * (0.9f64.ln() + 0.8f64.ln() + 0.9f64.ln() + 0.7f64.ln());
        let got = binary_cross_entropy(&[0.9, 0.8, 0.1, 0.3], &[true, true, false, false]).unwrap();
        assert!((got - hand).abs() < 1e-15);
        assert!((got - 0.1976).abs() < 1e-4);
        assert!(binary_cross_entropy(&[], &[]).is_err());
    }

    #[test]
    fn tape_loss_matches_scalar_bce() {
        let tape = Tape::new();
        let users = tape.constant(array![[1.0, 0.5], [-0.3, 2.0]]);
        let items = tape.constant(array![[0.2, 0.1], [1.5, -1.0], [0.0, 0.7]]);
        let e = array![[0.8, -0.6]];
        let b = tape.constant(e.clone());
        let batch = ReconstructionBatch {
            users: Rc::new(vec![0, 1, 1]),
            positives: Rc::new(vec![0, 2, 1]),
            negatives: Rc::new(vec![1, 0, 0]),
            user_reps: users,
            item_reps: items,
            behavior: b,
        };
        let loss = reconstruction_loss(&tape, std::slice::from_ref(&batch)).unwrap();
        let (hu, hi) = (tape.value(users).clone(), tape.value(items).clone());
        let er = e.row(0);
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (k, &u) in batch.users.iter().enumerate() {
            probs.push(decode_score(hu.row(u), hi.row(batch.positives[k]), er));
            labels.push(true);
        }
        for (k, &u) in batch.users.iter().enumerate() {
            probs.push(decode_score(hu.row(u), hi.row(batch.negatives[k]), er));
            labels.push(false);
        }
        let expected = binary_cross_entropy(&probs, &labels).unwrap();
        assert!((tape.scalar(loss) - expected).abs() < 1e-14);

        let uninformative = ReconstructionBatch {
            behavior: tape.constant(array![[0.0, 0.0]]),
            ..batch
        };
        let flat = reconstruction_loss(&tape, &[uninformative]).unwrap();
        assert!((tape.scalar(flat) - 2f64.ln()).abs() < 1e-15);
        assert!(reconstruction_loss(&tape, &[]).is_err());
    }

    fn graph_with(edges: &[(usize, usize, usize)]) -> MultiBehaviorGraph {
        MultiBehaviorGraph::from_edges(3, 3, 2, edges.to_vec())
    }

    #[test]
    fn threshold_rule() {
        let g = graph_with(&[(0, 0, 0), (1, 1, 0), (2, 2, 1)]);
        let scores = vec![
            EdgeScore { user: 0, item: 0, behavior: 0, probability: 0.29 },
            EdgeScore { user: 1, item: 1, behavior: 0, probability: 0.31 },
            EdgeScore { user: 2, item: 2, behavior: 1, probability: 0.01 },
        ];
        let d = prune_scored(&g, scores, 0.2);
        assert_eq!(d.removed_triples(), vec![(0, 0, 0)]);
        assert!(!d.graph.behavior(0).has_edge(0, 0));
        assert!(d.graph.behavior(0).has_edge(1, 1));
        assert!(d.graph.behavior(1).has_edge(2, 2));
    }

    #[test]
    fn delta_range() {
        for bad in [0.0, 0.5, -0.1, 0.7, f64::NAN] {
            assert!(check_delta(bad).is_err(), "{bad}");
        }
        check_delta(0.2).unwrap();
    }

    #[test]
    fn edge_file_round_trip() {
        let g = graph_with(&[(0, 1, 0), (2, 0, 0), (1, 1, 1)]);
        let d = prune_scored(&g, Vec::new(), 0.2);
        let mut buf = Vec::new();
        d.write_edges(&mut buf).unwrap();
        let back = DenoisedGraph::read_edges(buf.as_slice()).unwrap();
        assert_eq!(back.graph.triples().collect::<Vec<_>>(), g.triples().collect::<Vec<_>>());
        assert_eq!(back.delta, 0.2);
        assert!(DenoisedGraph::read_edges("0\t0\t0\n".as_bytes()).is_err());
    }

    type Case = (Vec<(usize, usize, usize)>, Vec<f64>, f64, f64);

    fn random_case() -> impl Strategy<Value = Case> {
        let edges = prop::collection::btree_set((0..6usize, 0..5usize, 0..3usize), 1..40)
            .prop_map(|s| s.into_iter().collect::<Vec<_>>());
        let reps = prop::collection::vec(-2.0f64..2.0, (6 + 5) * 2 * 3 + 3 * 2);
        (edges, reps, 0.001f64..0.499, 0.001f64..0.499)
    }

    fn arrays(values: &[f64]) -> (RepresentationArrays, Array2<f64>) {
        let d = 2;
        let mut it = values.iter().copied();
        let mut take = |r: usize| Array2::from_shape_fn((r, d), |_| it.next().unwrap());
        let mut users = Vec::new();
        let mut items = Vec::new();
        for _ in 0..3 {
            users.push(take(6));
            items.push(take(5));
        }
        let emb = take(3);
        let reps = RepresentationArrays {
            users: users[0].clone(),
            items: items[0].clone(),
            behavior_users: users,
            behavior_items: items,
            behaviors: vec![0, 1, 2],
        };
        (reps, emb)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn pruning_laws((edges, values, d1, d2) in random_case()) {
            let g = MultiBehaviorGraph::from_edges(6, 5, 3, edges);
            let (reps, emb) = arrays(&values);
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = binarize_and_prune(&g, &reps, &emb, lo).unwrap();
            let b = binarize_and_prune(&g, &reps, &emb, hi).unwrap();

            for pruned in [&a, &b] {
                for k in 0..2 {
                    for (u, i) in pruned.graph.behavior(k).edges() {
                        prop_assert!(g.behavior(k).has_edge(u, i));
                    }
                }
                prop_assert_eq!(
                    pruned.graph.behavior(2).edges().collect::<Vec<_>>(),
                    g.behavior(2).edges().collect::<Vec<_>>()
                );
                prop_assert_eq!(
                    pruned.graph.total_edges() + pruned.removed.len(),
                    g.total_edges()
                );
            }
            let smaller: std::collections::BTreeSet<_> = b.removed_triples().into_iter().collect();
            let larger: std::collections::BTreeSet<_> = a.removed_triples().into_iter().collect();
            prop_assert!(smaller.is_subset(&larger));
        }
    }

    #[test]
    fn delta_near_half_removes_nothing() {
        let g = graph_with(&[(0, 0, 0), (1, 2, 0), (2, 1, 1)]);
        // A large negative logit still gives a strictly positive score.
        let reps = RepresentationArrays {
            users: Array2::zeros((3, 1)),
            items: Array2::zeros((3, 1)),
            behavior_users: vec![array![[5.0], [5.0], [5.0]], array![[0.0], [0.0], [0.0]]],
            behavior_items: vec![array![[-5.0], [-5.0], [-5.0]], array![[0.0], [0.0], [0.0]]],
            behaviors: vec![0, 1],
        };
        let emb = array![[1.0], [1.0]];
        assert_eq!(binarize_and_prune(&g, &reps, &emb, 0.2).unwrap().removed.len(), 2);
        assert!(binarize_and_prune(&g, &reps, &emb, 0.5 - 1e-15).unwrap().removed.is_empty());
    }
}
