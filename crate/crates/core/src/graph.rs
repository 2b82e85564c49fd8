//! The bigram event graph: node table keyed by surface form, directed
//! transition counts, row-normalized edge weights, tutor adjacency matrices
//! and retrieval features.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::event::{Event, EventChain};
use crate::numerics::Tensor;
use crate::snapshot::{self, Reader, Writer};

const MAGIC: &[u8; 8] = b"EVGRAPH\0";
const VERSION: u32 = 1;

/// Default additive smoothing applied to tutor rows before normalization.
pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventGraph {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    /// Outgoing counts per source node, ordered by target id.
    edges: Vec<BTreeMap<usize, u64>>,
    out_totals: Vec<u64>,
    node_embeddings: Option<Tensor>,
}

/// A `(t+1) x (t+1)` adjacency over an event sequence. Rows with
/// `row_mask[i] == false` carry no graph evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjMatrix {
    pub values: Tensor,
    pub row_mask: Vec<bool>,
}

impl AdjMatrix {
    pub fn size(&self) -> usize {
        self.row_mask.len()
    }

    /// Every row marked `true`.
    pub fn unmasked(values: Tensor) -> Self {
        let n = values.rows();
        Self {
            values,
            row_mask: vec![true; n],
        }
    }
}

/// Counts every adjacent pair in every chain.
pub fn build_graph(chains: &[EventChain]) -> Result<EventGraph> {
    if chains.is_empty() {
        return Err(Error::EmptyChainList);
    }
    let mut g = EventGraph::default();
    for chain in chains {
        g.add_chain(chain);
    }
    Ok(g)
}

impl EventGraph {
    /// Adds the nodes and bigrams of one chain.
    pub fn add_chain(&mut self, chain: &EventChain) {
        let ids: Vec<usize> = chain.events().iter().map(|e| self.intern(e)).collect();
        for w in ids.windows(2) {
            *self.edges[w[0]].entry(w[1]).or_insert(0) += 1;
            self.out_totals[w[0]] += 1;
        }
    }

    fn intern(&mut self, e: &Event) -> usize {
        let key = e.surface_form();
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(key.clone());
        self.index.insert(key, id);
        self.edges.push(BTreeMap::new());
        self.out_totals.push(0);
        id
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(BTreeMap::len).sum()
    }

    pub fn node_id(&self, e: &Event) -> Option<usize> {
        self.index.get(&e.surface_form()).copied()
    }

    pub fn node_ids(&self, events: &[Event]) -> Vec<Option<usize>> {
        events.iter().map(|e| self.node_id(e)).collect()
    }

    pub fn node_name(&self, id: usize) -> &str {
        &self.nodes[id]
    }

    pub fn contains(&self, e: &Event) -> bool {
        self.node_id(e).is_some()
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.edges
            .get(from)
            .and_then(|m| m.get(&to))
            .copied()
            .unwrap_or(0)
    }

    pub fn out_total(&self, from: usize) -> u64 {
        self.out_totals.get(from).copied().unwrap_or(0)
    }

    /// `(from, to, count)` for every edge, ordered by source then target.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.iter().map(move |(&j, &c)| (i, j, c)))
    }

    /// `count(a, b) / sum_k count(a, k)` between node ids, `None` when `a`
    /// has no outgoing edges.
    pub fn weight_by_id(&self, a: usize, b: usize) -> Option<f64> {
        let total = self.out_total(a);
        (total > 0).then(|| self.count(a, b) as f64 / total as f64)
    }

    pub fn edge_weight(&self, a: &Event, b: &Event) -> Option<f64> {
        let (ia, ib) = (self.node_id(a)?, self.node_id(b)?);
        self.weight_by_id(ia, ib)
    }

    pub fn node_embeddings(&self) -> Option<&Tensor> {
        self.node_embeddings.as_ref()
    }

    pub fn set_node_embeddings(&mut self, table: Tensor) -> Result<()> {
        if table.rows() != self.num_nodes() {
            return Err(Error::shape(
                "set_node_embeddings",
                format!("{} rows for {} nodes", table.rows(), self.num_nodes()),
            ));
        }
        self.node_embeddings = Some(table);
        Ok(())
    }

    /// Raw edge weights among `events`, before any row scaling: entry
    /// `(i, j)` is `W(i, j)` when both events are nodes, else zero.
    pub fn raw_adjacency(&self, events: &[Event]) -> Tensor {
        let ids = self.node_ids(events);
        let n = events.len();
        Tensor::from_fn(n, n, |i, j| match (ids[i], ids[j]) {
            (Some(a), Some(b)) => self.weight_by_id(a, b).unwrap_or(0.0),
            _ => 0.0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.nodes.len() as u64);
        for name in &self.nodes {
            w.bytes(name.as_bytes());
        }
        w.u64(self.num_edges() as u64);
        for (i, j, c) in self.edges() {
            w.u64(i as u64);
            w.u64(j as u64);
            w.u64(c);
        }
        match &self.node_embeddings {
            Some(t) => {
                w.u8(1);
                w.tensor(t);
            }
            None => w.u8(0),
        }
        snapshot::seal(MAGIC, VERSION, &w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = snapshot::open(bytes, MAGIC, VERSION)?;
        let mut r = Reader::new(body);
        let mut g = EventGraph::default();
        let n = r.usize()?;
        for _ in 0..n {
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| Error::CorruptSnapshot("node name is not UTF-8".into()))?
                .to_owned();
            if g.index.insert(name.clone(), g.nodes.len()).is_some() {
                return Err(Error::CorruptSnapshot(format!("duplicate node `{name}`")));
            }
            g.nodes.push(name);
            g.edges.push(BTreeMap::new());
            g.out_totals.push(0);
        }
        let m = r.usize()?;
        for _ in 0..m {
            let (i, j, c) = (r.usize()?, r.usize()?, r.u64()?);
            if i >= n || j >= n {
                return Err(Error::CorruptSnapshot("edge endpoint out of range".into()));
            }
            g.edges[i].insert(j, c);
            g.out_totals[i] += c;
        }
        if r.u8()? == 1 {
            g.set_node_embeddings(r.tensor()?)
                .map_err(|_| Error::CorruptSnapshot("embedding row count".into()))?;
        }
        r.finish()?;
        Ok(g)
    }
}

/// Target adjacency for a `t+1` event sequence. Each row with graph evidence
/// is smoothed by `epsilon` and rescaled to sum to one; rows whose raw sum is
/// zero become uniform and are masked out.
pub fn tutor_adjacency(g: &EventGraph, events: &[Event], epsilon: f64) -> Result<AdjMatrix> {
    if events.len() < 2 {
        return Err(Error::shape("tutor_adjacency", "need at least 2 events"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(scale_rows(g.raw_adjacency(events), epsilon))
}

fn scale_rows(mut values: Tensor, epsilon: f64) -> AdjMatrix {
    let n = values.rows();
    let mut row_mask = Vec::with_capacity(n);
    for i in 0..n {
        let row = values.row_mut(i);
        let raw: f64 = row.iter().sum();
        if raw > 0.0 {
            let total = raw + epsilon * n as f64;
            for v in row.iter_mut() {
                *v = (*v + epsilon) / total;
            }
            row_mask.push(true);
        } else {
            row.fill(1.0 / n as f64);
            row_mask.push(false);
        }
    }
    AdjMatrix { values, row_mask }
}

/// Node embeddings (zero rows for uncovered events) and the unsmoothed
/// tutor adjacency.
pub fn retrieved_features(g: &EventGraph, events: &[Event]) -> Result<(Tensor, AdjMatrix)> {
    let table = g.node_embeddings().ok_or(Error::MissingEmbeddings)?;
    let ids = g.node_ids(events);
    let mut e = Tensor::zeros(events.len(), table.cols());
    for (r, id) in ids.iter().enumerate() {
        if let Some(id) = id {
            e.row_mut(r).copy_from_slice(table.row(*id));
        }
    }
    Ok((e, tutor_adjacency(g, events, 0.0)?))
}

/// Fraction of `events` whose surface form is a node; `1.0` for an empty
/// list.
pub fn coverage_fraction(g: &EventGraph, events: &[Event]) -> f64 {
    if events.is_empty() {
        return 1.0;
    }
    events.iter().filter(|e| g.contains(e)).count() as f64 / events.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(p: &str) -> Event {
        Event::new("", p, "", "").unwrap()
    }

    fn chain(ps: &[&str]) -> EventChain {
        EventChain::new(ps.iter().map(|p| ev(p)).collect()).unwrap()
    }

    #[test]
    fn counts_bigrams() {
        let g = build_graph(&[chain(&["A", "B", "C"]), chain(&["A", "B"])]).unwrap();
        let (a, b, c) = (
            g.node_id(&ev("A")).unwrap(),
            g.node_id(&ev("B")).unwrap(),
            g.node_id(&ev("C")).unwrap(),
        );
        assert_eq!(g.count(a, b), 2);
        assert_eq!(g.count(b, c), 1);
        assert_eq!(g.num_edges(), 2);
        assert!(matches!(build_graph(&[]), Err(Error::EmptyChainList)));
    }

    #[test]
    fn edge_weights() {
        let g = build_graph(&[
            chain(&["A", "B"]),
            chain(&["A", "B"]),
            chain(&["A", "B"]),
            chain(&["A", "C"]),
        ])
        .unwrap();
        assert_eq!(g.edge_weight(&ev("A"), &ev("B")), Some(0.75));
        assert_eq!(g.edge_weight(&ev("A"), &ev("A")), Some(0.0));
        assert_eq!(g.edge_weight(&ev("Z"), &ev("B")), None);
        assert_eq!(g.edge_weight(&ev("B"), &ev("A")), None);
    }

    #[test]
    fn tutor_rows_follow_graph_weights() {
        let g = build_graph(&[chain(&["A", "B", "C", "A", "C"])]).unwrap();
        let events = [ev("A"), ev("B"), ev("C")];
        let adj = tutor_adjacency(&g, &events, 0.0).unwrap();
        assert_eq!(adj.row_mask, vec![true, true, true]);
        assert_eq!(adj.values.row(0), &[0.0, 0.5, 0.5]);
        assert_eq!(adj.values.row(1), &[0.0, 0.0, 1.0]);
        assert_eq!(adj.values.row(2), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn uncovered_rows_are_uniform_and_masked() {
        let g = build_graph(&[chain(&["A", "B"])]).unwrap();
        let events = [ev("A"), ev("X"), ev("B")];
        let adj = tutor_adjacency(&g, &events, 1e-3).unwrap();
        assert_eq!(adj.row_mask, vec![true, false, false]);
        assert!(adj.values.row(1).iter().all(|v| *v == 1.0 / 3.0));
    }

    #[test]
    fn smoothing_matches_hand_arithmetic() {
        let raw = Tensor::from_rows(&[[0.3, 0.1, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let adj = scale_rows(raw, 1e-3);
        let want = [0.301 / 0.403, 0.101 / 0.403, 0.001 / 0.403];
        for (a, b) in adj.values.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn retrieval_features() {
        let mut g = build_graph(&[chain(&["A", "B", "C"])]).unwrap();
        assert!(matches!(
            retrieved_features(&g, &[ev("A"), ev("B")]),
            Err(Error::MissingEmbeddings)
        ));
        let table = Tensor::from_fn(3, 4, |i, j| (10 * i + j) as f64 + 1.0);
        g.set_node_embeddings(table.clone()).unwrap();
        let events = [ev("C"), ev("A"), ev("Q")];
        let (e, adj) = retrieved_features(&g, &events).unwrap();
        assert_eq!(e.row(0), table.row(g.node_id(&ev("C")).unwrap()));
        assert_eq!(e.row(1), table.row(g.node_id(&ev("A")).unwrap()));
        assert!(e.row(2).iter().all(|v| *v == 0.0));
        assert!(!adj.row_mask[2]);
    }

    #[test]
    fn coverage() {
        let g = build_graph(&[chain(&["A", "B"])]).unwrap();
        assert_eq!(coverage_fraction(&g, &[ev("A"), ev("B")]), 1.0);
        assert_eq!(coverage_fraction(&g, &[ev("X"), ev("Y")]), 0.0);
        assert_eq!(coverage_fraction(&g, &[ev("A"), ev("Y")]), 0.5);
    }

    fn random_corpus(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<EventChain> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(2..8);
                EventChain::new(
                    (0..len)
                        .map(|_| ev(&format!("e{}", rng.random_range(0..vocab))))
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = build_graph(&random_corpus(&mut rng, 50, 12)).unwrap();
        let n = g.num_nodes();
        g.set_node_embeddings(Tensor::from_fn(n, 3, |i, j| i as f64 * 0.1 - j as f64))
            .unwrap();
        let bytes = g.to_bytes();
        assert_eq!(EventGraph::from_bytes(&bytes).unwrap(), g);
        assert!(matches!(
            EventGraph::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::CorruptSnapshot(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        g.save(&path).unwrap();
        assert_eq!(EventGraph::load(&path).unwrap(), g);
    }

    #[test]
    fn large_graph_round_trip_preserves_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = build_graph(&random_corpus(&mut rng, 12_000, 10_000)).unwrap();
        assert!(g.num_nodes() >= 9_000);
        let queries: Vec<(usize, usize, Option<f64>)> = (0..100)
            .map(|_| {
                let (a, b) = (rng.random_range(0..g.num_nodes()), rng.random_range(0..g.num_nodes()));
                (a, b, g.weight_by_id(a, b))
            })
            .collect();
        let h = EventGraph::from_bytes(&g.to_bytes()).unwrap();
        for (a, b, w) in queries {
            assert_eq!(h.weight_by_id(a, b), w);
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_graph(&random_corpus(&mut rng, 30, 8)).unwrap();
            for i in 0..g.num_nodes() {
                if g.out_total(i) > 0 {
                    let s: f64 = (0..g.num_nodes()).map(|j| g.weight_by_id(i, j).unwrap()).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn tutor_masked_rows_normalized_and_positive(seed in any::<u64>(), eps in 1e-6f64..1e-1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_graph(&random_corpus(&mut rng, 30, 8)).unwrap();
            let events: Vec<Event> = (0..5).map(|_| ev(&format!("e{}", rng.random_range(0..10)))).collect();
            let adj = tutor_adjacency(&g, &events, eps).unwrap();
            for i in 0..5 {
                let s: f64 = adj.values.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                if adj.row_mask[i] {
                    prop_assert!(adj.values.row(i).iter().all(|v| *v > 0.0 && *v <= 1.0));
                }
            }
        }

        #[test]
        fn coverage_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let corpus = random_corpus(&mut rng, 20, 30);
            let probe: Vec<Event> = (0..30).map(|i| ev(&format!("e{i}"))).collect();
            let mut g = build_graph(&corpus[..1]).unwrap();
            let mut last = coverage_fraction(&g, &probe);
            for c in &corpus[1..] {
                g.add_chain(c);
                let now = coverage_fraction(&g, &probe);
                prop_assert!(now >= last);
                last = now;
            }
        }
    }
}
