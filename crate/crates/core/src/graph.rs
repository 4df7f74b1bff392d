//! Directed communication graphs, message routing and push-sum consensus.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{Real, RowMix, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("node index {index} out of range for {n} agents")]
    OutOfRange { index: usize, n: usize },
    #[error("graph is not strongly connected; consensus refused")]
    NotStronglyConnected,
    #[error("push-sum did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid graph spec {spec:?}: {reason}")]
    Spec { spec: String, reason: String },
    #[error("expected {expected} per-agent vectors, got {got}")]
    AgentCount { expected: usize, got: usize },
}

/// Directed graph over agents `0..n`; `(i, j)` means `j` receives from `i`.
#[derive(Debug, Clone)]
pub struct CommGraph {
    n: usize,
    arcs: Vec<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
    strongly_connected: bool,
    warned_isolated: Arc<AtomicBool>,
}

impl PartialEq for CommGraph {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.arcs == other.arcs
    }
}

impl CommGraph {
    pub fn new(n: usize, arcs: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut clean = Vec::with_capacity(arcs.len());
        for &(i, j) in arcs {
            for idx in [i, j] {
                if idx >= n {
                    return Err(GraphError::OutOfRange { index: idx, n });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            clean.push((i, j));
        }
        clean.sort_unstable();
        clean.dedup();
        let mut in_neighbors = vec![Vec::new(); n];
        let mut out_neighbors = vec![Vec::new(); n];
        for &(i, j) in &clean {
            in_neighbors[j].push(i);
            out_neighbors[i].push(j);
        }
        let strongly_connected = reaches_all(&out_neighbors) && reaches_all(&in_neighbors);
        Ok(Self {
            n,
            arcs: clean,
            in_neighbors,
            out_neighbors,
            strongly_connected,
            warned_isolated: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn complete(n: usize) -> Self {
        let arcs: Vec<_> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Self::new(n, &arcs).expect("complete graph is valid")
    }

    /// Directed cycle `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn ring(n: usize) -> Self {
        let arcs: Vec<_> = if n < 2 {
            Vec::new()
        } else {
            (0..n).map(|i| (i, (i + 1) % n)).collect()
        };
        Self::new(n, &arcs).expect("ring is valid")
    }

    pub fn arcless(n: usize) -> Self {
        Self::new(n, &[]).expect("empty arc set is valid")
    }

    pub fn agent_count(&self) -> usize {
        self.n
    }

    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.in_neighbors[i].len()
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.strongly_connected
    }

    /// Row mixing that averages decoded messages over in-neighbors for a
    /// batch of `episodes` independent copies of the agent set (row
    /// `e * n + i` is agent `i` of episode `e`).
    pub fn routing_mix(&self, episodes: usize) -> RowMix {
        let n = self.n;
        if self.in_neighbors.iter().any(|s| s.is_empty())
            && n > 0
            && !self.warned_isolated.swap(true, Ordering::Relaxed)
        {
            let isolated: Vec<usize> = (0..n).filter(|&i| self.in_degree(i) == 0).collect();
            log::warn!(
                "agents {isolated:?} have no in-neighbors; their aggregated message is zero"
            );
        }
        let mut mix = RowMix::new(episodes * n, episodes * n);
        for e in 0..episodes {
            for i in 0..n {
                let deg = self.in_degree(i);
                for &j in &self.in_neighbors[i] {
                    mix.push(e * n + i, e * n + j, 1.0 / deg as f64);
                }
            }
        }
        mix
    }

    /// Differentiable in-neighbor average over a batched `[episodes * n, dim]` tensor.
    pub fn route_and_average_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        decoded: Var,
        episodes: usize,
    ) -> Result<Var, TensorError> {
        tape.row_mix(decoded, Arc::new(self.routing_mix(episodes)))
    }

    /// `out_i = (1 / deg_i) * sum_{j in N_i} decoded_j`; zero when `deg_i = 0`.
    pub fn route_and_average<T: Real>(
        &self,
        decoded: &[Vec<T>],
    ) -> Result<Vec<Vec<T>>, GraphError> {
        if decoded.len() != self.n {
            return Err(GraphError::AgentCount {
                expected: self.n,
                got: decoded.len(),
            });
        }
        let dim = decoded.first().map_or(0, Vec::len);
        let mut tape = Tape::<T>::new();
        let flat: Vec<T> = decoded.iter().flat_map(|v| v.iter().copied()).collect();
        let input = crate::autodiff::Tensor::new(vec![self.n, dim], flat).map_err(|e| {
            GraphError::Spec {
                spec: "decoded".into(),
                reason: e.to_string(),
            }
        })?;
        let v = tape.constant(input);
        let out = self
            .route_and_average_var(&mut tape, v, 1)
            .expect("row counts match");
        Ok((0..self.n)
            .map(|i| tape.value(out).row_slice(i).to_vec())
            .collect())
    }
}

fn reaches_all(adjacency: &[Vec<usize>]) -> bool {
    let n = adjacency.len();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Textual graph selection: `complete`, `ring`, `none`, or `arcs:(i,j);(k,l);...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphSpec {
    Complete,
    Ring,
    Arcs(Vec<(usize, usize)>),
}

impl GraphSpec {
    pub fn build(&self, n: usize) -> Result<CommGraph, GraphError> {
        match self {
            GraphSpec::Complete => Ok(CommGraph::complete(n)),
            GraphSpec::Ring => Ok(CommGraph::ring(n)),
            GraphSpec::Arcs(arcs) => CommGraph::new(n, arcs),
        }
    }
}

impl FromStr for GraphSpec {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spec = s.trim();
        let bad = |reason: &str| GraphError::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        match spec {
            "complete" => return Ok(GraphSpec::Complete),
            "ring" => return Ok(GraphSpec::Ring),
            "none" => return Ok(GraphSpec::Arcs(Vec::new())),
            _ => {}
        }
        let body = spec
            .strip_prefix("arcs:")
            .ok_or_else(|| bad("expected complete, ring, none or arcs:(i,j);..."))?;
        let mut arcs = Vec::new();
        for item in body.split(';').map(str::trim).filter(|x| !x.is_empty()) {
            let inner = item
                .strip_prefix('(')
                .and_then(|x| x.strip_suffix(')'))
                .ok_or_else(|| bad("arc must look like (i,j)"))?;
            let (a, b) = inner
                .split_once(',')
                .ok_or_else(|| bad("arc must look like (i,j)"))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| bad("arc endpoints must be non-negative integers"))
            };
            arcs.push((parse(a)?, parse(b)?));
        }
        Ok(GraphSpec::Arcs(arcs))
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSpec::Complete => write!(f, "complete"),
            GraphSpec::Ring => write!(f, "ring"),
            GraphSpec::Arcs(arcs) => {
                write!(f, "arcs:")?;
                for (k, (i, j)) in arcs.iter().enumerate() {
                    if k > 0 {
                        write!(f, ";")?;
                    }
                    write!(f, "({i},{j})")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushSumConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PushSumConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 10_000,
        }
    }
}

/// Per-node push-sum numerators and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub iteration: usize,
}

impl ConsensusState {
    pub fn new(initial: &[Vec<f64>]) -> Self {
        Self {
            values: initial.to_vec(),
            weights: vec![1.0; initial.len()],
            iteration: 0,
        }
    }

    /// One synchronous round: node `j` keeps one share and sends one share to
    /// each out-neighbor, `1 / (out_degree + 1)` each.
    pub fn step(&mut self, graph: &CommGraph) {
        let dim = self.values.first().map_or(0, Vec::len);
        let n = self.values.len();
        let mut next_values = vec![vec![0.0; dim]; n];
        let mut next_weights = vec![0.0; n];
        for j in 0..n {
            let share = 1.0 / (graph.out_neighbors(j).len() + 1) as f64;
            for &dest in std::iter::once(&j).chain(graph.out_neighbors(j)) {
                next_weights[dest] += share * self.weights[j];
                for (acc, &v) in next_values[dest].iter_mut().zip(&self.values[j]) {
                    *acc += share * v;
                }
            }
        }
        self.values = next_values;
        self.weights = next_weights;
        self.iteration += 1;
    }

    pub fn ratios(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(x, &w)| x.iter().map(|v| v / w).collect())
            .collect()
    }

    /// Largest per-component spread of the ratio estimates across nodes.
    pub fn disagreement(&self) -> f64 {
        let ratios = self.ratios();
        let dim = ratios.first().map_or(0, Vec::len);
        (0..dim)
            .map(|c| {
                let (lo, hi) = ratios
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r[c]), hi.max(r[c]))
                    });
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    pub fn total_value(&self) -> Vec<f64> {
        let dim = self.values.first().map_or(0, Vec::len);
        (0..dim)
            .map(|c| self.values.iter().map(|v| v[c]).sum())
            .collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushSumOutcome {
    /// Each agent's local estimate of the network average.
    pub estimates: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

/// Decentralized average of per-agent vectors by ratio consensus.
pub fn push_sum_consensus(
    graph: &CommGraph,
    initial: &[Vec<f64>],
    config: PushSumConfig,
) -> Result<PushSumOutcome, GraphError> {
    if initial.len() != graph.agent_count() {
        return Err(GraphError::AgentCount {
            expected: graph.agent_count(),
            got: initial.len(),
        });
    }
    if !graph.is_strongly_connected() {
        return Err(GraphError::NotStronglyConnected);
    }
    let mut state = ConsensusState::new(initial);
    let mut residual = state.disagreement();
    while !(residual < config.tol) {
        if state.iteration >= config.max_iters {
            return Err(GraphError::NoConvergence {
                iterations: state.iteration,
                residual,
            });
        }
        state.step(graph);
        residual = state.disagreement();
    }
    Ok(PushSumOutcome {
        estimates: state.ratios(),
        iterations: state.iteration,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn closure_strongly_connected(n: usize, arcs: &[(usize, usize)]) -> bool {
        let mut reach = vec![vec![false; n]; n];
        for (i, row) in reach.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(i, j) in arcs {
            reach[i][j] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        reach.iter().all(|r| r.iter().all(|&x| x))
    }

    #[test]
    fn two_node_mutual_graph() {
        let g = CommGraph::new(2, &[(0, 1), (1, 0)]).unwrap();
        assert!(g.is_strongly_connected());
        assert_eq!((g.in_degree(0), g.in_degree(1)), (1, 1));
    }

    #[test]
    fn path_is_not_strongly_connected() {
        let g = CommGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        assert!(!g.is_strongly_connected());
    }

    #[test]
    fn complete_graph_in_degrees() {
        let g = CommGraph::complete(3);
        assert!((0..3).all(|i| g.in_degree(i) == 2));
        assert!(g.is_strongly_connected());
    }

    #[test]
    fn validation_errors() {
        assert_eq!(CommGraph::new(2, &[(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            CommGraph::new(2, &[(0, 2)]),
            Err(GraphError::OutOfRange { index: 2, n: 2 })
        );
    }

    #[test]
    fn in_neighbors_match_arc_set() {
        let g = CommGraph::new(4, &[(0, 1), (2, 1), (3, 0), (1, 3)]).unwrap();
        assert_eq!(g.in_neighbors(1), &[0, 2]);
        assert_eq!(g.in_neighbors(0), &[3]);
        assert_eq!(g.in_neighbors(2), &[] as &[usize]);
        assert_eq!(g.out_neighbors(1), &[3]);
    }

    #[test]
    fn strong_connectivity_matches_transitive_closure_for_all_3_node_digraphs() {
        let pairs: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        for mask in 0u32..(1 << pairs.len()) {
            let arcs: Vec<_> = pairs
                .iter()
                .enumerate()
                .filter(|(k, _)| mask >> k & 1 == 1)
                .map(|(_, &a)| a)
                .collect();
            let g = CommGraph::new(3, &arcs).unwrap();
            assert_eq!(
                g.is_strongly_connected(),
                closure_strongly_connected(3, &arcs),
                "{arcs:?}"
            );
        }
    }

    #[test]
    fn routing_examples() {
        let g = CommGraph::new(2, &[(0, 1), (1, 0)]).unwrap();
        let out = g
            .route_and_average(&[vec![1.0f64, 2.0], vec![3.0, 4.0]])
            .unwrap();
        assert_eq!(out, vec![vec![3.0, 4.0], vec![1.0, 2.0]]);

        let g = CommGraph::new(3, &[(1, 0), (2, 0)]).unwrap();
        let out = g
            .route_and_average(&[vec![0.0f64], vec![2.0], vec![4.0]])
            .unwrap();
        assert_eq!(out[0], vec![3.0]);
        // isolated receivers
        assert_eq!(out[1], vec![0.0]);
        assert_eq!(out[2], vec![0.0]);
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "complete".parse::<GraphSpec>().unwrap(),
            GraphSpec::Complete
        );
        assert_eq!(" ring ".parse::<GraphSpec>().unwrap(), GraphSpec::Ring);
        assert_eq!(
            "none".parse::<GraphSpec>().unwrap(),
            GraphSpec::Arcs(vec![])
        );
        assert_eq!(
            "arcs:".parse::<GraphSpec>().unwrap(),
            GraphSpec::Arcs(vec![])
        );
        let spec: GraphSpec = "arcs:(0,1); (1, 0)".parse().unwrap();
        assert_eq!(spec, GraphSpec::Arcs(vec![(0, 1), (1, 0)]));
        assert_eq!(spec.to_string(), "arcs:(0,1);(1,0)");
        assert!("arcs:(0;1)".parse::<GraphSpec>().is_err());
        assert!("star".parse::<GraphSpec>().is_err());
        assert!(matches!(
            GraphSpec::Arcs(vec![(0, 5)]).build(2),
            Err(GraphError::OutOfRange { .. })
        ));
    }

    #[test]
    fn push_sum_two_point_mean() {
        let g = CommGraph::complete(2);
        let out = push_sum_consensus(
            &g,
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            PushSumConfig::default(),
        )
        .unwrap();
        for est in &out.estimates {
            assert!((est[0] - 0.5).abs() < 1e-9 && (est[1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn push_sum_fixed_point_converges_immediately() {
        let g = CommGraph::ring(4);
        let v = vec![0.3, -1.2, 7.0];
        let out = push_sum_consensus(&g, &vec![v.clone(); 4], PushSumConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.estimates.iter().all(|e| e == &v));
    }

    #[test]
    fn push_sum_on_directed_ring_reaches_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = CommGraph::ring(5);
        let initial: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let mean: Vec<f64> = (0..3)
            .map(|c| initial.iter().map(|v| v[c]).sum::<f64>() / 5.0)
            .collect();
        let out = push_sum_consensus(
            &g,
            &initial,
            PushSumConfig {
                tol: 1e-9,
                max_iters: 10_000,
            },
        )
        .unwrap();
        for est in &out.estimates {
            for c in 0..3 {
                assert!((est[c] - mean[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn push_sum_refuses_disconnected_and_reports_budget() {
        let g = CommGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let init = vec![vec![1.0]; 3];
        assert_eq!(
            push_sum_consensus(&g, &init, PushSumConfig::default()),
            Err(GraphError::NotStronglyConnected)
        );
        let g = CommGraph::ring(6);
        let init: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let err = push_sum_consensus(
            &g,
            &init,
            PushSumConfig {
                tol: 1e-12,
                max_iters: 3,
            },
        )
        .unwrap_err();
        assert!(
            matches!(err, GraphError::NoConvergence { iterations: 3, residual } if residual > 0.0)
        );
    }

    #[test]
    fn single_agent_is_its_own_consensus() {
        let g = CommGraph::complete(1);
        assert!(g.is_strongly_connected());
        let out = push_sum_consensus(&g, &[vec![2.0, 3.0]], PushSumConfig::default()).unwrap();
        assert_eq!(out.estimates, vec![vec![2.0, 3.0]]);
    }

    fn random_strong_graph(rng: &mut ChaCha8Rng, n: usize) -> CommGraph {
        loop {
            let arcs: Vec<_> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j)
                .filter(|_| rng.gen_bool(0.35))
                .collect();
            let g = CommGraph::new(n, &arcs).unwrap();
            if g.is_strongly_connected() {
                return g;
            }
        }
    }

    proptest! {
        #[test]
        fn push_sum_conserves_mass(seed in 0u64..500, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_strong_graph(&mut rng, n);
            let initial: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut state = ConsensusState::new(&initial);
            let mass0 = state.total_value();
            for _ in 0..40 {
                state.step(&g);
                for (a, b) in state.total_value().iter().zip(&mass0) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                prop_assert!((state.total_weight() - n as f64).abs() < 1e-9);
                prop_assert!(state.weights.iter().all(|&w| w > 0.0));
            }
        }

        #[test]
        fn push_sum_converges_on_random_strong_graphs(seed in 0u64..200, n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_strong_graph(&mut rng, n);
            let initial: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let out = push_sum_consensus(&g, &initial, PushSumConfig { tol: 1e-9, max_iters: 10_000 }).unwrap();
            for c in 0..3 {
                let mean = initial.iter().map(|v| v[c]).sum::<f64>() / n as f64;
                for est in &out.estimates {
                    prop_assert!((est[c] - mean).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn routing_matches_brute_force(seed in 0u64..300, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arcs: Vec<_> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| i != j).filter(|_| rng.gen_bool(0.5)).collect();
            let g = CommGraph::new(n, &arcs).unwrap();
            let decoded: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let got = g.route_and_average(&decoded).unwrap();
            for i in 0..n {
                let senders: Vec<usize> = arcs.iter().filter(|a| a.1 == i).map(|a| a.0).collect();
                for c in 0..5 {
                    let expected = if senders.is_empty() { 0.0 } else {
                        senders.iter().map(|&j| decoded[j][c]).sum::<f64>() / senders.len() as f64
                    };
                    prop_assert!((got[i][c] - expected).abs() < 1e-12);
                }
            }
        }
    }
}
