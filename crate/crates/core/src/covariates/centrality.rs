//! Degree, closeness and betweenness on undirected weighted graphs, tuned by
//! an exponent `alpha` that moves each measure from its classical unweighted
//! form (`alpha = 0`) to a purely weight-driven one (`alpha = 1`).
//!
//! Edge weights are traversal costs (lengths in metres). Traversing an edge of
//! weight `w` costs `w^alpha`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrError};

/// Relative tolerance under which two path costs count as tied.
const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedGraph {
    node_ids: Vec<String>,
    adjacency: Vec<Vec<(usize, f64)>>,
    n_edges: usize,
}

impl WeightedGraph {
    /// Builds a graph from `(u, v, weight)` triples. Node order follows first appearance.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S, f64)]) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut node_ids = Vec::new();
        let mut adjacency: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut intern = |id: &str, node_ids: &mut Vec<String>, adjacency: &mut Vec<Vec<(usize, f64)>>| {
            *index.entry(id.to_string()).or_insert_with(|| {
                node_ids.push(id.to_string());
                adjacency.push(Vec::new());
                node_ids.len() - 1
            })
        };
        for (u, v, w) in edges {
            let (u, v, w) = (u.as_ref(), v.as_ref(), *w);
            if u == v {
                return Err(ScrError::InvalidInput(format!("self-loop at node `{u}`")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(ScrError::InvalidInput(format!(
                    "edge {u}-{v} has non-positive weight {w}"
                )));
            }
            let a = intern(u, &mut node_ids, &mut adjacency);
            let b = intern(v, &mut node_ids, &mut adjacency);
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        Ok(Self {
            node_ids,
            adjacency,
            n_edges: edges.len(),
        })
    }

    /// Adds a node with no edges.
    pub fn add_isolated(&mut self, id: &str) -> Result<usize> {
        if self.node_ids.iter().any(|n| n == id) {
            return Err(ScrError::InvalidInput(format!("duplicate node id `{id}`")));
        }
        self.node_ids.push(id.to_string());
        self.adjacency.push(Vec::new());
        Ok(self.node_ids.len() - 1)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    /// Same topology with every weight replaced by its reciprocal.
    pub fn inverted(&self) -> Self {
        Self {
            node_ids: self.node_ids.clone(),
            adjacency: self
                .adjacency
                .iter()
                .map(|adj| adj.iter().map(|&(v, w)| (v, 1.0 / w)).collect())
                .collect(),
            n_edges: self.n_edges,
        }
    }

    /// Reads the edge list `u,v,weight_metres`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut edges = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let w: f64 = rec
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|_| ScrError::InvalidInput(format!("graph file row {}: bad weight", line + 2)))?;
            edges.push((
                rec.get(0).unwrap_or("").to_string(),
                rec.get(1).unwrap_or("").to_string(),
                w,
            ));
        }
        if edges.is_empty() {
            return Err(ScrError::Empty("graph file has no edges".into()));
        }
        Self::from_edges(&edges)
    }
}

/// `k^(1 - alpha) * s^alpha` with `k` the edge count and `s` the summed weight; 0 when isolated.
pub fn weighted_degree(g: &WeightedGraph, alpha: f64) -> Vec<f64> {
    g.adjacency
        .iter()
        .map(|adj| {
            if adj.is_empty() {
                return 0.0;
            }
            let k = adj.len() as f64;
            let s: f64 = adj.iter().map(|(_, w)| w).sum();
            k.powf(1.0 - alpha) * s.powf(alpha)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
struct Queued {
    cost: f64,
    node: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_RTOL * a.abs().max(b.abs())
}

/// Single-source shortest paths: distances, path counts, predecessors and
/// settle order (non-decreasing distance).
struct ShortestPathTree {
    dist: Vec<f64>,
    sigma: Vec<f64>,
    preds: Vec<Vec<usize>>,
    order: Vec<usize>,
}

fn shortest_path_tree(g: &WeightedGraph, alpha: f64, source: usize) -> ShortestPathTree {
    let n = g.n_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut sigma = vec![0.0; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut settled = vec![false; n];
    let mut order = Vec::new();
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    sigma[source] = 1.0;
    heap.push(Queued {
        cost: 0.0,
        node: source,
    });
    while let Some(Queued { cost, node }) = heap.pop() {
        if settled[node] || cost > dist[node] {
            continue;
        }
        settled[node] = true;
        order.push(node);
        for &(next, w) in &g.adjacency[node] {
            if settled[next] {
                continue;
            }
            let cand = cost + w.powf(alpha);
            if dist[next].is_finite() && tied(cand, dist[next]) {
                sigma[next] += sigma[node];
                preds[next].push(node);
            } else if cand < dist[next] {
                dist[next] = cand;
                sigma[next] = sigma[node];
                preds[next].clear();
                preds[next].push(node);
                heap.push(Queued { cost: cand, node: next });
            }
        }
    }
    ShortestPathTree {
        dist,
        sigma,
        preds,
        order,
    }
}

/// Costs and numbers of shortest paths from `source` to every node
/// (count 0 and cost infinity when unreachable).
pub fn shortest_path_counts(g: &WeightedGraph, alpha: f64, source: usize) -> (Vec<f64>, Vec<f64>) {
    let tree = shortest_path_tree(g, alpha, source);
    (tree.dist, tree.sigma)
}

/// All-pairs path costs with edge cost `weight^alpha`; unreachable pairs are `f64::INFINITY`.
pub fn weighted_shortest_paths(g: &WeightedGraph, alpha: f64) -> Vec<Vec<f64>> {
    (0..g.n_nodes())
        .into_par_iter()
        .map(|s| shortest_path_tree(g, alpha, s).dist)
        .collect()
}

/// `1 / sum_j d(i, j)` over the nodes reachable from `i`; `None` when nothing is reachable.
pub fn weighted_closeness(g: &WeightedGraph, alpha: f64) -> Vec<Option<f64>> {
    (0..g.n_nodes())
        .into_par_iter()
        .map(|s| {
            let tree = shortest_path_tree(g, alpha, s);
            let total: f64 = tree.order.iter().map(|&v| tree.dist[v]).sum();
            (tree.order.len() > 1).then(|| 1.0 / total)
        })
        .collect()
}

/// Brandes accumulation over all sources, with fractional credit on tied
/// shortest paths. Each unordered pair counts once.
pub fn weighted_betweenness(g: &WeightedGraph, alpha: f64) -> Vec<f64> {
    let n = g.n_nodes();
    if n < 3 {
        return vec![0.0; n];
    }
    // Fixed chunking keeps the reduction order independent of thread count.
    let chunk = (n / 64).max(16);
    let sources: Vec<usize> = (0..n).collect();
    let partials: Vec<Vec<f64>> = sources
        .par_chunks(chunk)
        .map(|srcs| {
            let mut acc = vec![0.0; n];
            let mut delta = vec![0.0; n];
            for &s in srcs {
                let tree = shortest_path_tree(g, alpha, s);
                for &v in &tree.order {
                    delta[v] = 0.0;
                }
                for &w in tree.order.iter().rev() {
                    for &v in &tree.preds[w] {
                        delta[v] += tree.sigma[v] / tree.sigma[w] * (1.0 + delta[w]);
                    }
                    if w != s {
                        acc[w] += delta[w];
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n];
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|b| *b /= 2.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn graph(edges: &[(&str, &str, f64)]) -> WeightedGraph {
        WeightedGraph::from_edges(edges).unwrap()
    }

    #[test]
    fn degree_three_edges_of_two() {
        let g = graph(&[("c", "a", 2.0), ("c", "b", 2.0), ("c", "d", 2.0)]);
        assert_eq!(weighted_degree(&g, 0.0)[0], 3.0);
        assert_eq!(weighted_degree(&g, 1.0)[0], 6.0);
        assert_relative_eq!(weighted_degree(&g, 0.5)[0], 18f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn unit_weights_make_alpha_irrelevant() {
        let g = graph(&[("a", "b", 1.0), ("b", "c", 1.0), ("c", "a", 1.0), ("c", "d", 1.0)]);
        for alpha in [0.0, 0.5, 1.0, 2.0] {
            for (a, b) in weighted_degree(&g, alpha).iter().zip(weighted_degree(&g, 0.0)) {
                assert_relative_eq!(*a, b, max_relative = 1e-12);
            }
            for (a, b) in weighted_betweenness(&g, alpha)
                .iter()
                .zip(weighted_betweenness(&g, 0.0))
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node() {
        let mut g = graph(&[("a", "b", 1.0)]);
        let z = g.add_isolated("z").unwrap();
        assert_eq!(weighted_degree(&g, 0.5)[z], 0.0);
        assert_eq!(weighted_closeness(&g, 0.5)[z], None);
    }

    #[test]
    fn path_costs() {
        let g = graph(&[("a", "b", 3.0), ("b", "c", 4.0)]);
        assert_eq!(weighted_shortest_paths(&g, 0.0)[0][2], 2.0);
        assert_eq!(weighted_shortest_paths(&g, 1.0)[0][2], 7.0);
        let g = graph(&[("a", "b", 4.0), ("b", "c", 9.0)]);
        assert_eq!(weighted_shortest_paths(&g, 0.5)[0][2], 5.0);
    }

    #[test]
    fn triangle_detour() {
        let g = graph(&[("a", "c", 10.0), ("a", "b", 3.0), ("b", "c", 3.0)]);
        assert_eq!(weighted_shortest_paths(&g, 1.0)[0][1], 6.0);
        assert_eq!(weighted_shortest_paths(&g, 0.0)[0][1], 1.0);
        // with alpha = 1 every a-c path runs through b
        assert_eq!(weighted_betweenness(&g, 1.0)[2], 1.0);
        assert_eq!(weighted_betweenness(&g, 0.0)[2], 0.0);
    }

    #[test]
    fn disconnected_pair_is_infinite() {
        let g = graph(&[("a", "b", 1.0), ("c", "d", 1.0)]);
        assert!(weighted_shortest_paths(&g, 1.0)[0][2].is_infinite());
    }

    #[test]
    fn path_graph_betweenness() {
        let g = graph(&[("a", "b", 2.5), ("b", "c", 7.0)]);
        for alpha in [0.0, 0.5, 1.0] {
            assert_eq!(weighted_betweenness(&g, alpha), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn star_centre() {
        let n = 7;
        let edges: Vec<(String, String, f64)> = (1..n)
            .map(|i| ("hub".to_string(), format!("leaf{i}"), 1.0 + i as f64))
            .collect();
        let g = WeightedGraph::from_edges(&edges).unwrap();
        let bc = weighted_betweenness(&g, 0.0);
        assert_eq!(bc[0], ((n - 1) * (n - 2) / 2) as f64);
        let cl = weighted_closeness(&g, 0.0);
        assert_eq!(cl[0], Some(1.0 / (n - 1) as f64));
        assert!(cl[1..].iter().all(|c| c.unwrap() < cl[0].unwrap()));
    }

    #[test]
    fn single_node_and_pair() {
        let mut g = WeightedGraph::from_edges::<&str>(&[]).unwrap();
        g.add_isolated("only").unwrap();
        assert_eq!(weighted_betweenness(&g, 0.0), vec![0.0]);
        assert_eq!(weighted_closeness(&g, 0.0), vec![None]);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(WeightedGraph::from_edges(&[("a", "a", 1.0)]).is_err());
        assert!(WeightedGraph::from_edges(&[("a", "b", 0.0)]).is_err());
        assert!(WeightedGraph::from_edges(&[("a", "b", -2.0)]).is_err());
    }

    #[test]
    fn invert_weights() {
        let g = graph(&[("a", "b", 4.0), ("b", "c", 0.5)]);
        assert_eq!(weighted_degree(&g.inverted(), 1.0), vec![0.25, 2.25, 2.0]);
    }

    #[test]
    fn deterministic_and_log_linear_degree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let edges: Vec<(String, String, f64)> = (0..300)
            .filter_map(|_| {
                let (a, b) = (rng.random_range(0..120), rng.random_range(0..120));
                (a != b).then(|| (a.to_string(), b.to_string(), rng.random_range(5.0..400.0)))
            })
            .collect();
        let g = WeightedGraph::from_edges(&edges).unwrap();
        let b1 = weighted_betweenness(&g, 0.5);
        let b2 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| weighted_betweenness(&g, 0.5));
        assert_eq!(b1, b2);
        let (d0, dh, d1) = (
            weighted_degree(&g, 0.0),
            weighted_degree(&g, 0.5),
            weighted_degree(&g, 1.0),
        );
        for i in 0..g.n_nodes() {
            assert_relative_eq!(dh[i].ln(), 0.5 * (d0[i].ln() + d1[i].ln()), epsilon = 1e-12);
        }
    }

    /// Degree, closeness, betweenness and shortest-path counts.
    type Reference = (Vec<f64>, Vec<Option<f64>>, Vec<f64>, Vec<Vec<f64>>);

    /// Unweighted reference: Floyd-Warshall hop distances and exhaustive
    /// enumeration of simple paths for shortest-path counts.
    fn brute_force(n: usize, edges: &[(usize, usize)]) -> Reference {
        let mut adj = vec![vec![false; n]; n];
        for &(a, b) in edges {
            adj[a][b] = true;
            adj[b][a] = true;
        }
        let degree = (0..n)
            .map(|i| edges.iter().filter(|&&(a, b)| a == i || b == i).count() as f64)
            .collect();
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
            for j in 0..n {
                if adj[i][j] {
                    d[i][j] = 1;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        let closeness = (0..n)
            .map(|i| {
                let reach: Vec<usize> = (0..n).filter(|&j| j != i && d[i][j] < inf).map(|j| d[i][j]).collect();
                (!reach.is_empty()).then(|| 1.0 / reach.iter().sum::<usize>() as f64)
            })
            .collect();

        fn walk(adj: &[Vec<bool>], at: usize, target: usize, path: &mut Vec<usize>, found: &mut Vec<Vec<usize>>) {
            if at == target {
                found.push(path.clone());
                return;
            }
            for next in 0..adj.len() {
                if adj[at][next] && !path.contains(&next) {
                    path.push(next);
                    walk(adj, next, target, path, found);
                    path.pop();
                }
            }
        }
        let mut between = vec![0.0; n];
        let mut counts = vec![vec![0.0; n]; n];
        for s in 0..n {
            counts[s][s] = 1.0;
            for t in (s + 1)..n {
                if d[s][t] >= inf {
                    continue;
                }
                let mut found = Vec::new();
                walk(&adj, s, t, &mut vec![s], &mut found);
                let shortest: Vec<_> = found.into_iter().filter(|p| p.len() - 1 == d[s][t]).collect();
                counts[s][t] = shortest.len() as f64;
                counts[t][s] = shortest.len() as f64;
                for p in &shortest {
                    for &v in &p[1..p.len() - 1] {
                        between[v] += 1.0 / shortest.len() as f64;
                    }
                }
            }
        }
        (degree, closeness, between, counts)
    }

    /// Random graph on `n` nodes with integer-free weights; node `i` is named `i`.
    fn random_graph(rng: &mut impl Rng, n: usize) -> (WeightedGraph, Vec<(usize, usize)>) {
        let p = rng.random_range(0.2..0.7);
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(p) {
                    pairs.push((a, b));
                }
            }
        }
        let mut g = WeightedGraph::from_edges::<&str>(&[]).unwrap();
        for i in 0..n {
            g.add_isolated(&i.to_string()).unwrap();
        }
        for &(a, b) in &pairs {
            let w = rng.random_range(1.0..500.0);
            g.adjacency[a].push((b, w));
            g.adjacency[b].push((a, w));
            g.n_edges += 1;
        }
        (g, pairs)
    }

    #[test]
    fn alpha_zero_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let (g, pairs) = random_graph(&mut rng, n);
            let (deg, clo, bet, counts) = brute_force(n, &pairs);
            assert_eq!(weighted_degree(&g, 0.0), deg);
            for (s, c) in counts.iter().enumerate() {
                assert_eq!(&shortest_path_counts(&g, 0.0, s).1, c);
            }
            for (a, b) in weighted_betweenness(&g, 0.0).iter().zip(&bet) {
                assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
            }
            for (got, want) in weighted_closeness(&g, 0.0).iter().zip(&clo) {
                match (got, want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12 * b),
                    (None, None) => {}
                    other => panic!("closeness mismatch {other:?}"),
                }
            }
        }
    }
}
