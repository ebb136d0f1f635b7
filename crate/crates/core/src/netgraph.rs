//! The dual physical/communication network.
//!
//! The physical network is induced by the nonzero coupling blocks of the
//! plant and may be directed: `N_i` holds every `j` whose state enters the
//! dynamics of subsystem `i`. The communication network is undirected, simple
//! and connected; `C_i` holds the agents `i` can exchange estimates with.
//!
//! Node indices are 0-based in memory and 1-based in [`GraphFile`].

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkPair {
    n: usize,
    /// `phys_in[i]` = sorted `N_i`.
    phys_in: Vec<Vec<usize>>,
    /// `comm[i]` = sorted `C_i`.
    comm: Vec<Vec<usize>>,
}

impl NetworkPair {
    /// Builds a pair from 0-based edge lists.
    ///
    /// A physical edge `(a, b)` is directed: the state of `a` enters the
    /// dynamics of `b`, so `a ∈ N_b`. Communication edges are symmetrised.
    pub fn new(
        n: usize,
        phys_edges: &[(usize, usize)],
        comm_edges: &[(usize, usize)],
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidNetwork("network needs at least one node".into()));
        }
        let check = |a: usize, b: usize, kind: &str| -> Result<()> {
            if a >= n || b >= n {
                return Err(Error::InvalidNetwork(format!(
                    "{kind} edge ({}, {}) out of range 1..={n}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::InvalidNetwork(format!(
                    "{kind} self-loop at node {}",
                    a + 1
                )));
            }
            Ok(())
        };
        let mut phys_in = vec![BTreeSet::new(); n];
        for &(a, b) in phys_edges {
            check(a, b, "physical")?;
            phys_in[b].insert(a);
        }
        let mut comm = vec![BTreeSet::new(); n];
        for &(a, b) in comm_edges {
            check(a, b, "communication")?;
            comm[a].insert(b);
            comm[b].insert(a);
        }
        let pair = Self {
            n,
            phys_in: phys_in.into_iter().map(|s| s.into_iter().collect()).collect(),
            comm: comm.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        if !pair.comm_connected() {
            return Err(Error::InvalidNetwork(
                "communication network is not connected".into(),
            ));
        }
        Ok(pair)
    }

    /// Pair whose physical edges are undirected (each edge couples both ways).
    pub fn from_undirected(
        n: usize,
        phys_edges: &[(usize, usize)],
        comm_edges: &[(usize, usize)],
    ) -> Result<Self> {
        let both: Vec<_> = phys_edges
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect();
        Self::new(n, &both, comm_edges)
    }

    /// Star with hub 0 and leaves `1..n`, identical physical and
    /// communication edges.
    pub fn star(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|k| (0, k)).collect();
        Self::from_undirected(n, &edges, &edges)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `N_i`: nodes whose state enters subsystem `i`.
    pub fn physical_neighbors(&self, i: usize) -> &[usize] {
        &self.phys_in[i]
    }

    /// `C_i`.
    pub fn comm_neighbors(&self, i: usize) -> &[usize] {
        &self.comm[i]
    }

    /// `β_ij`.
    pub fn has_phys(&self, i: usize, j: usize) -> bool {
        self.phys_in[i].binary_search(&j).is_ok()
    }

    /// `α_ij`.
    pub fn has_comm(&self, i: usize, j: usize) -> bool {
        self.comm[i].binary_search(&j).is_ok()
    }

    /// Directed physical edges `(from, to)`, sorted.
    pub fn phys_edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = (0..self.n)
            .flat_map(|i| self.phys_in[i].iter().map(move |&j| (j, i)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Undirected communication edges `(a, b)` with `a < b`, sorted.
    pub fn comm_edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| {
                self.comm[i]
                    .iter()
                    .filter(move |&&j| j > i)
                    .map(move |&j| (i, j))
            })
            .collect()
    }

    /// Physical edges with direction collapsed.
    pub fn phys_edges_undirected(&self) -> BTreeSet<(usize, usize)> {
        self.phys_edges()
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect()
    }

    /// Applies the node relabelling `i -> perm[i]` to both graphs.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::InvalidNetwork("permutation length mismatch".into()));
        }
        let phys: Vec<_> = self
            .phys_edges()
            .into_iter()
            .map(|(a, b)| (perm[a], perm[b]))
            .collect();
        let comm: Vec<_> = self
            .comm_edges()
            .into_iter()
            .map(|(a, b)| (perm[a], perm[b]))
            .collect();
        Self::new(self.n, &phys, &comm)
    }

    fn comm_connected(&self) -> bool {
        let all: Vec<usize> = (0..self.n).collect();
        induced_connected(self, &all)
    }

    /// Minimal-hop communication path from `a` to `b`, endpoints included.
    ///
    /// Ties between equally short paths go to the lexicographically smallest
    /// node sequence.
    pub fn shortest_path(&self, a: usize, b: usize) -> Result<Vec<usize>> {
        PathFinder::new(self).path(a, b)
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            n: self.n,
            phys_edges: self
                .phys_edges()
                .into_iter()
                .map(|(a, b)| [a + 1, b + 1])
                .collect(),
            comm_edges: self
                .comm_edges()
                .into_iter()
                .map(|(a, b)| [a + 1, b + 1])
                .collect(),
        }
    }
}

/// On-disk graph format with 1-based node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFile {
    pub n: usize,
    pub phys_edges: Vec<[usize; 2]>,
    pub comm_edges: Vec<[usize; 2]>,
}

impl GraphFile {
    pub fn to_pair(&self) -> Result<NetworkPair> {
        let convert = |edges: &[[usize; 2]], kind: &str| -> Result<Vec<(usize, usize)>> {
            edges
                .iter()
                .map(|&[a, b]| {
                    if a == 0 || b == 0 {
                        Err(Error::InvalidNetwork(format!(
                            "{kind} edge [{a}, {b}]: node ids are 1-based"
                        )))
                    } else {
                        Ok((a - 1, b - 1))
                    }
                })
                .collect()
        };
        NetworkPair::new(
            self.n,
            &convert(&self.phys_edges, "physical")?,
            &convert(&self.comm_edges, "communication")?,
        )
    }
}

/// Reusable BFS state for repeated shortest-path queries.
pub struct PathFinder<'a> {
    pair: &'a NetworkPair,
    dist: Vec<u32>,
    stamp: Vec<u32>,
    current: u32,
    queue: VecDeque<usize>,
}

impl<'a> PathFinder<'a> {
    pub fn new(pair: &'a NetworkPair) -> Self {
        Self {
            pair,
            dist: vec![0; pair.len()],
            stamp: vec![0; pair.len()],
            current: 0,
            queue: VecDeque::new(),
        }
    }

    pub fn path(&mut self, a: usize, b: usize) -> Result<Vec<usize>> {
        let n = self.pair.len();
        if a >= n || b >= n {
            return Err(Error::InvalidNetwork(format!(
                "node out of range: {} or {} not in 1..={n}",
                a + 1,
                b + 1
            )));
        }
        if a == b {
            return Ok(vec![a]);
        }
        self.current = self.current.wrapping_add(1);
        if self.current == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.current = 1;
        }
        let cur = self.current;
        self.queue.clear();
        self.stamp[b] = cur;
        self.dist[b] = 0;
        self.queue.push_back(b);
        // BFS from the target; once `a` is labelled every node closer to `b`
        // than `a` is labelled too.
        let mut found = false;
        'bfs: while let Some(u) = self.queue.pop_front() {
            for &v in self.pair.comm_neighbors(u) {
                if self.stamp[v] != cur {
                    self.stamp[v] = cur;
                    self.dist[v] = self.dist[u] + 1;
                    if v == a {
                        found = true;
                        break 'bfs;
                    }
                    self.queue.push_back(v);
                }
            }
        }
        if !found {
            return Err(Error::Unreachable {
                from: a + 1,
                to: b + 1,
            });
        }
        let mut path = vec![a];
        let mut u = a;
        while u != b {
            let want = self.dist[u] - 1;
            // neighbours are sorted: the first match is the smallest id
            u = *self
                .pair
                .comm_neighbors(u)
                .iter()
                .find(|&&v| self.stamp[v] == cur && self.dist[v] == want)
                .expect("BFS layer below a labelled node is complete");
            path.push(u);
        }
        Ok(path)
    }
}

/// Whether `nodes` induce a connected communication subgraph.
pub fn induced_connected(pair: &NetworkPair, nodes: &[usize]) -> bool {
    if nodes.is_empty() {
        return false;
    }
    let members: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut stack = vec![nodes[0]];
    seen.insert(nodes[0]);
    while let Some(u) = stack.pop() {
        for &v in pair.comm_neighbors(u) {
            if members.contains(&v) && seen.insert(v) {
                stack.push(v);
            }
        }
    }
    seen.len() == members.len()
}

/// Edge overlap `2|E_c ∩ E_p| / (|E_c| + |E_p|)`, physical edges taken
/// undirected.
pub fn similarity(pair: &NetworkPair) -> Result<f64> {
    let phys = pair.phys_edges_undirected();
    let comm: BTreeSet<_> = pair.comm_edges().into_iter().collect();
    edge_set_similarity(&phys, &comm)
}

pub fn edge_set_similarity(
    a: &BTreeSet<(usize, usize)>,
    b: &BTreeSet<(usize, usize)>,
) -> Result<f64> {
    let total = a.len() + b.len();
    if total == 0 {
        return Err(Error::EmptyEdgeSets);
    }
    let shared = a.intersection(b).count();
    Ok(2.0 * shared as f64 / total as f64)
}

/// Laplacian of the communication subgraph over one cover set together with
/// the smallest eigenvalue of its grounded form.
#[derive(Debug, Clone)]
pub struct SubgraphSpectrum {
    pub nodes: Vec<usize>,
    pub anchor: usize,
    pub laplacian: DMatrix<f64>,
    pub grounded_min_eig: f64,
}

/// Laplacian `L` of the communication subgraph induced by `nodes` (in the
/// given order).
pub fn sub_laplacian(pair: &NetworkPair, nodes: &[usize]) -> DMatrix<f64> {
    let k = nodes.len();
    let mut lap = DMatrix::zeros(k, k);
    for (r, &u) in nodes.iter().enumerate() {
        for (c, &v) in nodes.iter().enumerate() {
            if r != c && pair.has_comm(u, v) {
                lap[(r, c)] = -1.0;
                lap[(r, r)] += 1.0;
            }
        }
    }
    lap
}

/// Smallest eigenvalue of `L + S`, with `S` grounding `anchor` by one unit.
pub fn grounded_spectrum(
    pair: &NetworkPair,
    nodes: &[usize],
    anchor: usize,
) -> Result<SubgraphSpectrum> {
    let position = nodes.iter().position(|&v| v == anchor).ok_or_else(|| {
        Error::InvalidCover(format!("anchor {} not among the set's nodes", anchor + 1))
    })?;
    if !induced_connected(pair, nodes) {
        return Err(Error::DisconnectedSubgraph {
            nodes: nodes.iter().map(|v| v + 1).collect(),
        });
    }
    let laplacian = sub_laplacian(pair, nodes);
    let mut grounded = laplacian.clone();
    grounded[(position, position)] += 1.0;
    let grounded_min_eig = crate::linalg::min_symmetric_eigenvalue(&grounded);
    if grounded_min_eig <= 0.0 {
        return Err(Error::DisconnectedSubgraph {
            nodes: nodes.iter().map(|v| v + 1).collect(),
        });
    }
    Ok(SubgraphSpectrum {
        nodes: nodes.to_vec(),
        anchor,
        laplacian,
        grounded_min_eig,
    })
}

const GENERATOR_ATTEMPTS: usize = 200;
const SIMILARITY_TOLERANCE: f64 = 0.05;

/// Random connected physical network of the requested mean degree paired
/// with a communication network whose similarity lands within ±0.05 of
/// `target_similarity`. Physical edges are undirected. Deterministic in
/// `seed`.
pub fn gen_random_pair(
    n: usize,
    avg_phys_degree: f64,
    target_similarity: f64,
    seed: u64,
) -> Result<NetworkPair> {
    if n < 2 {
        return Err(Error::Config("random pairs need at least 2 nodes".into()));
    }
    if !(0.0..=1.0).contains(&target_similarity) {
        return Err(Error::Config(format!(
            "target similarity {target_similarity} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_edges = n * (n - 1) / 2;
    let wanted = ((n as f64 * avg_phys_degree) / 2.0).round() as usize;
    let m = wanted.clamp(n - 1, max_edges);

    let phys = random_connected_graph(n, m, &mut rng);
    let phys_list: Vec<_> = phys.iter().copied().collect();
    let phys_pairs: Vec<_> = phys_list.clone();

    let keep = ((target_similarity * m as f64).round() as usize).min(m);
    let mut best: Option<(f64, BTreeSet<(usize, usize)>)> = None;

    for _ in 0..GENERATOR_ATTEMPTS {
        let mut shuffled = phys_list.clone();
        shuffled.shuffle(&mut rng);
        let mut comm: BTreeSet<_> = shuffled[..keep].iter().copied().collect();

        connect_components(n, &mut comm, &phys, &mut rng);
        let free_pairs = max_edges - phys.len();
        let mut guard = 0;
        while comm.len() < m && guard < 50 * max_edges {
            guard += 1;
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let e = (a.min(b), a.max(b));
            if phys.contains(&e) && comm.difference(&phys).count() < free_pairs {
                continue;
            }
            comm.insert(e);
        }

        let s = edge_set_similarity(&phys, &comm)?;
        let err = (s - target_similarity).abs();
        if best.as_ref().is_none_or(|(b, _)| err < (b - target_similarity).abs()) {
            best = Some((s, comm));
        }
        if err <= SIMILARITY_TOLERANCE {
            break;
        }
    }

    let (s, comm) = best.expect("at least one attempt");
    if (s - target_similarity).abs() > SIMILARITY_TOLERANCE {
        return Err(Error::SimilarityNotReached {
            target: target_similarity,
            best: s,
            attempts: GENERATOR_ATTEMPTS,
        });
    }
    let comm_edges: Vec<_> = comm.into_iter().collect();
    NetworkPair::from_undirected(n, &phys_pairs, &comm_edges)
}

fn random_connected_graph(n: usize, m: usize, rng: &mut ChaCha8Rng) -> BTreeSet<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = BTreeSet::new();
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        let child = order[k];
        edges.insert((parent.min(child), parent.max(child)));
    }
    while edges.len() < m {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges
}

/// Joins the components of `edges` with random bridges, preferring pairs that
/// are not physical edges.
fn connect_components(
    n: usize,
    edges: &mut BTreeSet<(usize, usize)>,
    phys: &BTreeSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges.iter() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut index = vec![usize::MAX; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        if index[r] == usize::MAX {
            index[r] = components.len();
            components.push(Vec::new());
        }
        components[index[r]].push(v);
    }
    let mut joined: Vec<usize> = components[0].clone();
    for comp in components.iter().skip(1) {
        let mut chosen = None;
        for _ in 0..32 {
            let a = joined[rng.gen_range(0..joined.len())];
            let b = comp[rng.gen_range(0..comp.len())];
            let e = (a.min(b), a.max(b));
            chosen = Some(e);
            if !phys.contains(&e) {
                break;
            }
        }
        edges.insert(chosen.expect("nonempty components"));
        joined.extend_from_slice(comp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(n: usize) -> NetworkPair {
        let edges: Vec<_> = (0..n - 1).map(|k| (k, k + 1)).collect();
        NetworkPair::from_undirected(n, &edges, &edges).unwrap()
    }

    #[test]
    fn line_path_matches_figure_example() {
        let pair = line(4);
        assert_eq!(pair.shortest_path(0, 3).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn trivial_path() {
        let pair = line(3);
        assert_eq!(pair.shortest_path(1, 1).unwrap(), vec![1]);
    }

    #[test]
    fn five_cycle_path() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)];
        let pair = NetworkPair::from_undirected(5, &edges, &edges).unwrap();
        assert_eq!(pair.shortest_path(0, 2).unwrap(), vec![0, 1, 2]);
        assert_eq!(pair.shortest_path(0, 3).unwrap(), vec![0, 4, 3]);
    }

    #[test]
    fn lexicographic_tie_break() {
        // square 0-1-3, 0-2-3: both 2 hops, take through 1
        let edges = [(0, 2), (0, 1), (1, 3), (2, 3)];
        let pair = NetworkPair::from_undirected(4, &edges, &edges).unwrap();
        assert_eq!(pair.shortest_path(0, 3).unwrap(), vec![0, 1, 3]);
        assert_eq!(pair.shortest_path(3, 0).unwrap(), vec![3, 1, 0]);
    }

    #[test]
    fn rejects_disconnected_communication() {
        let err = NetworkPair::new(3, &[], &[(0, 1)]).unwrap_err();
        assert!(matches!(err, Error::InvalidNetwork(_)));
    }

    #[test]
    fn rejects_self_loops() {
        assert!(NetworkPair::new(2, &[(1, 1)], &[(0, 1)]).is_err());
        assert!(NetworkPair::new(2, &[], &[(0, 0), (0, 1)]).is_err());
    }

    #[test]
    fn directed_physical_edges() {
        // 0 drives 1 only
        let pair = NetworkPair::new(2, &[(0, 1)], &[(0, 1)]).unwrap();
        assert_eq!(pair.physical_neighbors(1), &[0]);
        assert!(pair.physical_neighbors(0).is_empty());
        assert!(pair.has_phys(1, 0));
        assert!(!pair.has_phys(0, 1));
    }

    #[test]
    fn similarity_examples() {
        let star = NetworkPair::star(5).unwrap();
        assert_relative_eq!(similarity(&star).unwrap(), 1.0);

        // E_p = {12, 23}, E_c = {12, 13}
        let pair = NetworkPair::from_undirected(3, &[(0, 1), (1, 2)], &[(0, 1), (0, 2)]).unwrap();
        assert_relative_eq!(similarity(&pair).unwrap(), 0.5);

        // disjoint
        let pair = NetworkPair::from_undirected(3, &[(0, 2)], &[(0, 1), (1, 2)]).unwrap();
        assert_relative_eq!(similarity(&pair).unwrap(), 0.0);

        let single = NetworkPair::new(1, &[], &[]).unwrap();
        assert!(matches!(similarity(&single), Err(Error::EmptyEdgeSets)));
    }

    #[test]
    fn grounded_two_node_closed_form() {
        let pair = line(2);
        let spec = grounded_spectrum(&pair, &[0, 1], 0).unwrap();
        assert_relative_eq!(spec.grounded_min_eig, (3.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-12);
        for r in 0..2 {
            assert_relative_eq!(spec.laplacian.row(r).sum(), 0.0);
        }
    }

    #[test]
    fn grounded_single_node() {
        let pair = line(2);
        let spec = grounded_spectrum(&pair, &[1], 1).unwrap();
        assert_relative_eq!(spec.grounded_min_eig, 1.0);
    }

    #[test]
    fn grounded_triangle_matches_cubic_roots() {
        let edges = [(0, 1), (1, 2), (0, 2)];
        let pair = NetworkPair::from_undirected(3, &edges, &edges).unwrap();
        let spec = grounded_spectrum(&pair, &[0, 1, 2], 1).unwrap();
        // smallest root of det(L + S - λI) by a sign scan plus bisection
        let mut grounded = spec.laplacian.clone();
        grounded[(1, 1)] += 1.0;
        let charpoly = |lam: f64| (&grounded - DMatrix::identity(3, 3) * lam).determinant();
        let mut lo = 0.0;
        while charpoly(lo).signum() == charpoly(lo + 1e-3).signum() {
            lo += 1e-3;
        }
        let mut hi = lo + 1e-3;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if charpoly(mid).signum() == charpoly(lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(spec.grounded_min_eig > 0.0);
        assert_relative_eq!(spec.grounded_min_eig, 0.5 * (lo + hi), epsilon = 1e-12);
    }

    #[test]
    fn grounded_disconnected_is_error() {
        let pair = line(3);
        let err = grounded_spectrum(&pair, &[0, 2], 0).unwrap_err();
        assert!(matches!(err, Error::DisconnectedSubgraph { .. }));
    }

    #[test]
    fn generator_similarity_one_copies_physical() {
        let pair = gen_random_pair(9, 2.0, 1.0, 3).unwrap();
        let phys = pair.phys_edges_undirected();
        let comm: BTreeSet<_> = pair.comm_edges().into_iter().collect();
        assert_eq!(phys, comm);
    }

    #[test]
    fn generator_hits_target_and_is_deterministic() {
        let a = gen_random_pair(47, 3.0, 0.85, 11).unwrap();
        let s = similarity(&a).unwrap();
        assert!((0.80..=0.90).contains(&s), "similarity {s}");
        let b = gen_random_pair(47, 3.0, 0.85, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_file_roundtrip_is_one_based() {
        let pair = NetworkPair::new(3, &[(0, 1), (2, 1)], &[(0, 1), (1, 2)]).unwrap();
        let file = pair.to_file();
        assert_eq!(file.phys_edges, vec![[1, 2], [3, 2]]);
        assert_eq!(file.to_pair().unwrap(), pair);
        let bad = GraphFile {
            n: 2,
            phys_edges: vec![[0, 1]],
            comm_edges: vec![[1, 2]],
        };
        assert!(bad.to_pair().is_err());
    }
}
