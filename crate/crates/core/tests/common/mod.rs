#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use coverobs::coverage::CoverAssignment;
use coverobs::netgraph::NetworkPair;

/// 1-based undirected edges to a pair with identical physical and
/// communication graphs unless `comm` is given.
pub fn pair_from(n: usize, phys: &[(usize, usize)], comm: Option<&[(usize, usize)]>) -> NetworkPair {
    let z = |e: &[(usize, usize)]| e.iter().map(|&(a, b)| (a - 1, b - 1)).collect::<Vec<_>>();
    let p = z(phys);
    let c = comm.map(z).unwrap_or_else(|| p.clone());
    NetworkPair::from_undirected(n, &p, &c).unwrap()
}

/// Two triangles joined by the edge 3–4.
pub fn six_node() -> NetworkPair {
    pair_from(6, &[(1, 2), (1, 3), (2, 3), (3, 4), (4, 5), (4, 6), (5, 6)], None)
}

/// Two 4-node rings joined by 3–5. Communication runs along the lines
/// 1–2–3–4 and 5–6–7–8 plus the bridge, so `Pa(1,4) = {1,2,3,4}`.
pub fn eight_node() -> NetworkPair {
    pair_from(
        8,
        &[(1, 2), (2, 3), (3, 4), (1, 4), (5, 6), (6, 7), (7, 8), (5, 8), (3, 5)],
        Some(&[(1, 2), (2, 3), (3, 4), (5, 6), (6, 7), (7, 8), (3, 5)]),
    )
}

/// The hand-found covers of the two fixtures, 1-based.
pub const SIX_NODE_COVER: &[&[usize]] = &[&[1, 2, 3], &[4, 5, 6], &[3, 4]];
pub const EIGHT_NODE_COVER: &[&[usize]] = &[&[1, 2, 3, 4], &[5, 6, 7, 8], &[3, 5]];

pub fn cover_from(n: usize, sets: &[&[usize]]) -> CoverAssignment {
    CoverAssignment::from_sets(n, sets.iter().map(|s| s.iter().map(|v| v - 1).collect()).collect())
}

/// Σ_i Σ_{sets ∋ i} |set|, computed from the raw sets.
pub fn total_load(sets: &[Vec<usize>]) -> usize {
    sets.iter().map(|s| s.len() * s.len()).sum()
}

pub fn active_sets(cover: &CoverAssignment) -> Vec<Vec<usize>> {
    cover.active_sets().map(|s| s.members.clone()).collect()
}

/// Second implementation of the cover checks, working only from the raw set
/// lists and edge lists: every node is in some set, every physical neighbour
/// lies in the union of the node's sets, and every set is connected in the
/// communication graph restricted to it.
pub fn oracle_valid(pair: &NetworkPair, sets: &[Vec<usize>]) -> bool {
    let n = pair.len();
    let mut unions = vec![BTreeSet::new(); n];
    for s in sets {
        if s.iter().any(|&v| v >= n) {
            return false;
        }
        for &v in s {
            unions[v].extend(s.iter().copied());
        }
    }
    if unions.iter().any(|u| u.is_empty()) {
        return false;
    }
    // (from, to) means `from` is a physical neighbour of `to`.
    if pair.phys_edges().iter().any(|&(from, to)| !unions[to].contains(&from)) {
        return false;
    }
    let comm = pair.comm_edges();
    sets.iter().filter(|s| !s.is_empty()).all(|s| {
        let members: BTreeSet<usize> = s.iter().copied().collect();
        let mut seen = BTreeSet::from([s[0]]);
        let mut queue = VecDeque::from([s[0]]);
        while let Some(v) = queue.pop_front() {
            for &(a, b) in &comm {
                let w = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if members.contains(&w) && seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        seen.len() == members.len()
    })
}
