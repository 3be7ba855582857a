//! Exact planarity testing and Kuratowski certificates.
//!
//! A graph is planar iff each biconnected block is. Blocks are tested by
//! face-by-face path embedding: start from a cycle, repeatedly pick a
//! fragment (chord or component of the unembedded part, with its
//! attachment vertices), and route a path of it through a face containing
//! all its attachments, preferring fragments with a single admissible face.
//! The block is non-planar iff some fragment has no admissible face.

use std::collections::{HashSet, VecDeque};

use crate::graphs::{is_connected, Graph};

/// `m ≤ 3n − 6` for simple planar graphs on at least 3 nodes.
pub fn euler_bound_ok(g: &Graph) -> bool {
    g.n() < 3 || g.edge_count() <= 3 * g.n() - 6
}

pub fn is_planar(g: &Graph) -> bool {
    euler_bound_ok(g) && biconnected_blocks(g).iter().all(|b| block_is_planar(b))
}

/// Planar and connected.
pub fn planar_validity(g: &Graph) -> bool {
    is_connected(g) && is_planar(g)
}

/// Edge sets of the biconnected blocks (Hopcroft–Tarjan).
pub fn biconnected_blocks(g: &Graph) -> Vec<Vec<(usize, usize)>> {
    struct State<'a> {
        g: &'a Graph,
        disc: Vec<usize>,
        low: Vec<usize>,
        time: usize,
        stack: Vec<(usize, usize)>,
        blocks: Vec<Vec<(usize, usize)>>,
    }
    fn dfs(s: &mut State, u: usize, parent: usize) {
        s.time += 1;
        s.disc[u] = s.time;
        s.low[u] = s.time;
        for i in 0..s.g.neighbors(u).len() {
            let v = s.g.neighbors(u)[i];
            if s.disc[v] == 0 {
                s.stack.push((u, v));
                dfs(s, v, u);
                s.low[u] = s.low[u].min(s.low[v]);
                if s.low[v] >= s.disc[u] {
                    let mut block = Vec::new();
                    while let Some(e) = s.stack.pop() {
                        block.push(e);
                        if e == (u, v) {
                            break;
                        }
                    }
                    s.blocks.push(block);
                }
            } else if v != parent && s.disc[v] < s.disc[u] {
                s.stack.push((u, v));
                s.low[u] = s.low[u].min(s.disc[v]);
            }
        }
    }
    let n = g.n();
    let mut s = State {
        g,
        disc: vec![0; n],
        low: vec![0; n],
        time: 0,
        stack: Vec::new(),
        blocks: Vec::new(),
    };
    for u in 0..n {
        if s.disc[u] == 0 {
            dfs(&mut s, u, usize::MAX);
        }
    }
    s.blocks
}

/// Relabels a block's vertices to `0..k`.
fn local_graph(edges: &[(usize, usize)]) -> Graph {
    let mut ids: Vec<usize> = edges.iter().flat_map(|&(u, v)| [u, v]).collect();
    ids.sort_unstable();
    ids.dedup();
    let idx = |x: usize| ids.binary_search(&x).unwrap();
    let local: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (idx(u), idx(v))).collect();
    Graph::from_edges(ids.len(), &local).expect("block edges are valid")
}

fn block_is_planar(edges: &[(usize, usize)]) -> bool {
    // K3,3 has 9 edges and K5 has 10; anything smaller is planar.
    if edges.len() < 9 {
        return true;
    }
    let g = local_graph(edges);
    euler_bound_ok(&g) && embed_biconnected(&g).is_some()
}

fn key(u: usize, v: usize) -> (usize, usize) {
    (u.min(v), u.max(v))
}

/// Some cycle of a biconnected graph with at least 3 nodes: a non-tree
/// edge of a BFS tree closed through the endpoints' lowest common ancestor.
fn find_cycle(g: &Graph) -> Vec<usize> {
    let n = g.n();
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    let (u, v) = g
        .edges()
        .into_iter()
        .find(|&(u, v)| parent[u] != v && parent[v] != u)
        .expect("biconnected graphs with 3+ nodes contain a cycle");
    let to_root = |mut w: usize| {
        let mut path = vec![w];
        while parent[w] != usize::MAX {
            w = parent[w];
            path.push(w);
        }
        path
    };
    let (pu, pv) = (to_root(u), to_root(v));
    let lca = *pu.iter().find(|x| pv.contains(x)).unwrap();
    let mut cyc: Vec<usize> = pu.iter().copied().take_while(|&x| x != lca).collect();
    cyc.push(lca);
    let back: Vec<usize> = pv.iter().copied().take_while(|&x| x != lca).collect();
    cyc.extend(back.into_iter().rev());
    cyc
}

struct Fragment {
    attachments: Vec<usize>,
    /// A path between two distinct attachments through the fragment.
    path: Vec<usize>,
}

fn fragments(g: &Graph, in_h: &[bool], h_edges: &HashSet<(usize, usize)>) -> Vec<Fragment> {
    let n = g.n();
    let mut out = Vec::new();
    for (u, v) in g.edges() {
        if in_h[u] && in_h[v] && !h_edges.contains(&key(u, v)) {
            out.push(Fragment {
                attachments: vec![u, v],
                path: vec![u, v],
            });
        }
    }
    let mut comp = vec![usize::MAX; n];
    for start in 0..n {
        if in_h[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = start;
        let mut members = vec![start];
        comp[start] = id;
        let mut i = 0;
        while i < members.len() {
            let u = members[i];
            i += 1;
            for &v in g.neighbors(u) {
                if !in_h[v] && comp[v] == usize::MAX {
                    comp[v] = id;
                    members.push(v);
                }
            }
        }
        let mut attachments: Vec<usize> = members
            .iter()
            .flat_map(|&u| g.neighbors(u).iter().copied().filter(|&v| in_h[v]))
            .collect();
        attachments.sort_unstable();
        attachments.dedup();
        // Path a → component → b ≠ a by BFS inside the component.
        let a = attachments[0];
        let mut prev = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for &v in g.neighbors(a) {
            if comp[v] == id && prev[v] == usize::MAX {
                prev[v] = a;
                queue.push_back(v);
            }
        }
        let mut path = Vec::new();
        'bfs: while let Some(u) = queue.pop_front() {
            for &v in g.neighbors(u) {
                if in_h[v] && v != a {
                    path.push(v);
                    let mut w = u;
                    while w != a {
                        path.push(w);
                        w = prev[w];
                    }
                    path.push(a);
                    path.reverse();
                    break 'bfs;
                }
                if comp[v] == id && prev[v] == usize::MAX {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        debug_assert!(path.len() >= 3, "biconnected graphs give fragments two attachments");
        out.push(Fragment { attachments, path });
    }
    out
}

/// Faces of a planar embedding of a biconnected graph (as vertex cycles),
/// or `None` if it is not planar.
pub fn embed_biconnected(g: &Graph) -> Option<Vec<Vec<usize>>> {
    let cycle = find_cycle(g);
    let mut in_h = vec![false; g.n()];
    let mut h_edges = HashSet::new();
    for (i, &v) in cycle.iter().enumerate() {
        in_h[v] = true;
        h_edges.insert(key(v, cycle[(i + 1) % cycle.len()]));
    }
    let mut faces = vec![cycle.clone(), cycle];
    while h_edges.len() < g.edge_count() {
        let frags = fragments(g, &in_h, &h_edges);
        let mut choice: Option<(usize, usize)> = None;
        for (fi, f) in frags.iter().enumerate() {
            let admissible: Vec<usize> = (0..faces.len())
                .filter(|&k| f.attachments.iter().all(|a| faces[k].contains(a)))
                .collect();
            match admissible.len() {
                0 => return None,
                1 => {
                    choice = Some((fi, admissible[0]));
                    break;
                }
                _ => {
                    if choice.is_none() {
                        choice = Some((fi, admissible[0]));
                    }
                }
            }
        }
        let (fi, face) = choice.expect("unembedded edges leave a fragment");
        let path = &frags[fi].path;
        let f = faces.swap_remove(face);
        let (a, b) = (path[0], *path.last().unwrap());
        let ia = f.iter().position(|&x| x == a).unwrap();
        let ib = f.iter().position(|&x| x == b).unwrap();
        let walk = |from: usize, to: usize| -> Vec<usize> {
            let mut seq = vec![f[from]];
            let mut i = from;
            while i != to {
                i = (i + 1) % f.len();
                seq.push(f[i]);
            }
            seq
        };
        let inner = &path[1..path.len() - 1];
        let mut one = walk(ia, ib);
        one.extend(inner.iter().rev());
        let mut two = walk(ib, ia);
        two.extend(inner.iter());
        faces.push(one);
        faces.push(two);
        for &v in path {
            in_h[v] = true;
        }
        for w in path.windows(2) {
            h_edges.insert(key(w[0], w[1]));
        }
    }
    Some(faces)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KuratowskiKind {
    K5,
    K33,
}

/// A subdivision of K5 or K3,3 contained in the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Kuratowski {
    pub kind: KuratowskiKind,
    /// Branch vertices (degree ≥ 3 in the subdivision).
    pub branch: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

/// Certificate of non-planarity, or `None` for planar graphs. Edges are
/// removed greedily while the remainder stays non-planar; the edge-minimal
/// non-planar subgraph left is a Kuratowski subdivision, which is verified
/// before returning.
pub fn kuratowski_subgraph(g: &Graph) -> Option<Kuratowski> {
    if is_planar(g) {
        return None;
    }
    let mut h = g.clone();
    for (u, v) in g.edges() {
        h.remove_edge(u, v);
        if is_planar(&h) {
            h.add_edge(u, v);
        }
    }
    let cert = classify_subdivision(&h);
    assert!(cert.is_some(), "edge-minimal non-planar graph must be a Kuratowski subdivision");
    cert
}

/// Recognises `h` (ignoring isolated vertices) as a subdivision of K5 or
/// K3,3 by contracting its degree-2 paths.
pub fn classify_subdivision(h: &Graph) -> Option<Kuratowski> {
    let branch: Vec<usize> = (0..h.n()).filter(|&v| h.degree(v) >= 3).collect();
    if (0..h.n()).any(|v| h.degree(v) == 1) {
        return None;
    }
    let is_branch = |v: usize| h.degree(v) >= 3;
    let mut links: Vec<(usize, usize)> = Vec::new();
    let mut seen_edges = HashSet::new();
    for &b in &branch {
        for &first in h.neighbors(b) {
            if seen_edges.contains(&key(b, first)) {
                continue;
            }
            let (mut prev, mut cur) = (b, first);
            seen_edges.insert(key(prev, cur));
            while !is_branch(cur) {
                let next = *h.neighbors(cur).iter().find(|&&x| x != prev)?;
                prev = cur;
                cur = next;
                seen_edges.insert(key(prev, cur));
            }
            if cur == b {
                return None;
            }
            links.push(key(b, cur));
        }
    }
    // Every edge must lie on a branch-to-branch path.
    if seen_edges.len() != h.edge_count() {
        return None;
    }
    let mut dedup = links.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != links.len() {
        return None;
    }
    let kind = match branch.len() {
        5 if links.len() == 10 => KuratowskiKind::K5,
        6 if links.len() == 9 => {
            // Bipartite with sides of three: 2-colour the link graph.
            let mut side = [usize::MAX; 6];
            let pos = |v: usize| branch.iter().position(|&x| x == v).unwrap();
            side[0] = 0;
            for _ in 0..6 {
                for &(u, v) in &links {
                    let (pu, pv) = (pos(u), pos(v));
                    if side[pu] != usize::MAX && side[pv] == usize::MAX {
                        side[pv] = 1 - side[pu];
                    } else if side[pv] != usize::MAX && side[pu] == usize::MAX {
                        side[pu] = 1 - side[pv];
                    }
                }
            }
            let bipartite = links.iter().all(|&(u, v)| side[pos(u)] != side[pos(v)]);
            if !bipartite || side.iter().filter(|&&s| s == 0).count() != 3 {
                return None;
            }
            KuratowskiKind::K33
        }
        _ => return None,
    };
    Some(Kuratowski {
        kind,
        branch,
        edges: h.edges(),
    })
}
