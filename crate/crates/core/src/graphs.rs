//! Undirected simple graphs, normalized-Laplacian spectra and the classical
//! node statistics used for conditioning and evaluation.

use std::collections::{HashMap, VecDeque};

use ndarray::{s, Array1, ArrayView2};

use crate::linalg::{self, Matrix};
use crate::{Error, Result};

/// Undirected simple graph stored both as a dense adjacency bitmap and as
/// neighbor lists.
#[derive(Clone)]
pub struct Graph {
    n: usize,
    adj: Vec<bool>,
    nbrs: Vec<Vec<usize>>,
}

/// Labeled equality: same node count and edge set.
impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.adj == other.adj
    }
}

impl Eq for Graph {}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Graph(n={}, m={})", self.n, self.edge_count())
    }
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Graph {
            n,
            adj: vec![false; n * n],
            nbrs: vec![Vec::new(); n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Graph::empty(n);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u}, {v}) out of range for n = {n}")));
            }
            if u == v {
                return Err(Error::invalid(format!("self loop at {u}")));
            }
            g.add_edge(u, v);
        }
        Ok(g)
    }

    /// Graph whose edges are the off-diagonal entries `> threshold` of the
    /// upper triangle of `a`.
    pub fn from_dense(a: ArrayView2<f64>, threshold: f64) -> Result<Self> {
        let (n, c) = a.dim();
        if n != c {
            return Err(Error::invalid(format!("adjacency must be square, got {n}x{c}")));
        }
        let mut g = Graph::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                if a[[i, j]] > threshold {
                    g.add_edge(i, j);
                }
            }
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                g.add_edge(i, j);
            }
        }
        g
    }

    pub fn cycle(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 0..n {
            g.add_edge(i, (i + 1) % n);
        }
        g
    }

    pub fn path(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 1..n {
            g.add_edge(i - 1, i);
        }
        g
    }

    /// Star with one center (node 0) and `leaves` leaves.
    pub fn star(leaves: usize) -> Self {
        let mut g = Graph::empty(leaves + 1);
        for i in 1..=leaves {
            g.add_edge(0, i);
        }
        g
    }

    pub fn complete_bipartite(a: usize, b: usize) -> Self {
        let mut g = Graph::empty(a + b);
        for i in 0..a {
            for j in a..a + b {
                g.add_edge(i, j);
            }
        }
        g
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u * self.n + v]
    }

    /// Adds the edge if absent; self loops are ignored.
    pub fn add_edge(&mut self, u: usize, v: usize) {
        if u == v || self.has_edge(u, v) {
            return;
        }
        self.adj[u * self.n + v] = true;
        self.adj[v * self.n + u] = true;
        self.nbrs[u].push(v);
        self.nbrs[v].push(u);
    }

    pub fn remove_edge(&mut self, u: usize, v: usize) {
        if !self.has_edge(u, v) {
            return;
        }
        self.adj[u * self.n + v] = false;
        self.adj[v * self.n + u] = false;
        self.nbrs[u].retain(|&x| x != v);
        self.nbrs[v].retain(|&x| x != u);
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.nbrs[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.nbrs[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.nbrs.iter().map(Vec::len).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.nbrs.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges `(u, v)` with `u < v`, sorted lexicographically.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for u in 0..self.n {
            for v in u + 1..self.n {
                if self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn adjacency(&self) -> Matrix {
        Matrix::from_shape_fn((self.n, self.n), |(i, j)| self.has_edge(i, j) as u8 as f64)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n {
            return Err(Error::invalid("permutation length differs from node count"));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(u, v)| (perm[u], perm[v])).collect();
        Graph::from_edges(self.n, &edges)
    }

    /// Induced subgraph on `nodes` (relabelled 0..len in the given order).
    pub fn induced(&self, nodes: &[usize]) -> Graph {
        let mut g = Graph::empty(nodes.len());
        for (a, &u) in nodes.iter().enumerate() {
            for (b, &v) in nodes.iter().enumerate().skip(a + 1) {
                if self.has_edge(u, v) {
                    g.add_edge(a, b);
                }
            }
        }
        g
    }

    /// Complement graph on the same node set.
    pub fn complement(&self) -> Graph {
        let mut g = Graph::empty(self.n);
        for i in 0..self.n {
            for j in i + 1..self.n {
                if !self.has_edge(i, j) {
                    g.add_edge(i, j);
                }
            }
        }
        g
    }

    /// Largest connected component (ties: the one containing the smallest
    /// node index), relabelled in increasing node order.
    pub fn largest_component(&self) -> Graph {
        let labels = component_labels(self);
        let count = labels.iter().copied().max().map_or(0, |m| m + 1);
        if count <= 1 {
            return self.clone();
        }
        let mut sizes = vec![0usize; count];
        for &l in &labels {
            sizes[l] += 1;
        }
        let best = (0..count).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        let nodes: Vec<usize> = (0..self.n).filter(|&v| labels[v] == best).collect();
        self.induced(&nodes)
    }
}

/// `D^{-1/2} (D − A) D^{-1/2}`, which equals `I − D^{-1/2} A D^{-1/2}` on
/// nodes with edges. Isolated nodes get an all-zero row and column, so the
/// multiplicity of eigenvalue 0 equals the number of connected components.
pub fn normalized_laplacian(g: &Graph) -> Matrix {
    let n = g.n();
    let inv_sqrt: Vec<f64> = g
        .degrees()
        .into_iter()
        .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut l = Matrix::zeros((n, n));
    for u in 0..n {
        if g.degree(u) > 0 {
            l[[u, u]] = 1.0;
        }
        for &v in g.neighbors(u) {
            l[[u, v]] = -inv_sqrt[u] * inv_sqrt[v];
        }
    }
    l
}

/// Smallest non-trivial eigenpairs of the normalized Laplacian.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Ascending, length `k`.
    pub eigenvalues: Array1<f64>,
    /// `n × k`, orthonormal columns matching `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl Spectrum {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// `U diag(λ) Uᵀ`.
    pub fn rough_laplacian(&self) -> Matrix {
        let scaled = &self.eigenvectors * &self.eigenvalues;
        scaled.dot(&self.eigenvectors.t())
    }
}

/// Gap below which neighbouring eigenvalues are treated as one cluster.
const DEGENERATE_GAP: f64 = 1e-8;

/// Eigenpairs 2..=k+1 of the normalized Laplacian of a connected graph.
/// Column signs follow [`crate::manifold::canonical_signs`]; inside a
/// numerically degenerate cluster columns are additionally ordered
/// lexicographically so the result does not depend on solver internals.
pub fn top_k_spectrum(g: &Graph, k: usize) -> Result<Spectrum> {
    let n = g.n();
    if k >= n {
        return Err(Error::invalid(format!("k = {k} must be smaller than n = {n}")));
    }
    let comps = connected_components(g);
    if comps != 1 {
        return Err(Error::DisconnectedGraph { components: comps });
    }
    let (w, v) = linalg::sym_eig(normalized_laplacian(g).view())?;
    let mut vals = w.slice(s![1..=k]).to_owned();
    let mut vecs = v.slice(s![.., 1..=k]).to_owned();
    crate::manifold::canonical_signs(&mut vecs);
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < k && vals[end] - vals[end - 1] < DEGENERATE_GAP {
            end += 1;
        }
        if end - start > 1 {
            let mut cols: Vec<usize> = (start..end).collect();
            cols.sort_by(|&a, &b| crate::manifold::lex_cmp(vecs.column(a), vecs.column(b)));
            let block = vecs.slice(s![.., start..end]).to_owned();
            let block_vals = vals.slice(s![start..end]).to_owned();
            for (dst, &src) in cols.iter().enumerate() {
                vecs.column_mut(start + dst).assign(&block.column(src - start));
                vals[start + dst] = block_vals[src - start];
            }
        }
        start = end;
    }
    Ok(Spectrum {
        eigenvalues: vals,
        eigenvectors: vecs,
    })
}

/// Component index of every node, numbered in order of first appearance.
pub fn component_labels(g: &Graph) -> Vec<usize> {
    let n = g.n();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in g.neighbors(u) {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

pub fn connected_components(g: &Graph) -> usize {
    component_labels(g).into_iter().max().map_or(0, |m| m + 1)
}

pub fn is_connected(g: &Graph) -> bool {
    g.n() > 0 && connected_components(g) == 1
}

fn bfs_distances(g: &Graph, s: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.n()];
    dist[s] = 0;
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Largest shortest-path distance.
pub fn diameter(g: &Graph) -> Result<usize> {
    let comps = connected_components(g);
    if comps != 1 {
        return Err(Error::DisconnectedGraph { components: comps });
    }
    Ok((0..g.n())
        .map(|s| bfs_distances(g, s).into_iter().max().unwrap_or(0))
        .max()
        .unwrap_or(0))
}

/// `hist[d]` = number of nodes of degree `d`, length `max degree + 1`.
pub fn degree_histogram(g: &Graph) -> Vec<usize> {
    let degs = g.degrees();
    let mut hist = vec![0; degs.iter().copied().max().map_or(1, |m| m + 1)];
    for d in degs {
        hist[d] += 1;
    }
    hist
}

pub fn triangles_at(g: &Graph, v: usize) -> usize {
    let nb = g.neighbors(v);
    let mut t = 0;
    for (i, &a) in nb.iter().enumerate() {
        for &b in &nb[i + 1..] {
            if g.has_edge(a, b) {
                t += 1;
            }
        }
    }
    t
}

/// Local clustering coefficient; 0 for nodes of degree below 2.
pub fn clustering_coefficients(g: &Graph) -> Vec<f64> {
    (0..g.n())
        .map(|v| {
            let d = g.degree(v);
            if d < 2 {
                0.0
            } else {
                2.0 * triangles_at(g, v) as f64 / (d * (d - 1)) as f64
            }
        })
        .collect()
}

pub const ORBITS: usize = 15;

/// Orbit of each node inside a connected induced subgraph on 2..=4 nodes,
/// identified by the subgraph's edge count and the node's internal degree.
fn orbit_of(size: usize, edges: usize, deg: usize, degs: &[usize]) -> usize {
    match (size, edges) {
        (2, 1) => 0,
        (3, 2) => if deg == 2 { 2 } else { 1 },
        (3, 3) => 3,
        (4, 3) => {
            if degs.contains(&3) {
                if deg == 3 { 7 } else { 6 }
            } else if deg == 1 {
                4
            } else {
                5
            }
        }
        (4, 4) => {
            if degs.contains(&3) {
                match deg {
                    1 => 9,
                    2 => 10,
                    _ => 11,
                }
            } else {
                8
            }
        }
        (4, 5) => if deg == 2 { 12 } else { 13 },
        (4, 6) => 14,
        _ => unreachable!("disconnected subgraph {size} nodes {edges} edges"),
    }
}

fn record_subgraph(g: &Graph, nodes: &[usize], counts: &mut [[u64; ORBITS]]) {
    let size = nodes.len();
    let mut degs = [0usize; 4];
    let mut edges = 0;
    for a in 0..size {
        for b in a + 1..size {
            if g.has_edge(nodes[a], nodes[b]) {
                degs[a] += 1;
                degs[b] += 1;
                edges += 1;
            }
        }
    }
    for a in 0..size {
        counts[nodes[a]][orbit_of(size, edges, degs[a], &degs[..size])] += 1;
    }
}

/// Per-node counts of the 15 automorphism orbits of connected graphlets on
/// 2 to 4 nodes (orbit 0 is the degree). Connected subsets are enumerated
/// once each by exclusive-neighbourhood extension, so the cost scales with
/// the number of connected 4-node subgraphs rather than `n⁴`.
pub fn orbit_counts(g: &Graph) -> Vec<[u64; ORBITS]> {
    let n = g.n();
    let mut counts = vec![[0u64; ORBITS]; n];
    for v in 0..n {
        counts[v][0] = g.degree(v) as u64;
    }
    let mut sub = Vec::with_capacity(4);
    for v in 0..n {
        sub.clear();
        sub.push(v);
        let ext: Vec<usize> = g.neighbors(v).iter().copied().filter(|&u| u > v).collect();
        extend_subgraph(g, &mut sub, ext, v, &mut counts);
    }
    counts
}

fn extend_subgraph(
    g: &Graph,
    sub: &mut Vec<usize>,
    mut ext: Vec<usize>,
    root: usize,
    counts: &mut [[u64; ORBITS]],
) {
    if sub.len() >= 3 {
        record_subgraph(g, sub, counts);
    }
    if sub.len() == 4 {
        return;
    }
    while let Some(w) = ext.pop() {
        let mut next = ext.clone();
        for &u in g.neighbors(w) {
            if u > root
                && !sub.contains(&u)
                && u != w
                && !sub.iter().any(|&s| g.has_edge(s, u))
                && !next.contains(&u)
            {
                next.push(u);
            }
        }
        sub.push(w);
        extend_subgraph(g, sub, next, root, counts);
        sub.pop();
    }
}

/// Outcome of an isomorphism test with a bounded search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Isomorphism {
    Isomorphic,
    NotIsomorphic,
    /// The node-expansion budget ran out before a decision.
    Undecided,
}

pub const DEFAULT_ISO_BUDGET: usize = 200_000;

/// Colour refinement run jointly on both graphs so colours are comparable.
fn refine_colors(g1: &Graph, g2: &Graph) -> (Vec<u64>, Vec<u64>) {
    use std::hash::{Hash, Hasher};
    let hash = |x: &dyn Fn(&mut std::collections::hash_map::DefaultHasher)| {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        x(&mut h);
        h.finish()
    };
    let mut c1: Vec<u64> = g1.degrees().into_iter().map(|d| d as u64).collect();
    let mut c2: Vec<u64> = g2.degrees().into_iter().map(|d| d as u64).collect();
    let classes = |a: &[u64], b: &[u64]| {
        let mut all: Vec<u64> = a.iter().chain(b).copied().collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    };
    let mut count = classes(&c1, &c2);
    for _ in 0..g1.n().max(1) {
        let step = |g: &Graph, c: &[u64]| -> Vec<u64> {
            (0..g.n())
                .map(|v| {
                    let mut nc: Vec<u64> = g.neighbors(v).iter().map(|&u| c[u]).collect();
                    nc.sort_unstable();
                    hash(&|h| {
                        c[v].hash(h);
                        nc.hash(h);
                    })
                })
                .collect()
        };
        let n1 = step(g1, &c1);
        let n2 = step(g2, &c2);
        let next = classes(&n1, &n2);
        c1 = n1;
        c2 = n2;
        if next == count {
            break;
        }
        count = next;
    }
    (c1, c2)
}

/// Exact isomorphism test: invariant screening, joint colour refinement,
/// then backtracking over colour-compatible candidates with full adjacency
/// consistency checks. Stops with [`Isomorphism::Undecided`] after `budget`
/// node expansions.
pub fn isomorphism(g1: &Graph, g2: &Graph, budget: usize) -> Isomorphism {
    let n = g1.n();
    if n != g2.n() || g1.edge_count() != g2.edge_count() {
        return Isomorphism::NotIsomorphic;
    }
    let mut d1 = g1.degrees();
    let mut d2 = g2.degrees();
    d1.sort_unstable();
    d2.sort_unstable();
    if d1 != d2 {
        return Isomorphism::NotIsomorphic;
    }
    let (c1, c2) = refine_colors(g1, g2);
    let mut h1 = c1.clone();
    let mut h2 = c2.clone();
    h1.sort_unstable();
    h2.sort_unstable();
    if h1 != h2 {
        return Isomorphism::NotIsomorphic;
    }
    if n == 0 {
        return Isomorphism::Isomorphic;
    }

    // Match rare colours first, then grow along edges.
    let mut freq: HashMap<u64, usize> = HashMap::new();
    for &c in &c1 {
        *freq.entry(c).or_default() += 1;
    }
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    while order.len() < n {
        let start = (0..n)
            .filter(|&v| !placed[v])
            .min_by_key(|&v| (freq[&c1[v]], std::cmp::Reverse(g1.degree(v)), v))
            .unwrap();
        placed[start] = true;
        order.push(start);
        let mut frontier = order.len() - 1;
        while frontier < order.len() {
            let u = order[frontier];
            frontier += 1;
            let mut nb: Vec<usize> = g1.neighbors(u).iter().copied().filter(|&v| !placed[v]).collect();
            nb.sort_by_key(|&v| (freq[&c1[v]], std::cmp::Reverse(g1.degree(v)), v));
            for v in nb {
                if !placed[v] {
                    placed[v] = true;
                    order.push(v);
                }
            }
        }
    }

    struct Search<'a> {
        g1: &'a Graph,
        g2: &'a Graph,
        c1: &'a [u64],
        c2: &'a [u64],
        order: &'a [usize],
        map: Vec<usize>,
        used: Vec<bool>,
        expansions: usize,
        budget: usize,
    }
    impl Search<'_> {
        fn feasible(&self, depth: usize, u: usize, v: usize) -> bool {
            if self.used[v] || self.c1[u] != self.c2[v] {
                return false;
            }
            self.order[..depth]
                .iter()
                .all(|&w| self.g1.has_edge(u, w) == self.g2.has_edge(v, self.map[w]))
        }

        fn run(&mut self, depth: usize) -> Option<bool> {
            if depth == self.order.len() {
                return Some(true);
            }
            self.expansions += 1;
            if self.expansions > self.budget {
                return None;
            }
            let u = self.order[depth];
            // Candidates: neighbours of an already-mapped neighbour's image when possible.
            let anchor = self.g1.neighbors(u).iter().find(|&&w| self.map[w] != usize::MAX).copied();
            let candidates: Vec<usize> = match anchor {
                Some(w) => self.g2.neighbors(self.map[w]).to_vec(),
                None => (0..self.g2.n()).collect(),
            };
            for v in candidates {
                if !self.feasible(depth, u, v) {
                    continue;
                }
                self.map[u] = v;
                self.used[v] = true;
                let r = self.run(depth + 1);
                self.map[u] = usize::MAX;
                self.used[v] = false;
                match r {
                    Some(true) => return Some(true),
                    None => return None,
                    Some(false) => {}
                }
            }
            Some(false)
        }
    }

    let mut search = Search {
        g1,
        g2,
        c1: &c1,
        c2: &c2,
        order: &order,
        map: vec![usize::MAX; n],
        used: vec![false; n],
        expansions: 0,
        budget,
    };
    match search.run(0) {
        Some(true) => Isomorphism::Isomorphic,
        Some(false) => Isomorphism::NotIsomorphic,
        None => Isomorphism::Undecided,
    }
}

/// Isomorphism with the default budget; an undecided search counts as
/// isomorphic.
pub fn are_isomorphic(g1: &Graph, g2: &Graph) -> bool {
    isomorphism(g1, g2, DEFAULT_ISO_BUDGET) != Isomorphism::NotIsomorphic
}
