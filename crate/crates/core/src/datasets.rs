//! Synthetic corpora (Delaunay planar graphs, stochastic block models,
//! two-community graphs), the on-disk corpus format and seeded splits.
//!
//! On disk a corpus is a directory holding `manifest.toml` and one text file
//! per graph:
//!
//! ```text
//! n 5
//! 0 1
//! 0 4
//! 1 2
//! ```
//!
//! ASCII, `\n` terminated, 0-indexed nodes, each edge once with `u < v`,
//! sorted lexicographically.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphs::{is_connected, Graph};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

/// Stream labels; one per generator so corpora never share randomness.
const PLANAR: u64 = 0x91a4;
const SBM: u64 = 0x5b3;
const COMMUNITY: u64 = 0xc011;
const SPLIT: u64 = 0x5b11;

/// Draws that fail a generator's post-condition are redrawn; this bounds
/// the attempts per graph.
const MAX_ATTEMPTS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusParams {
    Planar(PlanarParams),
    Sbm(SbmParams),
    CommunitySmall(CommunitySmallParams),
    /// Graphs ingested from files.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanarParams {
    pub count: usize,
    pub n: usize,
}

impl Default for PlanarParams {
    fn default() -> Self {
        PlanarParams { count: 200, n: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbmParams {
    pub count: usize,
    /// Inclusive range of the block count.
    pub blocks: (usize, usize),
    /// Inclusive range of each block size.
    pub block_size: (usize, usize),
    pub p_within: f64,
    pub p_between: f64,
}

impl Default for SbmParams {
    fn default() -> Self {
        SbmParams {
            count: 200,
            blocks: (2, 5),
            block_size: (20, 40),
            p_within: 0.3,
            p_between: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommunitySmallParams {
    pub count: usize,
    /// Inclusive range of the node count.
    pub n: (usize, usize),
    pub p_within: f64,
    pub p_between: f64,
}

impl Default for CommunitySmallParams {
    fn default() -> Self {
        CommunitySmallParams {
            count: 100,
            n: (12, 20),
            p_within: 0.7,
            p_between: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphCorpus {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub splits: Vec<Split>,
    pub seed: u64,
    pub params: CorpusParams,
}

impl GraphCorpus {
    /// Wraps graphs and assigns a seeded split.
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>, seed: u64, params: CorpusParams) -> Self {
        let mut corpus = GraphCorpus {
            name: name.into(),
            splits: vec![Split::Train; graphs.len()],
            graphs,
            seed,
            params,
        };
        split(&mut corpus, seed);
        corpus
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn subset(&self, which: Split) -> Vec<Graph> {
        self.graphs
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(g, _)| g.clone())
            .collect()
    }
}

/// Seeded shuffle: 20% test, then 20% of the remaining training graphs
/// tagged validation.
pub fn split(corpus: &mut GraphCorpus, seed: u64) {
    let n = corpus.graphs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SPLIT]));
    let test = (n as f64 * 0.2).round() as usize;
    let val = ((n - test) as f64 * 0.2).round() as usize;
    corpus.splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < test {
            corpus.splits[i] = Split::Test;
        } else if rank < test + val {
            corpus.splits[i] = Split::Val;
        }
    }
}

fn generate(count: usize, seed: u64, tag: u64, draw: impl Fn(&mut Rng) -> Option<Graph> + Sync) -> Result<Vec<Graph>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..MAX_ATTEMPTS {
                if let Some(g) = draw(&mut rng::stream(seed, &[tag, i, attempt])) {
                    return Ok(g);
                }
            }
            Err(Error::NumericalFailure(format!(
                "graph {i} still invalid after {MAX_ATTEMPTS} draws"
            )))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// planar

pub fn gen_planar(params: &PlanarParams, seed: u64) -> Result<GraphCorpus> {
    if params.n < 3 {
        return Err(Error::invalid(format!("planar graphs need n >= 3, got {}", params.n)));
    }
    let n = params.n;
    let graphs = generate(params.count, seed, PLANAR, |rng| {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        delaunay(&pts).map(|tris| triangulation_graph(n, &tris))
    })?;
    Ok(GraphCorpus::new("planar", graphs, seed, CorpusParams::Planar(params.clone())))
}

fn coord(p: (f64, f64)) -> robust::Coord<f64> {
    robust::Coord { x: p.0, y: p.1 }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    robust::orient2d(coord(a), coord(b), coord(c))
}

/// Positive when `d` is strictly inside the circumcircle of the
/// counter-clockwise triangle `abc`.
fn in_circle(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> f64 {
    robust::incircle(coord(a), coord(b), coord(c), coord(d))
}

/// Bowyer–Watson triangulation of points in the unit square, returned as
/// counter-clockwise index triples.
///
/// Returns `None` for degenerate inputs (duplicate, collinear hull or
/// cocircular points) and whenever the result is not a full triangulation
/// of the convex hull, which is how the finite enclosing triangle would
/// show up. Callers redraw the points.
pub fn delaunay(points: &[(f64, f64)]) -> Option<Vec<[usize; 3]>> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let mut pts = points.to_vec();
    let m = 1e4;
    pts.extend([(0.5 - 2.0 * m, -m), (0.5 + 2.0 * m, -m), (0.5, 2.0 * m)]);
    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    for p in 0..n {
        let mut bad = Vec::new();
        let mut keep = Vec::with_capacity(tris.len());
        for t in tris {
            let s = in_circle(pts[t[0]], pts[t[1]], pts[t[2]], pts[p]);
            if s == 0.0 {
                return None;
            }
            if s > 0.0 {
                bad.push(t);
            } else {
                keep.push(t);
            }
        }
        // Cavity boundary: directed edges of bad triangles whose reverse is
        // not also an edge of a bad triangle.
        let edges: Vec<(usize, usize)> = bad
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .collect();
        for &(u, v) in &edges {
            if edges.contains(&(v, u)) {
                continue;
            }
            if orient(pts[u], pts[v], pts[p]) <= 0.0 {
                return None;
            }
            keep.push([u, v, p]);
        }
        tris = keep;
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    let hull = convex_hull(points)?;
    (tris.len() == 2 * n - 2 - hull.len()).then_some(tris)
}

/// Strict convex hull (no collinear points) by the monotone chain.
/// `None` if the points are all collinear.
pub fn convex_hull(points: &[(f64, f64)]) -> Option<Vec<usize>> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).expect("finite points"));
    let mut hull: Vec<usize> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let seq: Box<dyn Iterator<Item = &usize>> = if pass == 0 { Box::new(idx.iter()) } else { Box::new(idx.iter().rev()) };
        for &i in seq {
            while hull.len() >= start + 2
                && orient(points[hull[hull.len() - 2]], points[hull[hull.len() - 1]], points[i]) <= 0.0
            {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    (hull.len() >= 3).then_some(hull)
}

fn triangulation_graph(n: usize, tris: &[[usize; 3]]) -> Graph {
    let mut g = Graph::empty(n);
    for t in tris {
        for (u, v) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            if !g.has_edge(u, v) {
                g.add_edge(u, v);
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// block models

/// Block model with contiguous blocks of the given sizes.
pub fn sbm_graph(sizes: &[usize], p_within: f64, p_between: f64, rng: &mut Rng) -> Graph {
    let block: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
    let n = block.len();
    let mut g = Graph::empty(n);
    for u in 0..n {
        for v in u + 1..n {
            let p = if block[u] == block[v] { p_within } else { p_between };
            if rng.random::<f64>() < p {
                g.add_edge(u, v);
            }
        }
    }
    g
}

fn check_range(what: &str, (lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!("{what} range ({lo}, {hi}) invalid")));
    }
    Ok(())
}

fn check_prob(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{what} = {p} is not a probability")));
    }
    Ok(())
}

/// Block sizes drawn for one SBM graph.
pub fn sbm_sizes(params: &SbmParams, rng: &mut Rng) -> Vec<usize> {
    let c = rng.random_range(params.blocks.0..=params.blocks.1);
    (0..c).map(|_| rng.random_range(params.block_size.0..=params.block_size.1)).collect()
}

pub fn gen_sbm(params: &SbmParams, seed: u64) -> Result<GraphCorpus> {
    check_range("block count", params.blocks)?;
    check_range("block size", params.block_size)?;
    check_prob("p_within", params.p_within)?;
    check_prob("p_between", params.p_between)?;
    let graphs = generate(params.count, seed, SBM, |rng| {
        let sizes = sbm_sizes(params, rng);
        let g = sbm_graph(&sizes, params.p_within, params.p_between, rng);
        is_connected(&g).then_some(g)
    })?;
    Ok(GraphCorpus::new("sbm", graphs, seed, CorpusParams::Sbm(params.clone())))
}

/// Two near-equal communities (`⌊n/2⌋` and `⌈n/2⌉` nodes, the first block
/// first), each an Erdős–Rényi graph; cross pairs are linked with
/// `p_between` and one random cross edge is forced if none was drawn.
pub fn community_graph(n: usize, p_within: f64, p_between: f64, rng: &mut Rng) -> Graph {
    let half = n / 2;
    let mut g = sbm_graph(&[half, n - half], p_within, p_between, rng);
    let crosses = (0..half).any(|u| g.neighbors(u).iter().any(|&v| v >= half));
    if !crosses {
        let u = rng.random_range(0..half);
        let v = rng.random_range(half..n);
        g.add_edge(u, v);
    }
    g
}

pub fn gen_community_small(params: &CommunitySmallParams, seed: u64) -> Result<GraphCorpus> {
    check_range("node count", params.n)?;
    if params.n.0 < 2 {
        return Err(Error::invalid("two communities need at least 2 nodes"));
    }
    check_prob("p_within", params.p_within)?;
    check_prob("p_between", params.p_between)?;
    let graphs = generate(params.count, seed, COMMUNITY, |rng| {
        let n = rng.random_range(params.n.0..=params.n.1);
        let g = community_graph(n, params.p_within, params.p_between, rng);
        is_connected(&g).then_some(g)
    })?;
    Ok(GraphCorpus::new(
        "community_small",
        graphs,
        seed,
        CorpusParams::CommunitySmall(params.clone()),
    ))
}

/// Generates the synthetic corpus described by `params`.
pub fn generate_corpus(params: &CorpusParams, seed: u64) -> Result<GraphCorpus> {
    match params {
        CorpusParams::Planar(p) => gen_planar(p, seed),
        CorpusParams::Sbm(p) => gen_sbm(p, seed),
        CorpusParams::CommunitySmall(p) => gen_community_small(p, seed),
        CorpusParams::External => Err(Error::invalid("external corpora are ingested from files, not generated")),
    }
}

// ---------------------------------------------------------------------------
// files

pub fn format_graph(g: &Graph) -> String {
    let mut edges = g.edges();
    edges.sort_unstable();
    let mut s = format!("n {}\n", g.n());
    for (u, v) in edges {
        writeln!(s, "{u} {v}").unwrap();
    }
    s
}

/// Parses one graph file; `context` names it in errors, records are 1-based
/// line numbers.
pub fn parse_graph(text: &str, context: &str) -> Result<Graph> {
    let err = |record: usize, message: String| Error::Parse {
        context: context.to_string(),
        record,
        message,
    };
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(err(text.lines().count(), "last line is not terminated".into()));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing `n <count>` header".into()))?;
    let n: usize = header
        .strip_prefix("n ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| err(1, format!("expected `n <count>`, found {header:?}")))?;
    let mut g = Graph::empty(n);
    let mut last: Option<(usize, usize)> = None;
    for (line, l) in lines {
        let mut parts = l.split(' ');
        let (Some(u), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(line, format!("expected `u v`, found {l:?}")));
        };
        let (Ok(u), Ok(v)) = (u.parse::<usize>(), v.parse::<usize>()) else {
            return Err(err(line, format!("non-integer endpoint in {l:?}")));
        };
        if u >= v || v >= n {
            return Err(err(line, format!("edge ({u}, {v}) needs u < v < {n}")));
        }
        if last.is_some_and(|p| p >= (u, v)) {
            return Err(err(line, format!("edge ({u}, {v}) out of order or repeated")));
        }
        last = Some((u, v));
        g.add_edge(u, v);
    }
    Ok(g)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    seed: u64,
    params: CorpusParams,
    graphs: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    split: Split,
    nodes: usize,
    edges: usize,
}

pub fn save_corpus(corpus: &GraphCorpus, dir: &Path) -> Result<()> {
    let graph_dir = dir.join("graphs");
    std::fs::create_dir_all(&graph_dir).map_err(|e| Error::io(&graph_dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, (g, &split)) in corpus.graphs.iter().zip(&corpus.splits).enumerate() {
        let file = format!("graphs/{i:06}.txt");
        let path = dir.join(&file);
        std::fs::write(&path, format_graph(g)).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            file,
            split,
            nodes: g.n(),
            edges: g.edge_count(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        name: corpus.name.clone(),
        seed: corpus.seed,
        params: corpus.params.clone(),
        graphs: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<GraphCorpus> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        record: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Parse {
            context: path.display().to_string(),
            record: 1,
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut graphs = Vec::with_capacity(manifest.graphs.len());
    let mut splits = Vec::with_capacity(manifest.graphs.len());
    for (i, entry) in manifest.graphs.iter().enumerate() {
        let gpath = dir.join(&entry.file);
        let text = std::fs::read_to_string(&gpath).map_err(|e| Error::io(&gpath, e))?;
        let context = gpath.display().to_string();
        let g = parse_graph(&text, &context)?;
        if g.n() != entry.nodes || g.edge_count() != entry.edges {
            return Err(Error::Parse {
                context,
                record: text.lines().count(),
                message: format!(
                    "manifest entry {i} lists {} nodes / {} edges, file has {} / {}",
                    entry.nodes,
                    entry.edges,
                    g.n(),
                    g.edge_count()
                ),
            });
        }
        graphs.push(g);
        splits.push(entry.split);
    }
    Ok(GraphCorpus {
        name: manifest.name,
        graphs,
        splits,
        seed: manifest.seed,
        params: manifest.params,
    })
}

/// Builds a corpus from bare graph files (`*.txt` in `dir`, sorted by
/// name), e.g. prebuilt protein graphs.
pub fn ingest_graph_files(name: &str, dir: &Path, seed: u64) -> Result<GraphCorpus> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let graphs = files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_graph(&text, &p.display().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphCorpus::new(name, graphs, seed, CorpusParams::External))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_community() -> CommunitySmallParams {
        CommunitySmallParams { count: 30, ..Default::default() }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = gen_community_small(&CommunitySmallParams::default(), 3).unwrap();
        assert_eq!(c.len(), 100);
        let count = |s| c.splits.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (64, 16, 20));
        let mut again = c.clone();
        split(&mut again, 3);
        assert_eq!(again.splits, c.splits);
        split(&mut again, 4);
        assert_ne!(again.splits, c.splits);
    }

    #[test]
    fn community_small_contract() {
        let a = gen_community_small(&small_community(), 11).unwrap();
        let b = gen_community_small(&small_community(), 11).unwrap();
        assert_eq!(a, b);
        for g in &a.graphs {
            assert!((12..=20).contains(&g.n()));
            assert!(is_connected(g));
        }
    }

    #[test]
    fn planar_edge_bound_and_connectivity() {
        let c = gen_planar(&PlanarParams { count: 10, n: 64 }, 5).unwrap();
        for g in &c.graphs {
            assert!(g.edge_count() <= 3 * 64 - 6);
            assert!(is_connected(g));
        }
    }

    /// Brute-force oracle: no point strictly inside any triangle's
    /// circumcircle, and triangles tile the hull (area sum).
    #[test]
    fn delaunay_matches_empty_circle_oracle() {
        for seed in 0..20 {
            let mut rng = rng::stream(seed, &[1]);
            let n = 5 + seed as usize * 3;
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let tris = delaunay(&pts).expect("random points are in general position");
            for t in &tris {
                assert!(orient(pts[t[0]], pts[t[1]], pts[t[2]]) > 0.0);
                for (p, &q) in pts.iter().enumerate() {
                    if !t.contains(&p) {
                        assert!(in_circle(pts[t[0]], pts[t[1]], pts[t[2]], q) < 0.0);
                    }
                }
            }
            let area = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)) / 2.0;
            let total: f64 = tris.iter().map(|t| area(pts[t[0]], pts[t[1]], pts[t[2]])).sum();
            let hull = convex_hull(&pts).unwrap();
            let hull_area: f64 = (1..hull.len() - 1).map(|i| area(pts[hull[0]], pts[hull[i]], pts[hull[i + 1]])).sum();
            assert!((total - hull_area).abs() < 1e-12, "seed {seed}: {total} vs {hull_area}");
        }
    }

    #[test]
    fn delaunay_rejects_degenerate_inputs() {
        assert!(delaunay(&[(0.1, 0.1), (0.2, 0.2), (0.3, 0.3)]).is_none());
        let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(delaunay(&square).is_none(), "cocircular points are degenerate");
    }

    #[test]
    fn sbm_ranges_and_within_block_density() {
        let params = SbmParams { count: 12, ..Default::default() };
        let c = gen_sbm(&params, 2).unwrap();
        for g in &c.graphs {
            assert!((40..=200).contains(&g.n()));
            assert!(is_connected(g));
        }
        let mut rng = rng::stream(9, &[]);
        for _ in 0..50 {
            let sizes = sbm_sizes(&params, &mut rng);
            assert!((2..=5).contains(&sizes.len()));
            assert!(sizes.iter().all(|s| (20..=40).contains(s)));
        }
        // 3 blocks of 30: within-block edges per block ~ Binomial(435, 0.3).
        let (mean, sd) = (435.0 * 0.3, (435.0f64 * 0.3 * 0.7).sqrt());
        for trial in 0..20 {
            let g = sbm_graph(&[30, 30, 30], 0.3, 0.05, &mut rng::stream(trial, &[7]));
            for b in 0..3 {
                let within = g.edges().iter().filter(|&&(u, v)| u / 30 == b && v / 30 == b).count();
                assert!((within as f64 - mean).abs() < 4.0 * sd, "block {b}: {within}");
            }
        }
    }

    #[test]
    fn graph_file_round_trip_and_errors() {
        let g = Graph::from_edges(5, &[(3, 1), (0, 4), (0, 1)]).unwrap();
        let text = format_graph(&g);
        assert_eq!(text, "n 5\n0 1\n0 4\n1 3\n");
        assert_eq!(parse_graph(&text, "g").unwrap(), g);
        for (bad, line) in [
            ("n 5\n0 1\n0 4\n1 3", 4),
            ("m 5\n", 1),
            ("n 5\n1 0\n", 2),
            ("n 5\n0 1\n0 1\n", 3),
            ("n 5\n0 9\n", 2),
            ("n 5\n0 x\n", 2),
        ] {
            match parse_graph(bad, "g") {
                Err(Error::Parse { record, .. }) => assert_eq!(record, line, "{bad:?}"),
                other => panic!("{bad:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn corpus_round_trip_and_truncation() {
        let c = gen_community_small(&small_community(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);

        let victim = dir.path().join("graphs/000004.txt");
        let text = std::fs::read_to_string(&victim).unwrap();
        let cut = text[..text.len() - 1].rfind('\n').unwrap() + 1;
        std::fs::write(&victim, &text[..cut]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Parse { .. })));
        std::fs::write(&victim, &text[..text.len() - 2]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Parse { .. })));
    }
}
