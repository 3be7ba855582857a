//! Evaluation: MMD statistics, validity checks, uniqueness and novelty,
//! edit distance and the combined report.

pub mod mmd;
pub mod planarity;
pub mod sbm;
pub mod wavelet;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mmd::{mmd, statistic_features, statistic_mmd, Kernel, KernelFamily, MmdConfig, Statistic};
pub use planarity::{is_planar, kuratowski_subgraph, planar_validity, Kuratowski, KuratowskiKind};
pub use sbm::{fit_sbm, sbm_validity, SbmFit};
pub use wavelet::{AbsplineBank, WaveletFeature};

use crate::datasets::{CorpusParams, SbmParams};
use crate::graphs::{isomorphism, Graph, Isomorphism, DEFAULT_ISO_BUDGET};
use crate::{Error, Result};

/// One value per MMD statistic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MmdRow {
    pub deg: f64,
    pub clus: f64,
    pub orbit: f64,
    pub spec: f64,
    pub wavelet: f64,
}

impl MmdRow {
    pub fn get(&self, stat: Statistic) -> f64 {
        match stat {
            Statistic::Degree => self.deg,
            Statistic::Clustering => self.clus,
            Statistic::Orbit => self.orbit,
            Statistic::Spectral => self.spec,
            Statistic::Wavelet => self.wavelet,
        }
    }

    fn set(&mut self, stat: Statistic, v: f64) {
        match stat {
            Statistic::Degree => self.deg = v,
            Statistic::Clustering => self.clus = v,
            Statistic::Orbit => self.orbit = v,
            Statistic::Spectral => self.spec = v,
            Statistic::Wavelet => self.wavelet = v,
        }
    }
}

/// Precomputed statistic features of one graph set.
pub struct FeatureSet {
    features: HashMap<Statistic, Vec<Vec<f64>>>,
}

impl FeatureSet {
    pub fn new(graphs: &[Graph], cfg: &MmdConfig) -> Result<Self> {
        let graphs: Vec<Graph> = graphs.iter().filter(|g| g.n() > 0).cloned().collect();
        if graphs.is_empty() {
            return Err(Error::invalid("no non-empty graphs to evaluate"));
        }
        let mut features = HashMap::new();
        for stat in Statistic::ALL {
            features.insert(stat, statistic_features(&graphs, stat, cfg)?);
        }
        Ok(FeatureSet { features })
    }

    pub fn mmd_row(&self, other: &FeatureSet, cfg: &MmdConfig) -> Result<MmdRow> {
        let mut row = MmdRow::default();
        for stat in Statistic::ALL {
            row.set(stat, mmd(&self.features[&stat], &other.features[&stat], cfg.kernel(stat))?);
        }
        Ok(row)
    }
}

/// All five MMDs between two graph sets. Empty graphs are dropped.
pub fn mmd_row(a: &[Graph], b: &[Graph], cfg: &MmdConfig) -> Result<MmdRow> {
    FeatureSet::new(a, cfg)?.mmd_row(&FeatureSet::new(b, cfg)?, cfg)
}

/// Mean of `model / train` over the statistics with a positive training
/// MMD; `None` if there is none.
pub fn ratio(model: &MmdRow, train: &MmdRow) -> Option<f64> {
    let mut terms = Vec::new();
    for stat in Statistic::ALL {
        let t = train.get(stat);
        if t > 0.0 {
            terms.push(model.get(stat) / t);
        } else {
            log::warn!("training-set {stat:?} MMD is zero; excluded from the ratio");
        }
    }
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Validity notion of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Validity {
    #[default]
    None,
    Planar,
    Sbm(SbmParams),
}

impl Validity {
    /// Validity notion matching a corpus' generator.
    pub fn for_corpus(params: &CorpusParams) -> Self {
        match params {
            CorpusParams::Planar(_) => Validity::Planar,
            CorpusParams::Sbm(p) => Validity::Sbm(p.clone()),
            _ => Validity::None,
        }
    }

    /// `None` when the dataset has no validity notion.
    pub fn check(&self, g: &Graph) -> Option<bool> {
        match self {
            Validity::None => None,
            Validity::Planar => Some(planar_validity(g)),
            Validity::Sbm(p) => Some(sbm_validity(g, p)),
        }
    }
}

/// Buckets graphs by cheap invariants so isomorphism tests only run inside
/// a bucket.
fn invariant_key(g: &Graph) -> (usize, usize, Vec<usize>) {
    let mut d = g.degrees();
    d.sort_unstable();
    (g.n(), g.edge_count(), d)
}

fn iso(a: &Graph, b: &Graph) -> bool {
    // Undecided searches count as isomorphic (conservative for both
    // uniqueness and novelty).
    isomorphism(a, b, DEFAULT_ISO_BUDGET) != Isomorphism::NotIsomorphic
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessNovelty {
    pub unique: f64,
    pub novel: f64,
    /// Only with a validity notion.
    pub vun: Option<f64>,
    pub valid: Option<f64>,
}

/// Unique: share of generated graphs that open a new isomorphism class
/// (classes / count). Novel: share not isomorphic to any training graph.
/// VUN: share that open a new class, are novel and are valid.
pub fn uniqueness_novelty(generated: &[Graph], train: &[Graph], validity: &Validity) -> Result<UniquenessNovelty> {
    if generated.is_empty() {
        return Err(Error::invalid("no generated graphs"));
    }
    let mut train_buckets: HashMap<_, Vec<&Graph>> = HashMap::new();
    for g in train {
        train_buckets.entry(invariant_key(g)).or_default().push(g);
    }
    let keys: Vec<_> = generated.iter().map(invariant_key).collect();
    let novel_flags: Vec<bool> = generated
        .par_iter()
        .zip(&keys)
        .map(|(g, k)| train_buckets.get(k).is_none_or(|b| !b.iter().any(|t| iso(g, t))))
        .collect();
    let valid_flags: Vec<Option<bool>> = generated.par_iter().map(|g| validity.check(g)).collect();
    let mut classes: HashMap<_, Vec<usize>> = HashMap::new();
    let (mut unique, mut vun) = (0usize, 0usize);
    for (i, g) in generated.iter().enumerate() {
        let bucket = classes.entry(keys[i].clone()).or_default();
        if bucket.iter().any(|&j| iso(g, &generated[j])) {
            continue;
        }
        bucket.push(i);
        unique += 1;
        if novel_flags[i] && valid_flags[i] == Some(true) {
            vun += 1;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / generated.len() as f64;
    let has_validity = *validity != Validity::None;
    Ok(UniquenessNovelty {
        unique: pct(unique),
        novel: pct(novel_flags.iter().filter(|&&x| x).count()),
        vun: has_validity.then(|| pct(vun)),
        valid: has_validity.then(|| pct(valid_flags.iter().filter(|&&v| v == Some(true)).count())),
    })
}

/// Mean percentage of differing node pairs over all graph pairs, assuming
/// aligned node orders; the larger graph of a pair is clipped to the
/// smaller node count. Pairs whose smaller graph has fewer than 2 nodes
/// have no node pairs and are skipped.
pub fn mean_edit_distance(graphs: &[Graph]) -> Result<f64> {
    if graphs.len() < 2 {
        return Err(Error::invalid("edit distance needs at least two graphs"));
    }
    let per_pair: Vec<f64> = (0..graphs.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..graphs.len()).filter_map(move |j| {
                let (a, b) = (&graphs[i], &graphs[j]);
                let n = a.n().min(b.n());
                if n < 2 {
                    return None;
                }
                let mut diff = 0usize;
                for u in 0..n {
                    for v in u + 1..n {
                        diff += (a.has_edge(u, v) != b.has_edge(u, v)) as usize;
                    }
                }
                Some(diff as f64 / (n * (n - 1) / 2) as f64)
            })
        })
        .collect();
    if per_pair.is_empty() {
        return Err(Error::invalid("no graph pair has two or more nodes"));
    }
    Ok(100.0 * per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Generated vs test.
    pub mmd: MmdRow,
    /// Train vs test baseline.
    pub train_mmd: MmdRow,
    pub ratio: Option<f64>,
    pub valid: Option<f64>,
    pub unique: f64,
    pub novel: f64,
    pub vun: Option<f64>,
    /// Seconds to generate one batch of 10 graphs, when measured.
    pub gen_seconds: Option<f64>,
    pub generated: usize,
    pub test: usize,
    pub kernel: KernelFamily,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub mmd: MmdConfig,
    pub validity: Validity,
    pub gen_seconds: Option<f64>,
}

/// Generated graphs scored against the test split, with the train split as
/// the baseline for the ratio and the novelty reference.
pub fn evaluate(generated: &[Graph], train: &[Graph], test: &[Graph], opts: &EvalOptions) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::invalid("no generated graphs to evaluate"));
    }
    if generated.len() != test.len() {
        log::warn!(
            "evaluating {} generated graphs against {} test graphs",
            generated.len(),
            test.len()
        );
    }
    let test_f = FeatureSet::new(test, &opts.mmd)?;
    let gen_f = FeatureSet::new(generated, &opts.mmd)?;
    let train_f = FeatureSet::new(train, &opts.mmd)?;
    let mmd = gen_f.mmd_row(&test_f, &opts.mmd)?;
    let train_mmd = train_f.mmd_row(&test_f, &opts.mmd)?;
    let un = uniqueness_novelty(generated, train, &opts.validity)?;
    Ok(EvalReport {
        ratio: ratio(&mmd, &train_mmd),
        mmd,
        train_mmd,
        valid: un.valid,
        unique: un.unique,
        novel: un.novel,
        vun: un.vun,
        gen_seconds: opts.gen_seconds,
        generated: generated.len(),
        test: test.len(),
        kernel: opts.mmd.family,
    })
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("report encoding: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            context: "evaluation report".into(),
            record: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report encoding: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "evaluation report".into(),
            record: e.line(),
            message: e.to_string(),
        })
    }

    pub const TABLE_HEADER: &'static str = "deg\tclus\torbit\tspec\twavelet\tratio\tvalid\tunique\tnovel\tvun\tt_s";

    /// Tab-separated row matching [`Self::TABLE_HEADER`]; undefined columns
    /// are `-`.
    pub fn table_row(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{:.1}\t{:.1}\t{}\t{}",
            self.mmd.deg,
            self.mmd.clus,
            self.mmd.orbit,
            self.mmd.spec,
            self.mmd.wavelet,
            opt(self.ratio, 2),
            opt(self.valid, 1),
            self.unique,
            self.novel,
            opt(self.vun, 1),
            opt(self.gen_seconds, 3),
        )
    }

    /// Writes `<stem>.toml` and `<stem>.json` next to each other.
    pub fn save(&self, stem: &Path) -> Result<()> {
        for (ext, text) in [("toml", self.to_toml()?), ("json", self.to_json()?)] {
            let path = stem.with_extension(ext);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_community_small, CommunitySmallParams};
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
        let mut rng = rng::stream(seed, &[0x9e]);
        let mut g = Graph::empty(n);
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < p {
                    g.add_edge(u, v);
                }
            }
        }
        g
    }

    #[test]
    fn ratio_rules() {
        let row = MmdRow { deg: 1.0, clus: 2.0, orbit: 3.0, spec: 4.0, wavelet: 5.0 };
        assert!((ratio(&row, &row).unwrap() - 1.0).abs() < 1e-15);
        let double = MmdRow { deg: 2.0, clus: 4.0, orbit: 6.0, spec: 8.0, wavelet: 10.0 };
        assert!((ratio(&double, &row).unwrap() - 2.0).abs() < 1e-15);
        let zero_clus = MmdRow { clus: 0.0, ..row };
        assert!((ratio(&double, &zero_clus).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(ratio(&row, &MmdRow::default()), None);
    }

    #[test]
    fn uniqueness_and_novelty_fixtures() {
        let g = random_graph(10, 0.4, 1);
        let same = vec![g.clone(); 8];
        let un = uniqueness_novelty(&same, &[], &Validity::None).unwrap();
        assert!((un.unique - 100.0 / 8.0).abs() < 1e-12);
        assert_eq!(un.novel, 100.0);
        assert_eq!(un.vun, None);

        let train: Vec<Graph> = (0..6).map(|s| random_graph(9, 0.5, 100 + s)).collect();
        let mut rng = rng::stream(2, &[]);
        let permuted: Vec<Graph> = train
            .iter()
            .map(|t| {
                let mut p: Vec<usize> = (0..t.n()).collect();
                p.shuffle(&mut rng);
                t.permute(&p).unwrap()
            })
            .collect();
        assert_eq!(uniqueness_novelty(&permuted, &train, &Validity::None).unwrap().novel, 0.0);

        // Distinct edge counts make the fixture non-isomorphic by construction.
        let distinct: Vec<Graph> = (0..20)
            .map(|m| {
                let mut g = Graph::empty(12);
                for (i, (u, v)) in (0..12).flat_map(|u| (u + 1..12).map(move |v| (u, v))).enumerate() {
                    if i < 10 + m {
                        g.add_edge(u, v);
                    }
                }
                g
            })
            .collect();
        let other: Vec<Graph> = (0..5).map(|s| random_graph(11, 0.3, s)).collect();
        let un = uniqueness_novelty(&distinct, &other, &Validity::None).unwrap();
        assert_eq!((un.unique, un.novel), (100.0, 100.0));
        assert!(uniqueness_novelty(&[], &other, &Validity::None).is_err());
    }

    #[test]
    fn vun_counts_first_of_class_only() {
        let path = Graph::path(5);
        let cycle = Graph::cycle(5);
        let gen = vec![path.clone(), path.clone(), cycle.clone(), Graph::from_edges(5, &[(0, 1)]).unwrap()];
        let un = uniqueness_novelty(&gen, &[cycle], &Validity::Planar).unwrap();
        assert_eq!(un.unique, 75.0);
        assert_eq!(un.novel, 75.0);
        // Path is valid, unique and novel; its copy is not unique; the cycle
        // is not novel; the last graph is disconnected.
        assert_eq!(un.vun, Some(25.0));
        assert_eq!(un.valid, Some(75.0));
    }

    #[test]
    fn edit_distance_fixtures() {
        let g = random_graph(10, 0.5, 3);
        assert_eq!(mean_edit_distance(&[g.clone(), g.clone(), g.clone()]).unwrap(), 0.0);
        assert_eq!(mean_edit_distance(&[g.clone(), g.complement()]).unwrap(), 100.0);
        // Clipping: the 12-node graph is compared on its first 10 nodes.
        let mut big = Graph::empty(12);
        for (u, v) in g.edges() {
            big.add_edge(u, v);
        }
        big.add_edge(10, 11);
        assert_eq!(mean_edit_distance(&[g.clone(), big]).unwrap(), 0.0);
        assert!(mean_edit_distance(&[g]).is_err());
    }

    #[test]
    fn report_round_trips_and_self_ratio() {
        let c = gen_community_small(&CommunitySmallParams { count: 60, ..Default::default() }, 4).unwrap();
        let (train, test) = (c.subset(crate::datasets::Split::Train), c.subset(crate::datasets::Split::Test));
        let opts = EvalOptions::default();
        let r = evaluate(&train, &train, &test, &opts).unwrap();
        assert!((r.ratio.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.novel, 0.0);
        assert_eq!(r.valid, None);
        assert_eq!(EvalReport::from_toml(&r.to_toml().unwrap()).unwrap(), r);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.table_row().split('\t').count() == EvalReport::TABLE_HEADER.split('\t').count());
        assert!(evaluate(&[], &train, &test, &opts).is_err());
    }

    #[test]
    fn community_graphs_show_two_dense_blocks() {
        let c = gen_community_small(&CommunitySmallParams::default(), 8).unwrap();
        let mut hits = 0;
        for g in &c.graphs {
            let labels = sbm::recover_communities(g, (2, 2));
            let half = g.n() / 2;
            let agree = (0..g.n()).filter(|&v| (labels[v] == labels[0]) == (v < half)).count();
            if agree == g.n() {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}/100 split into the planted halves");
    }
}
