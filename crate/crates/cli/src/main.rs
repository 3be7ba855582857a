use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use specgen::datasets::{
    generate_corpus, load_corpus, save_corpus, CommunitySmallParams, CorpusParams, GraphCorpus, PlanarParams,
    SbmParams, Split,
};
use specgen::graphs::{top_k_spectrum, Graph, Spectrum};
use specgen::metrics::{evaluate, EvalOptions, EvalReport, MmdConfig, Validity};
use specgen::models::{generate, ModelConfig};
use specgen::training::{load_checkpoint, select_model, train, Candidate, RunDir, TrainConfig};
use specgen::Error;

/// Version written into (and required of) every config file.
const CONFIG_VERSION: u32 = 1;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "specgen", version, about = "Spectrum-conditioned graph generation")]
struct Cli {
    /// Worker threads for evaluation and model selection (default: all cores).
    #[arg(long, global = true, env = "SPECGEN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Planar,
    Sbm,
    CommunitySmall,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, split and save a synthetic corpus.
    Dataset {
        #[arg(long, value_enum, required_unless_present = "config")]
        kind: Option<Kind>,
        /// Dataset config (TOML); overrides --kind.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a corpus; resumes from the latest checkpoint in --out.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run config (TOML), e.g. the `run.toml` of an earlier run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip model selection over the checkpoints after training.
        #[arg(long)]
        no_select: bool,
    },
    /// Sample graphs from a checkpoint, conditioned on the test split's node counts.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus whose test split supplies node counts (and spectra).
        #[arg(long)]
        data: PathBuf,
        /// Number of graphs (default: size of the test split; counts are cycled).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expected spectral rank; must match the checkpoint.
        #[arg(long)]
        k: Option<usize>,
        /// Condition the graph stage on the test graphs' own spectra.
        #[arg(long)]
        real_spectra: bool,
        /// Use the raw instead of the averaged parameters.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated graphs against a corpus and write a report.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation config (TOML) with MMD kernel settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path stem; `.toml` and `.json` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k spectra of a corpus.
    Spectra {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetConfig {
    version: u32,
    seed: u64,
    corpus: CorpusParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunConfig {
    version: u32,
    data: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalConfig {
    version: u32,
    mmd: MmdConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerationInfo {
    checkpoint: PathBuf,
    seed: u64,
    real_spectra: bool,
    ema: bool,
    threshold: f64,
    count: usize,
    /// Mean seconds per batch of [`GEN_BATCH`] graphs.
    batch_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Selection {
    best: PathBuf,
    candidates: Vec<CandidateRow>,
}

#[derive(Debug, Serialize)]
struct CandidateRow {
    path: PathBuf,
    step: u64,
    score: f64,
    deg: f64,
    clus: f64,
    orbit: f64,
    spec: f64,
    wavelet: f64,
}

impl From<&Candidate> for CandidateRow {
    fn from(c: &Candidate) -> Self {
        CandidateRow {
            path: c.path.clone(),
            step: c.step,
            score: c.score,
            deg: c.mmd.deg,
            clus: c.mmd.clus,
            orbit: c.mmd.orbit,
            spec: c.mmd.spec,
            wavelet: c.mmd.wavelet,
        }
    }
}

const GEN_BATCH: usize = 10;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => EXIT_USAGE,
        Failure::Core(e) => match e {
            Error::InvalidInput(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Parse { .. } | Error::Integrity { .. } => EXIT_IO,
            Error::NumericalFailure(_) | Error::RankDeficient { .. } | Error::DisconnectedGraph { .. } => {
                EXIT_NUMERICAL
            }
        },
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path, version: impl Fn(&T) -> u32) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let cfg: T = toml::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        record: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })?;
    let v = version(&cfg);
    if v != CONFIG_VERSION {
        return Err(usage(format!(
            "{}: config version {v} is not supported (expected {CONFIG_VERSION})",
            path.display()
        )));
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config types serialize")
}

fn split_graphs(corpus: &GraphCorpus, which: Split) -> Result<Vec<Graph>> {
    let graphs = corpus.subset(which);
    if graphs.is_empty() {
        return Err(usage(format!("corpus '{}' has an empty {which:?} split", corpus.name)));
    }
    Ok(graphs)
}

fn cmd_dataset(kind: Option<Kind>, config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_config::<DatasetConfig>(&p, |c| c.version)?,
        None => DatasetConfig {
            version: CONFIG_VERSION,
            seed: 0,
            corpus: match kind.expect("clap requires --kind without --config") {
                Kind::Planar => CorpusParams::Planar(PlanarParams::default()),
                Kind::Sbm => CorpusParams::Sbm(SbmParams::default()),
                Kind::CommunitySmall => CorpusParams::CommunitySmall(CommunitySmallParams::default()),
            },
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    save_corpus(&corpus, out)?;
    write_text(&out.join("dataset.toml"), &to_toml(&cfg))?;
    let count = |s| corpus.splits.iter().filter(|&&x| x == s).count();
    let nodes: Vec<usize> = corpus.graphs.iter().map(Graph::n).collect();
    let edges: usize = corpus.graphs.iter().map(Graph::edge_count).sum();
    println!("corpus {} ({} graphs) written to {}", corpus.name, corpus.len(), out.display());
    println!(
        "splits: train {} val {} test {}",
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    println!(
        "nodes {}..{} (mean {:.1}), mean edges {:.1}",
        nodes.iter().min().unwrap_or(&0),
        nodes.iter().max().unwrap_or(&0),
        nodes.iter().sum::<usize>() as f64 / corpus.len().max(1) as f64,
        edges as f64 / corpus.len().max(1) as f64
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    k: Option<usize>,
    steps: Option<u64>,
    out: &Path,
    no_select: bool,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_config::<RunConfig>(&p, |c| c.version)?,
        None => {
            let data = data.clone().ok_or_else(|| usage("train needs --data or --config"))?;
            let corpus = load_corpus(&data)?;
            let n_max = corpus.graphs.iter().map(Graph::n).max().unwrap_or(0);
            RunConfig {
                version: CONFIG_VERSION,
                data,
                model: ModelConfig::desk(n_max, 2),
                train: TrainConfig::default(),
            }
        }
    };
    if let Some(d) = data {
        cfg.data = d;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(k) = k {
        cfg.model.k = k;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let corpus = load_corpus(&cfg.data)?;
    let train_set = split_graphs(&corpus, Split::Train)?;
    let run = RunDir::new(out);
    if let Some(latest) = run.latest_checkpoint()? {
        // Refuse to resume past a damaged checkpoint instead of silently
        // restarting.
        let ck = load_checkpoint(&latest)?;
        println!("resuming from {} (step {})", latest.display(), ck.state.step);
    }
    write_text(&out.join("run.toml"), &to_toml(&cfg))?;
    let (_, state, logs) = train(&cfg.model, &cfg.train, &train_set, Some(&run))?;
    if let Some(last) = logs.last() {
        println!(
            "step {} loss_d {:?} loss_g {:?}",
            last.step, last.loss_d, last.loss_g
        );
    }
    println!("trained to step {}; checkpoints in {}", state.step, run.checkpoint_dir().display());
    if no_select {
        return Ok(());
    }
    let val = split_graphs(&corpus, Split::Val)?;
    let (best, candidates) = select_model(&run.checkpoints()?, &train_set, &val, &MmdConfig::default(), cfg.train.seed)?;
    let selection = Selection {
        best: candidates[best].path.clone(),
        candidates: candidates.iter().map(CandidateRow::from).collect(),
    };
    write_text(&out.join("selection.toml"), &to_toml(&selection))?;
    println!(
        "selected {} (mean MMD ratio {:.3})",
        selection.best.display(),
        candidates[best].score
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    data: &Path,
    count: Option<usize>,
    seed: u64,
    k: Option<usize>,
    real_spectra: bool,
    raw: bool,
    threshold: f64,
    out: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    let ck = load_checkpoint(checkpoint)?;
    if let Some(k) = k {
        if k != ck.model.k {
            return Err(usage(format!(
                "requested k = {k} but {} was trained with k = {}",
                checkpoint.display(),
                ck.model.k
            )));
        }
    }
    let corpus = load_corpus(data)?;
    let test = split_graphs(&corpus, Split::Test)?;
    let count = count.unwrap_or(test.len());
    let source: Vec<&Graph> = (0..count).map(|i| &test[i % test.len()]).collect();
    let counts: Vec<usize> = source.iter().map(|g| g.n()).collect();
    let spectra: Option<Vec<Spectrum>> = if real_spectra {
        Some(source.iter().map(|g| top_k_spectrum(g, ck.model.k)).collect::<specgen::Result<_>>()?)
    } else {
        None
    };
    let nets = ck.networks()?;
    let params = if raw { &ck.state.params } else { &ck.state.ema };
    let mut graphs = Vec::with_capacity(count);
    let mut batch_times = Vec::new();
    for (b, chunk) in counts.chunks(GEN_BATCH).enumerate() {
        let lo = b * GEN_BATCH;
        let real = spectra.as_ref().map(|s| &s[lo..lo + chunk.len()]);
        let t = Instant::now();
        let samples = generate(&nets, params, chunk, seed, lo as u64, real)?;
        batch_times.push(t.elapsed().as_secs_f64());
        graphs.extend(samples.iter().map(|s| s.to_graph(threshold)));
    }
    let batch_seconds = batch_times.iter().sum::<f64>() / batch_times.len().max(1) as f64;
    let mut generated = GraphCorpus::new("generated", graphs, seed, CorpusParams::External);
    generated.splits = vec![Split::Test; generated.len()];
    save_corpus(&generated, out)?;
    let info = GenerationInfo {
        checkpoint: checkpoint.to_path_buf(),
        seed,
        real_spectra,
        ema: !raw,
        threshold,
        count,
        batch_seconds,
    };
    write_text(&out.join("generation.toml"), &to_toml(&info))?;
    println!(
        "generated {count} graphs in {:.3} s per batch of {GEN_BATCH}; written to {}",
        batch_seconds,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(generated: &Path, data: &Path, config: Option<PathBuf>, out: &Path) -> Result<()> {
    let eval_cfg = match config {
        Some(p) => read_config::<EvalConfig>(&p, |c| c.version)?,
        None => EvalConfig { version: CONFIG_VERSION, ..Default::default() },
    };
    let gen = load_corpus(generated)?;
    let corpus = load_corpus(data)?;
    let train_set = split_graphs(&corpus, Split::Train)?;
    let test = split_graphs(&corpus, Split::Test)?;
    let info_path = generated.join("generation.toml");
    let gen_seconds = if info_path.exists() {
        let text = fs::read_to_string(&info_path).map_err(|e| Error::Io { path: info_path.clone(), source: e })?;
        toml::from_str::<GenerationInfo>(&text).ok().map(|i| i.batch_seconds)
    } else {
        None
    };
    let opts = EvalOptions {
        mmd: eval_cfg.mmd,
        validity: Validity::for_corpus(&corpus.params),
        gen_seconds,
    };
    let report = evaluate(&gen.graphs, &train_set, &test, &opts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    report.save(out)?;
    println!("{}", EvalReport::TABLE_HEADER);
    println!("{}", report.table_row());
    if report.valid.is_none() {
        println!("note: '{}' has no validity notion; valid and vun columns omitted", corpus.name);
    }
    Ok(())
}

fn cmd_spectra(data: &Path, k: usize, out: Option<PathBuf>) -> Result<()> {
    let corpus = load_corpus(data)?;
    let mut text = String::from("index\tsplit\tn");
    for i in 1..=k {
        text.push_str(&format!("\tlambda_{i}"));
    }
    text.push('\n');
    for (i, (g, split)) in corpus.graphs.iter().zip(&corpus.splits).enumerate() {
        let s = top_k_spectrum(g, k)?;
        text.push_str(&format!("{i}\t{split:?}\t{}", g.n()).to_lowercase());
        for v in s.eigenvalues.iter() {
            text.push_str(&format!("\t{v:.9}"));
        }
        text.push('\n');
    }
    match out {
        Some(p) => write_text(&p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Dataset { kind, config, seed, out } => cmd_dataset(kind, config, seed, &out),
        Command::Train { data, config, seed, k, steps, out, no_select } => {
            cmd_train(data, config, seed, k, steps, &out, no_select)
        }
        Command::Sample { checkpoint, data, count, seed, k, real_spectra, raw, threshold, out } => {
            cmd_sample(&checkpoint, &data, count, seed, k, real_spectra, raw, threshold, &out)
        }
        Command::Evaluate { generated, data, config, out } => cmd_evaluate(&generated, &data, config, &out),
        Command::Spectra { data, k, out } => cmd_spectra(&data, k, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
