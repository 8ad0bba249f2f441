use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyrep::data::{self, Dataset, SyntheticSpec, TaxonomyKind};
use hyrep::eval::{self, Protocol};
use hyrep::model::Model;
use hyrep::optim::{self, TrainConfig};
use serde_json::json;

const EXIT_USAGE: u8 = 64;
const EXIT_CONFIG: u8 = 65;
const EXIT_RUNTIME: u8 = 70;

#[derive(Parser)]
#[command(name = "hyrep", version, about = "Hyperbolic speech decoding from neural spike data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Built-in taxonomy for synthetic data.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "consonant21")]
    Consonant21,
    #[value(name = "vowel_mouth4")]
    VowelMouth4,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    #[value(name = "leave_one_out", alias = "loo")]
    LeaveOneOut,
    Holdout,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted taxonomy.
    Gen(Common),
    /// Convert spike and marker CSV files into a dataset.
    Ingest {
        #[arg(long)]
        spikes: PathBuf,
        #[arg(long)]
        markers: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy, top-N and confusion matrix.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Evaluate this trained model instead of retraining per fold.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "holdout")]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Decode and export the class tree of a trained model.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Distortion of the decoded tree against random trees.
    Distortion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Taxonomy level whose groups act as classes.
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Count sibling class pairs over repeated trainings.
    Mine {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train hyperbolic and Euclidean variants on the same folds.
    CompareSpaces {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "holdout")]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Articulation groups vs mined substructures vs no constraint.
    ConstraintExp {
        #[arg(long)]
        data: PathBuf,
        /// Datasets to mine substructures from; defaults to `--data`.
        #[arg(long)]
        mine_data: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck(Common),
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Err(f) = init_threads() {
        eprintln!("error: {}", f.message());
        return ExitCode::from(f.code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("HYREP_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Failure::Config(format!("HYREP_THREADS must be an integer, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    Ok(())
}

/// Settings from the config file then `--set`, split into training keys and
/// `synthetic.*` generator keys.
struct Settings {
    train: TrainConfig,
    synthetic: Vec<(String, String)>,
    seed: u64,
}

fn settings(c: &Common) -> Result<Settings, Failure> {
    let mut pairs = Vec::new();
    if let Some(path) = &c.config {
        let text = read(path)?;
        pairs = optim::parse_config(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    }
    for s in &c.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects key=value, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut train = TrainConfig::default();
    let mut synthetic = Vec::new();
    for (k, v) in pairs {
        match k.strip_prefix("synthetic.") {
            Some(rest) => synthetic.push((rest.to_string(), v)),
            None => train.set(&k, &v).map_err(config_err)?,
        }
    }
    if let Some(s) = c.seed {
        train.seed = s;
    }
    train.validate().map_err(Failure::Config)?;
    Ok(Settings { seed: train.seed, train, synthetic })
}

fn read(path: &Path) -> Result<String, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(runtime)
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{} does not exist", path.display())));
    }
    data::load_dataset(path).map_err(config_err)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{} does not exist", path.display())));
    }
    Model::load(path).map_err(config_err)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(out).map_err(runtime)?;
    let p = out.join(name);
    fs::write(&p, contents).map_err(runtime)?;
    Ok(p)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn protocol(p: ProtocolArg, test_fraction: f64, seed: u64) -> Protocol {
    match p {
        ProtocolArg::LeaveOneOut => Protocol::LeaveOneOut,
        ProtocolArg::Holdout => Protocol::Holdout { test_fraction, seed },
    }
}

fn synthetic_spec(c: &Common, s: &Settings) -> Result<SyntheticSpec, Failure> {
    let kind = match c.preset.unwrap_or(Preset::Consonant21) {
        Preset::Consonant21 => TaxonomyKind::Consonant21,
        Preset::VowelMouth4 => TaxonomyKind::VowelMouth4 { per_group: 6 },
    };
    let mut kind = kind;
    for (k, v) in &s.synthetic {
        if k == "per_group" {
            let n = v.parse().map_err(|_| Failure::Config(format!("synthetic.per_group: bad value `{v}`")))?;
            match kind {
                TaxonomyKind::VowelMouth4 { .. } => kind = TaxonomyKind::VowelMouth4 { per_group: n },
                TaxonomyKind::Consonant21 => return Err(Failure::Config("synthetic.per_group applies to vowel_mouth4".into())),
            }
        }
    }
    let mut spec = SyntheticSpec::new(data::builtin_taxonomy(kind), s.seed);
    for (k, v) in &s.synthetic {
        let bad = || Failure::Config(format!("synthetic.{k}: bad value `{v}`"));
        match k.as_str() {
            "per_group" => {}
            "trials_per_class" => spec.trials_per_class = v.parse().map_err(|_| bad())?,
            "feature_dim" => spec.feature_dim = v.parse().map_err(|_| bad())?,
            "noise_sigma" => spec.noise_sigma = v.parse().map_err(|_| bad())?,
            "noise_seed" => spec.noise_seed = Some(v.parse().map_err(|_| bad())?),
            "level_scales" => {
                spec.level_scales = v.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?
            }
            _ => return Err(Failure::Config(format!("unknown key `synthetic.{k}`"))),
        }
    }
    spec.validate().map_err(config_err)?;
    Ok(spec)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen(c) => {
            let s = settings(&c)?;
            let spec = synthetic_spec(&c, &s)?;
            let ds = data::generate_synthetic(&spec).map_err(runtime)?;
            let p = write(&c.out, "dataset.json", &ds.to_json())?;
            let meta = json!({
                "seed": s.seed,
                "taxonomy": spec.taxonomy.name,
                "trials_per_class": spec.trials_per_class,
                "feature_dim": spec.feature_dim,
                "level_scales": spec.level_scales,
                "noise_sigma": spec.noise_sigma,
                "noise_seed": spec.noise_seed,
            });
            write(&c.out, "gen.json", &pretty(&meta))?;
            println!("wrote {} ({} trials, {} classes)", p.display(), ds.len(), ds.num_classes());
        }
        Command::Ingest { spikes, markers, common } => {
            for p in [&spikes, &markers] {
                if !p.exists() {
                    return Err(Failure::Usage(format!("{} does not exist", p.display())));
                }
            }
            let ds = data::ingest_csv(&spikes, &markers).map_err(config_err)?;
            let p = write(&common.out, "dataset.json", &ds.to_json())?;
            println!("wrote {} ({} trials, {} units, {} bins)", p.display(), ds.len(), ds.meta.n_units, ds.meta.n_bins);
        }
        Command::Train { data, common } => {
            let s = settings(&common)?;
            let ds = load_dataset(&data)?;
            let st = optim::train(&ds, &s.train).map_err(runtime)?;
            let p = write(&common.out, "model.json", &(st.model.to_json().map_err(runtime)? + "\n"))?;
            write(&common.out, "history.json", &(st.history_json() + "\n"))?;
            write(&common.out, "train.conf", &s.train.to_text())?;
            let meta = json!({"seed": st.seed, "epochs": st.epoch, "learning_rate": st.learning_rate, "final_loss": st.history.last()});
            write(&common.out, "train.json", &pretty(&meta))?;
            println!("wrote {} after {} epochs, final loss {:.6}", p.display(), st.epoch, st.history.last().copied().unwrap_or(0.0));
        }
        Command::Eval { data, model, protocol: proto, test_fraction, common } => {
            let s = settings(&common)?;
            let ds = load_dataset(&data)?;
            let metrics = match model {
                Some(m) => eval::evaluate_model(&load_model(&m)?, &ds, s.seed).map_err(runtime)?,
                None => eval::evaluate(&ds, &s.train, protocol(proto, test_fraction, s.seed)).map_err(runtime)?,
            };
            write(&common.out, "metrics.json", &(metrics.to_json() + "\n"))?;
            write(&common.out, "confusion.csv", &metrics.confusion.to_csv(&ds.meta.classes))?;
            println!("accuracy {:.4} over {} trials ({})", metrics.accuracy, metrics.trials, metrics.protocol);
        }
        Command::Cluster { data, model, common } => {
            let s = settings(&common)?;
            let ds = load_dataset(&data)?;
            let m = load_model(&model)?;
            let decoded = eval::decode_model_tree(&m, &ds, s.train.similarity.source).map_err(runtime)?;
            let names = ds.meta.classes.clone();
            let groups = taxonomy_groups(&ds, 1).ok();
            let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
            write(&common.out, "tree.newick", &(decoded.tree.to_newick(label) + "\n"))?;
            let tree_json = decoded.tree.to_json(label, |i| groups.as_ref().map(|g| g.1[g.0[i]].clone()));
            write(&common.out, "tree.json", &pretty(&json!({"seed": s.seed, "tree": tree_json})))?;
            println!("{}", decoded.tree.to_newick(label));
        }
        Command::Distortion { data, model, runs, level, common } => {
            let s = settings(&common)?;
            let ds = load_dataset(&data)?;
            let m = load_model(&model)?;
            let (groups, _) = taxonomy_groups(&ds, level)?;
            let decoded = eval::decode_model_tree(&m, &ds, s.train.similarity.source).map_err(runtime)?;
            let r = eval::distortion_vs_random(&decoded.tree, &groups, runs, s.seed).map_err(runtime)?;
            write(&common.out, "distortion.json", &pretty(&serde_json::to_value(&r).expect("serializes")))?;
            println!("distortion {:.4}, percentile {:.1} of {} random trees", r.value, r.percentile, runs);
        }
        Command::Mine { data, runs, threshold, common } => {
            let s = settings(&common)?;
            let sets = data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>, _>>()?;
            let names = sets[0].meta.classes.clone();
            let mined = eval::mine_substructures(&sets, runs, threshold, &s.train).map_err(runtime)?;
            let fragments = mined.newick_fragments(&names);
            let out = json!({
                "seed": s.seed,
                "runs_per_dataset": runs,
                "threshold": threshold,
                "per_dataset": mined.per_dataset.iter().map(|c| c.to_json(&names)).collect::<Vec<_>>(),
                "groups": mined.groups.iter().map(|g| g.iter().map(|&i| names[i].clone()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            });
            write(&common.out, "substructures.json", &pretty(&out))?;
            write(&common.out, "substructures.newick", &fragments.iter().map(|f| format!("{f}\n")).collect::<String>())?;
            for f in &fragments {
                println!("{f}");
            }
        }
        Command::CompareSpaces { data, protocol: proto, test_fraction, common } => {
            let s = settings(&common)?;
            let ds = load_dataset(&data)?;
            let cmp = eval::compare_spaces(&ds, &s.train, protocol(proto, test_fraction, s.seed)).map_err(runtime)?;
            write(&common.out, "compare_spaces.json", &pretty(&serde_json::to_value(&cmp).expect("serializes")))?;
            let table = cmp.to_table();
            write(&common.out, "compare_spaces.tsv", &table)?;
            print!("{table}");
        }
        Command::ConstraintExp { data, mine_data, runs, threshold, test_fraction, common } => {
            let s = settings(&common)?;
            let ds = load_dataset(&data)?;
            let mine_sets = if mine_data.is_empty() {
                vec![ds.clone()]
            } else {
                mine_data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>, _>>()?
            };
            let (articulation, _) = taxonomy_groups(&ds, 1)?;
            let mined = eval::mine_substructures(&mine_sets, runs, threshold, &s.train).map_err(runtime)?;
            let constraints = vec![
                ("articulation".to_string(), Some(articulation)),
                ("mined".to_string(), Some(mined.constraint_groups(ds.num_classes()))),
                ("none".to_string(), None),
            ];
            let results = eval::constraint_experiment(&ds, &s.train, &constraints, test_fraction).map_err(runtime)?;
            let out = json!({
                "seed": s.seed,
                "mined_groups": mined.newick_fragments(&ds.meta.classes),
                "results": results,
            });
            write(&common.out, "constraint.json", &pretty(&out))?;
            for r in &results {
                println!("{}\t{:.4}", r.name, r.accuracy);
            }
        }
        Command::Gradcheck(common) => {
            let s = settings(&common)?;
            let checks = hyrep::gradcheck::full_suite(s.seed).map_err(runtime)?;
            let mut worst: f64 = 0.0;
            let mut failed = Vec::new();
            for c in &checks {
                println!("{:<36} {:.3e} (tol {:.0e}) {}", c.name, c.max_rel_error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
                worst = worst.max(c.max_rel_error);
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            println!("max rel. error {worst:.3e}");
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

/// Group id per class at `level` of the dataset's taxonomy, with group names.
fn taxonomy_groups(ds: &Dataset, level: usize) -> Result<(Vec<usize>, Vec<String>), Failure> {
    let name = ds.meta.taxonomy.as_deref().ok_or_else(|| Failure::Config("dataset has no taxonomy".into()))?;
    let tax = data::builtin_taxonomy_named(name).map_err(config_err)?;
    if tax.classes != ds.meta.classes {
        return Err(Failure::Config(format!("dataset classes do not match taxonomy `{name}`")));
    }
    let ids = tax.groups_at_level(level);
    let n = ids.iter().max().map_or(0, |m| m + 1);
    let mut names = vec![String::new(); n];
    fn walk(node: &data::TaxNode, depth: usize, level: usize, ids: &[usize], names: &mut [String]) {
        if depth == level || node.is_leaf() {
            if let Some(&c) = node.leaves().first() {
                names[ids[c]] = node.name.clone();
            }
            return;
        }
        for ch in &node.children {
            walk(ch, depth + 1, level, ids, names);
        }
    }
    walk(&tax.root, 0, level, &ids, &mut names);
    Ok((ids, names))
}
