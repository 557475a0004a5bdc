//! `dasloc` command-line driver: dataset generation, training, selection,
//! evaluation and report emission.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dasloc::channel_sim::{generate_dataset_with_workers, generate_scenario, Dataset, Scenario};
use dasloc::config::ExperimentConfig;
use dasloc::evaluation::{compare_methods, error_map, evaluate, select_for_method, selection_frequency, Method, MethodRun, MethodSummary};
use dasloc::formats::{dataset_sidecar, read_dataset, read_index_list, read_model, write_dataset, write_index_list, write_model, Model};
use dasloc::report;
use dasloc::selector::{select_cg, select_random, Selection};
use dasloc::training::{run_selection, split_dataset, train_lud, train_rsd, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "dasloc", version, about = "RRH selection and user localization in distributed antenna systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Rsd,
    Lud,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Rsd,
    Cg,
    Random,
    Full,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rsd => Method::Rsd,
            MethodArg::Cg => Method::Cg,
            MethodArg::Random => Method::Random,
            MethodArg::Full => Method::Full,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat `block.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `training.m`.
    #[arg(long)]
    m: Option<usize>,
    /// `off` allows multi-threaded dataset generation.
    #[arg(long, value_enum, default_value = "on")]
    deterministic: Switch,
    /// Also write SVG figures.
    #[arg(long, value_enum, default_value = "off")]
    svg: Switch,
}

#[derive(Subcommand)]
enum Command {
    /// Build the scenario and write the dataset with its metadata sidecar.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the selector (rsd) or the localization network (lud).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        dataset: PathBuf,
        /// RRH index list for the lud stage.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// How the lud stage picks RRHs when no index list is given.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Write an RRH index list from a trained selector or a baseline.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Trained rsd model; mutually exclusive with --method.
        #[arg(long, conflicts_with = "method")]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Evaluate a trained lud model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Label for the summary row.
        #[arg(long, value_enum, default_value = "rsd")]
        method: MethodArg,
    },
    /// Train and compare every configured method over the configured seeds.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn main() -> ExitCode {
    // Fixed filter: the environment is deliberately not consulted.
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train { common, stage, dataset, selection, method } => {
            cmd_train(&common, stage, &dataset, selection.as_deref(), method)
        }
        Command::Select { common, dataset, model, method } => cmd_select(&common, &dataset, model.as_deref(), method),
        Command::Eval { common, model, dataset, method } => cmd_eval(&common, &model, &dataset, method.into()),
        Command::Report { common, dataset } => cmd_report(&common, &dataset),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(m) = common.m {
        cfg.training.m = m;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_model(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn scenario_for(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Scenario> {
    let scenario = generate_scenario(&cfg.scenario, cfg.scenario_seed)?;
    if scenario.num_rrhs() != dataset.n {
        bail!("config describes N={} RRHs but the dataset has N={}", scenario.num_rrhs(), dataset.n);
    }
    Ok(scenario)
}

fn split_for(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Split> {
    let t = &cfg.training;
    Ok(split_dataset(dataset.len(), t.split_ratio, t.validation_fraction, t.split_seed)?)
}

fn write_selection(path: &Path, indices: &[usize]) -> Result<()> {
    let sel = Selection { indices: indices.to_vec() };
    if sel.duplicate_count() > 0 {
        log::warn!("selection {:?} repeats {} RRH(s)", sel.indices, sel.duplicate_count());
    }
    let mut w = create(path)?;
    write_index_list(&mut w, indices)?;
    w.flush()?;
    Ok(())
}

fn cmd_gen(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
    }
    let workers = match common.deterministic {
        Switch::On => 1,
        Switch::Off => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let scenario = generate_scenario(&cfg.scenario, cfg.scenario_seed)?;
    let dataset = generate_dataset_with_workers(&scenario, cfg.dataset.r, cfg.dataset.feature_mode, cfg.dataset.seed, workers)?;
    let data_path = common.out.join("dataset.dasl");
    let meta_path = common.out.join("dataset.meta");
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &dataset)?;
    fs::write(&data_path, &bytes).with_context(|| format!("writing {}", data_path.display()))?;
    let meta = dataset_sidecar(&cfg.scenario, &scenario, &dataset, cfg.dataset.seed);
    write_text(&meta_path, &meta)?;
    for (path, content) in [(&data_path, bytes.as_slice()), (&meta_path, meta.as_bytes())] {
        println!("{}  {}", hex::encode(Sha256::digest(content)), path.display());
    }
    Ok(())
}

fn cmd_train(
    common: &Common,
    stage: Stage,
    dataset_path: &Path,
    selection: Option<&Path>,
    method: Option<MethodArg>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    let dataset = load_dataset(dataset_path)?;
    if dataset.feature_mode != cfg.dataset.feature_mode {
        bail!(
            "dataset uses {} features but the config asks for {}",
            dataset.feature_mode.name(),
            cfg.dataset.feature_mode.name()
        );
    }
    match stage {
        Stage::Rsd => {
            let trained = train_rsd(&dataset, &cfg.training)?;
            let report = run_selection(&trained);
            write_selection(&common.out.join("selection.txt"), &report.selection.indices)?;
            let mut w = create(&common.out.join("history_rsd.csv"))?;
            report::write_history_csv(&mut w, &trained.history)?;
            w.flush()?;
            let mut w = create(&common.out.join("rsd.dasm"))?;
            write_model(&mut w, &Model::Rsd(trained))?;
            w.flush()?;
        }
        Stage::Lud => {
            let indices = match (selection, method) {
                (Some(path), _) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let indices = read_index_list(&text)?;
                    if indices.len() != cfg.training.m {
                        bail!("selection lists {} RRHs but M={}", indices.len(), cfg.training.m);
                    }
                    indices
                }
                (None, Some(m)) => {
                    let split = split_for(&cfg, &dataset)?;
                    select_for_method(&dataset, &split, m.into(), &cfg.training)?
                }
                (None, None) => bail!("the lud stage needs --selection or --method"),
            };
            let trained = train_lud(&dataset, &indices, &cfg.training)?;
            let mut w = create(&common.out.join("history_lud.csv"))?;
            report::write_history_csv(&mut w, &trained.history)?;
            w.flush()?;
            let mut w = create(&common.out.join("lud.dasm"))?;
            write_model(&mut w, &Model::Lud(trained))?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_select(common: &Common, dataset_path: &Path, model: Option<&Path>, method: Option<MethodArg>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    let dataset = load_dataset(dataset_path)?;
    let m = cfg.training.m;
    if m > dataset.n {
        bail!("M={m} exceeds the N={} RRHs in the dataset", dataset.n);
    }
    let indices = match (model, method) {
        (Some(path), _) => match load_model(path)? {
            Model::Rsd(trained) => run_selection(&trained).selection.indices,
            Model::Lud(_) => bail!("{} holds a lud model; selection needs an rsd model", path.display()),
        },
        (None, Some(MethodArg::Cg)) => {
            let split = split_for(&cfg, &dataset)?;
            select_cg(&dataset.subset(&split.train), m)?
        }
        (None, Some(MethodArg::Random)) => select_random(dataset.n, m, &mut ChaCha8Rng::seed_from_u64(cfg.training.seed))?,
        (None, Some(other)) => bail!("select supports --method cg or random, not {}", Method::from(other).name()),
        (None, None) => bail!("select needs --model or --method"),
    };
    write_selection(&common.out.join("selection.txt"), &indices)
}

fn write_svg(common: &Common, name: &str, svg: &str) -> Result<()> {
    if common.svg == Switch::On {
        write_text(&common.out.join(name), svg)?;
    }
    Ok(())
}

fn print_summary(rows: &[MethodSummary]) -> Result<()> {
    let mut buf = Vec::new();
    report::write_summary_csv(&mut buf, rows)?;
    print!("{}", String::from_utf8(buf)?);
    Ok(())
}

fn cmd_eval(common: &Common, model_path: &Path, dataset_path: &Path, method: Method) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = load_dataset(dataset_path)?;
    let trained = match load_model(model_path)? {
        Model::Lud(t) => t,
        Model::Rsd(_) => bail!("{} holds an rsd model; eval needs a lud model", model_path.display()),
    };
    let split = split_for(&cfg, &dataset)?;
    let report = evaluate(&trained, &dataset, &split.test, &cfg.evaluation.percentiles)?;
    let m = trained.selected_indices.len();
    let run = MethodRun { method, seed: trained.seed, selection: trained.selected_indices.clone(), report };
    let summary = MethodSummary::from_runs(method, m, &[&run])?;

    let mut w = create(&common.out.join("summary.csv"))?;
    report::write_summary_csv(&mut w, std::slice::from_ref(&summary))?;
    w.flush()?;
    let mut w = create(&common.out.join("ecdf.csv"))?;
    report::write_ecdf_csv(&mut w, &run.report.ecdf)?;
    w.flush()?;
    let freq = selection_frequency(&[run.selection.clone()], cfg.evaluation.top_k)?;
    let mut w = create(&common.out.join("selection_freq.csv"))?;
    report::write_selection_freq_csv(&mut w, &freq)?;
    w.flush()?;

    let scenario = scenario_for(&cfg, &dataset)?;
    let ev = &cfg.evaluation;
    let map = error_map(&trained, &scenario, ev.grid_step, ev.samples_per_cell, ev.map_seed)?;
    let mut w = create(&common.out.join("error_map.csv"))?;
    report::write_error_map_csv(&mut w, &map)?;
    w.flush()?;

    write_svg(common, "ecdf.svg", &report::ecdf_svg(&[(method.name().to_string(), run.report.ecdf.clone())]))?;
    write_svg(common, "selection_freq.svg", &report::frequency_svg(&freq))?;
    write_svg(common, "error_map.svg", &report::error_map_svg(&map))?;
    print_summary(std::slice::from_ref(&summary))
}

fn cmd_report(common: &Common, dataset_path: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.evaluation.seeds = vec![seed];
    }
    let dataset = load_dataset(dataset_path)?;
    let ev = &cfg.evaluation;
    let cmp = compare_methods(&dataset, &ev.methods, &cfg.training, &ev.seeds, &ev.percentiles)?;

    let mut w = create(&common.out.join("summary.csv"))?;
    report::write_summary_csv(&mut w, &cmp.summaries)?;
    w.flush()?;
    let mut series = Vec::new();
    for &method in &ev.methods {
        // ECDF of the first seed per method.
        if let Some(run) = cmp.runs.iter().find(|r| r.method == method) {
            let mut w = create(&common.out.join(format!("ecdf_{}.csv", method.name())))?;
            report::write_ecdf_csv(&mut w, &run.report.ecdf)?;
            w.flush()?;
            series.push((method.name().to_string(), run.report.ecdf.clone()));
        }
    }
    write_svg(common, "ecdf.svg", &report::ecdf_svg(&series))?;

    let selections: Vec<Vec<usize>> =
        cmp.runs.iter().filter(|r| r.method == Method::Rsd).map(|r| r.selection.clone()).collect();
    if !selections.is_empty() {
        let freq = selection_frequency(&selections, ev.top_k)?;
        let mut w = create(&common.out.join("selection_freq.csv"))?;
        report::write_selection_freq_csv(&mut w, &freq)?;
        w.flush()?;
        write_svg(common, "selection_freq.svg", &report::frequency_svg(&freq))?;
    }
    print_summary(&cmp.summaries)
}
