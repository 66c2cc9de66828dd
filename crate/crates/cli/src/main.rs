use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use placerec_core::bench::attention_scaling;
use placerec_core::config::KvConfig;
use placerec_core::dataio::{generate_synthetic, PlaceDataset, SceneRecipe};
use placerec_core::eval::{build_db, evaluate, run_ablation, DescriptorDb, Protocol};
use placerec_core::model::{Model, ModelConfig};
use placerec_core::params::ParamStore;
use placerec_core::suite::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use placerec_core::training::{train, TrainConfig};
use placerec_core::Error;

/// Sparse-voxel place recognition: data generation, training and retrieval.
#[derive(Parser, Debug)]
#[command(name = "placerec", version)]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `data.seed` and `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic place dataset into `<out>/data`.
    GenData,
    /// Train a model and write `<out>/model.ckpt` and `<out>/train.log`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every module.
    Gradcheck {
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Describe database and query scans into `<out>/db.gdb` and `<out>/queries.gdb`.
    BuildDb {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieval recall of the query descriptors against the database.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Train and evaluate model variants under identical seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "baseline,no_arfm")]
        variants: Vec<String>,
    },
    /// Time external attention against quadratic self-attention.
    BenchAttention {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

/// Every section of the configuration, parsed up front so unknown keys
/// are reported before any work starts.
struct Settings {
    recipe: SceneRecipe,
    model: ModelConfig,
    train: TrainConfig,
    protocol: Protocol,
}

impl Settings {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Error> {
        let mut kv = match path {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        if let Some(s) = seed {
            kv.set("data.seed", s);
            kv.set("train.seed", s);
        }
        let settings = Self {
            recipe: SceneRecipe::from_kv(&mut kv)?,
            model: ModelConfig::from_kv(&mut kv)?,
            train: TrainConfig::from_kv(&mut kv)?,
            protocol: Protocol::from_kv(&mut kv)?,
        };
        kv.finish()?;
        Ok(settings)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn data_dir(out: &Path, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| out.join("data"))
}

fn load_model(cfg: &ModelConfig, path: &Path) -> Result<Model<f64>, Error> {
    let expected = cfg.init_params::<f64>(0)?;
    let params = ParamStore::load_matching(path, &expected)?;
    Model::with_params(cfg.clone(), params)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let s = Settings::load(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::GenData => {
            let ds = generate_synthetic(&s.recipe)?;
            ds.save(&out.join("data"))?;
            println!("wrote {} places, {} scans to {}", ds.places.len(), ds.scan_count(), out.join("data").display());
        }
        Command::Train { data } => {
            let ds = PlaceDataset::load(&data_dir(out, data))?;
            let scans = ds.scans(Some(&s.protocol.train_traversals));
            let mut model = Model::<f64>::new(s.model.clone(), s.train.seed)?;
            let mut log = fs::File::create(out.join("train.log"))?;
            writeln!(log, "epoch\tloss\tactive_fraction\tbatch_size\tlr")?;
            let mut io_err = None;
            train(&mut model, &scans, &s.train, |r| {
                let line = r.to_line();
                println!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            model.params.save(&out.join("model.ckpt"))?;
            fs::write(out.join("model.conf"), model.config.to_kv().to_text())?;
        }
        Command::Gradcheck { filter, tolerance, step } => {
            let results = suite::run(filter.as_deref(), s.train.seed, *tolerance, *step)?;
            let mut failed = 0;
            println!("case\tmax_rel_error\tstatus");
            for r in &results {
                let status = if r.report.passed { "ok" } else { "FAIL" };
                failed += usize::from(!r.report.passed);
                println!("{}\t{:.3e}\t{status}", r.name, r.report.max_rel_error);
            }
            println!("{} cases, {failed} failed", results.len());
            if failed > 0 {
                return Ok(3);
            }
        }
        Command::BuildDb { data, checkpoint } => {
            let ds = PlaceDataset::load(&data_dir(out, data))?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let model = load_model(&s.model, &ckpt)?;
            let db = build_db(&model, &ds.scans(Some(&s.protocol.db_traversals)))?;
            let queries = build_db(&model, &ds.scans(Some(&s.protocol.query_traversals)))?;
            db.save(&out.join("db.gdb"))?;
            queries.save(&out.join("queries.gdb"))?;
            println!("database {} entries, queries {} entries", db.len(), queries.len());
        }
        Command::Eval { data, db, queries } => {
            let ds = PlaceDataset::load(&data_dir(out, data))?;
            let mut db = DescriptorDb::load(&db.clone().unwrap_or_else(|| out.join("db.gdb")))?;
            let mut q = DescriptorDb::load(&queries.clone().unwrap_or_else(|| out.join("queries.gdb")))?;
            db.attach_positions(&ds)?;
            q.attach_positions(&ds)?;
            let report = evaluate(&db, &q.entries, s.protocol.radius)?;
            let table = report.table();
            print!("{table}");
            fs::write(out.join("report.txt"), table)?;
            fs::write(out.join("recall.tsv"), report.records())?;
        }
        Command::Ablate { data, variants } => {
            let ds = PlaceDataset::load(&data_dir(out, data))?;
            let report = run_ablation(&s.model, &s.train, &ds, &s.protocol, variants, s.train.seed, |name, r| {
                println!("{name}\t{}", r.to_line());
            })?;
            let table = report.table();
            print!("{table}");
            fs::write(out.join("ablation.tsv"), table)?;
        }
        Command::BenchAttention { sizes, repeats } => {
            let report = attention_scaling(&s.model.transformer, sizes, *repeats, s.train.seed)?;
            let table = report.table();
            print!("{table}");
            fs::write(out.join("bench_attention.tsv"), table)?;
        }
    }
    Ok(0)
}
