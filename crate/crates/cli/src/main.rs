use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vine::config::{Config, SEED_ENV};
use vine::episodes::{sample_spec, write_manifest, write_pgm, Split};
use vine::exec::Execution;
use vine::params::VineParams;
use vine::train::{self, StepMetrics};
use vine::{Result, VineError};

#[derive(Parser, Debug)]
#[command(name = "vine", version, about = "Few-shot segmentation on synthetic shape episodes")]
#[command(after_help = config_help())]
struct Cli {
    /// Run evaluation and ablation runs on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an episode manifest and optionally PGM renders.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Seed of the manifest stream (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = Split::Base)]
        split: Split,
        /// Also export every support and query image and mask as PGM.
        #[arg(long)]
        pgm: bool,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Per-step metrics log: `step loss proto_loss pred_loss miou lr`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out novel-class episodes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Defaults to `data.eval_view_shift`.
        #[arg(long)]
        view_shift: Option<f64>,
        /// Directory for predicted masks and prior maps as PGM.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every parameter.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate all six component variants.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn config_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let rows = Config::documented_defaults();
        let width = rows.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (key = default):\n");
        for (key, default, doc) in rows {
            let default = if default.is_empty() { "\"\"".to_string() } else { default };
            s.push_str(&format!("  {key:width$} = {default:<10} {doc}\n"));
        }
        s.push_str(&format!("\n{SEED_ENV} overrides `seed` when set."));
        s
    })
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| VineError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| VineError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_pgm_file(path: &Path, t: &vine::Tensor) -> Result<()> {
    let mut w = create(path)?;
    write_pgm(&mut w, t)?;
    w.flush()?;
    Ok(())
}

fn gen_data(cfg: &Config, out: &Path, count: usize, seed: u64, split: Split, pgm: bool) -> Result<()> {
    create_dir(out)?;
    let shift = match split {
        Split::Base => cfg.train_view_shift,
        Split::Novel => cfg.eval_view_shift,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = (0..count)
        .map(|_| sample_spec(split, cfg.k_shot, shift, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.txt");
    let mut w = create(&manifest)?;
    write_manifest(&mut w, &specs)?;
    w.flush()?;
    if pgm {
        let ec = train::episode_config(cfg);
        for (i, spec) in specs.iter().enumerate() {
            let ep = spec.generate(&ec)?;
            for (s, (img, mask)) in ep.supports.iter().enumerate() {
                write_pgm_file(&out.join(format!("{i:05}_support{s}.pgm")), img)?;
                write_pgm_file(&out.join(format!("{i:05}_support{s}_mask.pgm")), mask)?;
            }
            write_pgm_file(&out.join(format!("{i:05}_query.pgm")), &ep.query_image)?;
            write_pgm_file(&out.join(format!("{i:05}_query_mask.pgm")), &ep.query_mask)?;
        }
    }
    println!("wrote {} episodes to {}", specs.len(), manifest.display());
    Ok(())
}

fn run_train(cfg: &Config, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let mut log = log_path.map(create).transpose()?;
    let mut io_err = None;
    let params = train::train(cfg, |m: &StepMetrics| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{m}") {
                io_err.get_or_insert(e);
            }
        }
        if (m.step + 1).is_multiple_of(100) {
            log::info!("{m}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let mut w = create(out)?;
    params.write_checkpoint(&mut w, &cfg.render())?;
    w.flush()?;
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

fn read_params(path: &Path) -> Result<VineParams> {
    let mut f = File::open(path).map(io::BufReader::new).map_err(|source| VineError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(VineParams::read_checkpoint(&mut f)?.0)
}

fn run_eval(cfg: &Config, ckpt: &Path, episodes: usize, shift: f64, dump: Option<&Path>, exec: Execution) -> Result<()> {
    let params = read_params(ckpt)?;
    let expected = vine::model::init_params(cfg)?;
    for (path, t) in expected.iter() {
        match params.get(path) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(VineError::Format {
                    what: "checkpoint",
                    msg: format!("parameter {path} is missing or has the wrong shape for this config"),
                })
            }
        }
    }
    let specs = train::eval_specs(cfg, episodes, shift)?;
    let items = train::evaluate_items(&params, cfg, &specs, exec)?;
    if let Some(dir) = dump {
        create_dir(dir)?;
        for (i, it) in items.iter().enumerate() {
            write_pgm_file(&dir.join(format!("{i:05}_pred.pgm")), &it.pred_mask)?;
            if let Some(prior) = &it.disc_prior {
                write_pgm_file(&dir.join(format!("{i:05}_prior.pgm")), prior)?;
            }
        }
    }
    let r = train::summarize(&items);
    println!("episodes\t{}", items.len());
    println!("view_shift\t{shift}");
    println!("miou\t{:.6}", r.miou);
    println!("fg_iou\t{:.6}", r.fg_iou);
    println!("precision\t{:.6}", r.precision);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
            split,
            pgm,
        } => {
            let cfg = load_config(config.as_deref())?;
            gen_data(&cfg, &out, count, seed.unwrap_or(cfg.seed), split, pgm)?;
        }
        Command::Train {
            config,
            out_checkpoint,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            run_train(&cfg, &out_checkpoint, log.as_deref())?;
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            view_shift,
            dump_masks,
        } => {
            let cfg = load_config(config.as_deref())?;
            let n = episodes.unwrap_or(cfg.eval_episodes);
            let shift = view_shift.unwrap_or(cfg.eval_view_shift);
            run_eval(&cfg, &checkpoint, n, shift, dump_masks.as_deref(), exec)?;
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(config.as_deref())?;
            let report = train::gradcheck_all(&cfg, None)?;
            print!("{report}");
            let failed = report.failures().count();
            println!("{} paths, {failed} failed, tolerance {:e}", report.entries.len(), report.tolerance);
            return Ok(failed == 0);
        }
        Command::Ablation { config, seeds } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", train::run_ablation_suite(&cfg, &seeds, exec)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
