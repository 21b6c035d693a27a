use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neucrowd::config::{self, FullConfig};
use neucrowd::crowd::Split;
use neucrowd::datagen::{self, WorkerParams};
use neucrowd::error::Error;
use neucrowd::eval;
use neucrowd::io;
use neucrowd::nn::Checkpoint;
use neucrowd::sampler::SamplerCheckpoint;
use neucrowd::trainer;

#[derive(Parser)]
#[command(name = "neucrowd", version, about = "Embedding learning from crowdsourced labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into a dataset directory.
    Generate(GenerateArgs),
    /// Train the embedding and sampling networks.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the majority-vote baseline) on a dataset.
    Eval(EvalArgs),
    /// Run every ablation flag combination over a list of seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Number of simulated crowd workers.
    #[arg(long, default_value_t = 7)]
    workers: usize,
    #[arg(long, default_value_t = 1200)]
    features: usize,
    /// train,validation,test sizes.
    #[arg(long, default_value = "800,200,500")]
    sizes: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated components to disable: SA,RA,SN.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// SRL checkpoint path; omit with --baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "NeuCrowd")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate the majority-vote logistic baseline on raw features.
    #[arg(long, default_value_t = false)]
    baseline: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

fn log_event(event: &str, detail: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "event": event, "detail": detail })
    );
}

fn load_config(path: Option<&Path>) -> Result<FullConfig, Error> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            config::parse_config_bytes(&bytes)
        }
        None => Ok(config::default_config()),
    }
}

fn load_splits(
    dir: &Path,
) -> Result<(io::Manifest, neucrowd::crowd::Dataset, neucrowd::crowd::Dataset, neucrowd::crowd::Dataset), Error> {
    let manifest = io::load_manifest(dir)?;
    let train = io::load_split(dir, &manifest, Split::Train)?;
    let validation = io::load_split(dir, &manifest, Split::Validation)?;
    let test = io::load_split(dir, &manifest, Split::Test)?;
    Ok((manifest, train, validation, test))
}

fn manifest_hash(dir: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(dir.join(io::MANIFEST_FILE))?;
    Ok(eval::fingerprint(&bytes))
}

fn parse_seed_list(raw: &str) -> Result<Vec<u64>, Error> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad seed {s:?}")))
        })
        .collect()
}

fn run_generate(args: &GenerateArgs) -> Result<(), Error> {
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad split size {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if sizes.len() != 3 {
        return Err(Error::Usage("--sizes expects train,validation,test".into()));
    }
    let mut full = config::default_config();
    full.synth.n_features = args.features;
    full.synth.train_size = sizes[0];
    full.synth.validation_size = sizes[1];
    full.synth.test_size = sizes[2];
    full.synth.seed = args.seed;
    full.run.seed = args.seed;
    full.workers = args.workers;
    full.validate()?;
    log_event("generate", &format!("seed {} -> {}", args.seed, args.out.display()));
    let syn = datagen::generate_syn(&full.synth, full.workers, &WorkerParams::default())?;
    io::save_splits(
        &args.out,
        args.seed,
        &[
            (Split::Train, &syn.train),
            (Split::Validation, &syn.validation),
            (Split::Test, &syn.test),
        ],
    )?;
    io::write_atomic(
        &args.out.join("config.snapshot"),
        config::snapshot(&full).as_bytes(),
    )?;
    Ok(())
}

fn apply_ablate_flags(config: &mut FullConfig, spec: &str) -> Result<(), Error> {
    for part in spec.split(',') {
        match part.trim().to_ascii_uppercase().as_str() {
            "" => {}
            "SA" => config.run.use_sa = false,
            "RA" => config.run.use_ra = false,
            "SN" => config.run.use_sn = false,
            other => return Err(Error::Usage(format!("unknown ablation component {other:?}"))),
        }
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let mut full = load_config(args.config.as_deref())?;
    if let Some(spec) = &args.ablate {
        apply_ablate_flags(&mut full, spec)?;
    }
    if let Some(seed) = args.seed {
        full.run.seed = seed;
        full.synth.seed = seed;
    }
    full.validate()?;
    let (_, train, validation, _) = load_splits(&args.data)?;
    log_event(
        "train",
        &format!("{} on {}", full.run.variant_name(), args.data.display()),
    );
    let outcome = trainer::train(&train, &validation, &full.run)?;
    io::write_atomic(
        &args.out.join("srl_checkpoint.json"),
        &Checkpoint::from_net(&outcome.srl).to_json(),
    )?;
    io::write_atomic(
        &args.out.join("sampler_checkpoint.json"),
        &SamplerCheckpoint::from_net(&outcome.sampler).to_json(),
    )?;
    io::write_atomic(&args.out.join("history.jsonl"), &outcome.history.to_jsonl())?;
    let mut safety = Vec::new();
    for report in &outcome.safety_reports {
        safety.extend(serde_json::to_vec(report).expect("safety report serializes"));
        safety.push(b'\n');
    }
    io::write_atomic(&args.out.join("safety.jsonl"), &safety)?;
    io::write_atomic(
        &args.out.join("config.snapshot"),
        config::snapshot(&full).as_bytes(),
    )?;
    log_event(
        "done",
        &format!("{} epochs -> {}", outcome.history.epochs.len(), args.out.display()),
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    let (_, train, validation, test) = load_splits(&args.data)?;
    let hash = manifest_hash(&args.data)?;
    let grid = eval::default_c_grid();
    let report = if args.baseline {
        eval::majority_vote_baseline(&train, &validation, &test, &grid, args.seed, &hash)?
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Usage("--checkpoint required unless --baseline".into()))?;
        let srl = Checkpoint::from_json(&std::fs::read(path)?)?.into_net()?;
        eval::evaluate_embedding_model(
            &srl,
            &train,
            &validation,
            &test,
            &grid,
            args.seed,
            &args.variant,
            &hash,
        )?
    };
    let mut bytes = serde_json::to_vec_pretty(&report).expect("metrics serialize");
    bytes.push(b'\n');
    io::write_atomic(&args.out, &bytes)?;
    log_event(
        "eval",
        &format!("acc {:.4} auc {:.4}", report.accuracy, report.auc),
    );
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<(), Error> {
    let full = load_config(args.config.as_deref())?;
    let seeds = parse_seed_list(&args.seeds)?;
    let (_, train, validation, test) = load_splits(&args.data)?;
    let hash = manifest_hash(&args.data)?;
    log_event("ablate", &format!("{} seeds on {}", seeds.len(), args.data.display()));
    let rows = eval::ablation_suite(&train, &validation, &test, &full.run, &seeds, &hash)?;
    let mut bytes = serde_json::to_vec_pretty(&rows).expect("ablation rows serialize");
    bytes.push(b'\n');
    io::write_atomic(&args.out.join("ablation.json"), &bytes)?;
    io::write_atomic(&args.out.join("ablation.csv"), &eval::ablation_csv(&rows))?;
    io::write_atomic(
        &args.out.join("config.snapshot"),
        config::snapshot(&full).as_bytes(),
    )?;
    Ok(())
}

fn main() -> ExitCode {
    // worker-parallelism cap; the pipeline is single-threaded, so any valid
    // value is honored trivially, but a malformed one is still an error
    if let Ok(raw) = std::env::var("NEUCROWD_THREADS") {
        if raw.parse::<usize>().map(|v| v == 0).unwrap_or(true) {
            eprintln!("error: NEUCROWD_THREADS must be a positive integer");
            return ExitCode::from(2);
        }
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => run_generate(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
