use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use recap_core::approx::Checkpoint;
use recap_core::baselines::BaselineMethod;
use recap_core::envs::TaskKind;
use recap_core::orchestrator::{
    collect_demos, compare, evaluate, pretrain, run_iterations, sft_finetune, write_metrics_csv,
    ArtifactEntry, DatasetEntry, DatasetStore, InterventionSource, Manifest, Pretrained,
    Provenance, RunConfig, Supervisor,
};
use recap_core::policy::PolicyNet;
use recap_core::ui::UiSession;
use recap_core::value::{Indicator, ThresholdTable};

#[derive(Parser)]
#[command(
    name = "recap",
    about = "Iterated advantage-conditioned offline RL on simulated tasks"
)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for datasets, checkpoints, metrics and the manifest.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Collect demonstrations for every configured task.
    Demos,
    /// Pretrain, fine-tune and iterate on one task, optionally with baselines.
    Run {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// Also train and evaluate the AWR and SPO baselines on the final data.
        #[arg(long)]
        baselines: bool,
        /// Take corrections from the intervention UI instead of the scripted gate.
        #[arg(long)]
        ui: bool,
    },
    /// Evaluate a stored policy checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum, default_value_t = Conditioning::Positive)]
        conditioning: Conditioning,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Conditioning {
    Positive,
    Negative,
    Absent,
}

impl From<Conditioning> for Indicator {
    fn from(c: Conditioning) -> Self {
        match c {
            Conditioning::Positive => Indicator::Positive,
            Conditioning::Negative => Indicator::Negative,
            Conditioning::Absent => Indicator::Absent,
        }
    }
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn demos(config: &RunConfig, out: &Path) -> Result<DatasetStore> {
    let path = out.join("demos.jsonl");
    if path.exists() {
        info!("loading demonstrations from {}", path.display());
        return Ok(DatasetStore::load_jsonl(&path)?);
    }
    let mut store = DatasetStore::new();
    for settings in &config.tasks {
        let eps = collect_demos(settings, config.seed)?;
        let ok = eps.iter().filter(|e| e.succeeded()).count();
        info!(
            "{}: {} demonstrations, {ok} successful",
            settings.task,
            eps.len()
        );
        store.extend(eps)?;
    }
    store.save_jsonl(&path)?;
    Ok(store)
}

fn save_checkpoint(
    manifest: &mut Manifest,
    out: &Path,
    name: &str,
    ckpt: &Checkpoint,
) -> Result<()> {
    let rel = format!("checkpoints/{name}.rcap");
    ckpt.write_file(out.join(&rel))?;
    manifest.record_checkpoint(ArtifactEntry {
        name: name.to_string(),
        path: rel,
        provenance: ckpt.provenance.clone(),
    });
    Ok(())
}

fn single_threshold(fraction: f64, task: TaskKind, epsilon: f64) -> ThresholdTable {
    let mut table = ThresholdTable::new(fraction);
    table.thresholds.insert(task, epsilon);
    table
}

fn run(
    config: &mut RunConfig,
    out: &Path,
    task: TaskKind,
    baselines: bool,
    ui: bool,
) -> Result<()> {
    fs::create_dir_all(out.join("checkpoints"))?;
    if ui {
        config.iteration.intervention_source = InterventionSource::Ui;
    }
    let settings = config.task(task)?.clone();
    let mut manifest = Manifest::new(config);
    let demos = demos(config, out)?;
    manifest.record_dataset(DatasetEntry {
        task,
        path: "demos.jsonl".into(),
        episodes: demos.len(),
    });

    let pre: Pretrained = pretrain(&demos, config)?;
    info!("pretrained; thresholds {:?}", pre.thresholds.thresholds);
    save_checkpoint(&mut manifest, out, "pretrain", &pre.checkpoint())?;
    manifest
        .thresholds
        .insert("pretrain".into(), pre.thresholds.clone());

    let task_demos = demos.for_task(task);
    let sft = sft_finetune(&pre.policy, &task_demos, &config.sft)?;
    let sft_ckpt = recap_core::orchestrator::checkpoint(&Provenance::sft(), None, Some(&sft));
    save_checkpoint(&mut manifest, out, &format!("{task}-sft"), &sft_ckpt)?;

    let mut session = if config.iteration.intervention_source == InterventionSource::Ui {
        let s = UiSession::bind(config.ui.clone())?;
        info!("intervention UI listening on ws://{}", s.local_addr()?);
        Some(s)
    } else {
        None
    };
    let run = run_iterations(
        &settings,
        &pre,
        &sft,
        &task_demos,
        config,
        session.as_mut().map(|s| s as &mut dyn Supervisor),
    )?;
    for r in &run.iterations {
        save_checkpoint(
            &mut manifest,
            out,
            &format!("{task}-recap-{}", r.k),
            &r.checkpoint(),
        )?;
        manifest.thresholds.insert(
            format!("recap-{}", r.k),
            single_threshold(config.iteration.positive_fraction, task, r.epsilon),
        );
    }
    let data_path = format!("{task}-data.jsonl");
    run.data.save_jsonl(out.join(&data_path))?;
    manifest.record_dataset(DatasetEntry {
        task,
        path: data_path,
        episodes: run.data.len(),
    });
    manifest.metrics = run.metrics.clone();

    if baselines {
        let cmp = compare(
            &run,
            &pre,
            &sft,
            &[BaselineMethod::Awr, BaselineMethod::Spo],
            config,
        )?;
        manifest.metrics.extend(cmp.baselines);
    }
    for m in &manifest.metrics {
        println!(
            "{:<24} success {:.3} ± {:.3}  throughput {:>8.1}/h  steps {:.1}",
            m.label, m.success_rate, m.success_stderr, m.throughput_per_hour, m.mean_steps
        );
    }
    write_metrics_csv(out.join("metrics.csv"), &manifest.metrics)?;
    manifest.metrics_csv = Some("metrics.csv".into());
    manifest.save(out.join("manifest.json"))?;
    info!("wrote {}", out.join("manifest.json").display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::Config => println!("{}", serde_json::to_string_pretty(&config)?),
        Command::Demos => {
            fs::create_dir_all(&cli.out)?;
            let store = demos(&config, &cli.out)?;
            println!(
                "{} demonstrations in {}",
                store.len(),
                cli.out.join("demos.jsonl").display()
            );
        }
        Command::Run {
            task,
            baselines,
            ui,
        } => run(&mut config, &cli.out, *task, *baselines, *ui)?,
        Command::Evaluate {
            checkpoint,
            task,
            episodes,
            beta,
            conditioning,
        } => {
            let ckpt = Checkpoint::read_file(checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let policy = PolicyNet::from_checkpoint(&ckpt)?;
            let mut sampling = config.evaluation.clone();
            if let Some(b) = beta {
                if *b < 1.0 {
                    bail!("beta must be >= 1");
                }
                sampling.beta = *b;
            }
            let init = config.task(*task)?.init;
            let (m, _) = evaluate(
                &ckpt.provenance,
                &policy,
                *task,
                init,
                *episodes,
                config.seed,
                &sampling,
                (*conditioning).into(),
                config.workers,
            )?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}
