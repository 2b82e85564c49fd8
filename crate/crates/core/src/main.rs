use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphbert::event::{load_corpus, load_instances, write_corpus, write_instances, EventChain};
use graphbert::experiments::{
    bench_data, correlate_experiment, correlation_report, instances, layer_grid, sparsity_experiment, sweep_lambda,
    sweep_layers, BenchConfig, CorrelationReport, ExperimentReport, Reference, RunCache,
};
use graphbert::graph::{build_graph, EventGraph};
use graphbert::synth::SynthWorld;
use graphbert::training::{evaluate, metrics_jsonl, Checkpoint, Trainer};
use graphbert::Error;

#[derive(Parser)]
#[command(name = "graphbert", version, about = "Event-graph-supervised transformer for next-event prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<BenchConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => BenchConfig::load(p)?,
            None => BenchConfig::default(),
        };
        let pairs = self
            .overrides
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        cfg.apply(pairs)?;
        cfg.train.validate()?;
        cfg.data.validate(&cfg.world()?)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Count event bigrams of a corpus into a graph snapshot.
    BuildGraph {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic world, its corpora and multiple-choice sets.
    SynthGen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model; synthetic data unless --train/--dev are given.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Training instances (JSON lines).
        #[arg(long, requires_all = ["dev", "graph"])]
        train: Option<PathBuf>,
        /// Development instances (JSON lines).
        #[arg(long, requires = "train")]
        dev: Option<PathBuf>,
        /// Graph snapshot for --train data.
        #[arg(long, requires = "train")]
        graph: Option<PathBuf>,
        /// Continue from an epoch-boundary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a multiple-choice set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per (λ, seed) on the synthetic benchmark.
    SweepLambda {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.1, 0.5, 5.0])]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
    },
    /// One run per (s0, s1, seed) on the synthetic benchmark.
    SweepLayers {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Pairs as s0:s1, comma separated; all valid pairs by default.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Accuracy of both variants as the uncovered fraction grows.
    Sparsity {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Predicted-vs-reference link correlation bucketed by quintile.
    Correlate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        /// Analyse an existing checkpoint instead of training.
        #[arg(long, requires_all = ["data", "graph"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        graph: Option<PathBuf>,
        /// World descriptor; compares against its true transition rows
        /// instead of tutor matrices.
        #[arg(long, requires = "checkpoint")]
        world: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::Data(Error::io(path, e)))
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(Error::io(dir, e)))
}

fn print_summary(report: &ExperimentReport) {
    println!("{:<32} {:<16} {:>10} {:>10} {:>4}", "condition", "metric", "mean", "std", "n");
    for s in report.summary() {
        println!(
            "{:<32} {:<16} {:>10.4} {:>10.4} {:>4}",
            s.condition, s.metric, s.mean, s.std, s.n
        );
    }
}

fn write_correlation(report: &CorrelationReport, out: &Path) -> Result<(), CliError> {
    report.per_instance.write(out)?;
    report.quintiles.write(out)?;
    print_summary(&report.quintiles);
    Ok(())
}

fn parse_pair(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("layer pair {s:?} is not s0:s1"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildGraph { corpus, out } => {
            let c = load_corpus(&corpus)?;
            let g = build_graph(&c.chains)?;
            g.save(&out)?;
            println!(
                "chains {} (dropped {}), nodes {}, edges {}",
                c.chains.len(),
                c.dropped,
                g.num_nodes(),
                g.num_edges()
            );
        }
        Command::SynthGen { config, out, seed } => {
            let cfg = config.load()?;
            let world = cfg.world()?;
            let (data, dev) = bench_data(&cfg, &world, seed)?;
            mkdir(&out)?;
            world.save_json(out.join("world.json"))?;
            write_corpus(&data.train_chains, out.join("train_chains.txt"))?;
            let eval_chains = data
                .eval
                .iter()
                .map(|s| EventChain::new(s.inst.sequence(s.inst.gold())))
                .collect::<graphbert::Result<Vec<_>>>()?;
            write_corpus(&eval_chains, out.join("eval_chains.txt"))?;
            write_instances(&instances(&data.train), out.join("train.jsonl"))?;
            write_instances(&instances(&dev), out.join("dev.jsonl"))?;
            write_instances(&instances(&data.eval), out.join("eval.jsonl"))?;
            data.graph.save(out.join("graph.bin"))?;
            println!(
                "world {} latents x {} variants; train {}, dev {}, eval {}; graph {} nodes",
                world.n_latent,
                world.n_variants,
                data.train.len(),
                dev.len(),
                data.eval.len(),
                data.graph.num_nodes()
            );
        }
        Command::Train {
            config,
            out,
            seed,
            train,
            dev,
            graph,
            resume,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let (train_set, dev_set, g, test) = match (train, dev, graph) {
                (Some(t), Some(d), Some(g)) => (load_instances(t)?, load_instances(d)?, EventGraph::load(g)?, None),
                (None, None, None) => {
                    let world = cfg.world()?;
                    let (data, dev) = bench_data(&cfg, &world, cfg.train.seed)?;
                    (instances(&data.train), instances(&dev), data.graph, Some(instances(&data.eval)))
                }
                _ => return Err(CliError::Usage("--train, --dev and --graph go together".into())),
            };
            mkdir(&out)?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&Checkpoint::load(p)?, &train_set, &dev_set, &g)?,
                None => Trainer::new(&cfg.train, &train_set, &dev_set, &g)?,
            };
            while trainer.epoch() < cfg.train.epochs {
                let m = trainer.run_epoch()?;
                println!(
                    "epoch {} l_pred {:.4} l_rec {} dev_acc {:.4}",
                    m.epoch,
                    m.l_pred.unwrap_or(f64::NAN),
                    m.l_rec.map_or("-".to_owned(), |v| format!("{v:.4}")),
                    m.dev_accuracy
                );
                trainer.checkpoint().save(out.join("checkpoint.bin"))?;
            }
            let ckpt = trainer.checkpoint();
            ckpt.save(out.join("checkpoint.bin"))?;
            write(&out.join("metrics.jsonl"), metrics_jsonl(&ckpt.metrics))?;
            write(&out.join("vocab.txt"), ckpt.vocab.to_text())?;
            write(
                &out.join("config.json"),
                serde_json::to_string_pretty(&cfg).expect("config serializes"),
            )?;
            g.save(out.join("graph.bin"))?;
            println!("best dev accuracy {:.4} at epoch {}", ckpt.best_dev_accuracy, ckpt.best_epoch);
            if let Some(test) = test {
                write_instances(&test, out.join("eval.jsonl"))?;
                println!("test accuracy {:.4}", evaluate(&ckpt, &test, &g)?.accuracy);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            graph,
            out,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let set = load_instances(data)?;
            let g = EventGraph::load(graph)?;
            let r = evaluate(&ckpt, &set, &g)?;
            println!("accuracy {:.4} over {} instances, mean l_pred {:.4}", r.accuracy, set.len(), r.mean_l_pred);
            if let Some(out) = out {
                mkdir(&out)?;
                let mut body = String::new();
                for rec in &r.records {
                    body.push_str(
                        &serde_json::json!({"chosen": rec.chosen, "gold": rec.gold, "scores": rec.scores}).to_string(),
                    );
                    body.push('\n');
                }
                write(&out.join("predictions.jsonl"), body)?;
            }
        }
        Command::SweepLambda {
            config,
            out,
            lambdas,
            seeds,
        } => {
            let mut cache = RunCache::new(&config.load()?)?;
            let report = sweep_lambda(&mut cache, &lambdas, &seeds)?;
            report.write(&out)?;
            print_summary(&report);
        }
        Command::SweepLayers {
            config,
            out,
            pairs,
            seeds,
        } => {
            let cfg = config.load()?;
            let pairs = if pairs.is_empty() {
                layer_grid(cfg.train.model.encoder.layers)
            } else {
                pairs.iter().map(|p| parse_pair(p)).collect::<Result<_, _>>()?
            };
            let mut cache = RunCache::new(&cfg)?;
            let report = sweep_layers(&mut cache, &pairs, &seeds)?;
            report.write(&out)?;
            print_summary(&report);
        }
        Command::Sparsity {
            config,
            out,
            fractions,
            seeds,
        } => {
            let cfg = config.load()?;
            let lambda = cfg.train.loss.lambda;
            let mut cache = RunCache::new(&cfg)?;
            let report = sparsity_experiment(&mut cache, lambda, &fractions, &seeds)?;
            report.write(&out)?;
            print_summary(&report);
        }
        Command::Correlate {
            config,
            out,
            seeds,
            checkpoint,
            data,
            graph,
            world,
        } => {
            let cfg = config.load()?;
            let report = match (checkpoint, data, graph) {
                (Some(c), Some(d), Some(g)) => {
                    let ckpt = Checkpoint::load(c)?;
                    let set = load_instances(d)?;
                    let g = EventGraph::load(g)?;
                    let w = world.map(SynthWorld::load_json).transpose()?;
                    let reference = match &w {
                        Some(w) => Reference::World(w),
                        None => Reference::Tutor {
                            graph: &g,
                            epsilon: ckpt.config.epsilon_smoothing,
                        },
                    };
                    let seed = ckpt.config.seed;
                    correlation_report(&ckpt, &set, &g, &reference, &cfg, seed)?
                }
                (None, None, None) => {
                    let lambda = cfg.train.loss.lambda;
                    correlate_experiment(&mut RunCache::new(&cfg)?, lambda, &seeds)?
                }
                _ => return Err(CliError::Usage("--checkpoint, --data and --graph go together".into())),
            };
            write_correlation(&report, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
