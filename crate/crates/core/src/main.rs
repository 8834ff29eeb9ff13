use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use dail::agent::{self, DailAgent};
use dail::analysis::{self, AnalysisThresholds, DiscreteDist, SweepCell, SweepSettings};
use dail::config::RunConfig;
use dail::dataset::{self, OfflineDataset};
use dail::gridworld::{make_mapping, EnvConfig, Gridworld};
use dail::{DailError, Result};

#[derive(Parser)]
#[command(name = "dail", version, about = "Offline instruction-conditioned RL on a toy gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset.
    GenData {
        #[arg(long)]
        num_instructions: usize,
        #[arg(long, default_value_t = 0)]
        mapping_seed: u64,
        /// Defaults to 64 per instruction up to 8 instructions, else 1024.
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        success_ratio: f64,
        /// Collection seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expert demonstrations instead of the mixed-quality protocol.
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        env_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ablate_distributional: bool,
        #[arg(long)]
        ablate_alignment: bool,
    },
    /// Greedy success rate of a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Instruction-count sweep over algorithms and seeds.
    Sweep {
        /// Comma-separated instruction counts.
        #[arg(long, default_value = "1,2,4,8,16,32,64,128,256,512")]
        counts: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "baseline,dail")]
        algorithms: String,
        /// Worker threads; defaults to the number of logical CPUs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Skip cells already recorded as successful in the output table.
        #[arg(long)]
        resume: bool,
        /// JSON file with shared cell settings.
        #[arg(long)]
        settings: Option<PathBuf>,
        /// Overrides the per-cell gradient-step budget.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analysis artifacts for a trained run.
    Analyze {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Samples per distribution (mc-theorem).
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        /// States sampled for the disambiguation matrices.
        #[arg(long, default_value_t = 200)]
        n_states: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        d: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// SVG line plot of a sweep table.
    Plot {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Disambiguation,
    Embeddings,
    Silhouette,
    McTheorem,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| DailError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| DailError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    let out = s
        .split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| DailError::InvalidArgument(format!("bad {what} entry `{p}`"))))
        .collect::<Result<Vec<T>>>()?;
    if out.is_empty() {
        return Err(DailError::InvalidArgument(format!("{what} list is empty")));
    }
    Ok(out)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            num_instructions,
            mapping_seed,
            n_traj,
            success_ratio,
            seed,
            expert,
            env_config,
            out,
        } => {
            let cfg = match env_config {
                Some(p) => EnvConfig::load(&p)?,
                None => EnvConfig::default(),
            };
            let env = Gridworld::new(cfg)?;
            let mapping = make_mapping(num_instructions, mapping_seed)?;
            let n = n_traj.unwrap_or_else(|| dataset::default_dataset_size(num_instructions));
            let ds = if expert {
                dataset::collect_expert(&env, &mapping, n, seed)?
            } else {
                dataset::collect_mixed(&env, &mapping, n, success_ratio, seed)?
            };
            write(&out, &ds.to_jsonl())?;
            println!(
                "n_traj={} success_ratio={} out={}",
                ds.len(),
                ds.success_count() as f64 / ds.len() as f64,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            ablate_distributional,
            ablate_alignment,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.apply_env_overrides()?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if ablate_distributional {
                cfg.train.distributional = false;
            }
            if ablate_alignment {
                cfg.train.alignment = false;
            }
            let ds = dataset::load(&data)?;
            check_dataset(&cfg, &ds)?;
            let (agent, metrics) = agent::train_with_callback(&cfg.train, &ds, |row| {
                eprintln!(
                    "epoch {} l_tot={:.4} l_dist={:.4} l_c={:.4} l_cql={:.4} success={}",
                    row.epoch, row.l_tot, row.l_dist, row.l_c, row.l_cql, row.eval_success_rate
                );
            })?;
            let dir = cfg.out_dir.clone();
            agent.save(&dir, &ds.meta.env)?;
            write(&dir.join("config.json"), &(cfg.to_json_pretty() + "\n"))?;
            write(&dir.join("metrics.csv"), &metrics.to_csv())?;
            println!(
                "trained {} epochs ({}) final_success={} out={}",
                metrics.rows.len(),
                cfg.train.algorithm_name(),
                metrics.final_success.map_or("n/a".to_string(), |s| s.to_string()),
                dir.display()
            );
            Ok(())
        }
        Command::Eval { run, episodes, seed } => {
            let (agent, env_cfg) = DailAgent::load(&run)?;
            let env = Gridworld::new(env_cfg)?;
            let mapping = make_mapping(agent.num_instructions, agent.mapping_seed)?;
            let rate = analysis::evaluate(&agent, &env, &mapping, episodes, seed)?;
            println!("success_rate={rate}");
            Ok(())
        }
        Command::Sweep {
            counts,
            seeds,
            algorithms,
            jobs,
            resume,
            settings,
            steps,
            out,
        } => {
            let counts: Vec<usize> = parse_list("counts", &counts)?;
            let seeds: Vec<u64> = parse_list("seeds", &seeds)?;
            let algs: Vec<String> = parse_list("algorithms", &algorithms)?;
            let mut settings = match settings {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| DailError::Io { path: p.clone(), source: e })?;
                    serde_json::from_str::<SweepSettings>(&text)
                        .map_err(|e| DailError::Schema(format!("{}: {e}", p.display())))?
                }
                None => SweepSettings::default(),
            };
            if let Some(s) = steps {
                settings.steps = s;
            }
            settings.train.validate()?;
            let mut cells = Vec::new();
            for &count in &counts {
                for alg in &algs {
                    for &seed in &seeds {
                        cells.push(SweepCell {
                            count,
                            algorithm: alg.clone(),
                            seed,
                        });
                    }
                }
            }
            let csv_path = out.join("sweep.csv");
            let existing = if resume && csv_path.exists() {
                let text = std::fs::read_to_string(&csv_path).map_err(|e| DailError::Io {
                    path: csv_path.clone(),
                    source: e,
                })?;
                analysis::read_sweep_csv(&text)?
            } else {
                Vec::new()
            };
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            // rewrite the table after every cell so an interrupted sweep can resume
            let done = Mutex::new(existing.iter().filter(|r| r.is_ok()).cloned().collect::<Vec<_>>());
            let rows = analysis::ambiguity_sweep(&settings, &cells, jobs, &existing, |row| {
                eprintln!(
                    "count={} algorithm={} seed={} success={} status={}",
                    row.cell.count,
                    row.cell.algorithm,
                    row.cell.seed,
                    row.success.map_or(String::new(), |s| s.to_string()),
                    row.status
                );
                if let Ok(mut d) = done.lock() {
                    d.push(row.clone());
                    d.sort_by(|a, b| a.cell.cmp(&b.cell));
                    let _ = write(&csv_path, &analysis::sweep_csv(&d));
                }
            })?;
            write(&csv_path, &analysis::sweep_csv(&rows))?;
            write(&out.join("plot.svg"), &analysis::sweep_plot_svg(&rows))?;
            for (alg, count, mean) in analysis::aggregate(&rows) {
                println!("{alg} count={count} mean_success={mean}");
            }
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            if failed > 0 {
                return Err(DailError::InvalidArgument(format!("{failed} sweep cells failed")));
            }
            Ok(())
        }
        Command::Analyze {
            run,
            mode,
            n,
            trials,
            n_states,
            delta,
            d,
            seed,
        } => {
            let thresholds = AnalysisThresholds {
                delta,
                d,
                ..AnalysisThresholds::default()
            };
            if let Mode::McTheorem = mode {
                // equal means, different shapes: a fair coin on -1/+1 versus 0
                let a = DiscreteDist::new(vec![-1.0, 1.0], vec![0.5, 0.5])?;
                let b = DiscreteDist::point(0.0);
                let r = analysis::mc_theorem_check(|g| a.sample(g), |g| b.sample(g), n, trials, thresholds, seed)?;
                println!("w1_detect_rate={}", r.w1_detect_rate);
                println!("mean_detect_rate={}", r.mean_detect_rate);
                return Ok(());
            }
            let run = run.ok_or_else(|| DailError::InvalidArgument("--run is required for this mode".into()))?;
            let (agent, env_cfg) = DailAgent::load(&run)?;
            let env = Gridworld::new(env_cfg)?;
            let mapping = make_mapping(agent.num_instructions, agent.mapping_seed)?;
            match mode {
                Mode::Disambiguation => {
                    let report = analysis::disambiguation_report(&agent, &env, &mapping, thresholds, n_states, seed)?;
                    let path = run.join("disambiguation.csv");
                    write(&path, &report.to_csv())?;
                    println!("wrote {}", path.display());
                }
                Mode::Embeddings => {
                    let path = run.join("embeddings.csv");
                    write(&path, &analysis::embeddings_csv(&agent, &mapping)?)?;
                    println!("wrote {}", path.display());
                }
                Mode::Silhouette => {
                    println!("silhouette={}", analysis::instruction_silhouette(&agent, &mapping)?);
                }
                Mode::McTheorem => unreachable!("handled above"),
            }
            Ok(())
        }
        Command::Plot { sweep, out } => {
            let text = std::fs::read_to_string(&sweep).map_err(|e| DailError::Io { path: sweep.clone(), source: e })?;
            let rows = analysis::read_sweep_csv(&text)?;
            write(&out, &analysis::sweep_plot_svg(&rows))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// The config must describe the dataset it is trained on.
fn check_dataset(cfg: &RunConfig, ds: &OfflineDataset) -> Result<()> {
    if cfg.data.num_instructions != ds.meta.num_instructions {
        return Err(DailError::InvalidArgument(format!(
            "config expects {} instructions, dataset has {}",
            cfg.data.num_instructions, ds.meta.num_instructions
        )));
    }
    if cfg.env != ds.meta.env {
        return Err(DailError::InvalidArgument("config env differs from the dataset's env".into()));
    }
    Ok(())
}
