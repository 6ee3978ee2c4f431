use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use phlight::agent::{Agent, MaskStrategy, Transition};
use phlight::config::Config;
use phlight::control::Variant;
use phlight::metrics;
use phlight::scenario::{generate_grid, load_scenario, Scenario};
use phlight::sim::run_episode;
use phlight::train::{self, Baseline, EvalSummary, Subject, TrainError};

/// Output directory override.
const OUT_ENV: &str = "PHLIGHT_OUT";

#[derive(Parser)]
#[command(name = "phlight", version, about = "Hybrid-action actor-critic traffic signal control")]
struct Cli {
    /// TOML config with [sim], [agent], [train] and [variant] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long, requires = "flow")]
    roadnet: Option<PathBuf>,
    #[arg(long, requires = "roadnet")]
    flow: Option<PathBuf>,
    /// Generated grid as ROWSxCOLS when no files are given.
    #[arg(long, default_value = "1x1")]
    grid: String,
    /// Total arrivals per hour for the generated grid.
    #[arg(long, default_value_t = 3000.0)]
    demand: f64,
    #[arg(long, default_value_t = 300.0)]
    link_length: f64,
    #[arg(long, default_value_t = 1)]
    scenario_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Online,
    Offline,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one episode with a baseline or a checkpoint and write its log.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum, default_value = "fixed-time", conflicts_with = "checkpoint")]
        controller: Baseline,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write roadnet.json and flow.json for a synthetic grid.
    GenerateGrid {
        #[arg(long, default_value_t = 1)]
        rows: usize,
        #[arg(long, default_value_t = 1)]
        cols: usize,
        #[arg(long, default_value_t = 300.0)]
        link_length: f64,
        #[arg(long, default_value_t = 3000.0)]
        demand: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Fill a dataset with random-policy transitions.
    Collect {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Episodes, defaults to train.collect_episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Online or offline training with per-episode checkpoints and metrics
    Train {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum, default_value = "online")]
        mode: Mode,
        #[arg(long, value_enum)]
        mask: Option<MaskStrategy>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Offline dataset from `collect`; collected on the fly when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Frozen-policy metrics over several seeds.
    Evaluate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Contribution matrices of one or more checkpoints.
    Diagnose {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Baselines and checkpoints side by side on the same seeds.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Diverged(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn out_dir() -> Result<PathBuf, Failure> {
    let dir = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("phlight-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn parse_grid(s: &str) -> Result<(usize, usize), Failure> {
    let (r, c) = s.split_once('x').ok_or_else(|| Failure::Invalid(format!("grid must look like 2x2, got {s}")))?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

impl ScenarioArgs {
    fn load(&self, cfg: &Config, seed: u64) -> Result<Scenario, Failure> {
        match (&self.roadnet, &self.flow) {
            (Some(r), Some(f)) => Ok(load_scenario(r, f, cfg.train.phase_layout)?),
            _ => {
                let (rows, cols) = parse_grid(&self.grid)?;
                Ok(generate_grid(rows, cols, self.link_length, self.demand, seed)?)
            }
        }
    }

    /// One scenario per seed: regenerated flows for grids, the same files otherwise.
    fn per_seed(&self, cfg: &Config, seeds: &[u64]) -> Result<Vec<(u64, Scenario)>, Failure> {
        seeds.iter().map(|&s| Ok((s, self.load(cfg, s)?))).collect()
    }
}

fn load_agent(path: &Path) -> Result<Agent, Failure> {
    Ok(Agent::load(path)?.0)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_summaries(rows: &[EvalSummary], out: &Path, hash: &str, file: &str) -> Result<(), Failure> {
    let mut csv = String::from("name,seed,att,datt,dar,config_hash\n");
    for s in rows {
        println!("{}", s.line());
        for r in &s.rows {
            csv.push_str(&format!("{},{},{},{},{},{}\n", s.name, r.seed, r.att, r.datt, r.dar, hash));
        }
    }
    write(&out.join(file), &csv)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let out = out_dir()?;
    match cli.cmd {
        Cmd::GenerateGrid { rows, cols, link_length, demand, seed } => {
            let sc = generate_grid(rows, cols, link_length, demand, seed)?;
            sc.save(&out.join("roadnet.json"), &out.join("flow.json"))?;
            println!("{} intersections, {} trips -> {}", sc.network.intersections.len(), sc.flow.len(), out.display());
        }
        Cmd::Simulate { scenario, controller, checkpoint, seed } => {
            let sc = scenario.load(&cfg, scenario.scenario_seed)?;
            let log = match &checkpoint {
                Some(p) => train::evaluate_agent(&load_agent(p)?, &sc, &cfg)?,
                None => run_episode(&sc, controller.controller(&cfg, seed).as_mut(), cfg.train.horizon, cfg.sim)?,
            };
            let m = metrics::EpisodeMetrics::of(&log);
            println!("att {:.2} datt {:.2} dar {:.3} vehicles {}", m.att, m.datt, m.dar, m.vehicles);
            write(&out.join("episode.jsonl"), &log.to_jsonl())?;
        }
        Cmd::Collect { scenario, episodes } => {
            let sc = scenario.load(&cfg, scenario.scenario_seed)?;
            let n = episodes.unwrap_or(cfg.train.collect_episodes);
            let (data, decisions) = train::collect_random(&sc, &cfg, n)?;
            let mut text = String::new();
            for t in &data {
                text.push_str(&serde_json::to_string(t)?);
                text.push('\n');
            }
            println!("{n} episodes, {decisions} decisions, {} transitions", data.len());
            write(&out.join("dataset.jsonl"), &text)?;
        }
        Cmd::Train { scenario, mode, mask, variant, dataset, seed } => {
            if let Some(m) = mask {
                cfg.agent.mask = m;
            }
            if let Some(v) = variant {
                cfg.variant.variant = v;
            }
            if let Some(s) = seed {
                cfg.agent.seed = s;
                cfg.train.seed = s;
            }
            cfg = cfg.resolved();
            cfg.validate()?;
            let sc = scenario.load(&cfg, scenario.scenario_seed)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let result = match mode {
                Mode::Online => train::train_online(&sc, &cfg, Some(&out)),
                Mode::Offline => {
                    let data = match &dataset {
                        Some(p) => read_dataset(p)?,
                        None => train::collect_random(&sc, &cfg, cfg.train.collect_episodes)?.0,
                    };
                    train::train_offline(&sc, &cfg, data, Some(&out))
                }
            };
            let report = match result {
                Ok(r) => r,
                Err(e @ TrainError::Diverged { .. }) => return Err(Failure::Diverged(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            if let Some(best) = report.best() {
                println!("best episode {} att {:.2}", best.episode, best.att);
            }
            let n = cfg.train.report_last.min(report.rows.len());
            println!("last {n} episodes: att {:.2}", report.last_mean_att(n));
            println!("metrics and checkpoints in {}", out.display());
        }
        Cmd::Evaluate { scenario, checkpoint, baseline, variant, seeds } => {
            if let Some(v) = variant {
                cfg.variant.variant = v;
            }
            let runs = scenario.per_seed(&cfg, &seeds)?;
            let agent = checkpoint.as_deref().map(load_agent).transpose()?;
            let subject = match (&agent, baseline) {
                (Some(a), _) => Subject::Agent(a),
                (None, Some(b)) => Subject::Baseline(b),
                (None, None) => return Err(Failure::Invalid("give --checkpoint or --baseline".into())),
            };
            let s = train::evaluate(&subject, &runs, &cfg)?;
            print_summaries(&[s], &out, &cfg.hash(), "evaluation.csv")?;
        }
        Cmd::Diagnose { scenario, checkpoint, samples } => {
            let sc = scenario.load(&cfg, scenario.scenario_seed)?;
            let agents: Vec<Agent> = checkpoint.iter().map(|p| load_agent(p)).collect::<Result<_, _>>()?;
            let log = train::evaluate_agent(&agents[0], &sc, &cfg)?;
            let n = samples.min(log.decisions.len()).max(1);
            let states: Vec<_> =
                (0..n).filter_map(|i| log.decisions.get(i * log.decisions.len() / n).map(|d| d.observation.clone())).collect();
            let mut all = Vec::new();
            for (p, a) in checkpoint.iter().zip(&agents) {
                let c = train::diagnose(a, &states)?;
                println!("{}: mean diagonal {:.3} ({} skipped)", p.display(), c.mean_diagonal(), c.skipped);
                all.push(serde_json::json!({ "checkpoint": p, "matrix": c.matrix, "mean_diag": c.mean_diagonal(), "skipped": c.skipped }));
            }
            write(&out.join("contributions.json"), &serde_json::to_string_pretty(&all)?)?;
        }
        Cmd::Compare { scenario, checkpoint, seeds } => {
            let runs = scenario.per_seed(&cfg, &seeds)?;
            let mut rows = Vec::new();
            for b in [Baseline::FixedTime, Baseline::MaxPressure] {
                rows.push(train::evaluate(&Subject::Baseline(b), &runs, &cfg)?);
            }
            for p in &checkpoint {
                let a = load_agent(p)?;
                let mut s = train::evaluate(&Subject::Agent(&a), &runs, &cfg)?;
                s.name = p.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or(s.name);
                rows.push(s);
            }
            print_summaries(&rows, &out, &cfg.hash(), "comparison.csv")?;
        }
    }
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Vec<Transition>, Failure> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::Invalid(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
