//! Command-line front end: simulation, inference, fitting, the robot demo,
//! benchmarks, the acceptance checks and d-separation queries.
//!
//! Every table is written as comma-separated UTF-8 with a header row. Time
//! indices `t` start at 1; regimes start at 0; counts and durations start at 1.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::Rng;

use crate::approx::{inc_smooth_pruned, PruneConfig, PruneStrategy};
use crate::bn::{d_separated_named, Dag, Method};
use crate::chains::{sample_chain, substream, DurationModel, EdChain, Encoding, RegimeTransition, SigmaState};
use crate::config::{DurationSpec, EmissionSpec, Model, ModelConfig, TransitionSpec};
use crate::edmsm::{cd, dec, inc, EdOptions, EdPosterior, LgssmSegments, MarkovSegments};
use crate::edslgssm::smooth::filter_smooth;
use crate::edslgssm::{cd_viterbi, filter, simulate_robot_path, SlgssmParams, SwitchPosterior};
use crate::error::{Error, Result};
use crate::hmm::{self, SarmCoefficients, TableEmission};
use crate::numeric::{argmax, LogDomain};
use crate::synth::{ml_transition, segmentation_error, simulate_sarm, simulate_switching_lgssm};

#[derive(Debug, Parser)]
#[command(name = "edswitch", version, about = "Explicit-duration switching models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Model description (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Arithmetic of the plain Markov-switching baseline: auto, on or off.
    #[arg(long, global = true, default_value = "auto")]
    pub log_domain: LogDomain,
    /// none, keep-top-d or drop-lowest.
    #[arg(long, global = true)]
    pub prune_strategy: Option<PruneStrategy>,
    /// Counts kept per regime and step when pruning.
    #[arg(long, global = true)]
    pub prune_budget: Option<usize>,
    /// dec, inc or cd.
    #[arg(long, global = true)]
    pub encoding: Option<Encoding>,
    /// Across-segment independence.
    #[arg(long, global = true, value_enum)]
    pub asi: Option<OnOff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Filter,
    Smooth,
    Viterbi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a series and its ground-truth segmentation.
    Simulate {
        /// Series length; defaults to the config `length`, then 1000.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Regime posteriors or the most likely segmentation of a series.
    Infer {
        /// Series CSV with columns t, v_1..v_V.
        #[arg(long)]
        data: PathBuf,
        /// Segmentation CSV with a column s; enables the error summary.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Filtered or smoothed marginals, or the most likely path.
        #[arg(long, value_enum, default_value = "smooth")]
        task: Task,
        /// Also write every nonzero augmented-state weight.
        #[arg(long)]
        full_table: bool,
    },
    /// Expectation-maximization from the config parameters.
    Fit {
        /// Series CSV with columns t, v_1..v_V.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        /// Duration probabilities are tied in bins of this width.
        #[arg(long, default_value_t = 1)]
        tie_width: usize,
        /// Relative log-likelihood change that stops the switching AR fit; 0 runs every iteration.
        #[arg(long, default_value_t = 0.0)]
        rel_tol: f64,
    },
    /// Localize the simulated two-wheeled robot.
    Robot {
        /// Number of independent runs.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Steps per run; defaults to the config robot length.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Time increasing-count inference over a grid of sizes.
    Bench {
        /// Series length.
        #[arg(long, default_value_t = 2000)]
        length: usize,
        /// Regime counts for the dense sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        regimes: Vec<usize>,
        /// Duration caps for the dense sweep.
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        d_max: Vec<usize>,
        /// Count budgets for the pruned sweep.
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        budgets: Vec<usize>,
        /// Repetitions per cell; the median time is reported.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Run the acceptance checks (all, or the listed ids).
    Verify { ids: Vec<u8> },
    /// Test whether X and Y are d-separated given Z.
    Dsep {
        /// Edge list, one `a -> b` per line.
        #[arg(long)]
        graph: PathBuf,
        /// Comma-separated node names.
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<String>,
        /// Comma-separated node names.
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        /// Comma-separated conditioning nodes; may be empty.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        z: Vec<String>,
    },
}

/// Parses the process arguments, runs the command and reports errors on stderr.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { length } => simulate(&load_config(g)?, *length, &g.out).map(|_| ExitCode::SUCCESS),
        Command::Infer { data, truth, task, full_table } => {
            infer(&load_config(g)?, data, truth.as_deref(), *task, *full_table, g.log_domain, &g.out).map(|_| ExitCode::SUCCESS)
        }
        Command::Fit { data, max_iters, tie_width, rel_tol } => {
            fit(&load_config(g)?, data, *max_iters, *tie_width, *rel_tol, &g.out).map(|_| ExitCode::SUCCESS)
        }
        Command::Robot { runs, length } => {
            let cfg = match &g.config {
                Some(_) => load_config(g)?,
                None => apply_overrides(ModelConfig::robot_default(), g)?,
            };
            robot(&cfg, *runs, *length, &g.out).map(|_| ExitCode::SUCCESS)
        }
        Command::Bench { length, regimes, d_max, budgets, reps } => {
            bench(&BenchGrid { length: *length, regimes: regimes.clone(), d_max: d_max.clone(), budgets: budgets.clone(), reps: *reps }, &g.out)
                .map(|_| ExitCode::SUCCESS)
        }
        Command::Verify { ids } => verify(ids, &g.out),
        Command::Dsep { graph, x, y, z } => dsep(graph, x, y, z).map(|_| ExitCode::SUCCESS),
    }
}

fn load_config(g: &GlobalOpts) -> Result<ModelConfig> {
    let Some(path) = &g.config else {
        return Err(Error::Config("this command needs --config PATH".into()));
    };
    apply_overrides(ModelConfig::load(path)?, g)
}

/// Applies the global flags on top of a config and revalidates it.
pub fn apply_overrides(mut cfg: ModelConfig, g: &GlobalOpts) -> Result<ModelConfig> {
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(e) = g.encoding {
        cfg.encoding = e;
    }
    if let Some(a) = g.asi {
        cfg.asi = a == OnOff::On;
    }
    match (g.prune_strategy, g.prune_budget) {
        (Some(PruneStrategy::None), _) => cfg.prune = None,
        (Some(strategy), budget) => {
            let budget = budget.or(cfg.prune.map(|p| p.budget)).ok_or_else(|| Error::Config("--prune-strategy needs --prune-budget".into()))?;
            cfg.prune = Some(PruneConfig::new(budget, strategy)?);
        }
        (None, Some(budget)) => {
            let strategy = cfg.prune.map_or(PruneStrategy::KeepTopD, |p| p.strategy);
            cfg.prune = Some(PruneConfig::new(budget, strategy)?);
        }
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn csv_writer(out: &Path, name: &str) -> Result<(csv::Writer<File>, String)> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.display().to_string(), source })?;
    let path = out.join(name);
    let shown = path.display().to_string();
    let w = csv::Writer::from_path(&path).map_err(|source| Error::Csv { path: shown.clone(), source })?;
    Ok((w, shown))
}

/// Writes a header and rows of already formatted fields.
fn write_table(out: &Path, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<PathBuf> {
    let (mut w, shown) = csv_writer(out, name)?;
    let wrap = |source| Error::Csv { path: shown.clone(), source };
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(|source| Error::Io { path: shown.clone(), source })?;
    Ok(out.join(name))
}

/// Shortest round-trip decimal, switching to exponent form at extreme magnitudes.
pub fn num(x: f64) -> String {
    if x != 0.0 && x.is_finite() && !(1e-5..1e15).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn header(fixed: &[&str], extra: Vec<String>) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain(extra).collect()
}

fn sigma_columns(st: SigmaState) -> Vec<String> {
    match st {
        SigmaState::Dec { s, c } | SigmaState::Inc { s, c } => vec![s.to_string(), c.to_string()],
        SigmaState::Cd { s, d, c } => vec![s.to_string(), c.to_string(), d.to_string()],
    }
}

fn sigma_header(e: Encoding) -> Vec<String> {
    let mut h = header(&["t", "s", "c"], Vec::new());
    if e == Encoding::Cd {
        h.push("d".into());
    }
    h
}

/// Samples a series from the config: `series.csv`, `segmentation.csv` and, for
/// state-space models, `hidden.csv`.
pub fn simulate(cfg: &ModelConfig, length: Option<usize>, out: &Path) -> Result<()> {
    let t_len = length.or(cfg.length).unwrap_or(1000);
    let model = cfg.build()?;
    let mut rng = substream(cfg.seed, 0);
    let path = sample_chain(cfg.encoding, model.chain(), t_len, &mut rng)?.sigma;
    let (v, hidden): (Vec<DVector<f64>>, Option<Vec<DVector<f64>>>) = match &model {
        Model::Sarm { coeffs, .. } => (simulate_sarm(coeffs, &path, cfg.asi, &mut rng).into_iter().map(|x| DVector::from_element(1, x)).collect(), None),
        Model::Lgssm { blocks, .. } => {
            let (h, v) = simulate_switching_lgssm(blocks, &path, cfg.asi, &mut rng)?;
            (v, Some(h))
        }
        Model::Robot { robot, .. } => {
            let run = simulate_robot_path(robot, path.iter().map(|st| st.regime()).collect(), &mut rng)?;
            (run.measurements, Some(run.poses))
        }
    };
    let vd = model.v_dim();
    write_table(out, "series.csv", &header(&["t"], names("v", vd)), v.iter().enumerate().map(|(t, x)| row(t, x)))?;
    write_table(
        out,
        "segmentation.csv",
        &sigma_header(cfg.encoding),
        path.iter().enumerate().map(|(t, &st)| std::iter::once((t + 1).to_string()).chain(sigma_columns(st)).collect()),
    )?;
    if let Some(h) = hidden {
        let hd = h[0].len();
        write_table(out, "hidden.csv", &header(&["t"], names("h", hd)), h.iter().enumerate().map(|(t, x)| row(t, x)))?;
    }
    println!("wrote {t_len} steps to {}", out.display());
    Ok(())
}

fn row(t: usize, x: &DVector<f64>) -> Vec<String> {
    std::iter::once((t + 1).to_string()).chain(x.iter().map(|&v| num(v))).collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).map_err(|source| Error::Csv { path: path.display().to_string(), source })
}

/// Reads `t, v_1..v_V`, rejecting any other header.
pub fn read_series(path: &Path, v_dim: usize) -> Result<Vec<DVector<f64>>> {
    let mut r = open_csv(path)?;
    let shown = path.display().to_string();
    let expected = header(&["t"], names("v", v_dim));
    let found: Vec<String> = r.headers().map_err(|source| Error::Csv { path: shown.clone(), source })?.iter().map(str::to_string).collect();
    if found != expected {
        let missing: Vec<&String> = expected.iter().filter(|c| !found.contains(c)).collect();
        let extra: Vec<&String> = found.iter().filter(|c| !expected.contains(c)).collect();
        return Err(Error::Config(format!("{shown}: columns do not match the model (missing {missing:?}, unexpected {extra:?})")));
    }
    let mut v = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|source| Error::Csv { path: shown.clone(), source })?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Config(format!("{shown} row {}: {e}", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        v.push(DVector::from_vec(vals));
    }
    if v.is_empty() {
        return Err(Error::Config(format!("{shown}: no observations")));
    }
    Ok(v)
}

/// Reads the `s` column of a segmentation file.
pub fn read_regimes(path: &Path) -> Result<Vec<usize>> {
    let mut r = open_csv(path)?;
    let shown = path.display().to_string();
    let hdr = r.headers().map_err(|source| Error::Csv { path: shown.clone(), source })?.clone();
    let col = hdr.iter().position(|h| h == "s").ok_or_else(|| Error::Config(format!("{shown}: no column 's'")))?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|source| Error::Csv { path: shown.clone(), source })?;
            rec.get(col).unwrap_or("").trim().parse().map_err(|e| Error::Config(format!("{shown} row {}: {e}", i + 1)))
        })
        .collect()
}

/// Regime posteriors (or a decode) plus every nonzero augmented-state weight.
struct Inference {
    regimes: Vec<usize>,
    marginals: Option<Vec<Vec<f64>>>,
    states: Vec<Vec<(SigmaState, f64)>>,
    means: Option<Vec<DVector<f64>>>,
    log_likelihood: f64,
}

fn ed_inference(post: &EdPosterior, task: Task) -> Inference {
    let table = if task == Task::Filter { &post.alpha } else { &post.gamma };
    let states = table.iter().map(|r| r.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, &w)| (post.space.state(i), w)).collect()).collect();
    let marginals = if task == Task::Filter { post.filtered_regimes() } else { post.smoothed_regimes() };
    Inference { regimes: map_of(&marginals), marginals: Some(marginals), states, means: None, log_likelihood: post.log_likelihood }
}

fn map_of(m: &[Vec<f64>]) -> Vec<usize> {
    m.iter().map(|r| argmax(r).unwrap_or(0)).collect()
}

fn switch_inference(post: &SwitchPosterior) -> Result<Inference> {
    let states = post.steps.iter().map(|b| b.weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, &w)| (post.space.state(i), w)).collect()).collect();
    let marginals = post.regimes();
    Ok(Inference { regimes: map_of(&marginals), marginals: Some(marginals), states, means: Some(post.means()?), log_likelihood: post.log_likelihood })
}

fn path_inference(path: crate::edmsm::EdPath) -> Inference {
    Inference { states: path.sigma.iter().map(|&st| vec![(st, 1.0)]).collect(), regimes: path.regimes, marginals: None, means: None, log_likelihood: path.log_joint }
}

fn sarm_inference(coeffs: &SarmCoefficients, chain: &EdChain, cfg: &ModelConfig, v: &[f64], task: Task) -> Result<Inference> {
    let em = coeffs.emission(v, 0);
    let opts = cfg.options();
    let prune = cfg.prune.filter(PruneConfig::is_active);
    Ok(match (cfg.encoding, task) {
        (Encoding::Inc, Task::Filter | Task::Smooth) if prune.is_some() => {
            let post = inc_smooth_pruned(&em, chain, opts, &prune.expect("checked"))?;
            let table = if task == Task::Filter { &post.alpha } else { &post.gamma };
            let marginals: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|b| b.sum()).collect()).collect();
            let states = table
                .iter()
                .map(|r| r.iter().enumerate().flat_map(|(s, b)| b.index.iter().zip(&b.value).map(move |(&i, &w)| (SigmaState::Inc { s, c: i + 1 }, w))).collect())
                .collect();
            Inference { regimes: map_of(&marginals), marginals: Some(marginals), states, means: None, log_likelihood: post.log_likelihood }
        }
        (Encoding::Dec, Task::Viterbi) => path_inference(dec::viterbi(&em, chain, opts)?),
        (Encoding::Inc, Task::Viterbi) => path_inference(inc::viterbi(&em, chain, opts)?),
        (Encoding::Cd, Task::Viterbi) => path_inference(cd::viterbi(&MarkovSegments { em, asi: cfg.asi }, chain, opts)?),
        (Encoding::Dec, _) => ed_inference(&dec::smooth_sequential(&em, chain, opts)?, task),
        (Encoding::Inc, _) => ed_inference(&inc::smooth_sequential(&em, chain, opts)?, task),
        (Encoding::Cd, _) => ed_inference(&cd::forward_backward(&MarkovSegments { em, asi: cfg.asi }, chain, opts)?, task),
    })
}

fn switching_inference(params: &SlgssmParams, v: &[DVector<f64>], task: Task) -> Result<Inference> {
    match task {
        Task::Filter => switch_inference(&filter(params, v)?),
        Task::Smooth => switch_inference(&filter_smooth(params, v)?.1),
        Task::Viterbi => {
            if params.encoding != Encoding::Cd {
                return Err(Error::Config("segment decoding of state-space models uses encoding cd".into()));
            }
            Ok(path_inference(cd_viterbi(params, v)?))
        }
    }
}

/// Writes `regimes.csv` (and optionally `states.csv`, `means.csv`) and prints a summary.
pub fn infer(cfg: &ModelConfig, data: &Path, truth: Option<&Path>, task: Task, full_table: bool, log_domain: LogDomain, out: &Path) -> Result<()> {
    let model = cfg.build()?;
    let v = read_series(data, model.v_dim())?;
    let truth = truth.map(read_regimes).transpose()?;
    if let Some(tr) = &truth {
        if tr.len() != v.len() {
            return Err(Error::Config(format!("ground truth has {} steps, series has {}", tr.len(), v.len())));
        }
    }
    let scalar: Vec<f64> = v.iter().map(|x| x[0]).collect();
    let res = match &model {
        Model::Sarm { coeffs, chain } => sarm_inference(coeffs, chain, cfg, &scalar, task)?,
        Model::Lgssm { params, .. } | Model::Robot { params, .. } => switching_inference(params, &v, task)?,
    };
    let s_count = cfg.regimes;
    match &res.marginals {
        Some(m) => write_table(
            out,
            "regimes.csv",
            &header(&["t", "regime"], (0..s_count).map(|s| format!("p_{s}")).collect()),
            m.iter().enumerate().map(|(t, r)| {
                [(t + 1).to_string(), res.regimes[t].to_string()].into_iter().chain(r.iter().map(|&p| num(p))).collect()
            }),
        )?,
        None => write_table(out, "regimes.csv", &header(&["t", "regime"], Vec::new()), res.regimes.iter().enumerate().map(|(t, s)| vec![(t + 1).to_string(), s.to_string()]))?,
    };
    if full_table {
        let mut h = sigma_header(cfg.encoding);
        h.push("weight".into());
        let rows = res.states.iter().enumerate().flat_map(|(t, r)| {
            r.iter().map(move |&(st, w)| std::iter::once((t + 1).to_string()).chain(sigma_columns(st)).chain(std::iter::once(num(w))).collect())
        });
        write_table(out, "states.csv", &h, rows)?;
    }
    if let Some(means) = &res.means {
        let hd = means[0].len();
        write_table(out, "means.csv", &header(&["t"], names("h", hd)), means.iter().enumerate().map(|(t, x)| row(t, x)))?;
    }
    let label = if task == Task::Viterbi { "log joint of the decode" } else { "log-likelihood" };
    let mut summary = vec![vec!["steps".to_string(), v.len().to_string()], vec![label.replace(' ', "_"), num(res.log_likelihood)]];
    println!("{} steps, {label} {:.4}", v.len(), res.log_likelihood);
    if let Some(tr) = &truth {
        let err = segmentation_error(&res.regimes, tr);
        println!("segmentation error {err:.2}%");
        summary.push(vec!["segmentation_error_percent".into(), num(err)]);
        if let Model::Sarm { coeffs, .. } = &model {
            // Plain Markov switching with transitions estimated from the truth.
            let em = coeffs.emission(&scalar, 0);
            let plain = ml_transition(tr, s_count)?;
            let base = if task == Task::Viterbi {
                hmm::viterbi(&em, &plain)?.regimes
            } else {
                let post = hmm::filter_smooth_sequential(&em, &plain, log_domain)?;
                if task == Task::Filter { map_of(&post.filtered()) } else { post.map_regimes() }
            };
            let base_err = segmentation_error(&base, tr);
            println!("plain Markov switching baseline error {base_err:.2}%");
            summary.push(vec!["markov_baseline_error_percent".into(), num(base_err)]);
        }
    }
    write_table(out, "summary.csv", &header(&["metric", "value"], Vec::new()), summary)?;
    Ok(())
}

/// Runs EM and writes `fitted.toml` and `trace.csv`.
pub fn fit(cfg: &ModelConfig, data: &Path, max_iters: usize, tie_width: usize, rel_tol: f64, out: &Path) -> Result<()> {
    let model = cfg.build()?;
    let v = read_series(data, model.v_dim())?;
    let mut fitted = cfg.clone();
    let (chain, trace) = match &model {
        Model::Sarm { coeffs, chain } if cfg.encoding == Encoding::Dec && !cfg.asi => {
            let scalar: Vec<f64> = v.iter().map(|x| x[0]).collect();
            let p0 = dec::GsarmParams { coeffs: coeffs.clone(), chain: chain.clone() };
            let (p, trace) = dec::em_gsarm(&p0, &scalar, cfg.options(), tie_width, max_iters, rel_tol)?;
            fitted.emission = EmissionSpec::Sarm { a: p.coeffs.a.clone(), sigma: p.coeffs.sigma.clone() };
            (p.chain, trace)
        }
        Model::Sarm { coeffs, chain } => {
            let scalar: Vec<f64> = v.iter().map(|x| x[0]).collect();
            let seg = MarkovSegments { em: coeffs.emission(&scalar, 0), asi: cfg.asi };
            cd::em_chain(&seg, chain, cfg.options(), tie_width, max_iters)?
        }
        Model::Lgssm { blocks, params } => {
            if !cfg.asi {
                return Err(Error::Config("state-space fitting needs asi = true".into()));
            }
            let opts = EdOptions::default().asi(true).condition_end(cfg.condition_end);
            cd::em_chain(&LgssmSegments { regimes: blocks, v: &v }, &params.chain, opts, tie_width, max_iters)?
        }
        Model::Robot { .. } => return Err(Error::Config("the robot model has no fitting routine".into())),
    };
    fitted.duration = DurationSpec::from_model(chain.duration())?;
    fitted.transition = TransitionSpec::from_transition(chain.transition());
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.display().to_string(), source })?;
    fitted.save(&out.join("fitted.toml"))?;
    write_table(
        out,
        "trace.csv",
        &header(&["iteration", "log_likelihood"], Vec::new()),
        trace.log_likelihood.iter().enumerate().map(|(i, l)| vec![i.to_string(), num(*l)]),
    )?;
    let ll = &trace.log_likelihood;
    println!(
        "{} iterations, log-likelihood {:.4} -> {:.4}, largest decrease {:.2e}",
        ll.len().saturating_sub(1),
        ll.first().copied().unwrap_or(f64::NAN),
        ll.last().copied().unwrap_or(f64::NAN),
        trace.max_decrease()
    );
    Ok(())
}

fn position_rmse(est: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let sq: f64 = est.iter().zip(truth).map(|(e, h)| (e[0] - h[0]).powi(2) + (e[1] - h[1]).powi(2)).sum();
    (sq / est.len() as f64).sqrt()
}

/// Per-run position errors of the robot demo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotScore {
    pub raw: f64,
    pub filtered: f64,
    pub smoothed: f64,
}

/// Simulates and localizes the robot `runs` times; writes `robot_trajectory.csv`
/// and `robot_summary.csv`.
pub fn robot(cfg: &ModelConfig, runs: u64, length: Option<usize>, out: &Path) -> Result<Vec<RobotScore>> {
    let Model::Robot { robot, params } = cfg.build()? else {
        return Err(Error::Config("the robot command needs emission family = \"robot\"".into()));
    };
    let EmissionSpec::Robot(spec) = &cfg.emission else { unreachable!("checked by build") };
    let t_len = length.unwrap_or(spec.length);
    let mut traj = Vec::new();
    let mut scores = Vec::new();
    for run in 0..runs {
        let mut rng = substream(cfg.seed, run);
        let movements = sample_chain(cfg.encoding, &params.chain, t_len, &mut rng)?.regimes;
        let sim = simulate_robot_path(&robot, movements, &mut rng)?;
        let (f, s) = filter_smooth(&params, &sim.measurements)?;
        let (fm, sm) = (f.means()?, s.means()?);
        let decoded = s.map_regimes();
        for t in 0..t_len {
            let (h, m) = (&sim.poses[t], &sim.measurements[t]);
            traj.push(
                [run as f64, (t + 1) as f64, h[0], h[1], h[2], m[0], m[1], fm[t][0], fm[t][1], sm[t][0], sm[t][1]]
                    .iter()
                    .map(|&x| num(x))
                    .chain([sim.movements[t].to_string(), decoded[t].to_string()])
                    .collect::<Vec<_>>(),
            );
        }
        let score = RobotScore {
            raw: position_rmse(&sim.measurements, &sim.poses),
            filtered: position_rmse(&fm, &sim.poses),
            smoothed: position_rmse(&sm, &sim.poses),
        };
        println!(
            "run {run}: raw {:.4}  filtered {:.4}  smoothed {:.4}  improvement {:.2}x",
            score.raw,
            score.filtered,
            score.smoothed,
            score.raw / score.smoothed
        );
        scores.push(score);
    }
    let cols = ["run", "t", "true_x", "true_y", "true_phi", "meas_x", "meas_y", "filt_x", "filt_y", "smooth_x", "smooth_y", "true_regime", "map_regime"];
    write_table(out, "robot_trajectory.csv", &header(&cols, Vec::new()), traj)?;
    write_table(
        out,
        "robot_summary.csv",
        &header(&["run", "raw_rmse", "filtered_rmse", "smoothed_rmse", "improvement"], Vec::new()),
        scores.iter().enumerate().map(|(i, s)| {
            vec![i.to_string(), num(s.raw), num(s.filtered), num(s.smoothed), num(s.raw / s.smoothed)]
        }),
    )?;
    if !scores.is_empty() {
        let mean = scores.iter().map(|s| s.raw / s.smoothed).sum::<f64>() / scores.len() as f64;
        println!("mean improvement over raw measurements {mean:.2}x");
    }
    Ok(scores)
}

/// Sizes timed by [`bench`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub length: usize,
    pub regimes: Vec<usize>,
    pub d_max: Vec<usize>,
    pub budgets: Vec<usize>,
    pub reps: usize,
}

/// One timed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub routine: &'static str,
    pub t_len: usize,
    pub regimes: usize,
    pub d_max: Option<usize>,
    pub budget: Option<usize>,
    pub seconds: f64,
    /// Time relative to the previous size in the same sweep.
    pub ratio: Option<f64>,
    /// Time relative to the single-regime cell of the same size.
    pub vs_single_regime: Option<f64>,
}

fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut ts: Vec<Duration> = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        ts.push(start.elapsed());
    }
    ts.sort();
    Ok(ts[ts.len() / 2].as_secs_f64())
}

fn random_table<R: Rng>(t_len: usize, s_count: usize, rng: &mut R) -> Result<TableEmission> {
    TableEmission::new((0..t_len).map(|_| (0..s_count).map(|_| -rng.gen_range(0.0..3.0)).collect()).collect())
}

/// Times increasing-count smoothing over `(S, d_max)` and pruned smoothing over budgets;
/// writes `bench.csv`.
pub fn bench(grid: &BenchGrid, out: &Path) -> Result<Vec<BenchRow>> {
    let mut rng = substream(0, 77);
    let mut rows: Vec<BenchRow> = Vec::new();
    let opts = EdOptions::default();
    for &s_count in &grid.regimes {
        let em = random_table(grid.length, s_count, &mut rng)?;
        let mut prev: Option<f64> = None;
        for &d in &grid.d_max {
            let chain = EdChain::new(RegimeTransition::uniform_switching(s_count)?, DurationModel::uniform(s_count, 1, d)?)?;
            let secs = time_median(grid.reps, || inc::smooth_sequential(&em, &chain, opts).map(|_| ()))?;
            let single = if s_count == 1 {
                Some(1.0)
            } else {
                rows.iter().find(|r| r.regimes == 1 && r.d_max == Some(d)).map(|r| secs / r.seconds)
            };
            rows.push(BenchRow {
                routine: "inc-smooth",
                t_len: grid.length,
                regimes: s_count,
                d_max: Some(d),
                budget: None,
                seconds: secs,
                ratio: prev.map(|p| secs / p),
                vs_single_regime: single,
            });
            prev = Some(secs);
        }
    }
    let s_count = 2;
    let em = random_table(grid.length, s_count, &mut rng)?;
    let chain = EdChain::new(RegimeTransition::uniform_switching(s_count)?, DurationModel::geometric(&[0.97, 0.96], 1)?)?;
    let mut prev: Option<f64> = None;
    for &b in &grid.budgets {
        let cfg = PruneConfig::keep_top(b)?;
        let secs = time_median(grid.reps, || inc_smooth_pruned(&em, &chain, opts, &cfg).map(|_| ()))?;
        rows.push(BenchRow {
            routine: "inc-smooth-pruned",
            t_len: grid.length,
            regimes: s_count,
            d_max: None,
            budget: Some(b),
            seconds: secs,
            ratio: prev.map(|p| secs / p),
            vs_single_regime: None,
        });
        prev = Some(secs);
    }
    let opt = |x: Option<String>| x.unwrap_or_default();
    write_table(
        out,
        "bench.csv",
        &header(&["routine", "t", "regimes", "d_max", "budget", "seconds", "ratio", "vs_single_regime"], Vec::new()),
        rows.iter().map(|r| {
            vec![
                r.routine.to_string(),
                r.t_len.to_string(),
                r.regimes.to_string(),
                opt(r.d_max.map(|x| x.to_string())),
                opt(r.budget.map(|x| x.to_string())),
                num(r.seconds),
                opt(r.ratio.map(num)),
                opt(r.vs_single_regime.map(num)),
            ]
        }),
    )?;
    for r in &rows {
        println!(
            "{:<18} S={} d_max={:<5} D={:<5} {:>9.4}s  ratio {}",
            r.routine,
            r.regimes,
            r.d_max.map_or("-".into(), |x| x.to_string()),
            r.budget.map_or("-".into(), |x| x.to_string()),
            r.seconds,
            r.ratio.map_or("-".into(), |x| format!("{x:.2}"))
        );
    }
    Ok(rows)
}

/// Runs the acceptance checks and writes `verify.csv`.
pub fn verify(ids: &[u8], out: &Path) -> Result<ExitCode> {
    let mut rows = Vec::new();
    let mut failed = 0;
    for (id, name, f) in crate::verify::CHECKS {
        if !ids.is_empty() && !ids.contains(&id) {
            continue;
        }
        let (check, elapsed) = crate::verify::run(f);
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} ({elapsed:.1?})", check.detail);
        failed += usize::from(!check.passed);
        rows.push(vec![id.to_string(), name.to_string(), check.passed.to_string(), check.detail, num(elapsed.as_secs_f64())]);
    }
    write_table(out, "verify.csv", &header(&["id", "name", "passed", "detail", "seconds"], Vec::new()), rows)?;
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Prints the verdict of both d-separation methods.
pub fn dsep(graph: &Path, x: &[String], y: &[String], z: &[String]) -> Result<(bool, bool)> {
    let text = std::fs::read_to_string(graph).map_err(|source| Error::Io { path: graph.display().to_string(), source })?;
    let g = Dag::parse_edge_list(&text)?;
    let z: Vec<String> = z.iter().filter(|s| !s.is_empty()).cloned().collect();
    let a = d_separated_named(&g, x, y, &z, Method::Pathwise)?;
    let b = d_separated_named(&g, x, y, &z, Method::Moralize)?;
    let verdict = |sep: bool| if sep { "d-separated" } else { "d-connected" };
    println!("active paths:      {}", verdict(a));
    println!("moralized graph:   {}", verdict(b));
    if a != b {
        println!("the two methods disagree");
    }
    Ok((a, b))
}
