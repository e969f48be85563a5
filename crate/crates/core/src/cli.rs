//! Command line driver. `run` returns the process exit code:
//! 0 success, 1 usage/parse, 2 infeasible problem, 3 no path (or
//! disconnected roadmap), 4 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use crate::brm::{belief_at, build_graph, search_path, BeliefGraph, SearchOutcome};
use crate::io::{
    self, BeliefFile, GraphFile, PathReport, PlannerConfig, TrajectoryFile, SCHEMA_VERSION,
};
use crate::pgcs::pgcs_connect;
use crate::plot::{emit_plot, PlotOutput};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NO_PATH: i32 = 3;

pub const WORKERS_ENV: &str = "PGCS_BRM_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "pgcs-brm",
    version,
    about = "Belief roadmap planning with output-feedback covariance steering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample beliefs, steer every neighbour pair both ways and write the roadmap.
    BuildGraph {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Minimum-cost path through a roadmap.
    Plan {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 1)]
        goal: usize,
        /// Entropy weight; defaults to the value stored with the roadmap.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Connect two beliefs with a single edge and report convergence.
    SteerEdge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        start: PathBuf,
        #[arg(long)]
        goal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Convergence CSV; defaults to `<out>.convergence.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a roadmap, path report or edge as SVG (planar) or CSV.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (including the program name) and execute.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::BuildGraph {
            config,
            map,
            out,
            seed,
            alpha,
            workers,
        } => cmd_build_graph(&config, &map, &out, seed, alpha, workers),
        Command::Plan {
            graph,
            start,
            goal,
            alpha,
            out,
        } => cmd_plan(&graph, start, goal, alpha, &out),
        Command::SteerEdge {
            config,
            map,
            start,
            goal,
            out,
            report,
        } => cmd_steer_edge(&config, &map, &start, &goal, &out, report),
        Command::Plot { input, out } => {
            match emit_plot(&input, &out)? {
                PlotOutput::Svg(p) | PlotOutput::Csv(p) => info!("wrote {}", p.display()),
                PlotOutput::CsvFallback(p) => {
                    eprintln!("warning: SVG needs a planar scene; wrote {}", p.display())
                }
            }
            Ok(EXIT_OK)
        }
    }
}

fn reachable(graph: &BeliefGraph, start: usize, goal: usize) -> bool {
    let adj = graph.adjacency();
    let mut seen = vec![false; graph.nodes.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(v) = stack.pop() {
        if v == goal {
            return true;
        }
        for &k in &adj[v] {
            let t = graph.edges[k].target;
            if !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    false
}

pub fn cmd_build_graph(
    config: &std::path::Path,
    map: &std::path::Path,
    out: &std::path::Path,
    seed: Option<u64>,
    alpha: Option<f64>,
    workers: Option<usize>,
) -> Result<i32> {
    let mut cfg = PlannerConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let loaded = io::load_map(map)?;
    let (start, goal) = match (&cfg.start, &cfg.goal) {
        (Some(s), Some(g)) => (s.clone(), g.clone()),
        _ => {
            return Err(Error::Parse(
                "config needs start and goal positions for build-graph".into(),
            ))
        }
    };
    let s = belief_at(&loaded.sdf, &cfg.sampler, &start, 0)?;
    let g = belief_at(&loaded.sdf, &cfg.sampler, &goal, 1)?;
    let build = build_graph(&cfg.roadmap_settings()?, &loaded.sdf, &s, &g)?;
    GraphFile::from_graph(&build.graph, Some(&loaded.obstacles)).save(out)?;
    io::write_json(&io::sidecar_path(out, "timing.json"), &build.timing)?;
    println!(
        "{}",
        json!({
            "nodes": build.graph.nodes.len(),
            "edges": build.graph.edges.len(),
            "attempted_edges": build.timing.attempted_edges,
            "build_seconds": build.timing.build_seconds,
        })
    );
    if !reachable(&build.graph, 0, 1) {
        warn!("goal is not reachable from start in the roadmap");
        println!(
            "{}",
            json!({"status": "disconnected", "reason": "goal is not reachable from start"})
        );
        return Ok(EXIT_NO_PATH);
    }
    Ok(EXIT_OK)
}

pub fn cmd_plan(
    graph: &std::path::Path,
    start: usize,
    goal: usize,
    alpha: Option<f64>,
    out: &std::path::Path,
) -> Result<i32> {
    let file = GraphFile::load(graph)?;
    let g = file.to_graph()?;
    let alpha = alpha.unwrap_or(g.metadata.alpha);
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    let t0 = Instant::now();
    let outcome = search_path(&g, start, goal, alpha)?;
    let secs = t0.elapsed().as_secs_f64();
    match outcome {
        SearchOutcome::Found(p) => {
            let report = PathReport::new(&g, &p, alpha, file.obstacles.as_ref(), secs);
            io::write_json(out, &report)?;
            println!(
                "{}",
                json!({
                    "status": "found",
                    "nodes": p.nodes,
                    "total_cost": p.cost,
                    "control": p.components.control,
                    "hinge": p.components.hinge,
                    "entropy": p.components.entropy,
                })
            );
            Ok(EXIT_OK)
        }
        SearchOutcome::NotFound { reason } => {
            println!("{}", json!({"status": "no_path", "reason": reason}));
            Ok(EXIT_NO_PATH)
        }
    }
}

pub fn cmd_steer_edge(
    config: &std::path::Path,
    map: &std::path::Path,
    start: &std::path::Path,
    goal: &std::path::Path,
    out: &std::path::Path,
    report: Option<PathBuf>,
) -> Result<i32> {
    let cfg = PlannerConfig::load(config)?;
    let loaded = io::load_map(map)?;
    let model = cfg.model.build()?;
    let sb = BeliefFile::load(start)?;
    let gb = BeliefFile::load(goal)?;
    let p0 = sb.error_covariance(cfg.sampler.error_fraction)?;
    let res = pgcs_connect(
        &model,
        &loaded.sdf,
        &cfg.collision,
        &cfg.pgcs,
        &cfg.time_grid()?,
        &sb.belief()?,
        &p0,
        &gb.belief()?,
    )?;
    let file = TrajectoryFile {
        schema_version: SCHEMA_VERSION,
        obstacles: Some(loaded.obstacles),
        converged: res.converged,
        iterations: res.iterations,
        diagnostics: res.diagnostics.clone(),
        trajectory: (&res.trajectory).into(),
    };
    io::write_json(out, &file)?;
    let report = report.unwrap_or_else(|| io::sidecar_path(out, "convergence.csv"));
    io::write_convergence_csv(
        std::io::BufWriter::new(std::fs::File::create(&report)?),
        &res.diagnostics,
    )?;
    if !res.converged {
        warn!("edge did not converge in {} iterations", res.iterations);
    }
    let last = res.diagnostics.last();
    println!(
        "{}",
        json!({
            "converged": res.converged,
            "iterations": res.iterations,
            "hinge_integral": last.map(|r| r.hinge_integral),
            "mean_residual": last.map(|r| r.mean_residual),
            "covariance_residual": last.map(|r| r.covariance_residual),
        })
    );
    Ok(EXIT_OK)
}
