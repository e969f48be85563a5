//! On-disk formats: planner configuration, obstacle maps (with an optional
//! binary SDF cache), belief files, roadmaps, path reports and CSV tables.
//!
//! All structured files are JSON with a `schema_version` field. Matrices are
//! stored as arrays of rows. Floats are written in shortest round-trip form,
//! so re-reading a file reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::brm::{
    BeliefEdge, BeliefGraph, BeliefNode, EdgeCost, GraphMetadata, PlannedPath, RoadmapSettings,
    SamplerParams,
};
use crate::dynamics::{ControlAffineModel, Dynamics, Observation};
use crate::pgcs::{GaussianBelief, IterationRecord, PgcsParams, TrajectoryDistribution};
use crate::sdf::{build_sdf, CollisionCostParams, GridSpec, Obstacle, ObstacleSet, SdfMap};
use crate::{Error, Result, TimeGrid};

pub const SCHEMA_VERSION: u32 = 1;

fn check_schema(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{what}: unsupported schema_version {found} (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Single-line JSON, used for the large roadmap files.
pub fn write_json_compact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Parse(format!("{what}: ragged matrix rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parse(format!("{what}: non-finite entry")));
    }
    Ok(DMatrix::from_row_iterator(
        r,
        c,
        rows.iter().flatten().copied(),
    ))
}

fn vector_from(v: &[f64], what: &str) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse(format!("{what}: non-finite entry")));
    }
    Ok(DVector::from_column_slice(v))
}

// ---------------------------------------------------------------------------
// configuration

fn default_observation() -> Observation {
    Observation::Position
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dynamics: Dynamics,
    #[serde(default = "default_observation")]
    pub observation: Observation,
    /// Diffusion intensity `ε`.
    pub noise: f64,
    /// `R = r·I`.
    pub measurement_variance: f64,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ControlAffineModel> {
        ControlAffineModel::with_scalar_noise(
            self.dynamics,
            self.observation,
            self.noise,
            self.measurement_variance,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 2.0,
            steps: 50,
        }
    }
}

fn default_samples() -> usize {
    30
}

fn default_alpha() -> f64 {
    0.2
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub pgcs: PgcsParams,
    #[serde(default)]
    pub collision: CollisionCostParams,
    #[serde(default)]
    pub sampler: SamplerParams,
    /// Sampled nodes, not counting start and goal.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Entropy weight `α`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Start and goal positions for `build-graph`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
}

impl PlannerConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version, "config")?;
        self.model.build()?;
        self.time_grid()?;
        self.pgcs.validate()?;
        self.collision.validate()?;
        self.sampler.validate()?;
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.workers == 0 {
            return Err(Error::InvalidParameter("workers must be >= 1".into()));
        }
        let d = self.model.dynamics.spatial_dim();
        for (p, what) in [(&self.start, "start"), (&self.goal, "goal")] {
            if let Some(p) = p {
                if p.len() != d {
                    return Err(Error::Parse(format!(
                        "{what} position needs {d} coordinates, got {}",
                        p.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps)
    }

    pub fn roadmap_settings(&self) -> Result<RoadmapSettings> {
        Ok(RoadmapSettings {
            model: self.model.build()?,
            collision: self.collision,
            pgcs: self.pgcs,
            grid: self.time_grid()?,
            sampler: self.sampler,
            alpha: self.alpha,
            samples: self.samples,
            seed: self.seed,
            workers: self.workers,
        })
    }
}

// ---------------------------------------------------------------------------
// maps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    pub schema_version: u32,
    pub dimension: usize,
    pub obstacles: Vec<Obstacle>,
    pub grid: GridSpec,
    /// Binary SDF cache, relative to the map file. Read if present and
    /// matching the grid, otherwise (re)built and written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdf_cache: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedMap {
    pub obstacles: ObstacleSet,
    pub sdf: SdfMap,
}

impl MapFile {
    pub fn obstacle_set(&self) -> Result<ObstacleSet> {
        ObstacleSet::new(self.dimension, self.obstacles.clone())
    }
}

pub fn load_map(path: &Path) -> Result<LoadedMap> {
    let file: MapFile = read_json(path)?;
    check_schema(file.schema_version, "map")?;
    let obstacles = file.obstacle_set()?;
    let cache = file
        .sdf_cache
        .as_ref()
        .map(|c| path.parent().unwrap_or(Path::new(".")).join(c));
    if let Some(c) = &cache {
        if c.exists() {
            let sdf = SdfMap::read_binary(BufReader::new(File::open(c)?))?;
            if sdf.origin() == file.grid.origin.as_slice()
                && sdf.cell_size() == file.grid.cell_size
                && sdf.extents() == file.grid.extents.as_slice()
            {
                return Ok(LoadedMap { obstacles, sdf });
            }
            warn!(
                "SDF cache {} does not match the map grid; rebuilding",
                c.display()
            );
        }
    }
    let sdf = build_sdf(&obstacles, &file.grid)?;
    if let Some(c) = &cache {
        let written = File::create(c).map_err(Error::from).and_then(|f| {
            let mut w = BufWriter::new(f);
            sdf.write_binary(&mut w)?;
            w.flush().map_err(Error::from)
        });
        if let Err(e) = written {
            warn!("could not write SDF cache {}: {e}", c.display());
        }
    }
    Ok(LoadedMap { obstacles, sdf })
}

// ---------------------------------------------------------------------------
// beliefs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefFile {
    pub schema_version: u32,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Initial EKF error covariance; defaults to `β·Σ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_covariance: Option<Vec<Vec<f64>>>,
}

impl BeliefFile {
    pub fn load(path: &Path) -> Result<Self> {
        let b: Self = read_json(path)?;
        check_schema(b.schema_version, "belief")?;
        Ok(b)
    }

    pub fn from_belief(b: &GaussianBelief, error_covariance: Option<&DMatrix<f64>>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mean: b.mean.iter().copied().collect(),
            covariance: matrix_rows(&b.covariance),
            error_covariance: error_covariance.map(matrix_rows),
        }
    }

    pub fn belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(
            vector_from(&self.mean, "belief mean")?,
            matrix_from_rows(&self.covariance, "belief covariance")?,
        )
    }

    /// The stored error covariance or `fraction·Σ`.
    pub fn error_covariance(&self, fraction: f64) -> Result<DMatrix<f64>> {
        match &self.error_covariance {
            Some(rows) => matrix_from_rows(rows, "belief error covariance"),
            None => Ok(matrix_from_rows(&self.covariance, "belief covariance")? * fraction),
        }
    }
}

// ---------------------------------------------------------------------------
// trajectories and graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<Vec<f64>>>,
    pub error_covariance: Vec<Vec<Vec<f64>>>,
    pub estimate_covariance: Vec<Vec<Vec<f64>>>,
    pub gain: Vec<Vec<Vec<f64>>>,
    pub feedforward: Vec<Vec<f64>>,
    pub closed_loop_matrix: Vec<Vec<Vec<f64>>>,
    pub closed_loop_offset: Vec<Vec<f64>>,
}

fn vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn mats(v: &[DMatrix<f64>]) -> Vec<Vec<Vec<f64>>> {
    v.iter().map(matrix_rows).collect()
}

fn parse_vecs(v: &[Vec<f64>], what: &str) -> Result<Vec<DVector<f64>>> {
    v.iter().map(|x| vector_from(x, what)).collect()
}

fn parse_mats(v: &[Vec<Vec<f64>>], what: &str) -> Result<Vec<DMatrix<f64>>> {
    v.iter().map(|m| matrix_from_rows(m, what)).collect()
}

impl From<&TrajectoryDistribution> for TrajectoryRecord {
    fn from(t: &TrajectoryDistribution) -> Self {
        Self {
            times: t.times.clone(),
            mean: vecs(&t.mean),
            covariance: mats(&t.covariance),
            error_covariance: mats(&t.error_covariance),
            estimate_covariance: mats(&t.estimate_covariance),
            gain: mats(&t.gain),
            feedforward: vecs(&t.feedforward),
            closed_loop_matrix: mats(&t.closed_loop_matrix),
            closed_loop_offset: vecs(&t.closed_loop_offset),
        }
    }
}

impl TrajectoryRecord {
    pub fn to_distribution(&self) -> Result<TrajectoryDistribution> {
        let n = self.times.len();
        let lens = [
            self.mean.len(),
            self.covariance.len(),
            self.error_covariance.len(),
            self.estimate_covariance.len(),
            self.gain.len(),
            self.feedforward.len(),
            self.closed_loop_matrix.len(),
            self.closed_loop_offset.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Parse(
                "trajectory fields differ in knot count".into(),
            ));
        }
        Ok(TrajectoryDistribution {
            times: self.times.clone(),
            mean: parse_vecs(&self.mean, "trajectory mean")?,
            covariance: parse_mats(&self.covariance, "trajectory covariance")?,
            error_covariance: parse_mats(&self.error_covariance, "trajectory error covariance")?,
            estimate_covariance: parse_mats(
                &self.estimate_covariance,
                "trajectory estimate covariance",
            )?,
            gain: parse_mats(&self.gain, "trajectory gain")?,
            feedforward: parse_vecs(&self.feedforward, "trajectory feedforward")?,
            closed_loop_matrix: parse_mats(&self.closed_loop_matrix, "closed-loop matrix")?,
            closed_loop_offset: parse_vecs(&self.closed_loop_offset, "closed-loop offset")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub error_covariance: Vec<Vec<f64>>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub source: usize,
    pub target: usize,
    pub cost: EdgeCost,
    pub iterations: usize,
    pub trajectory: TrajectoryRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub schema_version: u32,
    pub metadata: GraphMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacles: Option<ObstacleSet>,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

impl GraphFile {
    pub fn from_graph(graph: &BeliefGraph, obstacles: Option<&ObstacleSet>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            metadata: graph.metadata.clone(),
            obstacles: obstacles.cloned(),
            nodes: graph
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    mean: n.mean.iter().copied().collect(),
                    covariance: matrix_rows(&n.covariance),
                    error_covariance: matrix_rows(&n.error_covariance),
                    feasible: n.feasible,
                })
                .collect(),
            edges: graph
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    source: e.source,
                    target: e.target,
                    cost: e.cost,
                    iterations: e.iterations,
                    trajectory: (&e.trajectory).into(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g: Self = read_json(path)?;
        check_schema(g.schema_version, "graph")?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_compact(path, self)
    }

    pub fn to_graph(&self) -> Result<BeliefGraph> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                Ok(BeliefNode {
                    id: n.id,
                    mean: vector_from(&n.mean, "node mean")?,
                    covariance: matrix_from_rows(&n.covariance, "node covariance")?,
                    error_covariance: matrix_from_rows(
                        &n.error_covariance,
                        "node error covariance",
                    )?,
                    feasible: n.feasible,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Ok(BeliefEdge {
                    source: e.source,
                    target: e.target,
                    trajectory: e.trajectory.to_distribution()?,
                    cost: e.cost,
                    iterations: e.iterations,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BeliefGraph::new(nodes, edges, self.metadata.clone())
    }
}

/// Output of `steer-edge`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacles: Option<ObstacleSet>,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: Vec<IterationRecord>,
    pub trajectory: TrajectoryRecord,
}

impl TrajectoryFile {
    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = read_json(path)?;
        check_schema(t.schema_version, "trajectory")?;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// path reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathEdgeReport {
    pub source: usize,
    pub target: usize,
    pub cost: EdgeCost,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotRecord {
    pub t: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub error_covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathTimings {
    pub search_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathReport {
    pub schema_version: u32,
    pub alpha: f64,
    pub nodes: Vec<usize>,
    pub edges: Vec<PathEdgeReport>,
    pub total_cost: f64,
    pub components: EdgeCost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacles: Option<ObstacleSet>,
    pub knots: Vec<KnotRecord>,
    pub timings: PathTimings,
}

impl PathReport {
    pub fn new(
        graph: &BeliefGraph,
        path: &PlannedPath,
        alpha: f64,
        obstacles: Option<&ObstacleSet>,
        search_seconds: f64,
    ) -> Self {
        let t = &path.trajectory;
        Self {
            schema_version: SCHEMA_VERSION,
            alpha,
            nodes: path.nodes.clone(),
            edges: path
                .edges
                .iter()
                .map(|&k| {
                    let e = &graph.edges[k];
                    PathEdgeReport {
                        source: e.source,
                        target: e.target,
                        cost: e.cost,
                        total: e.cost.total(alpha),
                    }
                })
                .collect(),
            total_cost: path.cost,
            components: path.components,
            obstacles: obstacles.cloned(),
            knots: (0..t.len())
                .map(|k| KnotRecord {
                    t: t.times[k],
                    mean: t.mean[k].iter().copied().collect(),
                    covariance: matrix_rows(&t.covariance[k]),
                    error_covariance: matrix_rows(&t.error_covariance[k]),
                })
                .collect(),
            timings: PathTimings { search_seconds },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        check_schema(r.schema_version, "path report")?;
        Ok(r)
    }
}

// ---------------------------------------------------------------------------
// CSV

/// One row of a moment table: edge (or segment) index, time, mean, `Σ` and
/// `P`, matrices flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub segment: usize,
    pub t: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub error_covariance: DMatrix<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

pub fn moment_header(n: usize) -> Vec<String> {
    let mut h = vec!["segment".to_string(), "t".to_string()];
    h.extend((0..n).map(|i| format!("mean_{i}")));
    for prefix in ["cov", "err"] {
        for i in 0..n {
            for j in 0..n {
                h.push(format!("{prefix}_{i}_{j}"));
            }
        }
    }
    h
}

pub fn write_moments_csv<W: Write>(w: W, rows: &[MomentRow]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.mean.len());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(moment_header(n)).map_err(csv_err)?;
    for r in rows {
        if r.mean.len() != n {
            return Err(Error::DimensionMismatch {
                what: "moment row",
                expected: n,
                got: r.mean.len(),
            });
        }
        let mut rec = vec![r.segment.to_string(), r.t.to_string()];
        rec.extend(r.mean.iter().map(f64::to_string));
        for m in [&r.covariance, &r.error_covariance] {
            rec.extend(
                m.row_iter()
                    .flat_map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>()),
            );
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_moments_csv<R: Read>(r: R) -> Result<Vec<MomentRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let width = rd.headers().map_err(csv_err)?.len();
    // 2 + n + 2n² columns
    let n = (0..=64)
        .find(|&n| 2 + n + 2 * n * n == width)
        .ok_or_else(|| Error::Parse(format!("csv: {width} columns do not form a moment table")))?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("csv line {}: {e}", rows.len() + 2)))
        };
        let segment = rec[0]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("csv line {}: {e}", rows.len() + 2)))?;
        let t = num(1)?;
        let mean = (0..n).map(|i| num(2 + i)).collect::<Result<Vec<_>>>()?;
        let cov = (0..n * n)
            .map(|i| num(2 + n + i))
            .collect::<Result<Vec<_>>>()?;
        let err = (0..n * n)
            .map(|i| num(2 + n + n * n + i))
            .collect::<Result<Vec<_>>>()?;
        rows.push(MomentRow {
            segment,
            t,
            mean: DVector::from_vec(mean),
            covariance: DMatrix::from_row_slice(n, n, &cov),
            error_covariance: DMatrix::from_row_slice(n, n, &err),
        });
    }
    Ok(rows)
}

pub fn write_convergence_csv<W: Write>(w: W, records: &[IterationRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "iteration",
        "hinge_integral",
        "mean_residual",
        "covariance_residual",
        "mean_change",
    ])
    .map_err(csv_err)?;
    for r in records {
        out.write_record([
            r.iteration.to_string(),
            r.hinge_integral.to_string(),
            r.mean_residual.to_string(),
            r.covariance_residual.to_string(),
            r.mean_change.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `<path>.<suffix>` next to `path` (appended, not replacing the extension).
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_text() -> &'static str {
        r#"{
            "schema_version": 1,
            "model": {"dynamics": {"kind": "drag_double_integrator", "dimension": 2, "drag": 0.1},
                      "noise": 0.01, "measurement_variance": 0.01},
            "grid": {"horizon": 2.0, "steps": 50},
            "pgcs": {"step_size": 0.001, "max_iterations": 50},
            "collision": {"margin": 0.5, "weight": 30000.0},
            "samples": 5,
            "seed": 3,
            "start": [0.5, 0.5],
            "goal": [9.5, 9.5]
        }"#
    }

    #[test]
    fn config_round_trip_is_identity() {
        let c = PlannerConfig::from_json(config_text()).unwrap();
        let again = PlannerConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.model.observation, Observation::Position);
        assert_eq!(c.pgcs.tolerance, 1e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = config_text().replace("\"seed\"", "\"sede\"");
        assert!(matches!(
            PlannerConfig::from_json(&bad),
            Err(Error::Parse(_))
        ));
        let bad = config_text().replace("\"max_iterations\"", "\"max_iter\"");
        assert!(PlannerConfig::from_json(&bad).is_err());
    }

    #[test]
    fn config_ranges_are_checked() {
        let bad = config_text().replace("\"step_size\": 0.001", "\"step_size\": -1.0");
        assert!(matches!(
            PlannerConfig::from_json(&bad),
            Err(Error::InvalidParameter(_))
        ));
        let bad = config_text().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            PlannerConfig::from_json(&bad),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn moments_csv_round_trip_is_bit_exact() {
        let rows: Vec<MomentRow> = (0..4)
            .map(|k| {
                let x = 0.1 * k as f64 + 1.0 / 3.0;
                MomentRow {
                    segment: k / 2,
                    t: x.sqrt(),
                    mean: DVector::from_vec(vec![x, -x * 1e-17, std::f64::consts::PI, 1e300]),
                    covariance: DMatrix::from_fn(4, 4, |i, j| (i + j) as f64 / 7.0 + x),
                    error_covariance: DMatrix::from_fn(4, 4, |i, j| (i * j) as f64 * 1e-9 / 3.0),
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_moments_csv(&mut buf, &rows).unwrap();
        let back = read_moments_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn map_cache_is_written_and_reused() {
        let dir = tempfile::tempdir().unwrap();
        let map = MapFile {
            schema_version: 1,
            dimension: 2,
            obstacles: vec![Obstacle::Sphere {
                center: vec![1.0, 1.0],
                radius: 0.5,
            }],
            grid: GridSpec {
                origin: vec![0.0, 0.0],
                cell_size: 0.1,
                extents: vec![21, 21],
            },
            sdf_cache: Some("map.sdf".into()),
        };
        let p = dir.path().join("map.json");
        write_json(&p, &map).unwrap();
        let a = load_map(&p).unwrap();
        assert!(dir.path().join("map.sdf").exists());
        let b = load_map(&p).unwrap();
        assert_eq!(a.sdf, b.sdf);
    }

    #[test]
    fn matrix_rows_reject_ragged_input() {
        assert!(matrix_from_rows(&[vec![1.0, 2.0], vec![3.0]], "m").is_err());
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matrix_from_rows(&matrix_rows(&m), "m").unwrap(), m);
    }
}
