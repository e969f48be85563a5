//! Belief roadmap: uncertainty-aware node sampling, neighbour selection,
//! bidirectional edge construction and entropy-regularised graph search.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dynamics::ControlAffineModel;
use crate::grid::TimeGrid;
use crate::linalg;
use crate::pgcs::{
    hinge_integral, pgcs_connect, GaussianBelief, PgcsParams, TrajectoryDistribution,
};
use crate::sdf::{collision_free, CollisionCostParams, SdfMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefNode {
    pub id: usize,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub error_covariance: DMatrix<f64>,
    pub feasible: bool,
}

impl BeliefNode {
    pub fn position(&self, dim: usize) -> &[f64] {
        &self.mean.as_slice()[..dim]
    }

    pub fn belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.clone(),
            covariance: self.covariance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeCost {
    pub control: f64,
    pub hinge: f64,
    pub entropy: f64,
}

impl EdgeCost {
    pub fn total(&self, alpha: f64) -> f64 {
        self.control + self.hinge + alpha * self.entropy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefEdge {
    pub source: usize,
    pub target: usize,
    pub trajectory: TrajectoryDistribution,
    pub cost: EdgeCost,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMetadata {
    pub seed: u64,
    pub alpha: f64,
    pub dimension: usize,
    pub horizon: f64,
    pub steps: usize,
    pub attempted_edges: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGraph {
    pub nodes: Vec<BeliefNode>,
    pub edges: Vec<BeliefEdge>,
    pub metadata: GraphMetadata,
}

impl BeliefGraph {
    pub fn new(
        nodes: Vec<BeliefNode>,
        edges: Vec<BeliefEdge>,
        metadata: GraphMetadata,
    ) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Parse(format!("node {i} carries id {}", n.id)));
            }
        }
        for e in &edges {
            if e.source >= nodes.len() || e.target >= nodes.len() {
                return Err(Error::Parse(format!(
                    "edge {}->{} references a missing node",
                    e.source, e.target
                )));
            }
            if e.source == e.target {
                return Err(Error::Parse(format!("self edge at node {}", e.source)));
            }
        }
        Ok(Self {
            nodes,
            edges,
            metadata,
        })
    }

    /// Outgoing edge indices per node.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.source].push(k);
        }
        adj
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    /// `P_conf`: probability mass of the position Gaussian inside the obstacle distance.
    pub confidence: f64,
    /// Sampled positions need a signed distance above this.
    pub clearance: f64,
    pub velocity_variance: f64,
    /// `β` in `P0 = βΣ`.
    pub error_fraction: f64,
    pub neighbors: usize,
    pub radius: Option<f64>,
    pub max_tries: usize,
    /// The chi-square level is raised to `P + margin·(1 − P)` so that
    /// finite-sample coverage checks clear `P` strictly.
    pub coverage_margin: f64,
    /// Obstacle distances are capped at this value before sizing the
    /// position covariance (open space would otherwise yield huge beliefs).
    pub distance_cap: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            clearance: 0.3,
            velocity_variance: 0.05,
            error_fraction: 0.25,
            neighbors: 4,
            radius: None,
            max_tries: 10_000,
            coverage_margin: 0.2,
            distance_cap: 2.0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if !(self.error_fraction > 0.0 && self.error_fraction < 1.0) {
            return bad("error_fraction must lie in (0, 1)");
        }
        if !(self.velocity_variance > 0.0) {
            return bad("velocity_variance must be > 0");
        }
        if self.neighbors == 0 && !self.radius.is_some_and(|r| r > 0.0) {
            return bad("need neighbors >= 1 or radius > 0");
        }
        if !(0.0..1.0).contains(&self.coverage_margin) {
            return bad("coverage_margin must lie in [0, 1)");
        }
        if !(self.distance_cap > 0.0) || self.max_tries == 0 {
            return bad("distance_cap and max_tries must be positive");
        }
        Ok(())
    }

    /// Neighbour count default for the spatial dimension.
    pub fn default_neighbors(dim: usize) -> usize {
        if dim >= 3 {
            6
        } else {
            4
        }
    }
}

/// Chi-square quantile with `dof` degrees of freedom.
pub fn chi_square_quantile(p: f64, dof: usize) -> Result<f64> {
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(dist.inverse_cdf(p))
}

/// Belief at a free position: isotropic position covariance sized so that
/// the Gaussian puts more than `P_conf` of its mass within the obstacle
/// distance, zero mean velocity with `σ_v²I`, and `P0 = βΣ`.
pub fn belief_at(
    map: &SdfMap,
    params: &SamplerParams,
    position: &[f64],
    id: usize,
) -> Result<BeliefNode> {
    let d = map.dim();
    let s = map.value_grad(position);
    let feasible = !s.out_of_bounds && s.value > params.clearance;
    let dist = s.value.min(params.distance_cap).max(f64::MIN_POSITIVE);
    let level = params.confidence + params.coverage_margin * (1.0 - params.confidence);
    let q = chi_square_quantile(level, d)?;
    let var = (dist * dist / q).max(1e-6 * dist * dist);
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    for k in 0..d {
        cov[(k, k)] = var;
        cov[(d + k, d + k)] = params.velocity_variance;
    }
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from_slice(position);
    Ok(BeliefNode {
        id,
        mean,
        error_covariance: &cov * params.error_fraction,
        covariance: cov,
        feasible,
    })
}

/// Rejection-sample one free node uniformly over the map's bounding box.
pub fn sample_belief(
    map: &SdfMap,
    params: &SamplerParams,
    rng: &mut impl Rng,
    id: usize,
) -> Result<BeliefNode> {
    let (lo, hi) = map.bounds();
    let mut p = vec![0.0; map.dim()];
    for _ in 0..params.max_tries {
        for k in 0..p.len() {
            p[k] = rng.random_range(lo[k]..hi[k]);
        }
        let s = map.value_grad(&p);
        if !s.out_of_bounds && s.value > params.clearance {
            return belief_at(map, params, &p, id);
        }
    }
    Err(Error::Sampling(format!(
        "no free position found in {} tries",
        params.max_tries
    )))
}

/// The `k` nearest other nodes by position distance, ties broken by id,
/// optionally restricted to a radius.
pub fn nearest_neighbors(
    nodes: &[BeliefNode],
    index: usize,
    dim: usize,
    k: usize,
    radius: Option<f64>,
) -> Vec<usize> {
    let p = nodes[index].position(dim);
    let mut cand: Vec<(f64, usize)> = nodes
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(j, n)| {
            let q = n.position(dim);
            let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), j)
        })
        .filter(|(d, _)| radius.is_none_or(|r| *d <= r))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = if k == 0 { cand.len() } else { k };
    cand.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Control energy along the mean, unweighted hinge integral and entropy
/// `−∫ log det Σ dt`, all by the trapezoidal rule over the knots.
pub fn edge_cost(
    traj: &TrajectoryDistribution,
    grid: &TimeGrid,
    map: &SdfMap,
    collision: &CollisionCostParams,
) -> Result<EdgeCost> {
    let w = grid.trapezoid_weights();
    if w.len() != traj.len() {
        return Err(Error::DimensionMismatch {
            what: "trajectory knots",
            expected: w.len(),
            got: traj.len(),
        });
    }
    let control = 0.5
        * traj
            .mean_control()
            .iter()
            .zip(&w)
            .map(|(u, w)| w * u.norm_squared())
            .sum::<f64>();
    let entropy = -entropy_integral(&traj.covariance, &w)?;
    Ok(EdgeCost {
        control,
        hinge: hinge_integral(map, collision, grid, &traj.mean),
        entropy,
    })
}

/// `∫ log det Σ dt` for the given quadrature weights.
pub fn entropy_integral(covariance: &[DMatrix<f64>], weights: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (s, w)) in covariance.iter().zip(weights).enumerate() {
        let chol = linalg::symmetrize(s).cholesky().ok_or_else(|| {
            Error::NumericalInstability(format!("covariance not SPD at knot {i}"))
        })?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        acc += w * logdet;
    }
    Ok(acc)
}

/// Everything `build_graph` needs besides the endpoints.
#[derive(Debug, Clone)]
pub struct RoadmapSettings {
    pub model: ControlAffineModel,
    pub collision: CollisionCostParams,
    pub pgcs: PgcsParams,
    pub grid: TimeGrid,
    pub sampler: SamplerParams,
    pub alpha: f64,
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildTiming {
    pub sampling_seconds: f64,
    pub build_seconds: f64,
    pub edge_mean_seconds: f64,
    pub edge_max_seconds: f64,
    pub attempted_edges: usize,
    pub retained_edges: usize,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: BeliefGraph,
    pub timing: BuildTiming,
}

fn check_endpoint(
    map: &SdfMap,
    collision: &CollisionCostParams,
    node: &BeliefNode,
    what: &str,
) -> Result<()> {
    let s = map.value_grad(node.position(map.dim()));
    if s.out_of_bounds || s.value <= collision.threshold {
        return Err(Error::Infeasible(format!(
            "{what} position is not in free space"
        )));
    }
    if !linalg::is_spd(&(&node.covariance - &node.error_covariance), 1e-10) {
        return Err(Error::Infeasible(format!(
            "{what} covariance below its error covariance"
        )));
    }
    Ok(())
}

/// Sample nodes, connect every neighbour pair in both directions and keep
/// the edges that meet their terminal moments with a collision-free mean. Node 0 is the start, node 1 the goal.
pub fn build_graph(
    settings: &RoadmapSettings,
    map: &SdfMap,
    start: &BeliefNode,
    goal: &BeliefNode,
) -> Result<GraphBuild> {
    settings.sampler.validate()?;
    settings.pgcs.validate()?;
    settings.collision.validate()?;
    let dim = settings.model.spatial_dim();
    if map.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: "map dimension",
            expected: dim,
            got: map.dim(),
        });
    }
    check_endpoint(map, &settings.collision, start, "start")?;
    check_endpoint(map, &settings.collision, goal, "goal")?;

    let t_sample = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut nodes = vec![
        BeliefNode {
            id: 0,
            ..start.clone()
        },
        BeliefNode {
            id: 1,
            ..goal.clone()
        },
    ];
    for k in 0..settings.samples {
        nodes.push(sample_belief(map, &settings.sampler, &mut rng, k + 2)?);
    }
    let sampling_seconds = t_sample.elapsed().as_secs_f64();

    let mut pairs = BTreeSet::new();
    for i in 0..nodes.len() {
        for j in nearest_neighbors(
            &nodes,
            i,
            dim,
            settings.sampler.neighbors,
            settings.sampler.radius,
        ) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let tasks: Vec<(usize, usize)> = {
        let mut t: Vec<(usize, usize)> =
            pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        t.sort_unstable();
        t
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let t_build = Instant::now();
    let results: Vec<(Option<BeliefEdge>, f64)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, t)| {
                let t0 = Instant::now();
                let edge = connect(settings, map, &nodes[s], &nodes[t]);
                (edge, t0.elapsed().as_secs_f64())
            })
            .collect()
    });
    let build_seconds = t_build.elapsed().as_secs_f64();

    let edge_times: Vec<f64> = results.iter().map(|r| r.1).collect();
    let edges: Vec<BeliefEdge> = results.into_iter().filter_map(|r| r.0).collect();
    if edges.is_empty() {
        warn!("no edges retained; the roadmap is disconnected");
    }
    info!(
        "roadmap: {} nodes, {} of {} edges retained in {:.3}s",
        nodes.len(),
        edges.len(),
        tasks.len(),
        build_seconds
    );
    let timing = BuildTiming {
        sampling_seconds,
        build_seconds,
        edge_mean_seconds: if edge_times.is_empty() {
            0.0
        } else {
            edge_times.iter().sum::<f64>() / edge_times.len() as f64
        },
        edge_max_seconds: edge_times.iter().cloned().fold(0.0, f64::max),
        attempted_edges: tasks.len(),
        retained_edges: edges.len(),
        workers: settings.workers.max(1),
    };
    let metadata = GraphMetadata {
        seed: settings.seed,
        alpha: settings.alpha,
        dimension: dim,
        horizon: settings.grid.horizon(),
        steps: settings.grid.steps(),
        attempted_edges: tasks.len(),
    };
    Ok(GraphBuild {
        graph: BeliefGraph::new(nodes, edges, metadata)?,
        timing,
    })
}

fn connect(
    settings: &RoadmapSettings,
    map: &SdfMap,
    from: &BeliefNode,
    to: &BeliefNode,
) -> Option<BeliefEdge> {
    let res = pgcs_connect(
        &settings.model,
        map,
        &settings.collision,
        &settings.pgcs,
        &settings.grid,
        &from.belief(),
        &from.error_covariance,
        &to.belief(),
    );
    let res = match res {
        Ok(r) => r,
        Err(e) => {
            info!("edge {}->{} dropped: {e}", from.id, to.id);
            return None;
        }
    };
    // the outer loop converges sublinearly near obstacles; an edge that ran
    // out of iterations is still usable once its terminal moments are met
    if !res.moments_converged {
        info!(
            "edge {}->{} dropped: terminal moments missed after {} iterations",
            from.id, to.id, res.iterations
        );
        return None;
    }
    if !res.converged {
        debug!("edge {}->{} kept at the iteration limit", from.id, to.id);
    }
    if !collision_free(map, &settings.collision, &res.trajectory.mean) {
        info!("edge {}->{} dropped: mean path collides", from.id, to.id);
        return None;
    }
    match edge_cost(&res.trajectory, &settings.grid, map, &settings.collision) {
        Ok(cost) => Some(BeliefEdge {
            source: from.id,
            target: to.id,
            trajectory: res.trajectory,
            cost,
            iterations: res.iterations,
        }),
        Err(e) => {
            info!("edge {}->{} dropped: {e}", from.id, to.id);
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPath {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub cost: f64,
    pub components: EdgeCost,
    pub trajectory: TrajectoryDistribution,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum SearchOutcome {
    Found(PlannedPath),
    NotFound { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueEntry {
    priority: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on priority, then on node id
        other
            .priority
            .total_cmp(&self.priority)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum total-cost path with uniform-cost search.
pub fn search_path(
    graph: &BeliefGraph,
    start: usize,
    goal: usize,
    alpha: f64,
) -> Result<SearchOutcome> {
    search_path_with_heuristic(graph, start, goal, alpha, 0.0)
}

/// Best-first search with `h = scale·‖p − p_goal‖`. Any `scale > 0` may be
/// inadmissible for entropy-weighted costs; `0` gives uniform-cost search.
/// Graphs with negative edge costs fall back to Bellman–Ford.
pub fn search_path_with_heuristic(
    graph: &BeliefGraph,
    start: usize,
    goal: usize,
    alpha: f64,
    scale: f64,
) -> Result<SearchOutcome> {
    let n = graph.nodes.len();
    if start >= n || goal >= n {
        return Err(Error::InvalidParameter(format!(
            "node id out of range (graph has {n} nodes)"
        )));
    }
    if start == goal {
        return Err(Error::InvalidParameter("start and goal coincide".into()));
    }
    let weights: Vec<f64> = graph.edges.iter().map(|e| e.cost.total(alpha)).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("edge cost".into()));
    }
    let pred = if weights.iter().all(|&w| w >= 0.0) {
        dijkstra(graph, &weights, start, goal, scale)
    } else {
        bellman_ford(graph, &weights, start)?
    };
    let mut edges = Vec::new();
    let mut cur = goal;
    while cur != start {
        match pred[cur] {
            Some(k) => {
                edges.push(k);
                cur = graph.edges[k].source;
            }
            None => {
                return Ok(SearchOutcome::NotFound {
                    reason: format!("no path from node {start} to node {goal}"),
                })
            }
        }
        if edges.len() > n {
            return Err(Error::NumericalInstability("predecessor cycle".into()));
        }
    }
    edges.reverse();
    Ok(SearchOutcome::Found(assemble_path(graph, &edges, alpha)))
}

fn dijkstra(
    graph: &BeliefGraph,
    weights: &[f64],
    start: usize,
    goal: usize,
    scale: f64,
) -> Vec<Option<usize>> {
    let n = graph.nodes.len();
    let dim = graph.metadata.dimension;
    let adj = graph.adjacency();
    let goal_pos = graph.nodes[goal].position(dim).to_vec();
    let h = |v: usize| {
        if scale == 0.0 {
            return 0.0;
        }
        let p = graph.nodes[v].position(dim);
        scale
            * p.iter()
                .zip(&goal_pos)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
    };
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[start] = 0.0;
    heap.push(QueueEntry {
        priority: h(start),
        node: start,
    });
    while let Some(QueueEntry { node, .. }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        if node == goal {
            break;
        }
        for &k in &adj[node] {
            let t = graph.edges[k].target;
            let nd = dist[node] + weights[k];
            if nd < dist[t] {
                dist[t] = nd;
                pred[t] = Some(k);
                heap.push(QueueEntry {
                    priority: nd + h(t),
                    node: t,
                });
            }
        }
    }
    pred
}

fn bellman_ford(graph: &BeliefGraph, weights: &[f64], start: usize) -> Result<Vec<Option<usize>>> {
    let n = graph.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    dist[start] = 0.0;
    for _ in 0..n {
        let mut changed = false;
        for (k, e) in graph.edges.iter().enumerate() {
            if dist[e.source].is_finite() && dist[e.source] + weights[k] < dist[e.target] {
                dist[e.target] = dist[e.source] + weights[k];
                pred[e.target] = Some(k);
                changed = true;
            }
        }
        if !changed {
            return Ok(pred);
        }
    }
    Err(Error::NumericalInstability(
        "negative-cost cycle in the roadmap; lower alpha".into(),
    ))
}

fn assemble_path(graph: &BeliefGraph, edges: &[usize], alpha: f64) -> PlannedPath {
    let mut nodes = vec![graph.edges[edges[0]].source];
    let mut components = EdgeCost {
        control: 0.0,
        hinge: 0.0,
        entropy: 0.0,
    };
    let mut cost = 0.0;
    let mut traj: Option<TrajectoryDistribution> = None;
    for &k in edges {
        let e = &graph.edges[k];
        nodes.push(e.target);
        components.control += e.cost.control;
        components.hinge += e.cost.hinge;
        components.entropy += e.cost.entropy;
        cost += e.cost.total(alpha);
        traj = Some(match traj {
            None => e.trajectory.clone(),
            Some(mut acc) => {
                let offset = *acc.times.last().unwrap();
                let t = &e.trajectory;
                acc.times.extend(t.times.iter().skip(1).map(|s| s + offset));
                acc.mean.extend(t.mean.iter().skip(1).cloned());
                acc.covariance.extend(t.covariance.iter().skip(1).cloned());
                acc.error_covariance
                    .extend(t.error_covariance.iter().skip(1).cloned());
                acc.estimate_covariance
                    .extend(t.estimate_covariance.iter().skip(1).cloned());
                acc.gain.extend(t.gain.iter().skip(1).cloned());
                acc.feedforward
                    .extend(t.feedforward.iter().skip(1).cloned());
                acc.closed_loop_matrix
                    .extend(t.closed_loop_matrix.iter().skip(1).cloned());
                acc.closed_loop_offset
                    .extend(t.closed_loop_offset.iter().skip(1).cloned());
                acc
            }
        });
    }
    PlannedPath {
        nodes,
        edges: edges.to_vec(),
        cost,
        components,
        trajectory: traj.unwrap(),
    }
}
