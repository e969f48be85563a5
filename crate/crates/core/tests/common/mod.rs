#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pgcs_brm::brm::{
    belief_at, build_graph, BeliefEdge, BeliefGraph, BeliefNode, EdgeCost, GraphBuild,
    GraphMetadata,
};
use pgcs_brm::io::{load_map, LoadedMap, PlannerConfig};
use pgcs_brm::pgcs::TrajectoryDistribution;
use pgcs_brm::steering::LqDrivingTerms;
use pgcs_brm::TimeGrid;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn scene_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenes")
        .join(name)
}

pub fn load_scene(config: &str, map: &str) -> (PlannerConfig, LoadedMap) {
    let cfg = PlannerConfig::load(&scene_path(config)).expect("scene config");
    let map = load_map(&scene_path(map)).expect("scene map");
    (cfg, map)
}

/// Roadmap of a scene with its own start and goal, optionally overriding the worker count.
pub fn build_scene(cfg: &PlannerConfig, map: &LoadedMap, workers: Option<usize>) -> GraphBuild {
    let mut settings = cfg.roadmap_settings().expect("settings");
    if let Some(w) = workers {
        settings.workers = w;
    }
    let s = belief_at(&map.sdf, &cfg.sampler, cfg.start.as_ref().unwrap(), 0).unwrap();
    let g = belief_at(&map.sdf, &cfg.sampler, cfg.goal.as_ref().unwrap(), 1).unwrap();
    build_graph(&settings, &map.sdf, &s, &g).expect("build graph")
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `LLᵀ + floor·I` with `L` entries of standard deviation `scale`.
pub fn random_spd(rng: &mut impl Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

/// `(A, B)` of the double integrator in `d` spatial dimensions.
pub fn double_integrator(d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    let mut b = DMatrix::zeros(2 * d, d);
    for k in 0..d {
        a[(k, d + k)] = 1.0;
        b[(d + k, k)] = 1.0;
    }
    (a, b)
}

pub fn di_terms(grid: &TimeGrid, d: usize, q: f64, noise: f64) -> LqDrivingTerms {
    let (a, b) = double_integrator(d);
    let n = 2 * d;
    LqDrivingTerms::constant(
        grid,
        &a,
        &DVector::zeros(n),
        &b,
        &(DMatrix::identity(n, n) * q),
        &DVector::zeros(n),
        noise,
    )
    .unwrap()
}

pub fn dummy_trajectory(n: usize) -> TrajectoryDistribution {
    TrajectoryDistribution {
        times: vec![0.0, 1.0],
        mean: vec![DVector::zeros(n); 2],
        covariance: vec![DMatrix::identity(n, n); 2],
        error_covariance: vec![DMatrix::identity(n, n); 2],
        estimate_covariance: vec![DMatrix::identity(n, n); 2],
        gain: vec![DMatrix::zeros(n / 2, n); 2],
        feedforward: vec![DVector::zeros(n / 2); 2],
        closed_loop_matrix: vec![DMatrix::zeros(n, n); 2],
        closed_loop_offset: vec![DVector::zeros(n); 2],
    }
}

/// Random directed graph on `n` nodes with edge probability `p`.
///
/// With `dag` set, edges only run from lower to higher ids and entropies may
/// make totals negative; otherwise every total is non-negative for `alpha ≤ 1`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64, dag: bool) -> BeliefGraph {
    let nodes = (0..n)
        .map(|id| BeliefNode {
            id,
            mean: DVector::from_vec(vec![
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
                0.0,
                0.0,
            ]),
            covariance: DMatrix::identity(4, 4),
            error_covariance: DMatrix::identity(4, 4) * 0.25,
            feasible: true,
        })
        .collect();
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s == t || (dag && t < s) || !rng.random_bool(p) {
                continue;
            }
            let control: f64 = rng.random_range(0.0..5.0);
            let entropy = if dag {
                rng.random_range(-8.0..4.0)
            } else {
                rng.random_range(-control.min(2.0)..4.0)
            };
            edges.push(BeliefEdge {
                source: s,
                target: t,
                trajectory: dummy_trajectory(4),
                cost: EdgeCost {
                    control,
                    hinge: rng.random_range(0.0..0.5),
                    entropy,
                },
                iterations: 1,
            });
        }
    }
    let metadata = GraphMetadata {
        seed: 0,
        alpha: 0.2,
        dimension: 2,
        horizon: 1.0,
        steps: 1,
        attempted_edges: edges.len(),
    };
    BeliefGraph::new(nodes, edges, metadata).unwrap()
}

/// Cheapest simple path cost by exhaustive enumeration, summing edge totals in path order.
pub fn enumerate_best(graph: &BeliefGraph, start: usize, goal: usize, alpha: f64) -> Option<f64> {
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        graph: &BeliefGraph,
        adj: &[Vec<usize>],
        v: usize,
        goal: usize,
        alpha: f64,
        acc: f64,
        seen: &mut Vec<bool>,
        best: &mut Option<f64>,
    ) {
        if v == goal {
            if best.is_none_or(|b| acc < b) {
                *best = Some(acc);
            }
            return;
        }
        for &k in &adj[v] {
            let t = graph.edges[k].target;
            if !seen[t] {
                seen[t] = true;
                dfs(
                    graph,
                    adj,
                    t,
                    goal,
                    alpha,
                    acc + graph.edges[k].cost.total(alpha),
                    seen,
                    best,
                );
                seen[t] = false;
            }
        }
    }
    let adj = graph.adjacency();
    let mut seen = vec![false; graph.nodes.len()];
    seen[start] = true;
    let mut best = None;
    dfs(graph, &adj, start, goal, alpha, 0.0, &mut seen, &mut best);
    best
}

fn lerp_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    a * (1.0 - s) + b * s
}

fn lerp_vector(a: &DVector<f64>, b: &DVector<f64>, s: f64) -> DVector<f64> {
    a * (1.0 - s) + b * s
}

/// Linear plant, measurement and noise for closed-loop simulation.
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub noise: f64,
}

/// Terminal samples of Euler–Maruyama rollouts of `dx = (Ax + Bu)dt + √ε B dW`
/// with a Kalman–Bucy filter in the loop and `u = K x̂ + d`. Gains, feedforward
/// and filter covariance are interpolated linearly between knots.
///
/// Plant and filter are stepped together as `z = (x, x̂)`,
/// `dz = (Mz + c)dt + [√ε B dW; L dv]` with `M = [A, BK; LH, A + BK − LH]`.
pub fn monte_carlo(
    plant: &LinearPlant,
    traj: &TrajectoryDistribution,
    sigma0: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    rollouts: usize,
    substeps: usize,
    rng: &mut impl Rng,
) -> Vec<DVector<f64>> {
    let n = plant.a.nrows();
    let m = plant.b.ncols();
    let q = plant.h.nrows();
    let knots = traj.times.len();
    let r_inv = plant.r.clone().try_inverse().unwrap();
    let chol_r = plant.r.clone().cholesky().unwrap().l();
    let bn = &plant.b * plant.noise.sqrt();
    // per substep: dt, M, c and the noise map acting on (dW, z_v) with dv = chol_r z_v √dt
    let mut schedule = Vec::new();
    for i in 0..knots - 1 {
        let h = traj.times[i + 1] - traj.times[i];
        for s in 0..substeps {
            let w = s as f64 / substeps as f64;
            let k = lerp_matrix(&traj.gain[i], &traj.gain[i + 1], w);
            let d = lerp_vector(&traj.feedforward[i], &traj.feedforward[i + 1], w);
            let p = lerp_matrix(&traj.error_covariance[i], &traj.error_covariance[i + 1], w);
            let l = &p * plant.h.transpose() * &r_inv;
            let bk = &plant.b * &k;
            let lh = &l * &plant.h;
            let mut mz = DMatrix::zeros(2 * n, 2 * n);
            mz.view_mut((0, 0), (n, n)).copy_from(&plant.a);
            mz.view_mut((0, n), (n, n)).copy_from(&bk);
            mz.view_mut((n, 0), (n, n)).copy_from(&lh);
            mz.view_mut((n, n), (n, n))
                .copy_from(&(&plant.a + &bk - &lh));
            let bd = &plant.b * &d;
            let mut c = DVector::zeros(2 * n);
            c.rows_mut(0, n).copy_from(&bd);
            c.rows_mut(n, n).copy_from(&bd);
            let mut g = DMatrix::zeros(2 * n, m + q);
            g.view_mut((0, 0), (n, m)).copy_from(&bn);
            g.view_mut((n, m), (n, q)).copy_from(&(&l * &chol_r));
            let dt = h / substeps as f64;
            schedule.push((dt, mz, c, g * dt.sqrt()));
        }
    }
    let m0 = &traj.mean[0];
    let chol_hat = (sigma0 - p0).cholesky().expect("Σ0 − P0 must be SPD").l();
    let chol_err = p0.clone().cholesky().expect("P0 must be SPD").l();
    let mut out = Vec::with_capacity(rollouts);
    let mut dz = DVector::zeros(2 * n);
    let mut xi = DVector::zeros(m + q);
    for _ in 0..rollouts {
        let xh = m0 + &chol_hat * gaussian_vec(rng, n);
        let x = &xh + &chol_err * gaussian_vec(rng, n);
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(&x);
        z.rows_mut(n, n).copy_from(&xh);
        for (dt, mz, c, g) in &schedule {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            dz.copy_from(c);
            dz.gemv(1.0, mz, &z, 1.0);
            z.axpy(*dt, &dz, 1.0);
            z.gemv(1.0, g, &xi, 1.0);
        }
        out.push(z.rows(0, n).into_owned());
    }
    out
}

pub fn sample_moments(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples[0].len();
    let k = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(n), |acc, x| acc + x) / k;
    let mut cov = DMatrix::zeros(n, n);
    for x in samples {
        let e = x - &mean;
        cov.ger(1.0, &e, &e, 1.0);
    }
    (mean, cov / (k - 1.0))
}
