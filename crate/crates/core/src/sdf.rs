//! Signed distance fields on regular grids, the hinge collision cost and
//! mean-path collision checks.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Value stored in an obstacle-free map.
pub const DEFAULT_EMPTY_VALUE: f64 = 1.0e6;

/// Geometric primitive in workspace coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    /// Axis-aligned box.
    Box { min: Vec<f64>, max: Vec<f64> },
    /// Circle (2D) or sphere (3D).
    Sphere { center: Vec<f64>, radius: f64 },
}

impl Obstacle {
    pub fn dim(&self) -> usize {
        match self {
            Obstacle::Box { min, .. } => min.len(),
            Obstacle::Sphere { center, .. } => center.len(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Obstacle::Box { min, max } => {
                if min.len() != dim || max.len() != dim {
                    return Err(Error::InvalidParameter(format!(
                        "box corners must have {dim} coordinates"
                    )));
                }
                if min.iter().zip(max).any(|(a, b)| !(a < b)) {
                    return Err(Error::InvalidParameter(
                        "box min corner must be below max corner".into(),
                    ));
                }
            }
            Obstacle::Sphere { center, radius } => {
                if center.len() != dim {
                    return Err(Error::InvalidParameter(format!(
                        "sphere center must have {dim} coordinates"
                    )));
                }
                if !(*radius > 0.0) {
                    return Err(Error::InvalidParameter("sphere radius must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Exact signed distance, negative inside.
    pub fn signed_distance(&self, p: &[f64]) -> f64 {
        match self {
            Obstacle::Sphere { center, radius } => {
                let d2: f64 = p.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() - radius
            }
            Obstacle::Box { min, max } => {
                let mut outside = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for k in 0..min.len() {
                    let c = 0.5 * (min[k] + max[k]);
                    let half = 0.5 * (max[k] - min[k]);
                    let q = (p[k] - c).abs() - half;
                    outside += q.max(0.0).powi(2);
                    inside = inside.max(q);
                }
                outside.sqrt() + inside.min(0.0)
            }
        }
    }
}

/// Obstacles of one workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSet {
    pub dimension: usize,
    pub obstacles: Vec<Obstacle>,
}

impl ObstacleSet {
    pub fn new(dimension: usize, obstacles: Vec<Obstacle>) -> Result<Self> {
        let set = Self {
            dimension,
            obstacles,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dimension) {
            return Err(Error::InvalidParameter(format!(
                "workspace dimension must be 2 or 3, got {}",
                self.dimension
            )));
        }
        self.obstacles
            .iter()
            .try_for_each(|o| o.validate(self.dimension))
    }

    /// Minimum exact signed distance over all primitives.
    pub fn signed_distance(&self, p: &[f64]) -> Option<f64> {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(p))
            .min_by(f64::total_cmp)
    }
}

/// Placement of the sampling grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub cell_size: f64,
    pub extents: Vec<usize>,
}

/// Discretised signed distance field. Values are stored row-major (last axis
/// fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct SdfMap {
    origin: Vec<f64>,
    cell_size: f64,
    extents: Vec<usize>,
    strides: Vec<usize>,
    values: Vec<f64>,
}

/// Interpolated field value at a query point.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfSample {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// The query was clamped into the grid; callers must treat it as colliding.
    pub out_of_bounds: bool,
}

pub fn build_sdf(obstacles: &ObstacleSet, grid: &GridSpec) -> Result<SdfMap> {
    build_sdf_with_empty(obstacles, grid, DEFAULT_EMPTY_VALUE)
}

pub fn build_sdf_with_empty(
    obstacles: &ObstacleSet,
    grid: &GridSpec,
    empty_value: f64,
) -> Result<SdfMap> {
    obstacles.validate()?;
    let dim = obstacles.dimension;
    if grid.origin.len() != dim || grid.extents.len() != dim {
        return Err(Error::InvalidParameter(format!(
            "grid origin/extents must have {dim} entries"
        )));
    }
    let mut map = SdfMap::with_values(
        grid.origin.clone(),
        grid.cell_size,
        grid.extents.clone(),
        Vec::new(),
    )?;
    let total: usize = map.extents.iter().product();
    let mut values = Vec::with_capacity(total);
    let mut p = vec![0.0; dim];
    for flat in 0..total {
        let mut rem = flat;
        for k in 0..dim {
            let i = rem / map.strides[k];
            rem %= map.strides[k];
            p[k] = map.origin[k] + i as f64 * map.cell_size;
        }
        values.push(obstacles.signed_distance(&p).unwrap_or(empty_value));
    }
    map.values = values;
    Ok(map)
}

impl SdfMap {
    fn with_values(
        origin: Vec<f64>,
        cell_size: f64,
        extents: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if extents.is_empty() || extents.iter().any(|&e| e < 2) {
            return Err(Error::InvalidParameter(
                "grid extents must be at least 2 along every axis".into(),
            ));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid origin must be finite".into()));
        }
        let dim = extents.len();
        let mut strides = vec![1; dim];
        for k in (0..dim - 1).rev() {
            strides[k] = strides[k + 1] * extents[k + 1];
        }
        Ok(Self {
            origin,
            cell_size,
            extents,
            strides,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value stored at a grid node.
    pub fn node_value(&self, index: &[usize]) -> f64 {
        self.values[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Lower and upper corners of the grid's bounding box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let hi = self
            .origin
            .iter()
            .zip(&self.extents)
            .map(|(o, &e)| o + (e - 1) as f64 * self.cell_size)
            .collect();
        (self.origin.clone(), hi)
    }

    /// Multilinear interpolation of the node values and its analytic gradient.
    ///
    /// On an interior grid line the interpolant has a kink; there the gradient
    /// component across the line is the average of both one-sided derivatives.
    pub fn value_grad(&self, pos: &[f64]) -> SdfSample {
        let dim = self.dim();
        let mut out_of_bounds = pos.len() < dim;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..dim {
            let mut u = (pos.get(k).copied().unwrap_or(f64::NAN) - self.origin[k]) / self.cell_size;
            let upper = (self.extents[k] - 1) as f64;
            if !u.is_finite() {
                u = 0.0;
                out_of_bounds = true;
            }
            if u < 0.0 {
                u = 0.0;
                out_of_bounds = true;
            } else if u > upper {
                u = upper;
                out_of_bounds = true;
            }
            let r = u.round();
            if (u - r).abs() < 1e-9 {
                u = r;
            }
            let b = (u.floor() as usize).min(self.extents[k] - 2);
            base[k] = b;
            frac[k] = u - b as f64;
        }
        let (value, mut gradient) = self.cell_eval(&base[..dim], &frac[..dim]);
        for k in 0..dim {
            if frac[k] == 0.0 && base[k] > 0 {
                let mut b2 = base;
                let mut f2 = frac;
                b2[k] -= 1;
                f2[k] = 1.0;
                let (_, g2) = self.cell_eval(&b2[..dim], &f2[..dim]);
                gradient[k] = 0.5 * (gradient[k] + g2[k]);
            }
        }
        SdfSample {
            value,
            gradient,
            out_of_bounds,
        }
    }

    fn cell_eval(&self, base: &[usize], frac: &[f64]) -> (f64, Vec<f64>) {
        let dim = base.len();
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];
        for corner in 0..(1usize << dim) {
            let mut idx = 0;
            let mut w = 1.0;
            for k in 0..dim {
                let bit = (corner >> k) & 1;
                idx += (base[k] + bit) * self.strides[k];
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            let v = self.values[idx];
            value += w * v;
            for (k, g) in grad.iter_mut().enumerate() {
                let mut dw = 1.0;
                for l in 0..dim {
                    let bit = (corner >> l) & 1;
                    dw *= if l == k {
                        if bit == 1 {
                            1.0
                        } else {
                            -1.0
                        }
                    } else if bit == 1 {
                        frac[l]
                    } else {
                        1.0 - frac[l]
                    };
                }
                *g += dw * v;
            }
        }
        for g in &mut grad {
            *g /= self.cell_size;
        }
        (value, grad)
    }

    /// Write the flat binary sidecar: dimension (u64), extents (u64 each),
    /// origin (f64 each), cell size (f64), then the row-major values (f64),
    /// all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for &e in &self.extents {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &o in &self.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&self.cell_size.to_le_bytes())?;
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        if !(1..=3).contains(&dim) {
            return Err(Error::Parse(format!("bad SDF sidecar dimension {dim}")));
        }
        let mut extents = Vec::with_capacity(dim);
        for _ in 0..dim {
            extents.push(u64::from_le_bytes(next(&mut r)?) as usize);
        }
        let mut origin = Vec::with_capacity(dim);
        for _ in 0..dim {
            origin.push(f64::from_le_bytes(next(&mut r)?));
        }
        let cell = f64::from_le_bytes(next(&mut r)?);
        let total: usize = extents.iter().product();
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(f64::from_le_bytes(next(&mut r)?));
        }
        Self::with_values(origin, cell, extents, values)
    }
}

/// Hinge cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionCostParams {
    /// Safety margin `ε_margin` (m).
    pub margin: f64,
    /// Obstacle weight `σ_obs`.
    pub weight: f64,
    /// A mean path collides where the field drops to or below this value.
    pub threshold: f64,
}

impl Default for CollisionCostParams {
    fn default() -> Self {
        Self {
            margin: 0.5,
            weight: 1.0,
            threshold: 0.0,
        }
    }
}

impl CollisionCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.weight >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::InvalidParameter(
                "collision margin and weight must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `V = σ·hinge²` with first and Gauss–Newton second derivatives in state space.
#[derive(Debug, Clone)]
pub struct HingeCost {
    pub value: f64,
    pub hinge: f64,
    pub gradient: DVector<f64>,
    pub gn_hessian: DMatrix<f64>,
    pub distance: f64,
    pub out_of_bounds: bool,
}

/// Hinge collision cost of a state whose first `map.dim()` entries are the
/// position; velocity entries carry no cost.
pub fn hinge_cost(map: &SdfMap, params: &CollisionCostParams, x: &DVector<f64>) -> HingeCost {
    let n = x.len();
    let d = map.dim();
    let s = map.value_grad(&x.as_slice()[..d.min(n)]);
    let hinge = (params.margin - s.value).max(0.0);
    let mut gradient = DVector::zeros(n);
    let mut gn_hessian = DMatrix::zeros(n, n);
    if hinge > 0.0 {
        for k in 0..d {
            gradient[k] = -2.0 * params.weight * hinge * s.gradient[k];
            for l in 0..d {
                gn_hessian[(k, l)] = 2.0 * params.weight * s.gradient[k] * s.gradient[l];
            }
        }
    }
    HingeCost {
        value: params.weight * hinge * hinge,
        hinge,
        gradient,
        gn_hessian,
        distance: s.value,
        out_of_bounds: s.out_of_bounds,
    }
}

/// Collision check of a mean path at its knots and at the midpoints between
/// consecutive knots. Out-of-bounds positions count as collisions.
pub fn collision_free(
    map: &SdfMap,
    params: &CollisionCostParams,
    mean_path: &[DVector<f64>],
) -> bool {
    let d = map.dim();
    let clear = |p: &[f64]| {
        let s = map.value_grad(p);
        !s.out_of_bounds && s.value > params.threshold
    };
    if mean_path.is_empty() {
        return false;
    }
    if !clear(&mean_path[0].as_slice()[..d]) {
        return false;
    }
    let mut mid = vec![0.0; d];
    for w in mean_path.windows(2) {
        let (a, b) = (&w[0].as_slice()[..d], &w[1].as_slice()[..d]);
        for k in 0..d {
            mid[k] = 0.5 * (a[k] + b[k]);
        }
        if !clear(&mid) || !clear(b) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circle_map(cell: f64) -> SdfMap {
        let obs = ObstacleSet::new(
            2,
            vec![Obstacle::Sphere {
                center: vec![0.0, 0.0],
                radius: 1.0,
            }],
        )
        .unwrap();
        let n = (8.0 / cell).round() as usize + 1;
        build_sdf(
            &obs,
            &GridSpec {
                origin: vec![-4.0, -4.0],
                cell_size: cell,
                extents: vec![n, n],
            },
        )
        .unwrap()
    }

    #[test]
    fn exact_primitive_values_at_nodes() {
        let m = circle_map(0.5);
        let s = m.value_grad(&[2.0, 0.0]);
        assert_eq!(s.value, 1.0);
        assert!(!s.out_of_bounds);

        let obs = ObstacleSet::new(
            2,
            vec![Obstacle::Box {
                min: vec![0.0, 0.0],
                max: vec![1.0, 1.0],
            }],
        )
        .unwrap();
        let m = build_sdf(
            &obs,
            &GridSpec {
                origin: vec![-1.0, -1.0],
                cell_size: 0.5,
                extents: vec![7, 7],
            },
        )
        .unwrap();
        assert_eq!(m.value_grad(&[0.5, 0.5]).value, -0.5);
        assert_eq!(m.value_grad(&[2.0, 0.5]).value, 1.0);
        // corner region: Euclidean distance to the corner
        assert!((m.value_grad(&[2.0, 2.0]).value - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn overlapping_primitives_match_boundary_sampling() {
        let set = ObstacleSet::new(
            2,
            vec![
                Obstacle::Sphere {
                    center: vec![0.0, 0.0],
                    radius: 1.0,
                },
                Obstacle::Box {
                    min: vec![0.5, -0.5],
                    max: vec![2.0, 0.5],
                },
            ],
        )
        .unwrap();
        // dense samples of both primitive boundaries
        let mut boundary = Vec::new();
        for i in 0..20000 {
            let th = i as f64 / 20000.0 * std::f64::consts::TAU;
            boundary.push((th.cos(), th.sin()));
        }
        for i in 0..=15000 {
            let s = i as f64 / 15000.0;
            boundary.push((0.5 + 1.5 * s, -0.5));
            boundary.push((0.5 + 1.5 * s, 0.5));
        }
        for i in 0..=5000 {
            let s = i as f64 / 5000.0;
            boundary.push((0.5, -0.5 + s));
            boundary.push((2.0, -0.5 + s));
        }
        for probe in [[0.0, 2.5], [3.0, 1.0], [-2.0, -0.3], [1.2, 1.4]] {
            let oracle = boundary
                .iter()
                .map(|(x, y)| ((probe[0] - x).powi(2) + (probe[1] - y).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let v = set.signed_distance(&probe).unwrap();
            assert!((v - oracle).abs() < 1e-3, "{probe:?}: {v} vs {oracle}");
        }
    }

    #[test]
    fn empty_map_uses_sentinel() {
        let obs = ObstacleSet::new(2, vec![]).unwrap();
        let m = build_sdf(
            &obs,
            &GridSpec {
                origin: vec![0.0, 0.0],
                cell_size: 1.0,
                extents: vec![3, 3],
            },
        )
        .unwrap();
        assert!(m.values().iter().all(|&v| v == DEFAULT_EMPTY_VALUE));
    }

    #[test]
    fn invalid_grids_rejected() {
        let obs = ObstacleSet::new(2, vec![]).unwrap();
        assert!(build_sdf(
            &obs,
            &GridSpec {
                origin: vec![0.0, 0.0],
                cell_size: 0.0,
                extents: vec![3, 3]
            }
        )
        .is_err());
        assert!(build_sdf(
            &obs,
            &GridSpec {
                origin: vec![0.0, 0.0],
                cell_size: 1.0,
                extents: vec![1, 3]
            }
        )
        .is_err());
        assert!(build_sdf(
            &obs,
            &GridSpec {
                origin: vec![0.0, 0.0],
                cell_size: 1.0,
                extents: vec![]
            }
        )
        .is_err());
        assert!(ObstacleSet::new(
            2,
            vec![Obstacle::Sphere {
                center: vec![0.0, 0.0],
                radius: 0.0
            }]
        )
        .is_err());
        assert!(ObstacleSet::new(
            2,
            vec![Obstacle::Box {
                min: vec![1.0, 0.0],
                max: vec![0.0, 1.0]
            }]
        )
        .is_err());
    }

    #[test]
    fn node_gradient_is_averaged_one_sided_difference() {
        let m = circle_map(0.5);
        let s = m.value_grad(&[2.0, 0.5]);
        assert_eq!(s.value, m.node_value(&[12, 9]));
        let gx = (m.node_value(&[13, 9]) - m.node_value(&[11, 9])) / (2.0 * 0.5);
        let gy = (m.node_value(&[12, 10]) - m.node_value(&[12, 8])) / (2.0 * 0.5);
        assert!((s.gradient[0] - gx).abs() < 1e-14);
        assert!((s.gradient[1] - gy).abs() < 1e-14);
    }

    #[test]
    fn plane_field_is_reproduced_exactly() {
        // a half-space far away behaves like a plane over the grid
        let obs = ObstacleSet::new(
            3,
            vec![Obstacle::Box {
                min: vec![-100.0, -100.0, -100.0],
                max: vec![-5.0, 100.0, 100.0],
            }],
        )
        .unwrap();
        let m = build_sdf(
            &obs,
            &GridSpec {
                origin: vec![0.0, 0.0, 0.0],
                cell_size: 0.25,
                extents: vec![9, 9, 9],
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
            let s = m.value_grad(&p);
            assert!((s.value - (p[0] + 5.0)).abs() < 1e-12);
            assert!((s.gradient[0] - 1.0).abs() < 1e-12);
            assert!(s.gradient[1].abs() < 1e-12 && s.gradient[2].abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probes: Vec<[f64; 2]> = (0..200)
            .map(|_| {
                let r = rng.random_range(1.3..3.0);
                let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                [r * th.cos(), r * th.sin()]
            })
            .collect();
        let max_err = |cell: f64| {
            let m = circle_map(cell);
            probes
                .iter()
                .map(|p| (m.value_grad(p).value - ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (max_err(0.2), max_err(0.1), max_err(0.05));
        // fitted constant C = err / h²
        let c = e1 / 0.04;
        assert!(
            e2 <= c * 0.01 * 1.2 && e3 <= c * 0.0025 * 1.2,
            "{e1} {e2} {e3}"
        );
        assert!(e1 / e2 > 3.0 && e2 / e3 > 3.0);
    }

    #[test]
    fn eikonal_bound_away_from_corners() {
        let m = circle_map(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p: [f64; 2] = [rng.random_range(-3.5..3.5), rng.random_range(-3.5..3.5)];
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if r < 0.6 {
                continue;
            }
            let g = m.value_grad(&p).gradient;
            let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
            // bilinear gradients overshoot by O(cell · curvature)
            assert!(gn <= 1.0 + 0.5 * 0.1 / r, "{p:?} {gn}");
        }
    }

    #[test]
    fn out_of_bounds_is_flagged() {
        let m = circle_map(0.5);
        let s = m.value_grad(&[10.0, 0.0]);
        assert!(s.out_of_bounds);
        assert_eq!(s.value, m.value_grad(&[4.0, 0.0]).value);
    }

    #[test]
    fn hinge_cost_cases() {
        // plane field: S(p) = p_x + 5 ⇒ choose positions giving the desired distance
        let obs = ObstacleSet::new(
            2,
            vec![Obstacle::Box {
                min: vec![-100.0, -100.0],
                max: vec![-5.0, 100.0],
            }],
        )
        .unwrap();
        let m = build_sdf(
            &obs,
            &GridSpec {
                origin: vec![-6.0, -1.0],
                cell_size: 0.1,
                extents: vec![41, 21],
            },
        )
        .unwrap();
        let params = CollisionCostParams {
            margin: 0.2,
            weight: 1.0,
            threshold: 0.0,
        };
        let x = DVector::from_vec(vec![-4.5, 0.0, 1.0, 1.0]);
        let c = hinge_cost(&m, &params, &x);
        assert_eq!(c.value, 0.0);
        assert_eq!(c.gradient.norm(), 0.0);
        assert_eq!(c.gn_hessian.norm(), 0.0);
        let x = DVector::from_vec(vec![-5.1, 0.0, 1.0, 1.0]);
        let c = hinge_cost(&m, &params, &x);
        assert!((c.value - 0.09).abs() < 1e-12);
        assert_eq!(c.gradient[2], 0.0);
        assert_eq!(c.gradient[3], 0.0);
    }

    proptest! {
        #[test]
        fn hinge_gradient_matches_fd(r in 0.6f64..1.45, th in 0.0f64..std::f64::consts::TAU, vx in -1.0f64..1.0) {
            let m = circle_map(0.05);
            let params = CollisionCostParams { margin: 0.5, weight: 3.0, threshold: 0.0 };
            let x = DVector::from_vec(vec![r * th.cos(), r * th.sin(), vx, 0.0]);
            let c = hinge_cost(&m, &params, &x);
            prop_assume!(c.hinge > 1e-3);
            // stay inside one interpolation cell so the cost is smooth
            let h = 1e-7;
            for k in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (hinge_cost(&m, &params, &xp).value - hinge_cost(&m, &params, &xm).value) / (2.0 * h);
                prop_assert!((fd - c.gradient[k]).abs() <= 1e-4 * c.gradient.norm().max(1e-8) + 1e-7,
                    "k={} fd={} an={}", k, fd, c.gradient[k]);
            }
            let eig = nalgebra::SymmetricEigen::new(c.gn_hessian.clone()).eigenvalues;
            prop_assert!(eig.min() >= -1e-12);
        }
    }

    #[test]
    fn collision_checks() {
        let m = circle_map(0.05);
        let params = CollisionCostParams {
            margin: 0.2,
            weight: 1.0,
            threshold: 0.0,
        };
        let p = |x: f64, y: f64| DVector::from_vec(vec![x, y, 0.0, 0.0]);
        assert!(collision_free(
            &m,
            &params,
            &[p(-2.0, 1.6), p(0.0, 1.6), p(2.0, 1.6)]
        ));
        assert!(!collision_free(
            &m,
            &params,
            &[p(-2.0, 0.0), p(0.0, 0.5), p(2.0, 0.0)]
        ));
        // knots clear but the straight segment between them cuts the circle
        let path = [p(-1.2, 0.0), p(0.0, 1.2)];
        assert!(!collision_free(&m, &params, &path));
        assert!(!collision_free(&m, &params, &[p(5.0, 0.0)]));
    }

    #[test]
    fn midpoint_check_agrees_with_dense_sampling() {
        let obs = ObstacleSet::new(
            2,
            vec![Obstacle::Box {
                min: vec![0.0, 0.0],
                max: vec![1.0, 1.0],
            }],
        )
        .unwrap();
        let m = build_sdf(
            &obs,
            &GridSpec {
                origin: vec![-3.0, -3.0],
                cell_size: 0.02,
                extents: vec![301, 301],
            },
        )
        .unwrap();
        let params = CollisionCostParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut agree = 0;
        let trials = 200;
        for _ in 0..trials {
            // 50-step straight paths passing near the box corner (1, 1)
            let a = [rng.random_range(-2.0..0.5), rng.random_range(1.0..2.5)];
            let b = [rng.random_range(1.0..2.5), rng.random_range(-2.0..0.5)];
            let knots: Vec<DVector<f64>> = (0..=50)
                .map(|i| {
                    let s = i as f64 / 50.0;
                    DVector::from_vec(vec![
                        a[0] + s * (b[0] - a[0]),
                        a[1] + s * (b[1] - a[1]),
                        0.0,
                        0.0,
                    ])
                })
                .collect();
            // 100x oversampled reference
            let dense_min = (0..=5000)
                .map(|i| {
                    let s = i as f64 / 5000.0;
                    m.value_grad(&[a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])])
                        .value
                })
                .fold(f64::INFINITY, f64::min);
            let checked = collision_free(&m, &params, &knots);
            if (dense_min > 0.0) == checked {
                agree += 1;
            } else {
                // a miss can only hide a penetration shallower than half the
                // spacing of the checked points (the field is 1-Lipschitz)
                let spacing = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt() / 100.0;
                assert!(
                    checked && dense_min > -0.5 * spacing,
                    "dense min {dense_min}"
                );
            }
        }
        assert!(agree >= trials * 95 / 100, "agreement {agree}/{trials}");
    }

    #[test]
    fn shrinking_obstacles_never_creates_collisions() {
        let big = ObstacleSet::new(
            2,
            vec![Obstacle::Sphere {
                center: vec![0.0, 0.0],
                radius: 1.0,
            }],
        )
        .unwrap();
        let small = ObstacleSet::new(
            2,
            vec![Obstacle::Sphere {
                center: vec![0.0, 0.0],
                radius: 0.6,
            }],
        )
        .unwrap();
        let g = GridSpec {
            origin: vec![-3.0, -3.0],
            cell_size: 0.05,
            extents: vec![121, 121],
        };
        let (mb, ms) = (build_sdf(&big, &g).unwrap(), build_sdf(&small, &g).unwrap());
        let params = CollisionCostParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let path: Vec<DVector<f64>> = (0..10)
                .map(|_| {
                    DVector::from_vec(vec![
                        rng.random_range(-2.9..2.9),
                        rng.random_range(-2.9..2.9),
                        0.0,
                        0.0,
                    ])
                })
                .collect();
            if collision_free(&mb, &params, &path) {
                assert!(collision_free(&ms, &params, &path));
            }
        }
    }

    #[test]
    fn binary_sidecar_round_trip() {
        let m = circle_map(0.5);
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (1 + 2 + 2 + 1 + 17 * 17));
        let back = SdfMap::read_binary(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(SdfMap::read_binary(&buf[..20]).is_err());
    }
}
