//! Static plots: SVG scenes for planar roadmaps, paths and single edges, and
//! CSV moment tables for any dimension.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::io::{self, GraphFile, MomentRow, PathReport, TrajectoryFile};
use crate::sdf::{Obstacle, ObstacleSet};
use crate::{Error, Result};

/// Ellipse semi-axes are this many standard deviations.
pub const SIGMA_SCALE: f64 = 3.0;

const WIDTH_PX: f64 = 800.0;

#[derive(Debug, Clone)]
pub enum PlotSource {
    Graph(GraphFile),
    Path(PathReport),
    Trajectory(TrajectoryFile),
}

impl PlotSource {
    /// Detect the file kind from its top-level keys.
    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = io::read_json(path)?;
        let has = |k: &str| v.get(k).is_some();
        if has("knots") {
            Ok(Self::Path(PathReport::load(path)?))
        } else if has("nodes") && has("edges") {
            Ok(Self::Graph(GraphFile::load(path)?))
        } else if has("trajectory") {
            Ok(Self::Trajectory(TrajectoryFile::load(path)?))
        } else {
            Err(Error::Parse(format!(
                "{}: not a graph, path report or trajectory file",
                path.display()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    pub error_covariance: Vec<DMatrix<f64>>,
}

/// Everything a plot draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Spatial dimension.
    pub dim: usize,
    pub obstacles: Option<ObstacleSet>,
    pub nodes: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
}

fn parse_segment(
    times: &[f64],
    mean: &[Vec<f64>],
    cov: &[Vec<Vec<f64>>],
    err: &[Vec<Vec<f64>>],
) -> Result<Segment> {
    Ok(Segment {
        times: times.to_vec(),
        mean: mean.iter().map(|m| DVector::from_column_slice(m)).collect(),
        covariance: cov
            .iter()
            .map(|m| io::matrix_from_rows(m, "covariance"))
            .collect::<Result<_>>()?,
        error_covariance: err
            .iter()
            .map(|m| io::matrix_from_rows(m, "error covariance"))
            .collect::<Result<_>>()?,
    })
}

impl Scene {
    pub fn from_source(src: &PlotSource) -> Result<Self> {
        let scene = match src {
            PlotSource::Graph(g) => Scene {
                dim: g.metadata.dimension,
                obstacles: g.obstacles.clone(),
                nodes: g
                    .nodes
                    .iter()
                    .map(|n| n.mean[..g.metadata.dimension].to_vec())
                    .collect(),
                segments: g
                    .edges
                    .iter()
                    .map(|e| {
                        let t = &e.trajectory;
                        parse_segment(&t.times, &t.mean, &t.covariance, &t.error_covariance)
                    })
                    .collect::<Result<_>>()?,
            },
            PlotSource::Path(p) => {
                let n = p.knots.first().map_or(0, |k| k.mean.len());
                let times: Vec<f64> = p.knots.iter().map(|k| k.t).collect();
                let mean: Vec<Vec<f64>> = p.knots.iter().map(|k| k.mean.clone()).collect();
                let cov: Vec<_> = p.knots.iter().map(|k| k.covariance.clone()).collect();
                let err: Vec<_> = p.knots.iter().map(|k| k.error_covariance.clone()).collect();
                Scene {
                    dim: n / 2,
                    obstacles: p.obstacles.clone(),
                    nodes: Vec::new(),
                    segments: vec![parse_segment(&times, &mean, &cov, &err)?],
                }
            }
            PlotSource::Trajectory(f) => {
                let t = &f.trajectory;
                let n = t.mean.first().map_or(0, Vec::len);
                Scene {
                    dim: n / 2,
                    obstacles: f.obstacles.clone(),
                    nodes: Vec::new(),
                    segments: vec![parse_segment(
                        &t.times,
                        &t.mean,
                        &t.covariance,
                        &t.error_covariance,
                    )?],
                }
            }
        };
        if scene.dim == 0 {
            return Err(Error::Parse("nothing to plot".into()));
        }
        Ok(scene)
    }

    pub fn moment_rows(&self) -> Vec<MomentRow> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(s, seg)| {
                (0..seg.times.len()).map(move |k| MomentRow {
                    segment: s,
                    t: seg.times[k],
                    mean: seg.mean[k].clone(),
                    covariance: seg.covariance[k].clone(),
                    error_covariance: seg.error_covariance[k].clone(),
                })
            })
            .collect()
    }
}

/// `(rx, ry, angle°)` of the `k`-sigma ellipse of a 2×2 covariance; `rx`
/// belongs to the larger eigenvalue.
pub fn ellipse_axes(cov: &DMatrix<f64>, k: f64) -> (f64, f64, f64) {
    let e = SymmetricEigen::new(cov.clone());
    let (i, j) = if e.eigenvalues[0] >= e.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let v = e.eigenvectors.column(i);
    let mut angle = v[1].atan2(v[0]).to_degrees();
    // orientation is only defined modulo 180°
    if angle <= -90.0 {
        angle += 180.0;
    } else if angle > 90.0 {
        angle -= 180.0;
    }
    if e.eigenvalues[0] == e.eigenvalues[1] {
        angle = 0.0;
    }
    (
        k * e.eigenvalues[i].max(0.0).sqrt(),
        k * e.eigenvalues[j].max(0.0).sqrt(),
        angle,
    )
}

fn bounds(scene: &Scene) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut add = |p: [f64; 2], r: f64| {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a] - r);
            hi[a] = hi[a].max(p[a] + r);
        }
    };
    if let Some(obs) = &scene.obstacles {
        for o in &obs.obstacles {
            match o {
                Obstacle::Box { min, max } => {
                    add([min[0], min[1]], 0.0);
                    add([max[0], max[1]], 0.0);
                }
                Obstacle::Sphere { center, radius } => add([center[0], center[1]], *radius),
            }
        }
    }
    for n in &scene.nodes {
        add([n[0], n[1]], 0.0);
    }
    for s in &scene.segments {
        for (m, c) in s.mean.iter().zip(&s.covariance) {
            let r = SIGMA_SCALE * c[(0, 0)].max(c[(1, 1)]).max(0.0).sqrt();
            add([m[0], m[1]], r);
        }
    }
    if !lo[0].is_finite() {
        return ([0.0, 0.0], [1.0, 1.0]);
    }
    let pad = 0.05 * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    ([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad])
}

fn position_block(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.view((0, 0), (2, 2)).into_owned()
}

/// Render a planar scene. Geometry is written in world units (y up) inside
/// a flipping group, so ellipse radii are directly `3σ`.
pub fn render_svg(scene: &Scene) -> Result<String> {
    if scene.dim != 2 {
        return Err(Error::InvalidParameter(format!(
            "SVG output needs a planar scene, got dimension {}",
            scene.dim
        )));
    }
    let (lo, hi) = bounds(scene);
    let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="{} {} {} {}">"#,
        WIDTH_PX,
        (WIDTH_PX * h / w).round(),
        lo[0],
        -hi[1],
        w,
        h
    );
    s.push_str(
        "<style>\
.obstacle{fill:#888;stroke:none}\
.mean{fill:none;stroke:#000;stroke-width:1.5;vector-effect:non-scaling-stroke}\
.sigma{fill:none;stroke:#1f77b4;stroke-width:0.8;vector-effect:non-scaling-stroke}\
.error{fill:none;stroke:#d62728;stroke-width:0.8;stroke-dasharray:3 2;vector-effect:non-scaling-stroke}\
.node{fill:#2ca02c;stroke:none}\
</style>\n",
    );
    s.push_str("<g transform=\"scale(1,-1)\">\n");
    if let Some(obs) = &scene.obstacles {
        for o in &obs.obstacles {
            match o {
                Obstacle::Box { min, max } => {
                    let _ = writeln!(
                        s,
                        r#"<rect class="obstacle" x="{}" y="{}" width="{}" height="{}"/>"#,
                        min[0],
                        min[1],
                        max[0] - min[0],
                        max[1] - min[1]
                    );
                }
                Obstacle::Sphere { center, radius } => {
                    let _ = writeln!(
                        s,
                        r#"<circle class="obstacle" cx="{}" cy="{}" r="{}"/>"#,
                        center[0], center[1], radius
                    );
                }
            }
        }
    }
    for seg in &scene.segments {
        let pts: Vec<String> = seg
            .mean
            .iter()
            .map(|m| format!("{},{}", m[0], m[1]))
            .collect();
        let _ = writeln!(s, r#"<polyline class="mean" points="{}"/>"#, pts.join(" "));
        for k in 0..seg.mean.len() {
            let (cx, cy) = (seg.mean[k][0], seg.mean[k][1]);
            for (class, m) in [
                ("sigma", &seg.covariance[k]),
                ("error", &seg.error_covariance[k]),
            ] {
                let (rx, ry, angle) = ellipse_axes(&position_block(m), SIGMA_SCALE);
                let _ = writeln!(
                    s,
                    r#"<ellipse class="{class}" cx="{cx}" cy="{cy}" rx="{rx}" ry="{ry}" transform="rotate({angle} {cx} {cy})"/>"#
                );
            }
        }
    }
    let r = 0.005 * w.max(h);
    for n in &scene.nodes {
        let _ = writeln!(
            s,
            r#"<circle class="node" cx="{}" cy="{}" r="{}"/>"#,
            n[0], n[1], r
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlotOutput {
    Svg(PathBuf),
    Csv(PathBuf),
    /// SVG was requested for a non-planar scene; a CSV was written instead.
    CsvFallback(PathBuf),
}

pub fn write_csv(scene: &Scene, out: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(out)?);
    io::write_moments_csv(f, &scene.moment_rows())
}

/// Write an SVG (`.svg`) or CSV (anything else). SVG requests for 3D inputs
/// fall back to a CSV next to the requested path.
pub fn emit_plot(input: &Path, out: &Path) -> Result<PlotOutput> {
    let scene = Scene::from_source(&PlotSource::load(input)?)?;
    let want_svg = out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("svg"));
    if !want_svg {
        write_csv(&scene, out)?;
        return Ok(PlotOutput::Csv(out.to_path_buf()));
    }
    if scene.dim != 2 {
        let csv = out.with_extension("csv");
        warn!(
            "{}-dimensional scene cannot be drawn as SVG; writing {} instead",
            scene.dim,
            csv.display()
        );
        write_csv(&scene, &csv)?;
        return Ok(PlotOutput::CsvFallback(csv));
    }
    std::fs::write(out, render_svg(&scene)?)?;
    Ok(PlotOutput::Svg(out.to_path_buf()))
}
