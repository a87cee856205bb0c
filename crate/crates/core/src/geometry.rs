//! Estimable regions for a multivariate exposure: axis-aligned boxes,
//! convex hulls (bivariate only), their trimmed variants, and uniform
//! lattices over a region.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_float;
use crate::stats::{column, quantile_sorted};

const START_RESOLUTION: usize = 32;
const MAX_LATTICE_POINTS: usize = 1 << 26;
const CONTAIN_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Per-dimension `[lo, hi]` bounds.
    Box { bounds: Vec<[f64; 2]> },
    /// Counter-clockwise vertices of a strictly convex polygon.
    Hull { vertices: Vec<[f64; 2]> },
}

/// A closed region of exposure space; boundary points are inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(flatten)]
    shape: Shape,
    trim_q: Option<f64>,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Region {
    pub fn from_bounds(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (a, [lo, hi]) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::DegenerateRegion(format!(
                    "dimension {} has bounds [{lo}, {hi}]",
                    a + 1
                )));
            }
        }
        Ok(Self {
            shape: Shape::Box { bounds },
            trim_q: None,
        })
    }

    /// Builds a hull region from counter-clockwise, strictly convex vertices.
    pub fn from_vertices(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let k = vertices.len();
        if k < 3 {
            return Err(Error::DegenerateHull(format!("{k} vertices")));
        }
        for i in 0..k {
            let turn = cross(vertices[i], vertices[(i + 1) % k], vertices[(i + 2) % k]);
            if !(turn > 0.0) {
                return Err(Error::DegenerateHull(
                    "vertices are not a strictly convex counter-clockwise polygon".into(),
                ));
            }
        }
        Ok(Self {
            shape: Shape::Hull { vertices },
            trim_q: None,
        })
    }

    pub fn with_trim(mut self, q: f64) -> Self {
        self.trim_q = Some(q);
        self
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn trim_q(&self) -> Option<f64> {
        self.trim_q
    }

    pub fn is_hull(&self) -> bool {
        matches!(self.shape, Shape::Hull { .. })
    }

    pub fn vertices(&self) -> Option<&[[f64; 2]]> {
        match &self.shape {
            Shape::Hull { vertices } => Some(vertices),
            Shape::Box { .. } => None,
        }
    }

    pub fn dimension(&self) -> usize {
        match &self.shape {
            Shape::Box { bounds } => bounds.len(),
            Shape::Hull { .. } => 2,
        }
    }

    /// Per-dimension bounds of the region (the region itself for a box).
    pub fn bounds(&self) -> Vec<[f64; 2]> {
        match &self.shape {
            Shape::Box { bounds } => bounds.clone(),
            Shape::Hull { vertices } => (0..2)
                .map(|a| {
                    let lo = vertices.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
                    let hi = vertices.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
                    [lo, hi]
                })
                .collect(),
        }
    }

    /// Area for m = 2, volume in general.
    pub fn area(&self) -> f64 {
        match &self.shape {
            Shape::Box { bounds } => bounds.iter().map(|[lo, hi]| hi - lo).product(),
            Shape::Hull { vertices } => {
                let k = vertices.len();
                0.5 * (0..k)
                    .map(|i| {
                        let (a, b) = (vertices[i], vertices[(i + 1) % k]);
                        a[0] * b[1] - b[0] * a[1]
                    })
                    .sum::<f64>()
            }
        }
    }

    fn scale(&self) -> f64 {
        self.bounds()
            .iter()
            .flat_map(|[lo, hi]| [lo.abs(), hi.abs(), hi - lo])
            .fold(1.0, f64::max)
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        if point.len() != self.dimension() {
            return Err(Error::Shape(format!(
                "point has {} coordinates, region has dimension {}",
                point.len(),
                self.dimension()
            )));
        }
        let tol = CONTAIN_REL_TOL * self.scale();
        Ok(match &self.shape {
            Shape::Box { bounds } => bounds
                .iter()
                .zip(point)
                .all(|([lo, hi], x)| *x >= lo - tol && *x <= hi + tol),
            Shape::Hull { vertices } => {
                let p = [point[0], point[1]];
                let k = vertices.len();
                (0..k).all(|i| {
                    let (a, b) = (vertices[i], vertices[(i + 1) % k]);
                    let edge = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                    cross(a, b, p) >= -tol * edge
                })
            }
        })
    }
}

/// Box of per-dimension `[Q(d, 1 − q), Q(d, q)]` bounds; `q = 1` gives the
/// observed range.
pub fn bounding_box(exposures: &DMatrix<f64>, q: f64) -> Result<Region> {
    if !(0.5..=1.0).contains(&q) {
        return Err(Error::InvalidProbability(q));
    }
    if exposures.nrows() == 0 || exposures.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut bounds = Vec::with_capacity(exposures.ncols());
    for j in 0..exposures.ncols() {
        let mut sorted = column(exposures, j).to_vec();
        sorted.sort_by(f64::total_cmp);
        bounds.push([quantile_sorted(&sorted, 1.0 - q)?, quantile_sorted(&sorted, q)?]);
    }
    Ok(Region::from_bounds(bounds)?.with_trim(q))
}

fn hull_points(points: &mut Vec<[f64; 2]>) -> Result<Vec<[f64; 2]>> {
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::DegenerateHull("non-finite coordinates".into()));
    }
    points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    points.dedup();
    if points.len() < 3 {
        return Err(Error::DegenerateHull(format!(
            "{} distinct points",
            points.len()
        )));
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in points.iter() {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Err(Error::DegenerateHull("all points are collinear".into()));
    }
    Ok(lower)
}

/// Convex hull of bivariate exposures, vertices counter-clockwise from the
/// lowest-leftmost point, collinear boundary points dropped.
pub fn convex_hull(exposures: &DMatrix<f64>) -> Result<Region> {
    if exposures.ncols() != 2 {
        return Err(Error::Shape(format!(
            "convex hulls need 2 exposure columns, got {}",
            exposures.ncols()
        )));
    }
    let mut points: Vec<[f64; 2]> = exposures
        .row_iter()
        .map(|r| [r[0], r[1]])
        .collect();
    let vertices = hull_points(&mut points)?;
    Region::from_vertices(vertices)
}

/// Hull of the points that fall inside the trimmed box `G_q`.
pub fn trimmed_hull(exposures: &DMatrix<f64>, q: f64) -> Result<Region> {
    let region = bounding_box(exposures, q)?;
    if exposures.ncols() != 2 {
        return Err(Error::Shape(format!(
            "convex hulls need 2 exposure columns, got {}",
            exposures.ncols()
        )));
    }
    let mut retained = Vec::new();
    for r in exposures.row_iter() {
        let p = [r[0], r[1]];
        if region.contains(&p)? {
            retained.push(p);
        }
    }
    let vertices = hull_points(&mut retained)?;
    Ok(Region::from_vertices(vertices)?.with_trim(q))
}

/// Exactly `target` lattice points inside `region`.
///
/// The lattice has equal spacing on every axis, set so the widest axis of the
/// bounding box carries `k` nodes. Starting at `k = 32`, `k` doubles until at
/// least `target` nodes lie in the region; the `target` returned points are
/// the nodes at positions `⌊i·K/target⌋` of the `K` inside nodes in row-major
/// order.
pub fn region_grid(region: &Region, target: usize) -> Result<Vec<Vec<f64>>> {
    if target == 0 {
        return Err(Error::InvalidConfig("grid target count must be at least 1".into()));
    }
    let bounds = region.bounds();
    let widest = bounds.iter().map(|[lo, hi]| hi - lo).fold(0.0, f64::max);
    if bounds.iter().any(|[lo, hi]| !(hi - lo > 0.0)) || region.area() <= 0.0 {
        return Err(Error::DegenerateRegion("region has zero extent".into()));
    }
    let mut k = START_RESOLUTION;
    loop {
        let step = widest / (k - 1) as f64;
        let counts: Vec<usize> = bounds
            .iter()
            .map(|[lo, hi]| ((hi - lo) / step * (1.0 + 1e-12)).floor() as usize + 1)
            .collect();
        let total = counts.iter().try_fold(1usize, |acc, c| acc.checked_mul(*c));
        match total {
            Some(t) if t <= MAX_LATTICE_POINTS => {}
            _ => {
                return Err(Error::DegenerateRegion(format!(
                    "fewer than {target} lattice points inside the region at the finest resolution"
                )))
            }
        }
        let inside = lattice_inside(region, &bounds, &counts, step)?;
        if inside.len() >= target {
            let k_inside = inside.len();
            return Ok((0..target)
                .map(|i| inside[i * k_inside / target].clone())
                .collect());
        }
        k *= 2;
    }
}

fn lattice_inside(
    region: &Region,
    bounds: &[[f64; 2]],
    counts: &[usize],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let m = bounds.len();
    let mut idx = vec![0usize; m];
    let mut inside = Vec::new();
    let mut point = vec![0.0; m];
    loop {
        for a in 0..m {
            point[a] = (bounds[a][0] + idx[a] as f64 * step).min(bounds[a][1]);
        }
        if region.contains(&point)? {
            inside.push(point.clone());
        }
        let mut a = m;
        loop {
            if a == 0 {
                return Ok(inside);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < counts[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Writes hull vertices as `x,y` rows in counter-clockwise order.
pub fn write_vertices_csv<W: Write>(region: &Region, out: W) -> Result<()> {
    let vertices = region
        .vertices()
        .ok_or_else(|| Error::InvalidConfig("only hull regions have vertices".into()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y"])?;
    for v in vertices {
        w.write_record([format_float(v[0]), format_float(v[1])])?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}
