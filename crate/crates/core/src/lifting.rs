//! Lifting image-space affordances to the camera frame with a pinhole model
//! and an observed depth map.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pixel, Vec2};

pub const DEFAULT_CONTACT_RADIUS: usize = 5;
pub const DEFAULT_DIRECTION_STEP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::contract(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Viewing ray through pixel `(u, v)`, scaled so that `z = 1`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vec2> {
        if !(p.z > 0.0) {
            return Err(Error::Geometry(format!("point behind the camera (z = {})", p.z)));
        }
        Ok(Vec2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Metric depth per pixel; non-positive or non-finite values are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth.len() != height * width {
            return Err(Error::Dimension {
                op: "depth_map",
                lhs: vec![height, width],
                rhs: vec![depth.len()],
            });
        }
        Ok(Self {
            height,
            width,
            depth,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.depth
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let d = self.at(x, y);
        d.is_finite() && d > 0.0
    }

    /// Depth scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            depth: self.depth.iter().map(|d| d * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affordance3D {
    /// Contact point in the camera frame (metres).
    pub contact: [f64; 3],
    /// Unit displacement direction in the camera frame.
    pub direction: [f64; 3],
}

/// Camera-frame point of pixel `(u, v)` at depth `z`.
pub fn backproject(p: Vec2, z: f64, intr: &Intrinsics) -> Result<Vector3<f64>> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::contract(format!("backprojection depth must be positive, got {z}")));
    }
    Ok(intr.ray(p.x, p.y) * z)
}

fn window(c: Pixel, r: usize, depth: &DepthMap) -> impl Iterator<Item = (usize, usize)> {
    let (w, h) = (depth.width(), depth.height());
    let y0 = c.y.saturating_sub(r);
    let y1 = (c.y + r).min(h.saturating_sub(1));
    let x0 = c.x.saturating_sub(r);
    let x1 = (c.x + r).min(w.saturating_sub(1));
    (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
}

/// Valid pixel nearest to `c` within Chebyshev radius `r`; ties go to the
/// smaller depth, then to the smaller row-major index.
pub fn nearest_valid_pixel(c: Pixel, depth: &DepthMap, r: usize) -> Result<Pixel> {
    if c.x >= depth.width() || c.y >= depth.height() {
        return Err(Error::contract(format!(
            "pixel ({}, {}) outside a {}x{} depth map",
            c.x,
            c.y,
            depth.width(),
            depth.height()
        )));
    }
    let mut best: Option<(f64, f64, usize, Pixel)> = None;
    for (x, y) in window(c, r, depth) {
        if !depth.is_valid(x, y) {
            continue;
        }
        let dx = x as f64 - c.x as f64;
        let dy = y as f64 - c.y as f64;
        let key = (dx * dx + dy * dy, depth.at(x, y), y * depth.width() + x);
        let better = match best {
            None => true,
            Some((d2, z, idx, _)) => {
                key.0 < d2 || (key.0 == d2 && (key.1 < z || (key.1 == z && key.2 < idx)))
            }
        };
        if better {
            best = Some((key.0, key.1, key.2, Pixel::new(x, y)));
        }
    }
    best.map(|b| b.3).ok_or(Error::NoSurface {
        u: c.x as i64,
        v: c.y as i64,
        radius: r,
    })
}

/// 3D contact from the closest valid surface pixel around `c`.
pub fn lift_contact(c: Pixel, depth: &DepthMap, intr: &Intrinsics, r: usize) -> Result<Vector3<f64>> {
    let p = nearest_valid_pixel(c, depth, r)?;
    backproject(p.to_vec2(), depth.at(p.x, p.y), intr)
}

/// A plane `normal · x = offset` with unit `normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// Intersection of the camera ray through `(u, v)` with the plane.
    pub fn intersect_ray(&self, intr: &Intrinsics, u: f64, v: f64) -> Result<Vector3<f64>> {
        let ray = intr.ray(u, v);
        let denom = self.normal.dot(&ray);
        if denom.abs() < 1e-12 * ray.norm() {
            return Err(Error::Geometry(format!(
                "ray through ({u}, {v}) is parallel to the surface plane"
            )));
        }
        let t = self.offset / denom;
        if !(t > 0.0) {
            return Err(Error::Geometry(format!(
                "surface plane lies behind the camera along ray ({u}, {v})"
            )));
        }
        Ok(ray * t)
    }
}

/// Least-squares plane through the valid points of the `r`-neighbourhood of
/// `c`, or `None` when fewer than 3 points or they are collinear.
pub fn fit_local_plane(c: Pixel, depth: &DepthMap, intr: &Intrinsics, r: usize) -> Option<Plane> {
    let pts: Vec<Vector3<f64>> = window(c, r, depth)
        .filter(|&(x, y)| depth.is_valid(x, y))
        .map(|(x, y)| intr.ray(x as f64, y as f64) * depth.at(x, y))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // collinear points leave two vanishing eigenvalues
    let scale = eig.eigenvalues[order[2]].abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues[order[1]].abs() <= 1e-12 * scale {
        return None;
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    normal.normalize_mut();
    // orient towards the camera: offset > 0 for points in front
    let mut offset = normal.dot(&centroid);
    if offset < 0.0 {
        normal = -normal;
        offset = -offset;
    }
    Some(Plane { normal, offset })
}

/// Local surface plane at `c`, falling back to the fronto-parallel plane
/// through `fallback_z`.
pub fn surface_plane(
    c: Pixel,
    depth: &DepthMap,
    intr: &Intrinsics,
    r: usize,
    fallback_z: f64,
) -> Plane {
    fit_local_plane(c, depth, intr, r).unwrap_or(Plane {
        normal: Vector3::new(0.0, 0.0, 1.0),
        offset: fallback_z,
    })
}

/// Lifts a unit image direction `a` at contact pixel `c` to a unit 3D
/// direction on the local surface plane.
pub fn lift_direction_on_plane(
    a: Vec2,
    c: Vec2,
    plane: &Plane,
    intr: &Intrinsics,
    step: f64,
) -> Result<Vector3<f64>> {
    if !a.is_finite() || a.norm() == 0.0 {
        return Err(Error::contract("direction to lift must be non-zero"));
    }
    if (a.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "direction to lift must be unit-norm, got |a| = {}",
            a.norm()
        )));
    }
    let p0 = plane.intersect_ray(intr, c.x, c.y)?;
    let tip = c.add(a.scale(step));
    let p1 = plane.intersect_ray(intr, tip.x, tip.y)?;
    let d = p1 - p0;
    let n = d.norm();
    if !(n > 0.0) {
        return Err(Error::Geometry("lifted direction is degenerate".into()));
    }
    Ok(d / n)
}

/// Full direction lifting around contact pixel `c`.
pub fn lift_direction(
    a: Vec2,
    contact_3d: &Vector3<f64>,
    c: Pixel,
    depth: &DepthMap,
    intr: &Intrinsics,
    r: usize,
    step: f64,
) -> Result<Vector3<f64>> {
    let plane = surface_plane(c, depth, intr, r, contact_3d.z);
    lift_direction_on_plane(a, c.to_vec2(), &plane, intr, step)
}

/// Contact and direction lifting in one call.
pub fn lift_affordance(
    contact: Pixel,
    direction: Vec2,
    depth: &DepthMap,
    intr: &Intrinsics,
    r: usize,
    step: f64,
) -> Result<Affordance3D> {
    let c3 = lift_contact(contact, depth, intr, r)?;
    let t3 = lift_direction(direction, &c3, contact, depth, intr, r, step)?;
    Ok(Affordance3D {
        contact: [c3.x, c3.y, c3.z],
        direction: [t3.x, t3.y, t3.z],
    })
}
