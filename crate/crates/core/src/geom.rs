//! Planar geometry primitives shared across the stack: poses, rigid
//! transforms, oriented boxes, polygons, and polyline utilities.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// 2D pose: position in meters, yaw in radians wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn origin() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    /// Express `self` (a world pose) in the frame anchored at `reference`.
    pub fn into_frame(&self, reference: &Pose2) -> Pose2 {
        let dx = self.x - reference.x;
        let dy = self.y - reference.y;
        let (s, c) = reference.yaw.sin_cos();
        Pose2::new(
            c * dx + s * dy,
            -s * dx + c * dy,
            wrap_angle(self.yaw - reference.yaw),
        )
    }

    /// Inverse of [`Pose2::into_frame`]: map a pose local to `reference` back to world.
    pub fn from_frame(&self, reference: &Pose2) -> Pose2 {
        let (s, c) = reference.yaw.sin_cos();
        Pose2::new(
            reference.x + c * self.x - s * self.y,
            reference.y + s * self.x + c * self.y,
            wrap_angle(self.yaw + reference.yaw),
        )
    }
}

/// Plain 2D vector (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self { x: 0.0, y: 0.0 }
    }

    pub fn dot(&self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(&self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(&self, o: Vec2) -> f64 {
        (*self - o).norm()
    }

    pub fn scaled(&self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn normalized(&self) -> Vec2 {
        let n = self.norm();
        if n > 1e-12 {
            self.scaled(1.0 / n)
        } else {
            Vec2::zero()
        }
    }

    /// Perpendicular (rotated +90 degrees).
    pub fn perp(&self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotated(&self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn into_frame(&self, reference: &Pose2) -> Vec2 {
        let d = Vec2::new(self.x - reference.x, self.y - reference.y);
        d.rotated(-reference.yaw)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Oriented rectangle: center pose plus length (along heading) and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Pose2,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2, length: f64, width: f64) -> Self {
        Self {
            center,
            length,
            width,
        }
    }

    /// Corner points in CCW order.
    pub fn corners(&self) -> [Vec2; 4] {
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let (s, c) = self.center.yaw.sin_cos();
        let fx = Vec2::new(c, s);
        let fy = Vec2::new(-s, c);
        let p = self.center.position();
        [
            p + fx.scaled(hl) + fy.scaled(hw),
            p + fx.scaled(-hl) + fy.scaled(hw),
            p + fx.scaled(-hl) + fy.scaled(-hw),
            p + fx.scaled(hl) + fy.scaled(-hw),
        ]
    }

    /// Separating-axis overlap test against another oriented box.
    pub fn intersects(&self, other: &OrientedBox) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            (a[0] - a[1]).normalized(),
            (a[1] - a[2]).normalized(),
            (b[0] - b[1]).normalized(),
            (b[1] - b[2]).normalized(),
        ];
        for axis in axes {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }

    /// Smallest gap between the two boxes along the tested axes; 0 when overlapping.
    pub fn separation(&self, other: &OrientedBox) -> f64 {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            (a[0] - a[1]).normalized(),
            (a[1] - a[2]).normalized(),
            (b[0] - b[1]).normalized(),
            (b[1] - b[2]).normalized(),
        ];
        let mut best = 0.0f64;
        for axis in axes {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            let gap = (bmin - amax).max(amin - bmax);
            best = best.max(gap);
        }
        best
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        let d = p.dot(axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Simple polygon, CCW winding assumed for containment tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<Vec2>,
}

impl Polygon {
    pub fn new(points: Vec<Vec2>) -> Self {
        Self { points }
    }

    pub fn rect(center: Vec2, half_x: f64, half_y: f64) -> Self {
        Self::new(vec![
            Vec2::new(center.x - half_x, center.y - half_y),
            Vec2::new(center.x + half_x, center.y - half_y),
            Vec2::new(center.x + half_x, center.y + half_y),
            Vec2::new(center.x - half_x, center.y + half_y),
        ])
    }

    /// Even-odd point containment; boundary points count as inside.
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.points.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[j];
            // On-edge check with small slack.
            let ab = b - a;
            let ap = p - a;
            let cross = ab.cross(ap);
            let d2 = ab.dot(ab);
            if cross.abs() < 1e-9 * d2.max(1.0) {
                let t = if d2 > 0.0 { ap.dot(ab) / d2 } else { 0.0 };
                if (-1e-9..=1.0 + 1e-9).contains(&t) {
                    return true;
                }
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_int = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x_int {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

/// Polyline with cached cumulative arc length.
#[derive(Debug, Clone)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for i in 0..points.len() {
            if i > 0 {
                s += points[i].dist(points[i - 1]);
            }
            cum.push(s);
        }
        Self { points, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    /// Point at arc length `s` (clamped to the ends).
    pub fn point_at(&self, s: f64) -> Vec2 {
        if self.points.is_empty() {
            return Vec2::zero();
        }
        if self.points.len() == 1 || s <= 0.0 {
            return self.points[0];
        }
        let total = self.length();
        if s >= total {
            return *self.points.last().unwrap();
        }
        let idx = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let seg = self.cum[idx + 1] - self.cum[idx];
        let t = if seg > 1e-12 {
            (s - self.cum[idx]) / seg
        } else {
            0.0
        };
        let a = self.points[idx];
        let b = self.points[idx + 1];
        a + (b - a).scaled(t)
    }

    /// Tangent heading (radians) at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let total = self.length();
        let s = s.clamp(0.0, total);
        let idx = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let d = self.points[idx + 1] - self.points[idx];
        d.y.atan2(d.x)
    }

    /// Arc length of the closest point on the polyline to `p`, and its distance.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.points.len().saturating_sub(1) {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b - a;
            let d2 = ab.dot(ab);
            let t = if d2 > 1e-12 {
                ((p - a).dot(ab) / d2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a + ab.scaled(t);
            let d = p.dist(q);
            if d < best_d {
                best_d = d;
                best_s = self.cum[i] + t * d2.sqrt();
            }
        }
        (best_s, best_d)
    }

    /// Signed lateral offset of `p` from the polyline (positive = left of tangent).
    pub fn signed_offset(&self, p: Vec2) -> f64 {
        let (s, d) = self.project(p);
        let tangent = Vec2::new(self.heading_at(s).cos(), self.heading_at(s).sin());
        let q = self.point_at(s);
        let side = tangent.cross(p - q);
        if side >= 0.0 {
            d
        } else {
            -d
        }
    }

    /// Copy shifted laterally by `offset` meters (positive = left).
    pub fn offset_by(&self, offset: f64) -> Polyline {
        let pts = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let h = self.heading_at(self.cum[i].min(self.length() - 1e-9).max(0.0));
                let n = Vec2::new(h.cos(), h.sin()).perp();
                *p + n.scaled(offset)
            })
            .collect();
        Polyline::new(pts)
    }

    /// Resample at a fixed spacing, keeping the final point.
    pub fn resampled(&self, spacing: f64) -> Polyline {
        let total = self.length();
        if total < 1e-9 || self.points.len() < 2 {
            return self.clone();
        }
        let n = (total / spacing).ceil() as usize;
        let mut pts = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let s = (i as f64 * spacing).min(total);
            pts.push(self.point_at(s));
        }
        Polyline::new(pts)
    }
}
