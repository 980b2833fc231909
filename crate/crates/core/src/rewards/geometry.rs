//! Oriented boxes, their signed distance via the Minkowski difference, and
//! point-to-polyline projections.

use crate::error::{Error, Result};
use crate::world::AgentState;

pub type Vec2 = [f64; 2];

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, heading: f64, half_length: f64, half_width: f64) -> Result<Self> {
        if !(half_length > 0.0 && half_width > 0.0) {
            return Err(Error::DegenerateBox(half_length, half_width));
        }
        Ok(Self {
            center,
            heading,
            half_length,
            half_width,
        })
    }

    pub fn of_agent(a: &AgentState) -> Result<Self> {
        Self::new([a.x, a.y], a.psi, a.length / 2.0, a.width / 2.0)
    }

    /// Corner offsets in the body frame, counter-clockwise.
    fn local_corners(&self) -> [Vec2; 4] {
        let (l, w) = (self.half_length, self.half_width);
        [[l, -w], [l, w], [-l, w], [-l, -w]]
    }

    /// World-frame corners, counter-clockwise.
    pub fn vertices(&self) -> [Vec2; 4] {
        let (s, c) = self.heading.sin_cos();
        self.local_corners().map(|[u, v]| {
            [
                self.center[0] + c * u - s * v,
                self.center[1] + s * u + c * v,
            ]
        })
    }

    /// Radius of the circumscribed circle.
    pub fn radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }

    /// Chains a gradient with respect to vertex `k` into `(cx, cy, heading)`.
    pub fn vertex_pullback(&self, k: usize, g: Vec2) -> [f64; 3] {
        let v = self.vertices()[k];
        let r = sub(v, self.center);
        // d v / d heading = perp(v - c)
        [g[0], g[1], -g[0] * r[1] + g[1] * r[0]]
    }
}

/// Convex hull (counter-clockwise, no collinear points) with the source index of each vertex.
fn convex_hull(points: &[Vec2]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
            .then(a.cmp(&b))
    });
    idx.dedup_by(|a, b| points[*a] == points[*b]);
    if idx.len() < 3 {
        return idx;
    }
    let turn = |o: usize, a: usize, b: usize| cross(sub(points[a], points[o]), sub(points[b], points[o]));
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for &p in &idx {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in idx.iter().rev().skip(1) {
        while hull.len() >= lower && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Signed distance between two boxes with its gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDistance {
    /// Separation when disjoint, minus the penetration depth otherwise.
    pub distance: f64,
    /// d distance / d (cx, cy, heading) of the first box.
    pub grad_a: [f64; 3],
    /// Same for the second box.
    pub grad_b: [f64; 3],
}

/// Signed distance between two oriented boxes.
///
/// The Minkowski difference `A ⊖ B` is the convex hull of the 16 vertex
/// differences. Its boundary distance to the origin is the separation when
/// the origin lies outside, and the penetration depth when inside.
pub fn minkowski_signed_distance(a: &OrientedBox, b: &OrientedBox) -> Result<BoxDistance> {
    for bx in [a, b] {
        if !(bx.half_length > 0.0 && bx.half_width > 0.0) {
            return Err(Error::DegenerateBox(bx.half_length, bx.half_width));
        }
    }
    let (va, vb) = (a.vertices(), b.vertices());
    let mut diffs = [[0.0; 2]; 16];
    for p in 0..4 {
        for q in 0..4 {
            diffs[p * 4 + q] = sub(va[p], vb[q]);
        }
    }
    let hull = convex_hull(&diffs);
    let n = hull.len();

    let mut inside = true;
    let mut best = (f64::INFINITY, 0usize, 0.0f64);
    for e in 0..n {
        let (p, q) = (diffs[hull[e]], diffs[hull[(e + 1) % n]]);
        let g = sub(q, p);
        if cross(g, [-p[0], -p[1]]) < 0.0 {
            inside = false;
        }
        let mu = (-dot(p, g) / dot(g, g)).clamp(0.0, 1.0);
        let x = [p[0] + mu * g[0], p[1] + mu * g[1]];
        let d = norm(x);
        if d < best.0 {
            best = (d, e, mu);
        }
    }
    let (dist, e, mu) = best;
    let sign = if inside { -1.0 } else { 1.0 };

    let mut grad_a = [0.0; 3];
    let mut grad_b = [0.0; 3];
    if dist > 0.0 {
        let (ip, iq) = (hull[e], hull[(e + 1) % n]);
        let x = {
            let (p, q) = (diffs[ip], diffs[iq]);
            [p[0] + mu * (q[0] - p[0]), p[1] + mu * (q[1] - p[1])]
        };
        let nrm = [sign * x[0] / dist, sign * x[1] / dist];
        for (idx, w) in [(ip, 1.0 - mu), (iq, mu)] {
            if w == 0.0 {
                continue;
            }
            let g = [w * nrm[0], w * nrm[1]];
            let ga = a.vertex_pullback(idx / 4, g);
            let gb = b.vertex_pullback(idx % 4, [-g[0], -g[1]]);
            for k in 0..3 {
                grad_a[k] += ga[k];
                grad_b[k] += gb[k];
            }
        }
    }
    Ok(BoxDistance {
        distance: sign * dist,
        grad_a,
        grad_b,
    })
}

/// Closest point on segment `a→b` to `p`: `(distance, μ)`.
pub fn project_on_segment(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let g = sub(b, a);
    let gg = dot(g, g);
    let mu = if gg > 0.0 {
        (dot(sub(p, a), g) / gg).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let x = [a[0] + mu * g[0], a[1] + mu * g[1]];
    (norm(sub(p, x)), mu)
}

/// Signed distance from a point to a directed polyline (positive on the
/// right-hand side) and its gradient with respect to the point.
///
/// When the closest point is a joint between two segments, the side is
/// decided by the average of the adjacent right-hand normals so that points
/// around convex corners are classified consistently.
pub fn signed_distance_to_polyline(p: Vec2, line: &[Vec2]) -> Option<(f64, Vec2)> {
    if line.len() < 2 {
        let q = *line.first()?;
        let d = norm(sub(p, q));
        let g = if d > 0.0 { [(p[0] - q[0]) / d, (p[1] - q[1]) / d] } else { [0.0, 0.0] };
        return Some((d, g));
    }
    let mut best = (f64::INFINITY, 0usize, 0.0);
    for k in 0..line.len() - 1 {
        let (d, mu) = project_on_segment(p, line[k], line[k + 1]);
        if d < best.0 {
            best = (d, k, mu);
        }
    }
    let (d, k, mu) = best;
    let right_normal = |k: usize| {
        let g = sub(line[k + 1], line[k]);
        let l = norm(g);
        if l > 0.0 {
            [g[1] / l, -g[0] / l]
        } else {
            [0.0, 0.0]
        }
    };
    let a = line[k];
    let g = sub(line[k + 1], a);
    let x = [a[0] + mu * g[0], a[1] + mu * g[1]];
    let off = sub(p, x);
    let side = if mu >= 1.0 && k + 2 < line.len() {
        let (n1, n2) = (right_normal(k), right_normal(k + 1));
        dot(off, [n1[0] + n2[0], n1[1] + n2[1]])
    } else if mu <= 0.0 && k > 0 {
        let (n0, n1) = (right_normal(k - 1), right_normal(k));
        dot(off, [n0[0] + n1[0], n0[1] + n1[1]])
    } else {
        // ḡ × v̄ < 0 means the point is to the right of the edge
        -cross(g, sub(p, a))
    };
    let sign = if side > 0.0 { 1.0 } else { -1.0 };
    let grad = if d > 0.0 {
        [sign * off[0] / d, sign * off[1] / d]
    } else {
        [0.0, 0.0]
    };
    Some((sign * d, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(c: Vec2, h: f64) -> OrientedBox {
        OrientedBox::new(c, h, 0.5, 0.5).unwrap()
    }

    #[test]
    fn axis_aligned_gap() {
        let d = minkowski_signed_distance(&unit([0.0, 0.0], 0.0), &unit([3.0, 0.0], 0.0)).unwrap();
        assert!((d.distance - 2.0).abs() < 1e-12);
        assert_eq!(d.grad_a[0], -1.0);
        assert_eq!(d.grad_b[0], 1.0);
    }

    #[test]
    fn coincident_squares() {
        let d = minkowski_signed_distance(&unit([0.0, 0.0], 0.0), &unit([0.0, 0.0], 0.0)).unwrap();
        assert!((d.distance + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(OrientedBox::new([0.0, 0.0], 0.0, 0.0, 1.0).is_err());
        let bad = OrientedBox {
            center: [0.0, 0.0],
            heading: 0.0,
            half_length: 1.0,
            half_width: 0.0,
        };
        assert!(minkowski_signed_distance(&bad, &unit([0.0, 0.0], 0.0)).is_err());
    }

    #[test]
    fn vertices_counter_clockwise() {
        let v = unit([1.0, 1.0], 0.3).vertices();
        let area: f64 = (0..4).map(|k| cross(v[k], v[(k + 1) % 4])).sum::<f64>() / 2.0;
        assert!((area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polyline_sign() {
        let edge = [[0.0, 0.0], [10.0, 0.0]];
        let (d, g) = signed_distance_to_polyline([5.0, 3.0], &edge).unwrap();
        assert_eq!((d, g), (-3.0, [0.0, -1.0]));
        let (d, _) = signed_distance_to_polyline([5.0, -0.4], &edge).unwrap();
        assert!((d - 0.4).abs() < 1e-12);
        let (d, _) = signed_distance_to_polyline([5.0, 0.0], &edge).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn polyline_corner_sign() {
        // road on the left of a left turn: outside corner at (10, 0)
        let edge = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]];
        let (d, _) = signed_distance_to_polyline([11.0, -1.0], &edge).unwrap();
        assert!(d > 0.0);
        let (d, _) = signed_distance_to_polyline([9.0, 1.0], &edge).unwrap();
        assert!(d < 0.0);
    }
}
