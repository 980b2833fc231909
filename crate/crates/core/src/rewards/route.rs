//! Lane routes from depth-first search over the road graph.

use crate::world::{Map, Scenario};

use super::geometry::{project_on_segment, Vec2};

/// Most routes returned by [`route_search`].
pub const MAX_ROUTES: usize = 64;
/// Longest lane sequence explored by [`route_search`].
pub const MAX_DEPTH: usize = 180;

/// Concatenated lane centerlines with cumulative arclength.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub lanes: Vec<usize>,
    pub points: Vec<Vec2>,
    pub arclength: Vec<f64>,
}

/// Projection of a point onto a route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteProjection {
    /// Arclength of the closest route point.
    pub s: f64,
    /// Distance from the point to the route.
    pub lateral: f64,
    /// d s / d point.
    pub grad: Vec2,
}

impl Route {
    /// Concatenates the centerlines of `lanes`, dropping repeated joints.
    pub fn from_lanes(map: &Map, lanes: Vec<usize>) -> Self {
        let mut points: Vec<Vec2> = Vec::new();
        for &l in &lanes {
            for &p in &map.lanes[l].centerline {
                if points.last() != Some(&p) {
                    points.push(p);
                }
            }
        }
        let mut arclength = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for (k, p) in points.iter().enumerate() {
            if k > 0 {
                s += (p[0] - points[k - 1][0]).hypot(p[1] - points[k - 1][1]);
            }
            arclength.push(s);
        }
        Self {
            lanes,
            points,
            arclength,
        }
    }

    pub fn length(&self) -> f64 {
        *self.arclength.last().unwrap_or(&0.0)
    }

    /// Point and unit direction at arclength `s`, clamped to the route ends.
    pub fn point_at(&self, s: f64) -> (Vec2, Vec2) {
        let n = self.points.len();
        if n < 2 {
            return (self.points.first().copied().unwrap_or([0.0, 0.0]), [1.0, 0.0]);
        }
        let s = s.clamp(0.0, self.length());
        let k = self.arclength[1..n - 1].partition_point(|&a| a < s);
        let (a, b) = (self.points[k], self.points[k + 1]);
        let seg = self.arclength[k + 1] - self.arclength[k];
        let dir = if seg > 0.0 {
            [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg]
        } else {
            [1.0, 0.0]
        };
        let mu = s - self.arclength[k];
        ([a[0] + mu * dir[0], a[1] + mu * dir[1]], dir)
    }

    /// Projects `p` onto the closest route segment (lowest index on ties).
    pub fn project(&self, p: Vec2) -> RouteProjection {
        if self.points.len() < 2 {
            let q = self.points.first().copied().unwrap_or(p);
            return RouteProjection {
                s: 0.0,
                lateral: (p[0] - q[0]).hypot(p[1] - q[1]),
                grad: [0.0, 0.0],
            };
        }
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for k in 0..self.points.len() - 1 {
            let (d, mu) = project_on_segment(p, self.points[k], self.points[k + 1]);
            if d < best.0 {
                best = (d, k, mu);
            }
        }
        let (lateral, k, mu) = best;
        let seg = self.arclength[k + 1] - self.arclength[k];
        let (a, b) = (self.points[k], self.points[k + 1]);
        let grad = if mu > 0.0 && mu < 1.0 && seg > 0.0 {
            [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg]
        } else {
            [0.0, 0.0]
        };
        RouteProjection {
            s: self.arclength[k] + mu * seg,
            lateral,
            grad,
        }
    }
}

/// Enumerates lane sequences from `start` by depth-first search.
///
/// A route ends at a lane without unvisited successors or at [`MAX_DEPTH`]
/// lanes. Successors are explored in their listed order and the search stops
/// after [`MAX_ROUTES`] routes. An unknown start lane yields no routes.
pub fn route_search(map: &Map, start: usize) -> Vec<Route> {
    route_search_bounded(map, start, MAX_ROUTES, MAX_DEPTH)
}

pub fn route_search_bounded(map: &Map, start: usize, max_routes: usize, max_depth: usize) -> Vec<Route> {
    let mut out = Vec::new();
    if start >= map.lanes.len() || max_depth == 0 {
        return out;
    }
    let mut path = vec![start];
    let mut on_path = vec![false; map.lanes.len()];
    on_path[start] = true;
    dfs(map, &mut path, &mut on_path, max_routes, max_depth, &mut out);
    out
}

fn dfs(
    map: &Map,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    max_routes: usize,
    max_depth: usize,
    out: &mut Vec<Route>,
) {
    if out.len() >= max_routes {
        return;
    }
    let last = *path.last().expect("non-empty path");
    let next: Vec<usize> = map.lanes[last]
        .successors
        .iter()
        .copied()
        .filter(|&s| !on_path[s])
        .collect();
    if next.is_empty() || path.len() >= max_depth {
        out.push(Route::from_lanes(map, path.clone()));
        return;
    }
    for s in next {
        path.push(s);
        on_path[s] = true;
        dfs(map, path, on_path, max_routes, max_depth, out);
        on_path[s] = false;
        path.pop();
        if out.len() >= max_routes {
            return;
        }
    }
}

/// The candidate route from the agent's start lane that best matches its log.
pub fn assign_route(scenario: &Scenario, agent: usize) -> Option<Route> {
    let spec = &scenario.agents[agent];
    let start = spec.start_lane?;
    let candidates = route_search(&scenario.map, start);
    let score = |r: &Route| {
        spec.log
            .iter()
            .map(|p| r.project([p[0], p[1]]).lateral)
            .sum::<f64>()
    };
    let mut best: Option<(f64, Route)> = None;
    for r in candidates {
        let c = score(&r);
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, r));
        }
    }
    best.map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Lane;

    fn lane(x0: f64, succ: Vec<usize>) -> Lane {
        Lane {
            centerline: vec![[x0, 0.0], [x0 + 10.0, 0.0]],
            successors: succ,
        }
    }

    #[test]
    fn linear_chain() {
        let map = Map::new(vec![], vec![lane(0.0, vec![1]), lane(10.0, vec![2]), lane(20.0, vec![])], vec![]).unwrap();
        let routes = route_search(&map, 0);
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].lanes, vec![0, 1, 2]);
        assert_eq!(routes[0].points.len(), 4);
        assert_eq!(routes[0].length(), 30.0);
    }

    #[test]
    fn binary_fork_depth_two() {
        let lanes = vec![
            lane(0.0, vec![1, 2]),
            lane(10.0, vec![3, 4]),
            lane(10.0, vec![5, 6]),
            lane(20.0, vec![]),
            lane(20.0, vec![]),
            lane(20.0, vec![]),
            lane(20.0, vec![]),
        ];
        let map = Map::new(vec![], lanes, vec![]).unwrap();
        assert_eq!(route_search(&map, 0).len(), 4);
        assert!(route_search(&map, 99).is_empty());
    }

    #[test]
    fn cycles_are_cut() {
        let map = Map::new(vec![], vec![lane(0.0, vec![1]), lane(10.0, vec![0])], vec![]).unwrap();
        let routes = route_search(&map, 0);
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].lanes, vec![0, 1]);
    }

    #[test]
    fn projection_arclength() {
        let map = Map::new(vec![], vec![lane(0.0, vec![1]), lane(10.0, vec![])], vec![]).unwrap();
        let r = &route_search(&map, 0)[0];
        let p = r.project([13.0, 2.0]);
        assert_eq!((p.s, p.lateral, p.grad), (13.0, 2.0, [1.0, 0.0]));
    }
}
