use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// A closed loop of centerline waypoints plus a drivable width.
///
/// Serialized as `{"waypoints": [[x, y], ...], "width": w}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub waypoints: Vec<[f64; 2]>,
    pub width: f64,
}

impl TrackSpec {
    /// Ellipse with semi-axes `a` (x) and `b` (y), waypoints counter-clockwise.
    pub fn ellipse(a: f64, b: f64, n: usize, width: f64) -> Self {
        let waypoints = (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                [a * t.cos(), b * t.sin()]
            })
            .collect();
        Self { waypoints, width }
    }

    /// Circle of the given radius, waypoints counter-clockwise.
    pub fn circle(radius: f64, n: usize, width: f64) -> Self {
        Self::ellipse(radius, radius, n, width)
    }

    /// Two straights of length `straight` joined by semicircles of `radius`.
    pub fn stadium(straight: f64, radius: f64, spacing: f64, width: f64) -> Self {
        let mut waypoints = Vec::new();
        let half = straight / 2.0;
        let n_straight = (straight / spacing).ceil().max(1.0) as usize;
        let n_arc = (PI * radius / spacing).ceil().max(2.0) as usize;
        // bottom straight, left to right
        for i in 0..n_straight {
            waypoints.push([-half + straight * i as f64 / n_straight as f64, -radius]);
        }
        // right arc
        for i in 0..n_arc {
            let t = -PI / 2.0 + PI * i as f64 / n_arc as f64;
            waypoints.push([half + radius * t.cos(), radius * t.sin()]);
        }
        // top straight, right to left
        for i in 0..n_straight {
            waypoints.push([half - straight * i as f64 / n_straight as f64, radius]);
        }
        // left arc
        for i in 0..n_arc {
            let t = PI / 2.0 + PI * i as f64 / n_arc as f64;
            waypoints.push([-half + radius * t.cos(), radius * t.sin()]);
        }
        Self { waypoints, width }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Closest point on the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Index of the segment `waypoints[i] -> waypoints[i + 1]`.
    pub segment: usize,
    /// Arc length along waypoint order, in `[0, length)`.
    pub s: f64,
    /// Signed lateral offset; positive is left of the waypoint order.
    pub cross_track: f64,
    /// Tangent heading of the segment in waypoint order.
    pub tangent: f64,
    pub distance: f64,
}

/// Preprocessed centerline for fast projection queries.
#[derive(Debug, Clone)]
pub struct Track {
    spec: TrackSpec,
    cum_s: Vec<f64>,
    seg_len: Vec<f64>,
    seg_dir: Vec<[f64; 2]>,
    length: f64,
}

impl Track {
    pub fn new(spec: TrackSpec) -> Result<Self> {
        let n = spec.waypoints.len();
        if n < 3 {
            return Err(Error::InvalidParam("a track needs at least 3 waypoints".into()));
        }
        if !(spec.width > 0.0) {
            return Err(Error::InvalidParam("track width must be positive".into()));
        }
        if spec.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("track waypoints"));
        }
        let mut cum_s = Vec::with_capacity(n + 1);
        let mut seg_len = Vec::with_capacity(n);
        let mut seg_dir = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            let a = spec.waypoints[i];
            let b = spec.waypoints[(i + 1) % n];
            let dx = b[0] - a[0];
            let dy = b[1] - a[1];
            let len = dx.hypot(dy);
            if len <= 0.0 {
                return Err(Error::InvalidParam(format!("duplicate waypoint at index {i}")));
            }
            cum_s.push(s);
            seg_len.push(len);
            seg_dir.push([dx / len, dy / len]);
            s += len;
        }
        cum_s.push(s);
        Ok(Self { spec, cum_s, seg_len, seg_dir, length: s })
    }

    pub fn spec(&self) -> &TrackSpec {
        &self.spec
    }

    pub fn width(&self) -> f64 {
        self.spec.width
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.spec.width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn num_segments(&self) -> usize {
        self.seg_len.len()
    }

    fn project_segment(&self, i: usize, p: [f64; 2]) -> Projection {
        let a = self.spec.waypoints[i];
        let d = self.seg_dir[i];
        let rx = p[0] - a[0];
        let ry = p[1] - a[1];
        let along = (rx * d[0] + ry * d[1]).clamp(0.0, self.seg_len[i]);
        let cx = a[0] + along * d[0];
        let cy = a[1] + along * d[1];
        let ex = p[0] - cx;
        let ey = p[1] - cy;
        let distance = ex.hypot(ey);
        let side = d[0] * ey - d[1] * ex;
        Projection {
            segment: i,
            s: self.cum_s[i] + along,
            cross_track: if side < 0.0 { -distance } else { distance },
            tangent: d[1].atan2(d[0]),
            distance,
        }
    }

    /// Exhaustive projection over all segments.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = self.project_segment(0, p);
        for i in 1..self.num_segments() {
            let cand = self.project_segment(i, p);
            if cand.distance < best.distance {
                best = cand;
            }
        }
        best
    }

    /// Projection restricted to `window` segments on either side of `hint`.
    pub fn project_near(&self, p: [f64; 2], hint: usize, window: usize) -> Projection {
        let n = self.num_segments();
        if 2 * window + 1 >= n {
            return self.project(p);
        }
        let mut best = self.project_segment(hint % n, p);
        for off in 1..=window {
            for i in [(hint + off) % n, (hint % n + n - off) % n] {
                let cand = self.project_segment(i, p);
                if cand.distance < best.distance {
                    best = cand;
                }
            }
        }
        best
    }

    /// Point on the centerline at arc length `s` (wrapped).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.rem_euclid(self.length);
        let i = match self.cum_s.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.num_segments() - 1),
            Err(i) => i - 1,
        };
        let a = self.spec.waypoints[i];
        let d = self.seg_dir[i];
        let along = s - self.cum_s[i];
        [a[0] + along * d[0], a[1] + along * d[1]]
    }

    /// Signed progress from `s_from` to `s_to` along waypoint order, taking the
    /// shorter way around the loop.
    pub fn arc_delta(&self, s_from: f64, s_to: f64) -> f64 {
        let mut d = s_to - s_from;
        let half = 0.5 * self.length;
        if d > half {
            d -= self.length;
        } else if d < -half {
            d += self.length;
        }
        d
    }

    /// Tangent heading at `s` in waypoint order.
    pub fn tangent_at(&self, s: f64) -> f64 {
        let p = self.point_at(s);
        self.project(p).tangent
    }

    /// True when waypoints run counter-clockwise (positive signed area).
    pub fn is_counter_clockwise(&self) -> bool {
        let w = &self.spec.waypoints;
        let n = w.len();
        let area: f64 = (0..n)
            .map(|i| {
                let a = w[i];
                let b = w[(i + 1) % n];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum();
        area > 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_projection() {
        let t = Track::new(TrackSpec::circle(10.0, 400, 3.0)).unwrap();
        assert!(t.is_counter_clockwise());
        assert!((t.length() - 2.0 * PI * 10.0).abs() < 0.01);
        // inside the loop is left of a ccw centerline
        let p = t.project([9.0, 0.0]);
        assert!((p.cross_track - 1.0).abs() < 1e-3);
        let p = t.project([11.0, 0.0]);
        assert!((p.cross_track + 1.0).abs() < 1e-3);
        let q = [10.5 * 1.6f64.cos(), 10.5 * 1.6f64.sin()];
        let near = t.project_near(q, 100, 5);
        let full = t.project(q);
        assert_eq!(near.segment, full.segment);
        assert!((near.cross_track - full.cross_track).abs() < 1e-12);
    }

    #[test]
    fn point_at_and_arc_delta() {
        let t = Track::new(TrackSpec::stadium(20.0, 5.0, 0.25, 3.0)).unwrap();
        let p = t.point_at(0.0);
        assert!((p[0] + 10.0).abs() < 1e-9 && (p[1] + 5.0).abs() < 1e-9);
        let q = t.point_at(t.length() + 2.0);
        assert!((q[0] + 8.0).abs() < 1e-9);
        assert!((t.arc_delta(t.length() - 1.0, 1.0) - 2.0).abs() < 1e-9);
        assert!((t.arc_delta(1.0, t.length() - 1.0) + 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_tracks() {
        assert!(Track::new(TrackSpec { waypoints: vec![[0.0, 0.0], [1.0, 0.0]], width: 1.0 })
            .is_err());
        assert!(Track::new(TrackSpec::circle(5.0, 10, 0.0)).is_err());
    }

    #[test]
    fn json_shape() {
        let spec = TrackSpec { waypoints: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], width: 2.0 };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"waypoints":[[0.0,0.0],[1.0,0.0],[0.0,1.0]],"width":2.0}"#);
    }
}
