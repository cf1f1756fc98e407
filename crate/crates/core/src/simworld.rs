//! Planar world for the mobile base: polygon obstacles, an omnidirectional
//! disc-shaped base, exact lidar raycasting and contact bookkeeping.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::Pose;

/// Contacts closer together than this are reported as one event (s).
pub const CONTACT_COALESCE_WINDOW: f64 = 0.5;
/// Control period (s).
pub const CONTROL_DT: f64 = 0.02;
pub const DEFAULT_BEAMS: usize = 360;

/// Planar body twist in the base frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseTwist {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl BaseTwist {
    pub fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub fn linear(&self) -> Vector2<f64> {
        Vector2::new(self.vx, self.vy)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.omega.is_finite()
    }

    /// Scales the translational part down to `limits.linear` (preserving its
    /// direction) and clamps the yaw rate.
    pub fn clamped(&self, limits: &TwistLimits) -> BaseTwist {
        let v = self.linear();
        let n = v.norm();
        let v = if n > limits.linear { v * (limits.linear / n) } else { v };
        BaseTwist::new(v.x, v.y, self.omega.clamp(-limits.angular, limits.angular))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistLimits {
    /// m/s
    pub linear: f64,
    /// rad/s
    pub angular: f64,
}

impl Default for TwistLimits {
    fn default() -> Self {
        Self { linear: 0.3, angular: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl BasePose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Base-frame vector rotated into the world frame.
    pub fn to_world(&self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn to_base(&self, v: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(c * v.x + s * v.y, -s * v.x + c * v.y)
    }

    /// The base as an SE(3) pose at ground level.
    pub fn as_pose(&self) -> Pose {
        let mut p = Pose::from_axis_angle(&Vector3::z(), self.theta);
        p = Pose::from_translation(Vector3::new(self.x, self.y, 0.0)).compose(&p);
        p
    }
}

/// Closed polygon; the last vertex connects back to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Vector2<f64>>,
}

impl Polygon {
    pub fn new(vertices: Vec<Vector2<f64>>) -> Result<Self> {
        let p = Self { vertices };
        p.validate()?;
        Ok(p)
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            vertices: vec![
                Vector2::new(x0, y0),
                Vector2::new(x1, y0),
                Vector2::new(x1, y1),
                Vector2::new(x0, y1),
            ],
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// At least three vertices and no two non-adjacent edges intersect.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n < 3 {
            return Err(Error::InvalidParameter("polygon needs at least 3 vertices".into()));
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(edges[i], edges[j]) {
                    return Err(Error::InvalidParameter("polygon is self-intersecting".into()));
                }
            }
        }
        Ok(())
    }

    /// Even-odd point containment.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn distance_to(&self, p: &Vector2<f64>) -> f64 {
        let d = self
            .edges()
            .map(|(a, b)| (p - closest_on_segment(p, &a, &b)).norm())
            .fold(f64::INFINITY, f64::min);
        if self.contains(p) {
            0.0
        } else {
            d
        }
    }
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn segments_intersect((a, b): (Vector2<f64>, Vector2<f64>), (c, d): (Vector2<f64>, Vector2<f64>)) -> bool {
    let d1 = cross2(&(b - a), &(c - a));
    let d2 = cross2(&(b - a), &(d - a));
    let d3 = cross2(&(d - c), &(a - c));
    let d4 = cross2(&(d - c), &(b - c));
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

pub fn closest_on_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Distance along the ray `o + s u` (unit `u`) to segment `ab`, if hit.
fn ray_segment(o: &Vector2<f64>, u: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> Option<f64> {
    let e = b - a;
    let denom = cross2(u, &e);
    if denom.abs() < 1e-15 {
        return None;
    }
    let ao = a - o;
    let s = cross2(&ao, &e) / denom;
    let v = cross2(&ao, u) / denom;
    (s >= 0.0 && (0.0..=1.0).contains(&v)).then_some(s)
}

/// Earliest fraction `t` in `[0, 1]` at which a disc of radius `r` moving from
/// `p` by `delta` touches segment `ab` while approaching it.
fn swept_disc_hit(p: &Vector2<f64>, delta: &Vector2<f64>, r: f64, a: &Vector2<f64>, b: &Vector2<f64>) -> Option<f64> {
    let c0 = closest_on_segment(p, a, b);
    let away = p - c0;
    if away.norm() <= r + 1e-12 {
        // already touching: block only motion into the segment
        return (away.dot(delta) < 0.0).then_some(0.0);
    }
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if (0.0..=1.0).contains(&t) && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let e = b - a;
    let len = e.norm();
    if len > 0.0 {
        let n = Vector2::new(-e.y, e.x) / len;
        let s0 = (p - a).dot(&n);
        let dn = delta.dot(&n);
        if dn != 0.0 {
            let target = if s0 > 0.0 { r } else { -r };
            let t = (target - s0) / dn;
            let q = p + delta * t;
            let u = (q - a).dot(&e) / (len * len);
            if (0.0..=1.0).contains(&u) {
                consider(t);
            }
        }
    }
    for c in [a, b] {
        // |p + t delta - c|^2 = r^2
        let m = p - c;
        let qa = delta.norm_squared();
        if qa == 0.0 {
            continue;
        }
        let qb = 2.0 * m.dot(delta);
        let qc = m.norm_squared() - r * r;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            consider((-qb - disc.sqrt()) / (2.0 * qa));
        }
    }
    best
}

/// 360-degree range scan in the base frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub ranges: Vec<f64>,
    pub angle_of_beam_0: f64,
    pub angular_step: f64,
    pub max_range: f64,
}

impl LidarScan {
    pub fn beam_angle(&self, k: usize) -> f64 {
        self.angle_of_beam_0 + k as f64 * self.angular_step
    }

    pub fn beam_direction(&self, k: usize) -> Vector2<f64> {
        let (s, c) = self.beam_angle(k).sin_cos();
        Vector2::new(c, s)
    }

    /// Range along a unit direction, linearly interpolated between the two
    /// neighbouring beams.
    pub fn ray_range(&self, d: &Vector2<f64>) -> f64 {
        let m = self.ranges.len();
        let rel = (d.y.atan2(d.x) - self.angle_of_beam_0).rem_euclid(TAU);
        let f = rel / self.angular_step;
        let k0 = (f.floor() as usize) % m;
        let k1 = (k0 + 1) % m;
        let frac = f - f.floor();
        if frac == 0.0 {
            return self.ranges[k0];
        }
        (1.0 - frac) * self.ranges[k0] + frac * self.ranges[k1]
    }

    /// Minimum range per equal angular sector, starting at beam 0.
    pub fn sectors(&self, n: usize) -> Vec<f64> {
        let m = self.ranges.len();
        (0..n)
            .map(|s| {
                let lo = s * m / n;
                let hi = ((s + 1) * m / n).max(lo + 1);
                self.ranges[lo..hi.min(m)].iter().copied().fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn min_range(&self) -> f64 {
        self.ranges.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOutcome {
    /// New coalesced contact events.
    pub events: usize,
    /// Motion was blocked by an obstacle during this step.
    pub contact: bool,
}

/// Counts contact events from contact timestamps with the coalescing window.
pub fn coalesce_contacts(times: impl IntoIterator<Item = f64>) -> usize {
    let mut last: Option<f64> = None;
    let mut events = 0;
    for t in times {
        if last.is_none_or(|l| t - l > CONTACT_COALESCE_WINDOW) {
            events += 1;
        }
        last = Some(t);
    }
    events
}

/// The simulated environment. Cloning yields an immutable snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub obstacles: Vec<Polygon>,
    pub base: BasePose,
    pub base_radius: f64,
    /// Left and right arm mounts relative to the base frame.
    pub arm_mounts: [Pose; 2],
    #[serde(default)]
    pub time: f64,
    #[serde(default)]
    pub limits: TwistLimits,
    #[serde(default = "default_max_range")]
    pub lidar_max_range: f64,
    #[serde(default)]
    last_contact: Option<f64>,
}

fn default_max_range() -> f64 {
    8.0
}

pub fn default_arm_mounts() -> [Pose; 2] {
    [
        Pose::from_translation(Vector3::new(0.10, 0.20, 0.30)),
        Pose::from_translation(Vector3::new(0.10, -0.20, 0.30)),
    ]
}

impl World {
    pub fn new(obstacles: Vec<Polygon>, base: BasePose, base_radius: f64) -> Result<Self> {
        let w = Self {
            obstacles,
            base,
            base_radius,
            arm_mounts: default_arm_mounts(),
            time: 0.0,
            limits: TwistLimits::default(),
            lidar_max_range: default_max_range(),
            last_contact: None,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_radius > 0.0) {
            return Err(Error::InvalidParameter("base radius must be positive".into()));
        }
        for p in &self.obstacles {
            p.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: World = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    /// Signed clearance between the base disc and the nearest obstacle.
    pub fn clearance(&self) -> f64 {
        let c = self.base.position();
        self.obstacles
            .iter()
            .map(|p| p.distance_to(&c))
            .fold(f64::INFINITY, f64::min)
            - self.base_radius
    }

    /// Advances by `dt`, returning the new world and the number of new
    /// (coalesced) contact events.
    pub fn step(&self, cmd: &BaseTwist, dt: f64) -> (World, usize) {
        let mut next = self.clone();
        let events = next.step_in_place(cmd, dt);
        (next, events)
    }

    pub fn step_in_place(&mut self, cmd: &BaseTwist, dt: f64) -> usize {
        self.advance(cmd, dt).events
    }

    /// Like [`World::step_in_place`] but also reports raw contact.
    pub fn advance(&mut self, cmd: &BaseTwist, dt: f64) -> StepOutcome {
        let cmd = cmd.clamped(&self.limits);
        let delta = self.base.to_world(&cmd.linear()) * dt;
        let p = self.base.position();
        let hit = self
            .obstacles
            .iter()
            .flat_map(|poly| poly.edges())
            .filter_map(|(a, b)| swept_disc_hit(&p, &delta, self.base_radius, &a, &b))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));

        let moved = match hit {
            Some(t) => {
                let len = delta.norm();
                let backoff = if len > 0.0 { 1e-9 / len } else { 0.0 };
                p + delta * (t - backoff).max(0.0)
            }
            None => p + delta,
        };
        self.base.x = moved.x;
        self.base.y = moved.y;
        self.base.theta += cmd.omega * dt;
        self.time += dt;

        match hit {
            Some(_) => {
                let fresh = self
                    .last_contact
                    .is_none_or(|last| self.time - last > CONTACT_COALESCE_WINDOW);
                self.last_contact = Some(self.time);
                StepOutcome { events: usize::from(fresh), contact: true }
            }
            None => StepOutcome::default(),
        }
    }

    pub fn lidar_scan(&self, m_beams: usize) -> Result<LidarScan> {
        if m_beams < 4 {
            return Err(Error::InvalidParameter("lidar needs at least 4 beams".into()));
        }
        let step = TAU / m_beams as f64;
        let o = self.base.position();
        let ranges = (0..m_beams)
            .map(|k| {
                let ang = self.base.theta + k as f64 * step;
                let u = Vector2::new(ang.cos(), ang.sin());
                self.obstacles
                    .iter()
                    .flat_map(|poly| poly.edges())
                    .filter_map(|(a, b)| ray_segment(&o, &u, &a, &b))
                    .fold(self.lidar_max_range, f64::min)
                    .max(1e-6)
            })
            .collect();
        Ok(LidarScan {
            ranges,
            angle_of_beam_0: 0.0,
            angular_step: step,
            max_range: self.lidar_max_range,
        })
    }

    /// World-frame pose of arm `side` (0 left, 1 right) mount.
    pub fn arm_mount_in_world(&self, side: usize) -> Pose {
        self.base.as_pose().compose(&self.arm_mounts[side])
    }
}

/// Ready-made maps.
pub mod maps {
    use super::*;

    /// Empty floor.
    pub fn open_floor() -> World {
        World::new(vec![], BasePose::default(), 0.35).expect("valid")
    }

    /// Single wall whose near face sits at `x = distance`.
    pub fn wall_ahead(distance: f64, base_radius: f64) -> World {
        World::new(
            vec![Polygon::rect(distance, -3.0, distance + 0.2, 3.0)],
            BasePose::default(),
            base_radius,
        )
        .expect("valid")
    }

    /// Corridor with staggered crates, for carrying an object that blocks the view.
    pub fn blind_carry_corridor() -> World {
        let obstacles = vec![
            Polygon::rect(-0.5, 1.0, 8.0, 1.2),
            Polygon::rect(-0.5, -1.2, 8.0, -1.0),
            Polygon::rect(2.0, 0.2, 2.5, 1.0),
            Polygon::rect(4.0, -1.0, 4.5, -0.2),
            Polygon::rect(8.0, -1.2, 8.2, 1.2),
        ];
        World::new(obstacles, BasePose::default(), 0.35).expect("valid")
    }

    /// Wall with a 1.1 m doorway.
    pub fn narrow_doorway() -> World {
        let obstacles = vec![
            Polygon::rect(2.0, 0.55, 2.2, 3.0),
            Polygon::rect(2.0, -3.0, 2.2, -0.55),
        ];
        World::new(obstacles, BasePose::default(), 0.35).expect("valid")
    }
}
