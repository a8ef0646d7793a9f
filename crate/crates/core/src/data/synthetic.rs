//! Deterministic synthetic traffic at 25 Hz: a three-lane highway, a
//! four-arm roundabout and a two-way fork.
//!
//! Vehicles move along their paths under the intelligent driver model;
//! stored velocities, accelerations and headings are finite differences of
//! the generated positions.

use super::{finite_differences, heading_from_velocity, Geometry, Layout, TrajectoryRow, TrajectoryTable};
use crate::error::Result;
use crate::scenegraph::AgentCategory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

pub const RATE_HZ: f64 = 25.0;
const DT: f64 = 1.0 / RATE_HZ;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Highway,
    Roundabout,
    Fork,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "highway" => Some(SyntheticKind::Highway),
            "roundabout" => Some(SyntheticKind::Roundabout),
            "fork" => Some(SyntheticKind::Fork),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Highway => "highway",
            SyntheticKind::Roundabout => "roundabout",
            SyntheticKind::Fork => "fork",
        }
    }

    /// Frames per scene, always a multiple of the downsampling factor 5.
    pub fn scene_frames(self) -> usize {
        match self {
            SyntheticKind::Highway => 300,
            SyntheticKind::Roundabout => 350,
            SyntheticKind::Fork => 200,
        }
    }

    pub fn geometry(self) -> Geometry {
        let layout = match self {
            SyntheticKind::Highway => Layout::Highway { lane_lines: (0..=LANES).map(|i| i as f64 * LANE_WIDTH).collect() },
            SyntheticKind::Roundabout | SyntheticKind::Fork => Layout::Junction { origin: [0.0, 0.0] },
        };
        Geometry { rate_hz: RATE_HZ, layout }
    }
}

/// Agent ids are `scene * AGENT_STRIDE + local index`.
pub const AGENT_STRIDE: u64 = 1000;

/// Generates `n_scenes` independent scenes separated by frame gaps. Zero scenes give an empty table.
pub fn generate_synthetic(kind: SyntheticKind, n_scenes: usize, seed: u64) -> Result<TrajectoryTable> {
    let frames = kind.scene_frames();
    let span = (frames as i64 / 25 + 3) * 25;
    let mut rows = Vec::new();
    for s in 0..n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let traces = match kind {
            SyntheticKind::Highway => highway_scene(&mut rng, frames),
            SyntheticKind::Roundabout => roundabout_scene(&mut rng, frames),
            SyntheticKind::Fork => fork_scene(&mut rng, frames),
        };
        emit_rows(&traces, s as i64 * span, s as u64 * AGENT_STRIDE, &mut rows);
    }
    TrajectoryTable::new(rows, kind.geometry(), 1)
}

struct Trace {
    category: AgentCategory,
    start: usize,
    positions: Vec<[f64; 2]>,
}

fn emit_rows(traces: &[Trace], frame0: i64, id0: u64, rows: &mut Vec<TrajectoryRow>) {
    let mut scene_rows = Vec::new();
    for (k, t) in traces.iter().enumerate() {
        if t.positions.is_empty() {
            continue;
        }
        let frames: Vec<i64> = (0..t.positions.len()).map(|i| frame0 + (t.start + i) as i64).collect();
        let xs: Vec<f64> = t.positions.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = t.positions.iter().map(|p| p[1]).collect();
        let vx = finite_differences(&frames, &xs, RATE_HZ);
        let vy = finite_differences(&frames, &ys, RATE_HZ);
        let ax = finite_differences(&frames, &vx, RATE_HZ);
        let ay = finite_differences(&frames, &vy, RATE_HZ);
        let psi = heading_from_velocity(&vx, &vy);
        for i in 0..frames.len() {
            scene_rows.push(TrajectoryRow {
                frame: frames[i],
                agent_id: id0 + k as u64,
                x: xs[i],
                y: ys[i],
                vx: vx[i],
                vy: vy[i],
                ax: ax[i],
                ay: ay[i],
                psi: psi[i],
                category: t.category,
            });
        }
    }
    scene_rows.sort_by_key(|r| (r.frame, r.agent_id));
    rows.extend(scene_rows);
}

#[derive(Clone, Copy)]
struct Idm {
    a_max: f64,
    b: f64,
    s0: f64,
    headway: f64,
}

const IDM: Idm = Idm { a_max: 1.5, b: 2.0, s0: 2.0, headway: 1.2 };
const VEHICLE_LENGTH: f64 = 5.0;

impl Idm {
    /// Acceleration given the bumper gap and speed of an optional leader.
    fn accel(&self, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / v0.max(0.1)).powi(4);
        let interaction = leader.map_or(0.0, |(gap, v_lead)| {
            let s_star = self.s0 + (v * self.headway + v * (v - v_lead) / (2.0 * (self.a_max * self.b).sqrt())).max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        });
        (self.a_max * (free - interaction)).clamp(-8.0, self.a_max)
    }
}

fn integrate(v: &mut f64, s: &mut f64, a: f64) {
    *v = (*v + a * DT).max(0.0);
    *s += *v * DT;
}

const LANES: usize = 3;
const LANE_WIDTH: f64 = 3.75;
const LANE_CHANGE_TIME: f64 = 4.0;

struct HighwayCar {
    x: f64,
    v: f64,
    v_des: f64,
    lane: usize,
    from_lane: usize,
    change_t: Option<f64>,
    truck: bool,
    trace: Vec<[f64; 2]>,
}

impl HighwayCar {
    fn y(&self) -> f64 {
        let centre = |l: usize| (l as f64 + 0.5) * LANE_WIDTH;
        match self.change_t {
            Some(t) => {
                let w = 0.5 * (1.0 - (PI * (t / LANE_CHANGE_TIME).min(1.0)).cos());
                centre(self.from_lane) + w * (centre(self.lane) - centre(self.from_lane))
            }
            None => centre(self.lane),
        }
    }
}

fn lane_leader(cars: &[HighwayCar], i: usize, lane: usize) -> Option<(f64, f64)> {
    cars.iter()
        .enumerate()
        .filter(|&(j, c)| j != i && (c.lane == lane || (c.change_t.is_some() && c.from_lane == lane)) && c.x > cars[i].x)
        .map(|(_, c)| (c.x - cars[i].x - VEHICLE_LENGTH, c.v))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn lane_gap_behind(cars: &[HighwayCar], i: usize, lane: usize) -> f64 {
    cars.iter()
        .enumerate()
        .filter(|&(j, c)| j != i && (c.lane == lane || (c.change_t.is_some() && c.from_lane == lane)) && c.x <= cars[i].x)
        .map(|(_, c)| cars[i].x - c.x - VEHICLE_LENGTH)
        .fold(f64::INFINITY, f64::min)
}

fn highway_scene(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Trace> {
    let n = rng.gen_range(7..=12);
    let mut cars: Vec<HighwayCar> = Vec::new();
    let mut attempts = 0;
    while cars.len() < n && attempts < 500 {
        attempts += 1;
        let lane = rng.gen_range(0..LANES);
        let x = rng.gen_range(0.0..220.0);
        if cars.iter().any(|c| c.lane == lane && (c.x - x).abs() < 25.0) {
            continue;
        }
        let truck = lane == 0 && rng.gen_bool(0.3);
        let v_des = if truck { rng.gen_range(22.0..25.0) } else { rng.gen_range(26.0..35.0) };
        cars.push(HighwayCar {
            x,
            v: v_des * rng.gen_range(0.8..1.0),
            v_des,
            lane,
            from_lane: lane,
            change_t: None,
            truck,
            trace: Vec::with_capacity(frames + 1),
        });
    }
    for step in 0..=frames {
        for c in cars.iter_mut() {
            let y = c.y();
            c.trace.push([c.x, y]);
        }
        if step == frames {
            break;
        }
        if step % 25 == 0 {
            for i in 0..cars.len() {
                if cars[i].change_t.is_some() || cars[i].truck {
                    continue;
                }
                let blocked = lane_leader(&cars, i, cars[i].lane).is_some_and(|(g, v)| g < 45.0 && v < cars[i].v_des - 2.0);
                if !blocked && !rng.gen_bool(0.03) {
                    continue;
                }
                let mut options: Vec<usize> = Vec::new();
                if cars[i].lane > 0 {
                    options.push(cars[i].lane - 1);
                }
                if cars[i].lane + 1 < LANES {
                    options.push(cars[i].lane + 1);
                }
                if options.len() == 2 && rng.gen_bool(0.5) {
                    options.swap(0, 1);
                }
                if let Some(&target) = options.iter().find(|&&l| {
                    lane_leader(&cars, i, l).map_or(true, |(g, _)| g > 30.0) && lane_gap_behind(&cars, i, l) > 20.0
                }) {
                    let c = &mut cars[i];
                    c.from_lane = c.lane;
                    c.lane = target;
                    c.change_t = Some(0.0);
                }
            }
        }
        let accel: Vec<f64> = (0..cars.len())
            .map(|i| {
                let mut leader = lane_leader(&cars, i, cars[i].lane);
                if cars[i].change_t.is_some() {
                    let other = lane_leader(&cars, i, cars[i].from_lane);
                    leader = match (leader, other) {
                        (Some(a), Some(b)) => Some(if a.0 < b.0 { a } else { b }),
                        (a, b) => a.or(b),
                    };
                }
                IDM.accel(cars[i].v, cars[i].v_des, leader)
            })
            .collect();
        for (c, a) in cars.iter_mut().zip(accel) {
            integrate(&mut c.v, &mut c.x, a);
            if let Some(t) = c.change_t.as_mut() {
                *t += DT;
                if *t >= LANE_CHANGE_TIME {
                    c.change_t = None;
                    c.from_lane = c.lane;
                }
            }
        }
    }
    cars.into_iter()
        .map(|c| Trace {
            category: if c.truck { AgentCategory::Truck } else { AgentCategory::Car },
            start: 0,
            positions: c.trace,
        })
        .collect()
}

/// Polyline parameterised by arc length.
struct ArcPath {
    points: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl ArcPath {
    fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        ArcPath { points, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let k = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(k) => return self.points[k],
            Err(k) => k.clamp(1, self.cum.len() - 1),
        };
        let (a, b) = (self.points[k - 1], self.points[k]);
        let seg = self.cum[k] - self.cum[k - 1];
        let w = if seg > 0.0 { (s - self.cum[k - 1]) / seg } else { 0.0 };
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }

    /// Arc length of the last point pushed so far.
    fn mark(points: &[[f64; 2]]) -> f64 {
        points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
    }
}

fn push_segment(out: &mut Vec<[f64; 2]>, a: [f64; 2], b: [f64; 2], spacing: f64) {
    let n = (((b[0] - a[0]).hypot(b[1] - a[1]) / spacing).ceil() as usize).max(1);
    for i in 1..=n {
        let w = i as f64 / n as f64;
        out.push([a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]);
    }
}

fn push_bezier(out: &mut Vec<[f64; 2]>, p: [[f64; 2]; 4], n: usize) {
    for i in 1..=n {
        let t = i as f64 / n as f64;
        let u = 1.0 - t;
        let c = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
        out.push([
            (0..4).map(|k| c[k] * p[k][0]).sum(),
            (0..4).map(|k| c[k] * p[k][1]).sum(),
        ]);
    }
}

const RING_RADIUS: f64 = 20.0;
const ARM_LENGTH: f64 = 70.0;
const MERGE_ANGLE: f64 = 0.45;
const LANE_OFFSET: f64 = 2.5;
const RING_SPEED: f64 = 7.5;

fn unit(phi: f64) -> [f64; 2] {
    [phi.cos(), phi.sin()]
}

fn add(a: [f64; 2], b: [f64; 2], k: f64) -> [f64; 2] {
    [a[0] + k * b[0], a[1] + k * b[1]]
}

/// Route through the roundabout with the arc lengths of its landmarks.
struct Route {
    path: ArcPath,
    /// Yield line at the end of the entry arm.
    s_yield: f64,
    s_ring_start: f64,
    s_ring_end: f64,
    s_exit: f64,
    entry_angle: f64,
}

fn roundabout_route(arm_in: usize, quarters: usize) -> Route {
    let phi_in = arm_in as f64 * FRAC_PI_2;
    let phi_out = phi_in + quarters as f64 * FRAC_PI_2;
    let (u_in, t_in) = (unit(phi_in), unit(phi_in + FRAC_PI_2));
    let (u_out, t_out) = (unit(phi_out), unit(phi_out + FRAC_PI_2));
    let mut pts = vec![add([ARM_LENGTH * u_in[0], ARM_LENGTH * u_in[1]], t_in, LANE_OFFSET)];
    let a = add([(RING_RADIUS + 10.0) * u_in[0], (RING_RADIUS + 10.0) * u_in[1]], t_in, LANE_OFFSET);
    let start = pts[0];
    push_segment(&mut pts, start, a, 0.1);
    let s_yield = ArcPath::mark(&pts);
    let theta_b = phi_in + MERGE_ANGLE;
    let b = [RING_RADIUS * theta_b.cos(), RING_RADIUS * theta_b.sin()];
    let tb = unit(theta_b + FRAC_PI_2);
    push_bezier(&mut pts, [a, add(a, u_in, -6.0), add(b, tb, -6.0), b], 150);
    let s_ring_start = ArcPath::mark(&pts);
    let theta_c = phi_out - MERGE_ANGLE;
    let n_arc = ((theta_c - theta_b) * RING_RADIUS / 0.1).ceil() as usize;
    for i in 1..=n_arc {
        let th = theta_b + (theta_c - theta_b) * i as f64 / n_arc as f64;
        pts.push([RING_RADIUS * th.cos(), RING_RADIUS * th.sin()]);
    }
    let s_ring_end = ArcPath::mark(&pts);
    let c = *pts.last().unwrap();
    let tc = unit(theta_c + FRAC_PI_2);
    let d = add([(RING_RADIUS + 10.0) * u_out[0], (RING_RADIUS + 10.0) * u_out[1]], t_out, -LANE_OFFSET);
    push_bezier(&mut pts, [c, add(c, tc, 6.0), add(d, u_out, -6.0), d], 150);
    let s_exit = ArcPath::mark(&pts);
    let end = add([ARM_LENGTH * u_out[0], ARM_LENGTH * u_out[1]], t_out, -LANE_OFFSET);
    push_segment(&mut pts, d, end, 0.1);
    Route { path: ArcPath::new(pts), s_yield, s_ring_start, s_ring_end, s_exit, entry_angle: theta_b }
}

struct RingCar {
    route: Route,
    s: f64,
    v: f64,
    v_app: f64,
    spawn: usize,
    active: bool,
    done: bool,
    truck: bool,
}

impl RingCar {
    fn pos(&self) -> [f64; 2] {
        self.route.path.at(self.s)
    }

    fn heading(&self) -> [f64; 2] {
        let a = self.route.path.at(self.s);
        let b = self.route.path.at(self.s + 0.5);
        let n = (b[0] - a[0]).hypot(b[1] - a[1]).max(1e-9);
        [(b[0] - a[0]) / n, (b[1] - a[1]) / n]
    }

    fn on_ring(&self) -> bool {
        self.s >= self.route.s_ring_start - 2.0 && self.s <= self.route.s_ring_end
    }

    fn desired_speed(&self) -> f64 {
        let r = &self.route;
        if self.s >= r.s_yield - 20.0 && self.s <= r.s_exit {
            RING_SPEED
        } else {
            self.v_app
        }
    }
}

fn ring_angle(p: [f64; 2]) -> f64 {
    p[1].atan2(p[0])
}

fn roundabout_leader(cars: &[RingCar], i: usize) -> Option<(f64, f64)> {
    let me = &cars[i];
    let p = me.pos();
    let h = me.heading();
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |gap: f64, v: f64| {
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, v));
        }
    };
    for (j, o) in cars.iter().enumerate() {
        if j == i || !o.active {
            continue;
        }
        let q = o.pos();
        if me.on_ring() && o.on_ring() {
            let d = (ring_angle(q) - ring_angle(p)).rem_euclid(2.0 * PI);
            if d > 0.0 && d < 1.6 {
                consider(RING_RADIUS * d - VEHICLE_LENGTH, o.v);
                continue;
            }
        }
        let rel = [q[0] - p[0], q[1] - p[1]];
        let lon = rel[0] * h[0] + rel[1] * h[1];
        let lat = (rel[1] * h[0] - rel[0] * h[1]).abs();
        let oh = o.heading();
        let cos_dpsi = oh[0] * h[0] + oh[1] * h[1];
        if lon > 0.0 && lon < 35.0 && lat < 1.8 + 0.1 * lon && cos_dpsi > 0.3 {
            consider(lon - VEHICLE_LENGTH, o.v * cos_dpsi);
        }
    }
    if me.s < me.route.s_yield && me.route.s_yield - me.s < 30.0 {
        let entry = me.route.entry_angle;
        let conflict = cars.iter().enumerate().any(|(j, o)| {
            if j == i || !o.active || !o.on_ring() {
                return false;
            }
            let upstream = (entry - ring_angle(o.pos())).rem_euclid(2.0 * PI);
            upstream < 1.5 || upstream > 2.0 * PI - 0.25
        });
        if conflict {
            consider(me.route.s_yield - me.s - 1.0, 0.0);
        }
    }
    best
}

fn roundabout_scene(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Trace> {
    let n = rng.gen_range(7..=11);
    let mut cars: Vec<RingCar> = Vec::new();
    for k in 0..n {
        let arm = rng.gen_range(0..4);
        let quarters = rng.gen_range(1..=3);
        let route = roundabout_route(arm, quarters);
        let truck = rng.gen_bool(0.1);
        let v_app = rng.gen_range(9.0..12.0);
        let preplaced = k < n / 2;
        let (s, spawn, v) = if preplaced {
            (rng.gen_range(0.0..route.s_ring_end), 0, RING_SPEED * rng.gen_range(0.7..1.0))
        } else {
            (0.0, rng.gen_range(0..frames * 3 / 5), v_app)
        };
        let candidate = RingCar { route, s, v, v_app, spawn, active: false, done: false, truck };
        let p = candidate.pos();
        let clash = preplaced
            && cars.iter().any(|c| c.spawn == 0 && {
                let q = c.pos();
                (p[0] - q[0]).hypot(p[1] - q[1]) < 12.0
            });
        if !clash {
            cars.push(candidate);
        }
    }
    let mut traces: Vec<Trace> = cars
        .iter()
        .map(|c| Trace {
            category: if c.truck { AgentCategory::Truck } else { AgentCategory::Car },
            start: 0,
            positions: Vec::new(),
        })
        .collect();
    for step in 0..=frames {
        for i in 0..cars.len() {
            if !cars[i].active && !cars[i].done && step >= cars[i].spawn {
                let p = cars[i].pos();
                let free = cars.iter().enumerate().all(|(j, o)| {
                    j == i || !o.active || {
                        let q = o.pos();
                        (p[0] - q[0]).hypot(p[1] - q[1]) > 15.0
                    }
                });
                if free {
                    cars[i].active = true;
                    traces[i].start = step;
                }
            }
        }
        for (c, t) in cars.iter_mut().zip(traces.iter_mut()) {
            if c.active {
                t.positions.push(c.pos());
            }
        }
        if step == frames {
            break;
        }
        let accel: Vec<f64> = (0..cars.len())
            .map(|i| if cars[i].active { IDM.accel(cars[i].v, cars[i].desired_speed(), roundabout_leader(&cars, i)) } else { 0.0 })
            .collect();
        for (c, a) in cars.iter_mut().zip(accel) {
            if c.active {
                integrate(&mut c.v, &mut c.s, a);
                if c.s >= c.route.path.length() {
                    c.active = false;
                    c.done = true;
                }
            }
        }
    }
    traces
}

/// Lateral offset of the left branch at longitudinal position `x ≥ 0`;
/// the right branch mirrors it.
pub fn fork_branch_offset(x: f64) -> f64 {
    let slope = 20f64.to_radians().tan();
    let c = slope / 40.0;
    if x <= 0.0 {
        0.0
    } else if x <= 20.0 {
        c * x * x
    } else {
        c * 400.0 + (x - 20.0) * slope
    }
}

const FORK_START: f64 = -120.0;
const FORK_END: f64 = 140.0;

fn fork_path(left: bool) -> ArcPath {
    let sign = if left { 1.0 } else { -1.0 };
    let mut pts = vec![[FORK_START, 0.0]];
    push_segment(&mut pts, [FORK_START, 0.0], [0.0, 0.0], 0.5);
    let n = ((FORK_END / 0.02) as usize).max(1);
    for i in 1..=n {
        let x = FORK_END * i as f64 / n as f64;
        pts.push([x, sign * fork_branch_offset(x)]);
    }
    ArcPath::new(pts)
}

fn fork_scene(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Trace> {
    let n = rng.gen_range(1..=2);
    let lead_x = rng.gen_range(-30.0..-3.0);
    let now = 3.0;
    let mut traces = Vec::new();
    for k in 0..n {
        let x_now = if k == 0 { lead_x } else { lead_x - rng.gen_range(15.0..25.0) };
        let v = rng.gen_range(8.0..12.0);
        let path = fork_path(rng.gen_bool(0.5));
        let s_now = x_now - FORK_START;
        let positions = (0..=frames).map(|f| path.at(s_now + v * (f as f64 * DT - now))).collect();
        traces.push(Trace { category: AgentCategory::Car, start: 0, positions });
    }
    traces
}
