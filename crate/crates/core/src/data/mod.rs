//! Trajectory tables: CSV ingestion, downsampling, scene windowing,
//! synthetic scenarios and dataset splits.

mod synthetic;

pub use synthetic::{fork_branch_offset, generate_synthetic, SyntheticKind};

use crate::error::{Error, Result};
use crate::scenegraph::{
    lane_offset, polar_context, wrap_angle, AgentCategory, AgentId, AgentTrack, ContextFeatures,
    FutureState, NodeFeatures, Observation, SceneKind, SceneSequence,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

/// Column order of the canonical trajectory CSV.
pub const CSV_HEADER: [&str; 10] = ["frame", "agent_id", "x", "y", "vx", "vy", "ax", "ay", "psi", "category"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub frame: i64,
    pub agent_id: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub psi: f64,
    pub category: AgentCategory,
}

/// Static layout of a recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layout {
    /// Lane dividers as ascending lateral coordinates, road edges included.
    Highway { lane_lines: Vec<f64> },
    /// Reference point for polar context.
    Junction { origin: [f64; 2] },
}

impl Layout {
    pub fn kind(&self) -> SceneKind {
        match self {
            Layout::Highway { .. } => SceneKind::Highway,
            Layout::Junction { .. } => SceneKind::Junction,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Layout::Highway { lane_lines } = self {
            if lane_lines.len() < 2 {
                return Err(Error::Invalid("highway layout needs at least two lane lines".into()));
            }
            if !lane_lines.windows(2).all(|w| w[1] > w[0]) || !lane_lines.iter().all(|v| v.is_finite()) {
                return Err(Error::Invalid("lane lines must be finite and strictly ascending".into()));
            }
        }
        Ok(())
    }

    /// Lane and road offsets for a world-frame lateral coordinate.
    fn lane_context(lines: &[f64], y_world: f64) -> ContextFeatures {
        let last = lines.len() - 2;
        let lane = (0..=last).find(|&i| y_world < lines[i + 1]).unwrap_or(last);
        let d_l = lane_offset(y_world, 0.0, lines[lane], lines[lane + 1] - lines[lane]);
        let d_r = lane_offset(y_world, 0.0, lines[0], lines[last + 1] - lines[0]);
        ContextFeatures::Lane { d_l, d_r }
    }
}

/// Geometry sidecar: recording rate plus layout, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub rate_hz: f64,
    pub layout: Layout,
}

impl Geometry {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let g: Geometry = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        g.validate()?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::Invalid("recording rate must be positive".into()));
        }
        self.layout.validate()
    }
}

/// Recorded trajectories of one or more scenes sharing a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTable {
    pub rows: Vec<TrajectoryRow>,
    pub geometry: Geometry,
    /// Frame increment between consecutive samples.
    pub frame_step: i64,
}

#[derive(Deserialize)]
struct RawRow {
    frame: i64,
    agent_id: u64,
    x: f64,
    y: f64,
    vx: Option<f64>,
    vy: Option<f64>,
    ax: Option<f64>,
    ay: Option<f64>,
    psi: Option<f64>,
    category: String,
}

impl TrajectoryTable {
    pub fn new(rows: Vec<TrajectoryRow>, geometry: Geometry, frame_step: i64) -> Result<Self> {
        geometry.validate()?;
        if frame_step < 1 {
            return Err(Error::Invalid("frame step must be at least 1".into()));
        }
        let t = TrajectoryTable { rows, geometry, frame_step };
        t.validate()?;
        Ok(t)
    }

    pub fn kind(&self) -> SceneKind {
        self.geometry.layout.kind()
    }

    pub fn rate_hz(&self) -> f64 {
        self.geometry.rate_hz
    }

    /// Effective sampling time `frame_step / rate`.
    pub fn sample_time(&self) -> f64 {
        self.frame_step as f64 / self.geometry.rate_hz
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row indices per agent in file order.
    pub fn agent_rows(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            map.entry(r.agent_id).or_default().push(i);
        }
        map
    }

    /// Distinct frames in ascending order.
    pub fn frames(&self) -> Vec<i64> {
        let mut f: Vec<i64> = self.rows.iter().map(|r| r.frame).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Rejects duplicate (frame, agent) pairs, per-agent frame regressions
    /// and non-finite values.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if !seen.insert((r.frame, r.agent_id)) {
                return Err(Error::Data {
                    line: i + 2,
                    msg: format!("duplicate row for agent {} at frame {}", r.agent_id, r.frame),
                });
            }
            let vals = [r.x, r.y, r.vx, r.vy, r.ax, r.ay, r.psi];
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::Data { line: i + 2, msg: "non-finite value".into() });
            }
        }
        for idx in self.agent_rows().values() {
            for w in idx.windows(2) {
                if self.rows[w[1]].frame <= self.rows[w[0]].frame {
                    return Err(Error::Data {
                        line: w[1] + 2,
                        msg: format!("frames of agent {} are not increasing", self.rows[w[1]].agent_id),
                    });
                }
            }
        }
        Ok(())
    }

    /// Parses the canonical CSV; empty velocity, acceleration or yaw cells
    /// are derived by finite differences.
    pub fn from_reader<R: Read>(reader: R, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => return TrajectoryTable::new(Vec::new(), geometry, 1),
            Some(h) => h.map_err(|e| csv_error(&e))?,
        };
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::Data { line: 1, msg: format!("expected header `{}`", CSV_HEADER.join(",")) });
        }
        let header = csv::StringRecord::from(CSV_HEADER.to_vec());
        let mut raw = Vec::new();
        let mut lines = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| csv_error(&e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let r: RawRow = rec
                .deserialize(Some(&header))
                .map_err(|e| Error::Data { line, msg: e.to_string() })?;
            if AgentCategory::parse(&r.category).is_none() {
                return Err(Error::Data { line, msg: format!("unknown category `{}`", r.category) });
            }
            raw.push(r);
            lines.push(line);
        }
        let rows = derive_missing(&raw, &lines, geometry.rate_hz)?;
        let step = min_frame_step(&rows);
        TrajectoryTable::new(rows, geometry, step).map_err(|e| match e {
            Error::Data { line, msg } => Error::Data { line: lines.get(line.wrapping_sub(2)).copied().unwrap_or(line), msg },
            e => e,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record(&[
                r.frame.to_string(),
                r.agent_id.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.vx.to_string(),
                r.vy.to_string(),
                r.ax.to_string(),
                r.ay.to_string(),
                r.psi.to_string(),
                r.category.as_str().to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and the `<stem>.json` geometry sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let file = std::fs::File::create(csv_path)?;
        self.write_csv(std::io::BufWriter::new(file))?;
        self.geometry.write(&sidecar_path(csv_path))
    }

    /// Splits the table at frame gaps into contiguous recordings.
    pub fn segments(&self) -> Vec<TrajectoryTable> {
        let frames = self.frames();
        if frames.is_empty() {
            return Vec::new();
        }
        let mut bounds = vec![frames[0]];
        for w in frames.windows(2) {
            if w[1] - w[0] > self.frame_step {
                bounds.push(w[1]);
            }
        }
        bounds
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                let end = bounds.get(i + 1).copied().unwrap_or(i64::MAX);
                TrajectoryTable {
                    rows: self.rows.iter().filter(|r| r.frame >= start && r.frame < end).copied().collect(),
                    geometry: self.geometry.clone(),
                    frame_step: self.frame_step,
                }
            })
            .collect()
    }
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Data { line, msg: e.to_string() }
}

/// Path of the geometry sidecar next to a CSV file.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

/// Reads a CSV with its geometry sidecar.
pub fn ingest_csv(path: &Path, geometry: &Path) -> Result<TrajectoryTable> {
    let g = Geometry::read(geometry)?;
    let file = std::fs::File::open(path)?;
    TrajectoryTable::from_reader(std::io::BufReader::new(file), g)
}

fn min_frame_step(rows: &[TrajectoryRow]) -> i64 {
    let mut frames: Vec<i64> = rows.iter().map(|r| r.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    frames.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1).max(1)
}

/// Forward differences with the last sample repeating the final quotient.
pub fn finite_differences(frames: &[i64], values: &[f64], rate_hz: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut out: Vec<f64> = (0..n - 1)
        .map(|k| (values[k + 1] - values[k]) * rate_hz / (frames[k + 1] - frames[k]) as f64)
        .collect();
    out.push(out[n - 2]);
    out
}

/// Heading from velocity; keeps the previous heading when nearly stationary.
pub fn heading_from_velocity(vx: &[f64], vy: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    let mut first_moving = None;
    let mut out: Vec<f64> = vx
        .iter()
        .zip(vy)
        .enumerate()
        .map(|(i, (&x, &y))| {
            if x.hypot(y) > 1e-3 {
                prev = wrap_angle(y.atan2(x));
                first_moving.get_or_insert(i);
            }
            prev
        })
        .collect();
    if let Some(i) = first_moving {
        let h = out[i];
        out[..i].iter_mut().for_each(|v| *v = h);
    }
    out
}

fn derive_missing(raw: &[RawRow], lines: &[usize], rate: f64) -> Result<Vec<TrajectoryRow>> {
    let mut by_agent: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in raw.iter().enumerate() {
        by_agent.entry(r.agent_id).or_default().push(i);
    }
    let mut rows: Vec<TrajectoryRow> = raw
        .iter()
        .map(|r| TrajectoryRow {
            frame: r.frame,
            agent_id: r.agent_id,
            x: r.x,
            y: r.y,
            vx: r.vx.unwrap_or(f64::NAN),
            vy: r.vy.unwrap_or(f64::NAN),
            ax: r.ax.unwrap_or(f64::NAN),
            ay: r.ay.unwrap_or(f64::NAN),
            psi: r.psi.unwrap_or(f64::NAN),
            category: AgentCategory::parse(&r.category).expect("category checked"),
        })
        .collect();
    for idx in by_agent.values() {
        for w in idx.windows(2) {
            if raw[w[1]].frame <= raw[w[0]].frame {
                return Err(Error::Data {
                    line: lines[w[1]],
                    msg: format!("frames of agent {} are not increasing", raw[w[1]].agent_id),
                });
            }
        }
        let frames: Vec<i64> = idx.iter().map(|&i| rows[i].frame).collect();
        let col = |rows: &[TrajectoryRow], f: fn(&TrajectoryRow) -> f64| idx.iter().map(|&i| f(&rows[i])).collect::<Vec<f64>>();
        let fill = |rows: &mut [TrajectoryRow], derived: &[f64], set: fn(&mut TrajectoryRow, f64), get: fn(&TrajectoryRow) -> f64| {
            for (k, &i) in idx.iter().enumerate() {
                if get(&rows[i]).is_nan() {
                    set(&mut rows[i], derived[k]);
                }
            }
        };
        if idx.iter().any(|&i| rows[i].vx.is_nan() || rows[i].vy.is_nan()) {
            let dvx = finite_differences(&frames, &col(&rows, |r| r.x), rate);
            let dvy = finite_differences(&frames, &col(&rows, |r| r.y), rate);
            fill(&mut rows, &dvx, |r, v| r.vx = v, |r| r.vx);
            fill(&mut rows, &dvy, |r, v| r.vy = v, |r| r.vy);
        }
        if idx.iter().any(|&i| rows[i].ax.is_nan() || rows[i].ay.is_nan()) {
            let dax = finite_differences(&frames, &col(&rows, |r| r.vx), rate);
            let day = finite_differences(&frames, &col(&rows, |r| r.vy), rate);
            fill(&mut rows, &dax, |r, v| r.ax = v, |r| r.ax);
            fill(&mut rows, &day, |r, v| r.ay = v, |r| r.ay);
        }
        if idx.iter().any(|&i| rows[i].psi.is_nan()) {
            let psi = heading_from_velocity(&col(&rows, |r| r.vx), &col(&rows, |r| r.vy));
            fill(&mut rows, &psi, |r, v| r.psi = v, |r| r.psi);
        }
        for &i in idx {
            rows[i].psi = wrap_angle(rows[i].psi);
        }
    }
    Ok(rows)
}

/// Keeps every `factor`-th frame counted from the first frame.
pub fn downsample(table: &TrajectoryTable, factor: usize) -> Result<TrajectoryTable> {
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(table.clone());
    }
    let Some(&first) = table.frames().first() else {
        return Ok(TrajectoryTable { frame_step: table.frame_step * factor as i64, ..table.clone() });
    };
    let step = table.frame_step * factor as i64;
    Ok(TrajectoryTable {
        rows: table.rows.iter().filter(|r| (r.frame - first) % step == 0).copied().collect(),
        geometry: table.geometry.clone(),
        frame_step: step,
    })
}

/// Choice of the centre agent of each window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterPolicy {
    /// Lowest agent id present at the prediction instant.
    First,
    /// Uniformly drawn from the agents present, seeded per window.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// History steps before the prediction instant.
    pub history: usize,
    /// Future steps after the prediction instant.
    pub horizon: usize,
    pub stride: usize,
    pub center: CenterPolicy,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { history: 15, horizon: 25, stride: 10, center: CenterPolicy::Random { seed: 0 } }
    }
}

impl WindowConfig {
    /// Window lengths for a history and horizon given in seconds.
    pub fn from_seconds(t_h: f64, t_f: f64, ts: f64) -> Result<Self> {
        if !(ts > 0.0) || t_h < 0.0 || !(t_f > 0.0) {
            return Err(Error::Config("window durations must be positive".into()));
        }
        Ok(WindowConfig {
            history: (t_h / ts).round() as usize,
            horizon: (t_f / ts).round() as usize,
            ..WindowConfig::default()
        })
    }
}

/// Cuts a downsampled table into scene windows around every `stride`-th
/// frame with full history and horizon inside one contiguous recording.
pub fn window_scenes(table: &TrajectoryTable, cfg: &WindowConfig) -> Result<Vec<SceneSequence>> {
    if cfg.stride == 0 || cfg.horizon == 0 {
        return Err(Error::Config("window stride and horizon must be positive".into()));
    }
    let mut out = Vec::new();
    for seg in table.segments() {
        let frames = seg.frames();
        let mut at: BTreeMap<(i64, u64), usize> = BTreeMap::new();
        for (i, r) in seg.rows.iter().enumerate() {
            at.insert((r.frame, r.agent_id), i);
        }
        let mut i = cfg.history;
        while i + cfg.horizon < frames.len() {
            out.push(cut_window(&seg, &frames, &at, i, cfg)?);
            i += cfg.stride;
        }
    }
    Ok(out)
}

fn cut_window(
    t: &TrajectoryTable,
    frames: &[i64],
    at: &BTreeMap<(i64, u64), usize>,
    i: usize,
    cfg: &WindowConfig,
) -> Result<SceneSequence> {
    let now = frames[i];
    let present: Vec<u64> = at.range((now, 0)..=(now, u64::MAX)).map(|(&(_, a), _)| a).collect();
    let center = match cfg.center {
        CenterPolicy::First => present[0],
        CenterPolicy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (now as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            present[rng.gen_range(0..present.len())]
        }
    };
    let origin = match &t.geometry.layout {
        Layout::Highway { .. } => {
            let r = &t.rows[at[&(now, center)]];
            [r.x, r.y]
        }
        Layout::Junction { origin } => *origin,
    };
    let layout = &t.geometry.layout;
    let observe = |r: &TrajectoryRow| {
        let context = match layout {
            Layout::Highway { lane_lines } => Layout::lane_context(lane_lines, r.y),
            Layout::Junction { origin } => {
                let (radius, theta) = polar_context(r.x, r.y, origin[0], origin[1]);
                ContextFeatures::Polar { r: radius, theta }
            }
        };
        Observation {
            node: NodeFeatures {
                x: r.x - origin[0],
                y: r.y - origin[1],
                vx: r.vx,
                vy: r.vy,
                ax: r.ax,
                ay: r.ay,
                psi: wrap_angle(r.psi),
            },
            context,
        }
    };
    let agents = present
        .iter()
        .map(|&a| {
            let row = |f: i64| at.get(&(f, a)).map(|&k| &t.rows[k]);
            AgentTrack {
                id: AgentId(a),
                category: t.rows[at[&(now, a)]].category,
                history: frames[i - cfg.history..=i].iter().map(|&f| row(f).map(observe)).collect(),
                future: frames[i + 1..=i + cfg.horizon]
                    .iter()
                    .map(|&f| {
                        row(f).map(|r| FutureState { x: r.x - origin[0], y: r.y - origin[1], vx: r.vx, vy: r.vy })
                    })
                    .collect(),
            }
        })
        .collect();
    let mut scene = SceneSequence {
        kind: layout.kind(),
        sample_time: t.sample_time(),
        origin,
        frame: now,
        center: AgentId(center),
        agents,
        graphs: Vec::new(),
    };
    scene.rebuild_graphs();
    scene.validate()?;
    Ok(scene)
}

/// Train, validation and test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = SplitSpec { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be in [0, 1] and sum to 1".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle followed by partition into train, validation and test.
pub fn split<T>(items: Vec<T>, spec: &SplitSpec, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    spec.validate()?;
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * spec.train).round() as usize;
    let n_val = (((n as f64) * spec.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok((train, val, test))
}
