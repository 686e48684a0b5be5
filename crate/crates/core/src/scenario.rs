//! Synthetic dynamic world: UE mobility, moving box blockers, occlusion,
//! blockage labels, top-down occupancy frames and the two-timescale clock.
//!
//! Frames map the region's x extent to rows and its y extent to columns.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::path_loss_db;
use crate::error::{invalid, Error, Result};
use crate::geometry::Position3;

/// Axis-aligned box given by its two extreme corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Position3,
    pub max: Position3,
}

impl Aabb {
    pub fn new(min: Position3, max: Position3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z <= max.z) {
            return Err(invalid("box corners must satisfy min < max"));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: Position3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blocker {
    pub center: Position3,
    pub velocity: Position3,
    pub half_extents: Position3,
}

impl Blocker {
    pub fn new(center: Position3, velocity: Position3, half_extents: Position3) -> Result<Self> {
        let h = half_extents;
        if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
            return Err(invalid("blocker half-extents must be positive"));
        }
        Ok(Self { center, velocity, half_extents })
    }

    pub fn bounds(&self) -> Aabb {
        Aabb { min: self.center - self.half_extents, max: self.center + self.half_extents }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub region: Aabb,
    pub ues: Vec<Position3>,
    pub ue_velocities: Vec<Position3>,
    pub blockers: Vec<Blocker>,
}

/// Scenario parameters shared by world generation, labelling and rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub region_min: [f64; 3],
    pub region_max: [f64; 3],
    pub bs_position: [f64; 3],
    pub num_ues: usize,
    pub ue_max_speed: f64,
    pub num_blockers: usize,
    pub blocker_half_extents: [f64; 3],
    pub blocker_speed: [f64; 2],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame_rate_hz: f64,
    pub attenuation_db: f64,
    pub pilot_power_dbm: f64,
    pub noise_dbm: f64,
    pub threshold_margin_db: f64,
    pub macro_period_s: f64,
    pub horizon_macro: usize,
    pub sample_stride_frames: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            region_min: [5.0, -25.0, 0.0],
            region_max: [55.0, 25.0, 1.0],
            bs_position: [0.0, 0.0, 0.0],
            num_ues: 2,
            ue_max_speed: 1.5,
            num_blockers: 3,
            blocker_half_extents: [4.0, 4.0, 1.5],
            blocker_speed: [0.5, 2.0],
            frames: 10,
            height: 32,
            width: 32,
            frame_rate_hz: 6.5,
            attenuation_db: 30.0,
            pilot_power_dbm: 0.0,
            noise_dbm: -94.0,
            threshold_margin_db: 10.0,
            macro_period_s: 0.154,
            horizon_macro: 1,
            sample_stride_frames: 10,
        }
    }
}

impl ScenarioConfig {
    pub fn region(&self) -> Result<Aabb> {
        Aabb::new(to_pos(self.region_min), to_pos(self.region_max))
    }

    pub fn bs(&self) -> Position3 {
        to_pos(self.bs_position)
    }

    pub fn frame_dt(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    /// Largest path loss (dB) at which the pilot still clears the noise floor
    /// by the configured margin.
    pub fn threshold_db(&self) -> f64 {
        self.pilot_power_dbm - (self.noise_dbm + self.threshold_margin_db)
    }

    pub fn validate(&self) -> Result<()> {
        self.region()?;
        let h = self.blocker_half_extents;
        if h.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("blocker half-extents must be positive"));
        }
        if !(self.blocker_speed[0] >= 0.0 && self.blocker_speed[0] <= self.blocker_speed[1]) {
            return Err(invalid("blocker speed range must be ordered and nonnegative"));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("frame dimensions must be at least 1"));
        }
        if !(self.frame_rate_hz > 0.0 && self.macro_period_s > 0.0) {
            return Err(invalid("frame rate and macro period must be positive"));
        }
        if self.sample_stride_frames == 0 {
            return Err(invalid("sample stride must be at least 1 frame"));
        }
        Ok(())
    }
}

fn to_pos(a: [f64; 3]) -> Position3 {
    Position3::new(a[0], a[1], a[2])
}

impl WorldState {
    pub fn new(
        region: Aabb,
        ues: Vec<Position3>,
        ue_velocities: Vec<Position3>,
        blockers: Vec<Blocker>,
    ) -> Result<Self> {
        if ues.len() != ue_velocities.len() {
            return Err(invalid("one velocity per UE required"));
        }
        if let Some(u) = ues.iter().find(|u| !region.contains(**u)) {
            return Err(invalid(format!("UE at {u:?} lies outside the region")));
        }
        Ok(Self { time: 0.0, region, ues, ue_velocities, blockers })
    }

    /// Random world: UEs uniform in the region with planar headings, blockers
    /// resting on the floor with speeds drawn from the configured range.
    pub fn random<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let region = cfg.region()?;
        let (lo, hi) = (region.min, region.max);
        let mut uniform = |a: f64, b: f64| if a < b { rng.gen_range(a..b) } else { a };
        let mut ues = Vec::with_capacity(cfg.num_ues);
        let mut ue_velocities = Vec::with_capacity(cfg.num_ues);
        for _ in 0..cfg.num_ues {
            ues.push(Position3::new(uniform(lo.x, hi.x), uniform(lo.y, hi.y), uniform(lo.z, hi.z)));
            let speed = uniform(0.0, cfg.ue_max_speed);
            let heading = uniform(0.0, std::f64::consts::TAU);
            ue_velocities.push(Position3::new(speed * heading.cos(), speed * heading.sin(), 0.0));
        }
        let half = to_pos(cfg.blocker_half_extents);
        let mut blockers = Vec::with_capacity(cfg.num_blockers);
        for _ in 0..cfg.num_blockers {
            let center = Position3::new(uniform(lo.x, hi.x), uniform(lo.y, hi.y), lo.z + half.z);
            let speed = uniform(cfg.blocker_speed[0], cfg.blocker_speed[1]);
            let heading = uniform(0.0, std::f64::consts::TAU);
            let velocity = Position3::new(speed * heading.cos(), speed * heading.sin(), 0.0);
            blockers.push(Blocker::new(center, velocity, half)?);
        }
        Self::new(region, ues, ue_velocities, blockers)
    }

    /// Per-UE occlusion of the segment from `bs`.
    pub fn occlusions(&self, bs: Position3) -> Vec<bool> {
        self.ues.iter().map(|&u| occlusion_test(bs, u, &self.blockers)).collect()
    }

    /// Per-UE LoS availability bits (1 = available) under the configured
    /// threshold rule.
    pub fn labels(&self, cfg: &ScenarioConfig, lambda: f64) -> Result<Vec<u8>> {
        let bs = cfg.bs();
        let th = cfg.threshold_db();
        self.ues
            .iter()
            .map(|&u| {
                let blocked = occlusion_test(bs, u, &self.blockers);
                let pl = path_loss_db(bs.distance(u), lambda)? + if blocked { cfg.attenuation_db } else { 0.0 };
                Ok(blockage_label(pl, th))
            })
            .collect()
    }
}

/// Moves `p` by `v dt` inside `[lo, hi]`, folding at the walls; returns the new
/// coordinate and velocity.
fn reflect(p: f64, v: f64, dt: f64, lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span <= 0.0 || v == 0.0 {
        return (p, v);
    }
    let period = 2.0 * span;
    let u = (p - lo + v * dt).rem_euclid(period);
    if u <= span {
        (lo + u, v)
    } else {
        (lo + period - u, -v)
    }
}

/// Advances the world by `dt` seconds with linear motion and reflecting walls.
/// UEs reflect inside the region; blocker centers reflect inside its planar
/// footprint and keep their height.
pub fn step_world(w: &WorldState, dt: f64) -> Result<WorldState> {
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    let r = &w.region;
    let mut next = w.clone();
    next.time = w.time + dt;
    for (p, v) in next.ues.iter_mut().zip(next.ue_velocities.iter_mut()) {
        (p.x, v.x) = reflect(p.x, v.x, dt, r.min.x, r.max.x);
        (p.y, v.y) = reflect(p.y, v.y, dt, r.min.y, r.max.y);
        (p.z, v.z) = reflect(p.z, v.z, dt, r.min.z, r.max.z);
    }
    for b in &mut next.blockers {
        (b.center.x, b.velocity.x) = reflect(b.center.x, b.velocity.x, dt, r.min.x, r.max.x);
        (b.center.y, b.velocity.y) = reflect(b.center.y, b.velocity.y, dt, r.min.y, r.max.y);
    }
    Ok(next)
}

/// True iff the closed segment `a`-`b` meets any blocker box (slab method).
/// Touching a face counts as an intersection.
pub fn occlusion_test(a: Position3, b: Position3, blockers: &[Blocker]) -> bool {
    blockers.iter().any(|bl| segment_hits_box(a, b, &bl.bounds()))
}

pub fn segment_hits_box(a: Position3, b: Position3, bx: &Aabb) -> bool {
    let (a, d) = (a.to_array(), (b - a).to_array());
    let (lo, hi) = (bx.min.to_array(), bx.max.to_array());
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for i in 0..3 {
        if d[i] == 0.0 {
            if a[i] < lo[i] || a[i] > hi[i] {
                return false;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[i] - a[i]) / d[i], (hi[i] - a[i]) / d[i]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// 1 (LoS available) iff the measured LoS path loss is strictly below the
/// threshold.
pub fn blockage_label(pl_los_db: f64, pl_threshold_db: f64) -> u8 {
    u8::from(pl_los_db < pl_threshold_db)
}

/// `frames` occupancy grids of `height x width`, frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameSequence {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0.0; frames * height * width] }
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[f * n..(f + 1) * n]
    }
}

/// UE marker intensity for UE `k` of `num_ues`; distinct per UE so that
/// output indices can be tied to markers.
pub fn ue_marker(k: usize, num_ues: usize) -> f64 {
    if num_ues <= 1 {
        0.5
    } else {
        0.5 / (k as f64 + 1.0)
    }
}

/// Rasterises one top-down frame: blocker footprints as covered-area
/// fraction (1.0 for fully covered cells), UE markers written over them.
pub fn render_frame(w: &WorldState, height: usize, width: usize, out: &mut [f64]) {
    let r = &w.region;
    let sx = (r.max.x - r.min.x) / height as f64;
    let sy = (r.max.y - r.min.y) / width as f64;
    out.iter_mut().for_each(|v| *v = 0.0);
    for b in &w.blockers {
        let bb = b.bounds();
        let r0 = (((bb.min.x - r.min.x) / sx).floor().max(0.0)) as usize;
        let r1 = (((bb.max.x - r.min.x) / sx).ceil().min(height as f64)).max(0.0) as usize;
        let c0 = (((bb.min.y - r.min.y) / sy).floor().max(0.0)) as usize;
        let c1 = (((bb.max.y - r.min.y) / sy).ceil().min(width as f64)).max(0.0) as usize;
        for row in r0..r1 {
            let x0 = r.min.x + row as f64 * sx;
            let ox = (bb.max.x.min(x0 + sx) - bb.min.x.max(x0)).max(0.0) / sx;
            for col in c0..c1 {
                let y0 = r.min.y + col as f64 * sy;
                let oy = (bb.max.y.min(y0 + sy) - bb.min.y.max(y0)).max(0.0) / sy;
                let cell = &mut out[row * width + col];
                *cell = (*cell + ox * oy).min(1.0);
            }
        }
    }
    let k = w.ues.len();
    for (i, u) in w.ues.iter().enumerate() {
        let row = (((u.x - r.min.x) / sx) as usize).min(height - 1);
        let col = (((u.y - r.min.y) / sy) as usize).min(width - 1);
        out[row * width + col] = ue_marker(i, k);
    }
}

/// Renders `f` frames spaced `dt_frame` apart, the first at the world's
/// current time.
pub fn render_frames(w: &WorldState, f: usize, h: usize, wd: usize, dt_frame: f64) -> Result<FrameSequence> {
    if f == 0 || h == 0 || wd == 0 {
        return Err(invalid("frame dimensions must be at least 1"));
    }
    let mut seq = FrameSequence::zeros(f, h, wd);
    let mut cur = w.clone();
    for i in 0..f {
        if i > 0 {
            cur = step_world(&cur, dt_frame)?;
        }
        render_frame(&cur, h, wd, seq.frame_mut(i));
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub frames: FrameSequence,
    /// Per-UE LoS availability (1 = available) one horizon after the last frame.
    pub labels: Vec<u8>,
    /// Time of the last frame (s).
    pub time: f64,
}

/// Rolls the world forward collecting `n_samples` frame windows. Each label
/// is the LoS status `horizon` macro-intervals after the window's last frame;
/// consecutive windows start `sample_stride_frames` frames apart.
pub fn make_dataset(
    w0: &WorldState,
    cfg: &ScenarioConfig,
    lambda: f64,
    n_samples: usize,
    horizon: usize,
) -> Result<Vec<LabeledSample>> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    cfg.validate()?;
    let dt = cfg.frame_dt();
    let mut out = Vec::with_capacity(n_samples);
    let mut w = w0.clone();
    for _ in 0..n_samples {
        let frames = render_frames(&w, cfg.frames, cfg.height, cfg.width, dt)?;
        let last = advance(&w, (cfg.frames - 1) as f64 * dt)?;
        let future = advance(&last, horizon as f64 * cfg.macro_period_s)?;
        out.push(LabeledSample { labels: future.labels(cfg, lambda)?, frames, time: last.time });
        w = advance(&w, cfg.sample_stride_frames as f64 * dt)?;
    }
    Ok(out)
}

fn advance(w: &WorldState, dt: f64) -> Result<WorldState> {
    if dt > 0.0 {
        step_world(w, dt)
    } else {
        Ok(w.clone())
    }
}

/// Fraction of per-UE labels equal to 0 (blocked).
pub fn blocked_fraction(samples: &[LabeledSample]) -> f64 {
    let (mut blocked, mut total) = (0usize, 0usize);
    for s in samples {
        blocked += s.labels.iter().filter(|&&b| b == 0).count();
        total += s.labels.len();
    }
    if total == 0 {
        0.0
    } else {
        blocked as f64 / total as f64
    }
}

/// One tick of the two-timescale schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    pub step: usize,
    pub time: f64,
    pub macro_index: usize,
    /// True on the first micro-step of each macro-interval.
    pub macro_boundary: bool,
}

#[derive(Debug, Clone)]
pub struct TimescaleClock {
    tti: f64,
    n_macro: usize,
    step: usize,
}

impl TimescaleClock {
    pub fn macro_period(&self) -> f64 {
        self.tti * self.n_macro as f64
    }

    pub fn n_macro(&self) -> usize {
        self.n_macro
    }
}

impl Iterator for TimescaleClock {
    type Item = Tick;

    fn next(&mut self) -> Option<Tick> {
        let s = self.step;
        self.step += 1;
        Some(Tick {
            step: s,
            time: s as f64 * self.tti,
            macro_index: s / self.n_macro,
            macro_boundary: s % self.n_macro == 0,
        })
    }
}

pub fn timescale_clock(tti: f64, n_macro: usize) -> Result<TimescaleClock> {
    if !(tti > 0.0) || n_macro == 0 {
        return Err(invalid("tti must be positive and n_macro at least 1"));
    }
    Ok(TimescaleClock { tti, n_macro, step: 0 })
}

const DATASET_MAGIC: &[u8; 4] = b"NFDS";
const DATASET_VERSION: u32 = 1;

/// Writes samples as: magic `NFDS`, u32 version, u32 F, H, W, K, n (all
/// little-endian), then n*F*H*W f64 frame values, n*K u8 labels and n f64
/// capture times.
pub fn write_dataset<W: Write>(samples: &[LabeledSample], mut out: W) -> Result<()> {
    let first = samples.first().ok_or_else(|| invalid("empty dataset"))?;
    let (f, h, w, k) = (first.frames.frames, first.frames.height, first.frames.width, first.labels.len());
    if samples.iter().any(|s| {
        (s.frames.frames, s.frames.height, s.frames.width, s.labels.len()) != (f, h, w, k)
    }) {
        return Err(Error::Format("samples disagree in shape".into()));
    }
    out.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, f as u32, h as u32, w as u32, k as u32, samples.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        for v in &s.frames.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for s in samples {
        out.write_all(&s.labels)?;
    }
    for s in samples {
        out.write_all(&s.time.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<LabeledSample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let mut u32s = [0u32; 6];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, f, h, w, k, n] = u32s.map(|v| v as usize);
    if version != DATASET_VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let read_f64 = |r: &mut R| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let per = f * h * w;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let data = (0..per).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        frames.push(FrameSequence { frames: f, height: h, width: w, data });
    }
    let mut labels = vec![0u8; n * k];
    r.read_exact(&mut labels)?;
    let mut out = Vec::with_capacity(n);
    for (i, fr) in frames.into_iter().enumerate() {
        let time = read_f64(&mut r)?;
        out.push(LabeledSample { frames: fr, labels: labels[i * k..(i + 1) * k].to_vec(), time });
    }
    Ok(out)
}
