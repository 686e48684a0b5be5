//! Config-driven pipelines behind the CLI: dataset generation, estimator
//! training, control runs, sweeps and operation counts. Every output file
//! carries the config hash and the seed.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::los_channel;
use crate::control::{
    align_ris, flop_report, run_baseline, AgentConfig, AgentKind, ControlConfig, Env, FlopConfig, MacroRecord, MicroRecord, Models, Phase,
    ScheduleConfig, SystemConfig, Trace,
};
use crate::error::{Error, Result};
use crate::estimators::{
    blockage_report, lead_time, mean_nmse, mean_nmse_noisy, train_blockage, train_csi, train_vit, BlockagePredictor, CnnConfig, CnnCsi,
    CsiModelConfig, CsiSample, CsiTransformer, FeatureScaler, FrameTransformer, Network, TrainConfig, VitConfig, VitLite,
};
use crate::geometry::Position3;
use crate::neural::ParamStore;
use crate::scenario::{make_dataset, render_frame, step_world, write_dataset, Blocker, FrameSequence, LabeledSample, ScenarioConfig, WorldState};
use crate::seed::substream;

/// Dataset sizes and optimiser settings for the estimator pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub csi_samples: usize,
    pub csi_test_samples: usize,
    pub csi: TrainConfig,
    /// SNRs (dB) of the feature-noise robustness table.
    pub csi_snr_db: Vec<f64>,
    pub vit_samples: usize,
    /// Independent worlds the blockage samples are spread over.
    pub vit_worlds: usize,
    /// Fraction of worlds held out for evaluation.
    pub vit_test_fraction: f64,
    pub vit: TrainConfig,
    pub lead_scenarios: usize,
    /// Kinds executed by the `baseline` mode.
    pub baselines: Vec<AgentKind>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            csi_samples: 200,
            csi_test_samples: 50,
            csi: TrainConfig { epochs: 200, batch_size: 64, learning_rate: 1e-4 },
            csi_snr_db: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            vit_samples: 1000,
            vit_worlds: 20,
            vit_test_fraction: 0.2,
            vit: TrainConfig { epochs: 30, batch_size: 16, learning_rate: 1e-3 },
            lead_scenarios: 20,
            baselines: AgentKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    PMaxDbm,
    /// Total BS antennas; values must be perfect squares.
    Antennas,
    /// Total RIS elements; values must be perfect squares.
    RisElements,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::PMaxDbm => "p_max_dbm",
            Self::Antennas => "antennas",
            Self::RisElements => "ris_elements",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub kind: AgentKind,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { parameter: SweepParameter::PMaxDbm, values: vec![25.0, 30.0, 35.0], kind: AgentKind::Oracle }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemConfig,
    pub scenario: ScenarioConfig,
    pub csi_model: CsiModelConfig,
    pub cnn_model: CnnConfig,
    pub vit_model: VitConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub flops: FlopConfig,
}

fn at(path: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Config { path: path.into(), msg: other.to_string() },
    }
}

fn bound(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

impl ExperimentConfig {
    pub fn control(&self) -> ControlConfig {
        ControlConfig { system: self.system.clone(), scenario: self.scenario.clone(), agent: self.agent.clone(), schedule: self.schedule.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.n_macro == 0 {
            return Err(bound("schedule.n_macro", "must be at least 1"));
        }
        self.system.validate().map_err(|e| at("system", e))?;
        self.scenario.validate().map_err(|e| at("scenario", e))?;
        self.agent.validate().map_err(|e| at("agent", e))?;
        self.schedule.validate().map_err(|e| at("schedule", e))?;
        self.csi_model.validate().map_err(|e| at("csi_model", e))?;
        self.vit_model.validate().map_err(|e| at("vit_model", e))?;
        if self.scenario.num_ues == 0 {
            return Err(bound("scenario.num_ues", "at least one UE is required"));
        }
        let n = self.system.antennas();
        if self.csi_model.tokens != n {
            return Err(bound("csi_model.tokens", format!("must equal the BS antenna count {n}")));
        }
        if self.cnn_model.tokens != n {
            return Err(bound("cnn_model.tokens", format!("must equal the BS antenna count {n}")));
        }
        let (v, s) = (&self.vit_model, &self.scenario);
        if v.channels != s.frames || v.height != s.height || v.width != s.width {
            return Err(bound("vit_model", "channels, height and width must match the scenario frames"));
        }
        if v.num_ues != s.num_ues {
            return Err(bound("vit_model.num_ues", "must equal scenario.num_ues"));
        }
        let t = &self.training;
        for (path, tc) in [("training.csi", &t.csi), ("training.vit", &t.vit)] {
            if tc.batch_size == 0 || !(tc.learning_rate > 0.0) {
                return Err(bound(path, "batch_size and learning_rate must be positive"));
            }
        }
        if t.csi_samples == 0 || t.vit_samples == 0 || t.vit_worlds == 0 {
            return Err(bound("training", "sample and world counts must be at least 1"));
        }
        if !(t.vit_test_fraction > 0.0 && t.vit_test_fraction < 1.0) {
            return Err(bound("training.vit_test_fraction", "must lie in (0, 1)"));
        }
        if self.sweep.values.is_empty() {
            return Err(bound("sweep.values", "at least one value is required"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON echo with the
    /// seed zeroed, so one configuration hashes alike under every seed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let text = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Parses a JSON document; blank text yields the defaults. Errors carry the
/// offending path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config { path: e.path().to_string(), msg: e.inner().to_string() })?
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    GenData,
    TrainCsi,
    TrainVit,
    TrainHdrl,
    Baseline,
    Sweep,
    Flops,
}

impl Mode {
    pub const ALL: [Mode; 7] = [Self::GenData, Self::TrainCsi, Self::TrainVit, Self::TrainHdrl, Self::Baseline, Self::Sweep, Self::Flops];

    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainCsi => "train-csi",
            Self::TrainVit => "train-vit",
            Self::TrainHdrl => "train-hdrl",
            Self::Baseline => "baseline",
            Self::Sweep => "sweep",
            Self::Flops => "flops",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

/// Outcome of one `run`: the files written and a JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Stream statistics of one control run; every field is recomputable from
/// the micro and macro CSV streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub kind: AgentKind,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub micro_steps: usize,
    pub macro_steps: usize,
    pub mean_reward: f64,
    pub mean_sum_se: f64,
    pub mean_shortfall: f64,
    pub final_window_sum_se: f64,
    pub reward_trend_nondecreasing: bool,
    pub c1_all: bool,
    pub c2_all: bool,
}

impl ControlSummary {
    pub fn from_trace(t: &Trace) -> Self {
        let n = t.micro.len();
        let mean = |f: fn(&MicroRecord) -> f64| if n == 0 { 0.0 } else { t.micro.iter().map(f).sum::<f64>() / n as f64 };
        let episodes = |p: Phase| t.episode_rewards(p).len();
        Self {
            kind: t.kind,
            train_episodes: episodes(Phase::Train),
            eval_episodes: episodes(Phase::Eval),
            micro_steps: n,
            macro_steps: t.macros.len(),
            mean_reward: mean(|r| r.reward),
            mean_sum_se: mean(|r| r.sum_se),
            mean_shortfall: mean(|r| r.shortfall),
            final_window_sum_se: if n == 0 { 0.0 } else { t.final_window_sum_se() },
            reward_trend_nondecreasing: t.reward_trend_nondecreasing(),
            c1_all: t.all_c1(),
            c2_all: t.all_c2(),
        }
    }
}

/// Quotes a CSV field when it holds a separator, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn per_ue(prefix: &str, suffix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}_ue{i}{suffix}")).collect()
}

fn bits(v: &[u8]) -> Vec<String> {
    v.iter().map(|b| b.to_string()).collect()
}

fn floats(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Per-TTI stream. Floats use the shortest round-trip decimal form.
pub fn micro_csv(trace: &Trace, hash: &str, seed: u64, num_ues: usize) -> String {
    let mut head: Vec<String> = [
        "config_hash",
        "seed",
        "kind",
        "phase",
        "episode",
        "macro",
        "tau",
        "step",
        "reward_bps_hz",
        "sum_se_bps_hz",
        "qos_shortfall_bps_hz",
        "power_w",
        "c1_ok",
        "c2_ok",
    ]
    .map(String::from)
    .to_vec();
    head.extend(per_ue("se", "_bps_hz", num_ues));
    head.extend(per_ue("g", "", num_ues));
    head.extend(per_ue("occluded", "", num_ues));
    let mut out = csv_line(&head);
    for r in &trace.micro {
        let mut row = vec![
            hash.to_string(),
            seed.to_string(),
            trace.kind.to_string(),
            r.phase.name().to_string(),
            r.episode.to_string(),
            r.macro_index.to_string(),
            r.tau.to_string(),
            r.step.to_string(),
            r.reward.to_string(),
            r.sum_se.to_string(),
            r.shortfall.to_string(),
            r.power_w.to_string(),
            u8::from(r.c1_ok).to_string(),
            u8::from(r.c2_ok).to_string(),
        ];
        row.extend(floats(&r.se));
        row.extend(bits(&r.g));
        row.extend(r.occluded.iter().map(|&o| u8::from(o).to_string()));
        out.push_str(&csv_line(&row));
    }
    out
}

/// Per-macro-step stream; the `p_blocked` columns are present only for
/// agents that consult the blockage predictor.
pub fn macro_csv(trace: &Trace, hash: &str, seed: u64, num_ues: usize) -> String {
    let mut head: Vec<String> =
        ["config_hash", "seed", "kind", "phase", "episode", "macro", "first_step", "meta_reward_bps_hz"].map(String::from).to_vec();
    head.extend(per_ue("g", "", num_ues));
    head.extend(per_ue("p_blocked", "", trace.macros.first().map_or(0, |m| m.p_hat.len())));
    let mut out = csv_line(&head);
    for r in &trace.macros {
        let mut row = vec![
            hash.to_string(),
            seed.to_string(),
            trace.kind.to_string(),
            r.phase.name().to_string(),
            r.episode.to_string(),
            r.macro_index.to_string(),
            r.first_step.to_string(),
            r.meta_reward.to_string(),
        ];
        row.extend(bits(&r.g));
        row.extend(floats(&r.p_hat));
        out.push_str(&csv_line(&row));
    }
    out
}

/// Header-indexed view of a CSV document written by this module.
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    /// Splits on commas; the streams here never quote.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?.split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(String::from).collect()).collect();
        if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
            return Err(Error::Format(format!("row has {} fields, header has {}", r.len(), header.len())));
        }
        Ok(Self { header, rows })
    }

    pub fn col(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("no column `{name}`")))
    }

    pub fn get<T: FromStr>(&self, row: usize, name: &str) -> Result<T> {
        let s = &self.rows[row][self.col(name)?];
        s.parse().map_err(|_| Error::Format(format!("bad value `{s}` in column `{name}`")))
    }

    fn prefixed<T: FromStr>(&self, row: usize, prefix: &str, suffix: &str) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for i in 0.. {
            let name = format!("{prefix}_ue{i}{suffix}");
            if self.col(&name).is_err() {
                break;
            }
            out.push(self.get(row, &name)?);
        }
        Ok(out)
    }
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "train" => Ok(Phase::Train),
        "eval" => Ok(Phase::Eval),
        _ => Err(Error::Format(format!("unknown phase `{s}`"))),
    }
}

/// Rebuilds a trace from the two streams; update counters are not logged
/// and come back as zero.
pub fn trace_from_csv(micro: &str, macros: &str) -> Result<Trace> {
    let m = CsvTable::parse(micro)?;
    let kind = match m.rows.first() {
        Some(_) => m.get::<String>(0, "kind")?.parse()?,
        None => CsvTable::parse(macros)?.rows.first().map_or(Ok(AgentKind::Oracle), |r| r[2].parse())?,
    };
    let mut trace = Trace { kind, micro: Vec::new(), macros: Vec::new(), sub_updates: 0, meta_updates: 0 };
    for i in 0..m.rows.len() {
        let flag = |name: &str| m.get::<u8>(i, name).map(|v| v == 1);
        let occluded: Vec<u8> = m.prefixed(i, "occluded", "")?;
        trace.micro.push(MicroRecord {
            phase: parse_phase(&m.get::<String>(i, "phase")?)?,
            episode: m.get(i, "episode")?,
            macro_index: m.get(i, "macro")?,
            tau: m.get(i, "tau")?,
            step: m.get(i, "step")?,
            reward: m.get(i, "reward_bps_hz")?,
            shortfall: m.get(i, "qos_shortfall_bps_hz")?,
            sum_se: m.get(i, "sum_se_bps_hz")?,
            se: m.prefixed(i, "se", "_bps_hz")?,
            power_w: m.get(i, "power_w")?,
            g: m.prefixed(i, "g", "")?,
            occluded: occluded.into_iter().map(|o| o == 1).collect(),
            c1_ok: flag("c1_ok")?,
            c2_ok: flag("c2_ok")?,
        });
    }
    let t = CsvTable::parse(macros)?;
    for i in 0..t.rows.len() {
        trace.macros.push(MacroRecord {
            phase: parse_phase(&t.get::<String>(i, "phase")?)?,
            episode: t.get(i, "episode")?,
            macro_index: t.get(i, "macro")?,
            first_step: t.get(i, "first_step")?,
            g: t.prefixed(i, "g", "")?,
            p_hat: t.prefixed(i, "p_blocked", "")?,
            meta_reward: t.get(i, "meta_reward_bps_hz")?,
        });
    }
    Ok(trace)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    seed: u64,
    out: &'a Path,
    quiet: bool,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.hash, msg.as_ref());
        }
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes)?;
        self.files.push(p.clone());
        Ok(p)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(body)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("config_hash".into(), self.hash.clone().into());
            map.insert("seed".into(), self.seed.into());
        }
        self.write(name, serde_json::to_string_pretty(&v)? + "\n")
    }

    fn write_params(&mut self, name: &str, ps: &ParamStore) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::create_dir_all(self.out)?;
        ps.write_checkpoint(BufWriter::new(fs::File::create(&p)?))?;
        self.files.push(p.clone());
        Ok(p)
    }

    fn manifest(&mut self, mode: Mode) -> Result<()> {
        let files: Vec<String> =
            self.files.iter().filter_map(|p| p.strip_prefix(self.out).ok()).map(|p| p.to_string_lossy().into_owned()).collect();
        let echo = serde_json::to_value(self.cfg)?;
        self.write_json(&format!("{}.manifest.json", mode.name()), &serde_json::json!({ "mode": mode.name(), "files": files, "config": echo }))?;
        Ok(())
    }
}

/// CSI training and held-out sets: positions drawn from the `world.csi`
/// stream, shuffled by `data-split.csi`.
pub fn csi_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<CsiSample>, Vec<CsiSample>)> {
    let bs = cfg.system.bs_array(cfg.scenario.bs())?;
    let t = &cfg.training;
    let mut all = crate::estimators::csi_dataset(
        &bs,
        &cfg.scenario.region()?,
        t.csi_samples + t.csi_test_samples,
        cfg.system.lambda(),
        &mut substream(seed, "world.csi"),
    )?;
    all.shuffle(&mut substream(seed, "data-split.csi"));
    let test = all.split_off(t.csi_samples);
    Ok((all, test))
}

/// Blockage samples spread evenly over independent random worlds; the last
/// `vit_test_fraction` of the worlds is held out.
pub fn blockage_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let t = &cfg.training;
    let mut rng = substream(seed, "world.blockage");
    let lambda = cfg.system.lambda();
    let mut worlds = Vec::with_capacity(t.vit_worlds);
    for w in 0..t.vit_worlds {
        let n = t.vit_samples / t.vit_worlds + usize::from(w < t.vit_samples % t.vit_worlds);
        let world = WorldState::random(&cfg.scenario, &mut rng)?;
        worlds.push(if n == 0 { Vec::new() } else { make_dataset(&world, &cfg.scenario, lambda, n, cfg.scenario.horizon_macro)? });
    }
    let n_test = ((t.vit_worlds as f64 * t.vit_test_fraction).round() as usize).clamp(1, t.vit_worlds.saturating_sub(1).max(1));
    let test: Vec<LabeledSample> = worlds.split_off(t.vit_worlds - n_test).into_iter().flatten().collect();
    Ok((worlds.into_iter().flatten().collect(), test))
}

/// Frames of one approach scenario plus the index of the first frame at
/// which UE 0 loses line of sight.
pub struct ApproachScenario {
    pub frames: FrameSequence,
    pub event: usize,
}

/// Static UEs and one blocker driven straight across the BS to UE 0 line,
/// crossing it after roughly `F + 6` frames. Scenarios where UE 0 starts
/// out blocked or never gets blocked are redrawn.
pub fn approach_scenarios<R: Rng>(cfg: &ScenarioConfig, lambda: f64, n: usize, rng: &mut R) -> Result<Vec<ApproachScenario>> {
    let dt = cfg.frame_dt();
    let total = cfg.frames + 16;
    let half = Position3::new(cfg.blocker_half_extents[0], cfg.blocker_half_extents[1], cfg.blocker_half_extents[2]);
    let bs = cfg.bs();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n.max(1) {
            return Err(Error::InvalidArgument("no approach scenario produces a blockage event".into()));
        }
        let base = WorldState::random(cfg, rng)?;
        let u = base.ues[0];
        let dir = u - bs;
        let horiz = (dir.x * dir.x + dir.y * dir.y).sqrt();
        if horiz <= 0.0 {
            continue;
        }
        let normal = Position3::new(-dir.y / horiz, dir.x / horiz, 0.0);
        let cross = bs + dir.scale(rng.gen_range(0.3..0.7));
        let speed = rng.gen_range(cfg.blocker_speed[0].max(0.5)..=cfg.blocker_speed[1].max(0.5));
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let offset = half.x.max(half.y) * 2f64.sqrt() + speed * (cfg.frames + 6) as f64 * dt;
        let start = Position3::new(cross.x, cross.y, cfg.region_min[2] + half.z) + normal.scale(side * offset);
        let blocker = Blocker::new(start, normal.scale(-side * speed), half)?;
        let mut w = WorldState::new(base.region, base.ues.clone(), vec![Position3::new(0.0, 0.0, 0.0); base.ues.len()], vec![blocker])?;
        let mut frames = FrameSequence::zeros(total, cfg.height, cfg.width);
        let mut event = None;
        for f in 0..total {
            if f > 0 {
                w = step_world(&w, dt)?;
            }
            render_frame(&w, cfg.height, cfg.width, frames.frame_mut(f));
            let blocked = w.labels(cfg, lambda)?[0] == 0;
            if f == 0 && blocked {
                break;
            }
            if blocked && event.is_none() {
                event = Some(f);
            }
        }
        match event {
            Some(e) if e >= cfg.frames => out.push(ApproachScenario { frames, event: e }),
            _ => continue,
        }
    }
    Ok(out)
}

/// Median lead (frames) of a predictor's UE-0 blockage alarm over approach
/// scenarios. The prediction at frame `t` sees frames `t - F + 1 ..= t`.
pub fn approach_lead_time<M: BlockagePredictor>(model: &M, cfg: &ScenarioConfig, scenarios: &[ApproachScenario]) -> Result<f64> {
    let f = cfg.frames;
    let mut leads = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let mut probs = vec![0.0; s.event + 1];
        for t in f - 1..=s.event {
            let mut win = FrameSequence::zeros(f, cfg.height, cfg.width);
            for i in 0..f {
                win.frame_mut(i).copy_from_slice(s.frames.frame(t + 1 - f + i));
            }
            probs[t] = model.predict(&win)?[0];
        }
        leads.push(lead_time(&probs, &[s.event], 0.5)?);
    }
    leads.sort_by(f64::total_cmp);
    let n = leads.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no approach scenarios".into()));
    }
    Ok(if n % 2 == 1 { leads[n / 2] } else { 0.5 * (leads[n / 2 - 1] + leads[n / 2]) })
}

const CSI_CKPT: &str = "csi_transformer.nfps";
const CSI_SCALER: &str = "csi_transformer.scaler.json";
const VIT_CKPT: &str = "vit.nfps";

fn read_params(path: &Path, mode: Mode) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{} not found; run --mode {} first", path.display(), mode.name())));
    }
    ParamStore::read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

/// Loads the trained CSI transformer and ViT written by `train-csi` and
/// `train-vit` into `dir`.
pub fn load_models(cfg: &ExperimentConfig, dir: &Path) -> Result<(CsiTransformer, VitLite)> {
    let mut rng = substream(0, "init");
    let mut csi = CsiTransformer::new(cfg.csi_model.clone(), cfg.system.lambda(), &mut rng)?;
    csi.params_mut().load_values_from(&read_params(&dir.join(CSI_CKPT), Mode::TrainCsi)?)?;
    let scaler_path = dir.join(CSI_SCALER);
    if !scaler_path.exists() {
        return Err(Error::MissingPrerequisite(format!("{} not found; run --mode train-csi first", scaler_path.display())));
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&scaler_path)?)?;
    csi.scaler = serde_json::from_value::<FeatureScaler>(v["scaler"].clone())?;
    let mut vit = VitLite::new(cfg.vit_model.clone(), &mut rng)?;
    vit.params_mut().load_values_from(&read_params(&dir.join(VIT_CKPT), Mode::TrainVit)?)?;
    Ok((csi, vit))
}

/// Executes `mode`, writing artefacts under `out`.
pub fn run(cfg: &ExperimentConfig, mode: Mode, out: &Path, quiet: bool) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut ctx = Ctx { cfg, hash: cfg.hash(), seed: cfg.seed, out, quiet, files: Vec::new() };
    fs::create_dir_all(out)?;
    ctx.log(format!("{} (seed {})", mode.name(), cfg.seed));
    let summary = match mode {
        Mode::GenData => gen_data(&mut ctx)?,
        Mode::TrainCsi => train_csi_mode(&mut ctx)?,
        Mode::TrainVit => train_vit_mode(&mut ctx)?,
        Mode::TrainHdrl => {
            let (csi, vit) = load_models(cfg, out)?;
            control_run(&mut ctx, AgentKind::HdrlRis, Some(Models { csi: &csi, vit: &vit }), "")?
        }
        Mode::Baseline => baseline_mode(&mut ctx)?,
        Mode::Sweep => sweep_mode(&mut ctx)?,
        Mode::Flops => flops_mode(&mut ctx)?,
    };
    ctx.manifest(mode)?;
    Ok(RunRecord { mode, config_hash: ctx.hash, seed: cfg.seed, wall_time_s: start.elapsed().as_secs_f64(), files: ctx.files, summary })
}

fn gen_data(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let (train, test) = csi_data(cfg, ctx.seed)?;
    let mut csv = csv_line(
        &["config_hash", "seed", "split", "sample", "antenna", "distance_m", "elevation_rad", "azimuth_rad", "h_re", "h_im"].map(String::from),
    );
    for (split, set) in [("train", &train), ("test", &test)] {
        for (i, s) in set.iter().enumerate() {
            for (n, (f, h)) in s.features.rows.iter().zip(&s.channel).enumerate() {
                let row = [&ctx.hash, &ctx.seed.to_string(), split, &i.to_string(), &n.to_string()]
                    .map(|v| v.to_string())
                    .into_iter()
                    .chain(floats(&[f[0], f[1], f[2], h.re, h.im]))
                    .collect::<Vec<_>>();
                csv.push_str(&csv_line(&row));
            }
        }
    }
    ctx.write("csi_dataset.csv", csv)?;

    let (btrain, btest) = blockage_data(cfg, ctx.seed)?;
    let k = cfg.scenario.num_ues;
    let mut head: Vec<String> = ["config_hash", "seed", "split", "sample", "time_s"].map(String::from).to_vec();
    head.extend(per_ue("los", "", k));
    let mut labels = csv_line(&head);
    for (split, set) in [("train", &btrain), ("test", &btest)] {
        let mut buf = Vec::new();
        write_dataset(set, &mut buf)?;
        ctx.write(&format!("blockage_{split}.nfds"), buf)?;
        for (i, s) in set.iter().enumerate() {
            let mut row = vec![ctx.hash.clone(), ctx.seed.to_string(), split.to_string(), i.to_string(), s.time.to_string()];
            row.extend(bits(&s.labels));
            labels.push_str(&csv_line(&row));
        }
    }
    ctx.write("blockage_labels.csv", labels)?;
    ctx.log(format!("{} + {} CSI samples, {} + {} blockage samples", train.len(), test.len(), btrain.len(), btest.len()));
    Ok(serde_json::json!({
        "csi_train": train.len(),
        "csi_test": test.len(),
        "blockage_train": btrain.len(),
        "blockage_test": btest.len(),
        "blocked_fraction_train": crate::scenario::blocked_fraction(&btrain),
    }))
}

fn loss_csv(hash: &str, seed: u64, names: [&str; 2], a: &[f64], b: &[f64]) -> String {
    let mut s = csv_line(&["config_hash", "seed", "epoch", names[0], names[1]].map(String::from));
    for (e, (x, y)) in a.iter().zip(b).enumerate() {
        s.push_str(&csv_line(&[hash.to_string(), seed.to_string(), e.to_string(), x.to_string(), y.to_string()]));
    }
    s
}

fn train_csi_mode(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let (train, test) = csi_data(cfg, ctx.seed)?;
    let lambda = cfg.system.lambda();
    let tc = &cfg.training.csi;
    let mut tr = CsiTransformer::new(cfg.csi_model.clone(), lambda, &mut substream(ctx.seed, "init.csi"))?;
    let rt = train_csi(&mut tr, &train, tc, &mut substream(ctx.seed, "data-split.csi-batches"))?;
    let mut cnn = CnnCsi::new(cfg.cnn_model.clone(), lambda, &mut substream(ctx.seed, "init.cnn"))?;
    let rc = train_csi(&mut cnn, &train, tc, &mut substream(ctx.seed, "data-split.cnn-batches"))?;
    ctx.write("csi_loss.csv", loss_csv(&ctx.hash, ctx.seed, ["transformer_mse", "cnn_mse"], &rt.loss_curve, &rc.loss_curve))?;

    let mut snr = csv_line(&["config_hash", "seed", "snr_db", "transformer_nmse", "cnn_nmse"].map(String::from));
    for &db in &cfg.training.csi_snr_db {
        let a = mean_nmse_noisy(&tr, &test, db, &mut substream(ctx.seed, "world.csi-noise"))?;
        let b = mean_nmse_noisy(&cnn, &test, db, &mut substream(ctx.seed, "world.csi-noise"))?;
        snr.push_str(&csv_line(&[ctx.hash.clone(), ctx.seed.to_string(), db.to_string(), a.to_string(), b.to_string()]));
    }
    ctx.write("csi_snr.csv", snr)?;

    ctx.write_params(CSI_CKPT, tr.params())?;
    ctx.write_json(CSI_SCALER, &serde_json::json!({ "scaler": tr.scaler }))?;
    ctx.write_params("csi_cnn.nfps", cnn.params())?;
    let report = serde_json::json!({
        "transformer_train_nmse": mean_nmse(&tr, &train)?,
        "transformer_test_nmse": mean_nmse(&tr, &test)?,
        "cnn_train_nmse": mean_nmse(&cnn, &train)?,
        "cnn_test_nmse": mean_nmse(&cnn, &test)?,
    });
    ctx.log(format!("CSI NMSE {report}"));
    ctx.write_json("csi_report.json", &report)?;
    Ok(report)
}

fn train_vit_mode(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let (train, test) = blockage_data(cfg, ctx.seed)?;
    let tc = &cfg.training.vit;
    let mut vit = VitLite::new(cfg.vit_model.clone(), &mut substream(ctx.seed, "init.vit"))?;
    let rv = train_vit(&mut vit, &train, tc, &mut substream(ctx.seed, "data-split.vit-batches"))?;
    let mut base = FrameTransformer::new(cfg.vit_model.clone(), &mut substream(ctx.seed, "init.frame"))?;
    let rb = train_blockage(&mut base, &train, tc, &mut substream(ctx.seed, "data-split.frame-batches"))?;
    ctx.write("vit_loss.csv", loss_csv(&ctx.hash, ctx.seed, ["vit_bce", "frame_transformer_bce"], &rv.loss_curve, &rb.loss_curve))?;
    ctx.write_params(VIT_CKPT, vit.params())?;
    ctx.write_params("frame_transformer.nfps", base.params())?;

    let lambda = cfg.system.lambda();
    let scenarios = approach_scenarios(&cfg.scenario, lambda, cfg.training.lead_scenarios, &mut substream(ctx.seed, "world.approach"))?;
    let (v, b) = (blockage_report(&vit, &test)?, blockage_report(&base, &test)?);
    let report = serde_json::json!({
        "vit": { "precision": v.precision, "recall": v.recall, "f1": v.f1 },
        "frame_transformer": { "precision": b.precision, "recall": b.recall, "f1": b.f1 },
        "vit_median_lead_frames": approach_lead_time(&vit, &cfg.scenario, &scenarios)?,
        "train_samples": train.len(),
        "test_samples": test.len(),
        "blocked_fraction_test": crate::scenario::blocked_fraction(&test),
    });
    ctx.log(format!("blockage {report}"));
    ctx.write_json("vit_report.json", &report)?;
    Ok(report)
}

/// Runs one agent kind and writes `<prefix><kind>_{micro,macro}.csv` plus
/// the summary.
fn control_run(ctx: &mut Ctx, kind: AgentKind, models: Option<Models<'_>>, prefix: &str) -> Result<serde_json::Value> {
    let ccfg = ctx.cfg.control();
    let dump = ctx.out.join(format!("{prefix}{kind}_checkpoints"));
    let t0 = Instant::now();
    let (trainer, trace) = run_baseline(kind, &ccfg, models, ctx.seed, Some(&dump))?;
    let summary = write_control(ctx, &trace, prefix)?;
    if kind.learns() {
        ctx.files.extend(trainer.dump_checkpoints(&dump)?);
    }
    ctx.log(format!("{kind}: final-window sum SE {:.4} bps/Hz ({:.1} s)", summary.final_window_sum_se, t0.elapsed().as_secs_f64()));
    Ok(serde_json::json!({
        "summary": summary,
        "sub_updates": trace.sub_updates,
        "meta_updates": trace.meta_updates,
    }))
}

fn write_control(ctx: &mut Ctx, trace: &Trace, prefix: &str) -> Result<ControlSummary> {
    let k = ctx.cfg.scenario.num_ues;
    let kind = trace.kind;
    ctx.write(&format!("{prefix}{kind}_micro.csv"), micro_csv(trace, &ctx.hash, ctx.seed, k))?;
    ctx.write(&format!("{prefix}{kind}_macro.csv"), macro_csv(trace, &ctx.hash, ctx.seed, k))?;
    let summary = ControlSummary::from_trace(trace);
    ctx.write_json(&format!("{prefix}{kind}_summary.json"), &serde_json::json!({
        "summary": summary,
        "sub_updates": trace.sub_updates,
        "meta_updates": trace.meta_updates,
        "config": ctx.cfg,
    }))?;
    Ok(summary)
}

fn baseline_mode(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let kinds = ctx.cfg.training.baselines.clone();
    let models = if kinds.iter().any(|k| k.learns()) { Some(load_models(ctx.cfg, ctx.out)?) } else { None };
    let mut out = serde_json::Map::new();
    for kind in kinds {
        let m = models.as_ref().map(|(c, v)| Models { csi: c, vit: v });
        out.insert(kind.to_string(), control_run(ctx, kind, m, "")?);
    }
    Ok(serde_json::Value::Object(out))
}

fn square_side(v: f64, path: &str) -> Result<usize> {
    let side = v.sqrt().round() as usize;
    if v < 1.0 || (side * side) as f64 != v {
        return Err(bound(path, format!("{v} is not a perfect square")));
    }
    Ok(side)
}

/// `cfg` with the sweep parameter set to `value`; the point's own sweep list
/// holds only `value`, so its hash ignores the other points.
pub fn sweep_point(cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.sweep.values = vec![value];
    match cfg.sweep.parameter {
        SweepParameter::PMaxDbm => c.system.p_max_dbm = value,
        SweepParameter::Antennas => {
            let s = square_side(value, "sweep.values")?;
            (c.system.bs_rows, c.system.bs_cols) = (s, s);
            c.csi_model.tokens = s * s;
            c.cnn_model.tokens = s * s;
        }
        SweepParameter::RisElements => {
            let s = square_side(value, "sweep.values")?;
            (c.system.ris_rows, c.system.ris_cols) = (s, s);
        }
    }
    Ok(c)
}

/// Mean `||G^H Theta^H h_rd||^2` after alternating alignment over a fixed
/// 4 x 4 grid of UE positions at mid-height of the region.
pub fn mean_ris_gain(cfg: &ControlConfig) -> Result<f64> {
    let env = Env::new(cfg)?;
    let r = cfg.scenario.region()?;
    let (lo, hi) = (r.min, r.max);
    let mut acc = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let ue = Position3::new(
                lo.x + (hi.x - lo.x) * (i as f64 + 0.5) / 4.0,
                lo.y + (hi.y - lo.y) * (j as f64 + 0.5) / 4.0,
                0.5 * (lo.z + hi.z),
            );
            acc += align_ris(&los_channel(&env.ris, ue, env.lambda)?, &env.g_br, 8)?.1;
        }
    }
    Ok(acc / 16.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub run_hash: String,
    pub final_window_sum_se: f64,
    pub mean_sum_se: f64,
    pub ris_gain: f64,
}

fn sweep_mode(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let sw = &cfg.sweep;
    let points = sw.values.iter().map(|&v| sweep_point(cfg, v)).collect::<Result<Vec<_>>>()?;
    if sw.kind.learns() && sw.parameter == SweepParameter::Antennas {
        return Err(bound("sweep.kind", "antenna sweeps change the CSI model input; use the oracle"));
    }
    let models = if sw.kind.learns() { Some(load_models(cfg, ctx.out)?) } else { None };
    let seed = ctx.seed;
    // independent runs; each owns its environment and streams
    let results: Vec<Result<(Trace, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = points
            .iter()
            .map(|p| {
                let m = models.as_ref().map(|(c, v)| Models { csi: c, vit: v });
                s.spawn(move || -> Result<(Trace, f64)> {
                    let ccfg = p.control();
                    let (_, trace) = run_baseline(p.sweep.kind, &ccfg, m, seed, None)?;
                    Ok((trace, mean_ris_gain(&ccfg)?))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let name = sw.parameter.name();
    let mut table = csv_line(
        &["config_hash", "seed", "run_hash", "kind", name, "final_window_sum_se_bps_hz", "mean_sum_se_bps_hz", "ris_cascade_gain"]
            .map(String::from),
    );
    let mut rows = Vec::with_capacity(points.len());
    for (p, res) in points.iter().zip(results) {
        let (trace, gain) = res?;
        let prefix = format!("sweep/{name}={}/", p_value(p, sw.parameter));
        let mut sub = Ctx { cfg: p, hash: p.hash(), seed, out: ctx.out, quiet: true, files: Vec::new() };
        let summary = write_control(&mut sub, &trace, &prefix)?;
        ctx.files.append(&mut sub.files);
        let row = SweepRow {
            value: p_value(p, sw.parameter),
            run_hash: sub.hash,
            final_window_sum_se: summary.final_window_sum_se,
            mean_sum_se: summary.mean_sum_se,
            ris_gain: gain,
        };
        table.push_str(&csv_line(&[
            ctx.hash.clone(),
            seed.to_string(),
            row.run_hash.clone(),
            sw.kind.to_string(),
            row.value.to_string(),
            row.final_window_sum_se.to_string(),
            row.mean_sum_se.to_string(),
            row.ris_gain.to_string(),
        ]));
        ctx.log(format!("{name}={}: sum SE {:.4}", row.value, row.mean_sum_se));
        rows.push(row);
    }
    ctx.write(&format!("sweep_{name}.csv"), table)?;
    Ok(serde_json::json!({ "parameter": name, "kind": sw.kind, "rows": rows }))
}

fn p_value(p: &ExperimentConfig, param: SweepParameter) -> f64 {
    match param {
        SweepParameter::PMaxDbm => p.system.p_max_dbm,
        SweepParameter::Antennas => p.system.antennas() as f64,
        SweepParameter::RisElements => p.system.ris_elements() as f64,
    }
}

fn flops_mode(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let rep = flop_report(&ctx.cfg.flops)?;
    let mut csv = csv_line(&["config_hash", "seed", "component", "gflops", "reference_gflops"].map(String::from));
    for line in rep.csv_rows() {
        csv.push_str(&format!("{},{},{line}\n", ctx.hash, ctx.seed));
    }
    ctx.write("flops.csv", csv)?;
    ctx.write_json("flops.json", &rep)?;
    Ok(serde_json::to_value(&rep)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_document_gives_defaults() {
        assert_eq!(parse_config("  \n").unwrap(), ExperimentConfig::default());
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn errors_name_the_path() {
        match parse_config(r#"{"schedule": {"n_macro": 0}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "schedule.n_macro"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"agent": {"gama_l": 0.9}}"#) {
            Err(Error::Config { path, msg }) => assert!(path.starts_with("agent") && msg.contains("gama_l"), "{path}: {msg}"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"system": {"bs_rows": "four"}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "system.bs_rows"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 9, ..a.clone() };
        let mut c = a.clone();
        c.system.p_max_dbm = 30.0;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn quoting_follows_rfc_rules() {
        assert_eq!(csv_field("1.5"), "1.5");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn sweep_point_rejects_non_squares() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.parameter = SweepParameter::Antennas;
        assert_eq!(sweep_point(&cfg, 64.0).unwrap().system.antennas(), 64);
        assert!(sweep_point(&cfg, 12.0).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }
}
