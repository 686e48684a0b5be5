//! Two-timescale hierarchical DDPG: a meta-controller picks a serving mode
//! per UE every macro-step from blockage predictions, a sub-controller picks
//! the precoder and RIS phases every TTI from estimated channels.

pub mod ddpg;
pub mod flops;
pub mod runner;

use std::collections::VecDeque;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_blockage, effective_channel, los_channel, mimo_channel, path_loss, ChannelSet, ComplexMatrix, ComplexVector};
use crate::error::{dim, invalid, Result};
use crate::estimators::{csi_forward, CsiTransformer};
use crate::geometry::{build_upa, geometric_features, wavelength, ArrayGeometry, Position3};
use crate::metrics::{dbm_to_watts, norm_sq, project_power, ris_alignment_oracle, BeamMatrix, LinkReport, RisPhases};
use crate::scenario::{render_frame, step_world, Aabb, FrameSequence, ScenarioConfig, WorldState};

pub use ddpg::{ddpg_update, AcHyper, ActorCritic, Level, OuNoise, OutputActivation, ReplayBuffer, Transition, UpdateStats};
pub use flops::{flop_report, FlopConfig, FlopReport, FlopRow};
pub use runner::{run_baseline, train_hdrl, AgentKind, MacroRecord, MicroRecord, Models, Phase, Trace, Trainer};

/// Radio link and array parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub bs_rows: usize,
    pub bs_cols: usize,
    /// Element spacing in wavelengths.
    pub bs_spacing_wavelengths: f64,
    pub ris_rows: usize,
    pub ris_cols: usize,
    pub ris_spacing_wavelengths: f64,
    pub ris_position: [f64; 3],
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub p_max_dbm: f64,
    pub noise_dbm: f64,
    /// Per-UE QoS floor, bps/Hz.
    pub se_min: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            bs_rows: 4,
            bs_cols: 4,
            bs_spacing_wavelengths: 0.5,
            ris_rows: 4,
            ris_cols: 4,
            ris_spacing_wavelengths: 0.2,
            ris_position: [15.0, 0.0, 15.0],
            carrier_hz: 3.5e9,
            bandwidth_hz: 100e6,
            p_max_dbm: 35.0,
            noise_dbm: -94.0,
            se_min: 1.0,
        }
    }
}

impl SystemConfig {
    pub fn lambda(&self) -> f64 {
        wavelength(self.carrier_hz)
    }

    pub fn antennas(&self) -> usize {
        self.bs_rows * self.bs_cols
    }

    pub fn ris_elements(&self) -> usize {
        self.ris_rows * self.ris_cols
    }

    pub fn bs_array(&self, center: Position3) -> Result<ArrayGeometry> {
        build_upa(self.bs_rows, self.bs_cols, self.bs_spacing_wavelengths * self.lambda(), center)
    }

    pub fn ris_array(&self) -> Result<ArrayGeometry> {
        let p = self.ris_position;
        build_upa(self.ris_rows, self.ris_cols, self.ris_spacing_wavelengths * self.lambda(), Position3::new(p[0], p[1], p[2]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas() == 0 || self.ris_elements() == 0 {
            return Err(invalid("arrays need at least one element"));
        }
        if !(self.bs_spacing_wavelengths > 0.0 && self.ris_spacing_wavelengths > 0.0) {
            return Err(invalid("element spacing must be positive"));
        }
        if !(self.carrier_hz > 0.0 && self.bandwidth_hz > 0.0) {
            return Err(invalid("carrier and bandwidth must be positive"));
        }
        if !(self.p_max_dbm.is_finite() && self.noise_dbm.is_finite() && self.se_min >= 0.0) {
            return Err(invalid("power levels must be finite and se_min nonnegative"));
        }
        Ok(())
    }
}

/// DDPG hyperparameters shared by every learning agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma_l: f64,
    pub gamma_h: f64,
    pub tau: f64,
    pub sigma_o: f64,
    pub theta_ou: f64,
    pub sub_buffer: usize,
    pub meta_buffer: usize,
    pub batch_size: usize,
    pub meta_batch_size: usize,
    /// Sub-level update cadence in micro-steps.
    pub update_every: usize,
    /// Reward penalty per bps/Hz of QoS shortfall.
    pub qos_penalty: f64,
    /// Multiplies rewards before they enter the replay buffers; logs keep raw rewards.
    pub reward_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gamma_l: 0.99,
            gamma_h: 0.9,
            tau: 1e-3,
            sigma_o: 0.3,
            theta_ou: 0.15,
            sub_buffer: 100_000,
            meta_buffer: 10_000,
            batch_size: 64,
            meta_batch_size: 32,
            update_every: 4,
            qos_penalty: 1.0,
            reward_scale: 0.01,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.gamma_l) && unit(self.gamma_h) && unit(self.tau)) {
            return Err(invalid("discounts and tau must lie in [0, 1]"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.reward_scale > 0.0) {
            return Err(invalid("learning rates and reward scale must be positive"));
        }
        if !(self.sigma_o >= 0.0 && self.theta_ou >= 0.0 && self.qos_penalty >= 0.0) {
            return Err(invalid("noise parameters and penalty must be nonnegative"));
        }
        if self.sub_buffer == 0 || self.meta_buffer == 0 || self.batch_size == 0 || self.meta_batch_size == 0 || self.update_every == 0 {
            return Err(invalid("buffer sizes, batch sizes and update cadence must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub episodes: usize,
    /// Macro-steps per episode.
    pub t_macro: usize,
    /// Micro-steps (TTIs) per macro-step.
    pub n_macro: usize,
    pub tti_s: f64,
    /// Exploration-free episodes appended after training.
    pub eval_episodes: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { episodes: 10, t_macro: 4, n_macro: 8, tti_s: 1e-3, eval_episodes: 0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_macro == 0 || self.n_macro == 0 {
            return Err(invalid("t_macro and n_macro must be at least 1"));
        }
        if !(self.tti_s > 0.0) {
            return Err(invalid("tti must be positive"));
        }
        Ok(())
    }

    pub fn macro_period_s(&self) -> f64 {
        self.n_macro as f64 * self.tti_s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub system: SystemConfig,
    pub scenario: ScenarioConfig,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.scenario.validate()?;
        self.agent.validate()?;
        self.schedule.validate()?;
        if self.scenario.num_ues == 0 {
            return Err(invalid("at least one UE is required"));
        }
        Ok(())
    }

    pub fn link(&self) -> LinkParams {
        LinkParams {
            p_max: dbm_to_watts(self.system.p_max_dbm),
            noise: dbm_to_watts(self.system.noise_dbm),
            se_min: self.system.se_min,
            attenuation_db: self.scenario.attenuation_db,
            qos_penalty: self.agent.qos_penalty,
        }
    }
}

/// Link constants in linear units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub p_max: f64,
    pub noise: f64,
    pub se_min: f64,
    pub attenuation_db: f64,
    pub qos_penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub p_hat: Vec<f64>,
    pub locations: Vec<Position3>,
}

impl MetaState {
    pub fn new(p_hat: Vec<f64>, locations: Vec<Position3>) -> Result<Self> {
        if p_hat.len() != locations.len() {
            return Err(dim(format!("{} probabilities for {} UEs", p_hat.len(), locations.len())));
        }
        if p_hat.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("blockage probabilities must lie in [0, 1]"));
        }
        Ok(Self { p_hat, locations })
    }

    /// `[p_hat, positions mapped to [-1, 1] per axis]`.
    pub fn to_vector(&self, region: &Aabb) -> Vec<f64> {
        let mut v = self.p_hat.clone();
        let (lo, hi) = (region.min.to_array(), region.max.to_array());
        for u in &self.locations {
            for (i, c) in u.to_array().into_iter().enumerate() {
                let half = 0.5 * (hi[i] - lo[i]);
                v.push(if half > 0.0 { (c - 0.5 * (hi[i] + lo[i])) / half } else { 0.0 });
            }
        }
        v
    }

    pub fn dim(k: usize) -> usize {
        4 * k
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaAction {
    pub g: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubState {
    /// One estimated effective channel (length N) per UE.
    pub h_eff: Vec<ComplexVector>,
    pub g: Vec<u8>,
}

impl SubState {
    /// Interleaved `(re, im)` of every column times `scale`, then `g`.
    pub fn to_vector(&self, scale: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.h_eff.iter().map(|h| 2 * h.len()).sum::<usize>() + self.g.len());
        for h in &self.h_eff {
            for c in h {
                v.push(c.re * scale);
                v.push(c.im * scale);
            }
        }
        v.extend(self.g.iter().map(|&b| f64::from(b)));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubAction {
    pub w: BeamMatrix,
    pub phases: RisPhases,
}

/// Raw action layout: `2NK` precoder reals (column-major, interleaved),
/// then `ris_elements` phase reals, then `K` mode reals when `mode_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionLayout {
    pub antennas: usize,
    pub users: usize,
    pub ris_elements: usize,
    pub mode_bits: bool,
}

impl ActionLayout {
    pub fn dim(&self) -> usize {
        2 * self.antennas * self.users + self.ris_elements + if self.mode_bits { self.users } else { 0 }
    }
}

/// Maps a raw actor output in `[-1, 1]` to an executable action. Precoder
/// entries scale by `sqrt(p_max / (N K))` before projection onto the power
/// ball; phases are `pi * a` wrapped to `[0, 2 pi)`; mode bits are `a > 0`.
/// Without RIS outputs the phases are zeros of length `total_ris`.
pub fn decode_sub_action(raw: &[f64], layout: &ActionLayout, p_max: f64, total_ris: usize) -> Result<(SubAction, Option<Vec<u8>>)> {
    if raw.len() != layout.dim() {
        return Err(dim(format!("raw action of length {} for layout of {}", raw.len(), layout.dim())));
    }
    let (n, k) = (layout.antennas, layout.users);
    let s = (p_max / (n * k) as f64).sqrt();
    let mut w = BeamMatrix::zeros(n, k);
    for kk in 0..k {
        for nn in 0..n {
            let i = 2 * (kk * n + nn);
            w.0[(nn, kk)] = Complex64::new(s * raw[i], s * raw[i + 1]);
        }
    }
    let w = project_power(&w, p_max);
    let off = 2 * n * k;
    let phases = if layout.ris_elements > 0 {
        if layout.ris_elements != total_ris {
            return Err(dim(format!("{} phase outputs for {total_ris} RIS elements", layout.ris_elements)));
        }
        RisPhases::new(raw[off..off + layout.ris_elements].iter().map(|a| std::f64::consts::PI * a).collect())
    } else {
        RisPhases::zeros(total_ris)
    };
    let modes = layout.mode_bits.then(|| raw[off + layout.ris_elements..].iter().map(|&a| u8::from(a > 0.0)).collect());
    Ok((SubAction { w, phases }, modes))
}

fn explore_clip<R: Rng>(mut a: Vec<f64>, ac: &ActorCritic, noise: &mut OuNoise, explore: bool, rng: &mut R) -> Result<Vec<f64>> {
    if explore {
        if noise.x.len() != a.len() {
            return Err(dim(format!("noise of dimension {} for action of {}", noise.x.len(), a.len())));
        }
        let (lo, hi) = ac.output.range();
        for (v, e) in a.iter_mut().zip(noise.sample(1.0, rng)) {
            *v = (*v + e).clamp(lo, hi);
        }
    }
    Ok(a)
}

/// Subgoal bits from the sigmoid actor plus optional OU noise; a value of
/// exactly 0.5 maps to 0. Also returns the continuous vector the critic sees.
pub fn meta_act<R: Rng>(state: &[f64], ac: &ActorCritic, noise: &mut OuNoise, explore: bool, rng: &mut R) -> Result<(MetaAction, Vec<f64>)> {
    let cont = explore_clip(ac.act(state)?, ac, noise, explore, rng)?;
    let g = cont.iter().map(|&p| u8::from(p > 0.5)).collect();
    Ok((MetaAction { g }, cont))
}

/// Precoder and phases from the tanh actor; C1 and C2 hold by construction.
pub fn sub_act<R: Rng>(
    state: &[f64],
    ac: &ActorCritic,
    noise: &mut OuNoise,
    explore: bool,
    layout: &ActionLayout,
    p_max: f64,
    total_ris: usize,
    rng: &mut R,
) -> Result<(SubAction, Vec<f64>, Option<Vec<u8>>)> {
    let raw = explore_clip(ac.act(state)?, ac, noise, explore, rng)?;
    let (action, modes) = decode_sub_action(&raw, layout, p_max, total_ris)?;
    Ok((action, raw, modes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// `sum_k max(0, se_min - SE_k)`, before weighting.
    pub shortfall: f64,
    pub report: LinkReport,
}

/// Per-UE effective channels under blockage and serving modes.
pub fn effective_channels(ch: &ChannelSet, occluded: &[bool], phases: &RisPhases, g: &[u8], attenuation_db: f64) -> Result<Vec<ComplexVector>> {
    let k = ch.num_ues();
    if occluded.len() != k || g.len() != k {
        return Err(dim(format!("{} occlusion flags and {} mode bits for {k} UEs", occluded.len(), g.len())));
    }
    (0..k)
        .map(|i| {
            let hd = apply_blockage(&ch.h_bd[i], occluded[i], attenuation_db);
            effective_channel(&hd, &ch.h_rd[i], &ch.g_br, phases, g[i])
        })
        .collect()
}

/// Reward against the true channels: `sum SE - penalty * shortfall`.
pub fn env_step(ch: &ChannelSet, occluded: &[bool], action: &SubAction, g: &[u8], link: &LinkParams) -> Result<StepOutcome> {
    let h = effective_channels(ch, occluded, &action.phases, g, link.attenuation_db)?;
    let report = LinkReport::evaluate(&h, &action.w, link.noise, link.se_min)?;
    let shortfall = qos_shortfall(&report.se, link.se_min);
    Ok(StepOutcome { reward: report.sum_se - link.qos_penalty * shortfall, shortfall, report })
}

pub fn qos_shortfall(se: &[f64], se_min: f64) -> f64 {
    se.iter().map(|s| (se_min - s).max(0.0)).sum()
}

/// `sum_{tau >= 0} gamma^tau r_tau`.
pub fn meta_reward(rewards: &[f64], gamma_l: f64) -> f64 {
    let mut acc = 0.0;
    let mut f = 1.0;
    for r in rewards {
        acc += f * r;
        f *= gamma_l;
    }
    acc
}

/// Cascade `G^H Theta^H h_rd`.
pub fn cascade_channel(h_rd: &[Complex64], g: &ComplexMatrix, phases: &RisPhases) -> Result<ComplexVector> {
    effective_channel(&vec![Complex64::new(0.0, 0.0); g.cols()], h_rd, g, phases, 0)
}

/// Alternating maximisation of `||G^H Theta^H h_rd||^2`: matched beam for
/// fixed phases, then the closed-form phase alignment for that beam. The
/// gain never decreases across iterations.
pub fn align_ris(h_rd: &[Complex64], g: &ComplexMatrix, iters: usize) -> Result<(RisPhases, f64)> {
    let mut phases = RisPhases::zeros(g.rows());
    let mut eff = cascade_channel(h_rd, g, &phases)?;
    for _ in 0..iters {
        let nrm = norm_sq(&eff).sqrt();
        if !(nrm > 0.0) {
            break;
        }
        let c: Vec<Complex64> = (0..g.rows())
            .map(|m| (0..g.cols()).map(|n| g[(m, n)] * eff[n] / nrm).sum())
            .collect();
        let (next, _) = ris_alignment_oracle(h_rd, &c)?;
        let next_eff = cascade_channel(h_rd, g, &next)?;
        if norm_sq(&next_eff) < norm_sq(&eff) {
            break;
        }
        phases = next;
        eff = next_eff;
    }
    let gain = norm_sq(&eff);
    Ok((phases, gain))
}

/// Closed-form yardstick: each UE takes the stronger of its (possibly
/// blocked) direct link and its RIS-aligned cascade, phases align to the
/// first RIS-served UE, and each column is an MRT beam with power `p / K`.
/// Exact for one UE on the direct path.
pub fn oracle_action(ch: &ChannelSet, occluded: &[bool], link: &LinkParams) -> Result<(SubAction, Vec<u8>)> {
    let k = ch.num_ues();
    if occluded.len() != k {
        return Err(dim("one occlusion flag per UE required"));
    }
    let mut g = Vec::with_capacity(k);
    let mut aligned = Vec::with_capacity(k);
    for i in 0..k {
        let direct = norm_sq(&apply_blockage(&ch.h_bd[i], occluded[i], link.attenuation_db));
        let (ph, gain) = align_ris(&ch.h_rd[i], &ch.g_br, 8)?;
        g.push(u8::from(direct >= gain));
        aligned.push(ph);
    }
    let phases = g.iter().position(|&b| b == 0).map_or_else(|| RisPhases::zeros(ch.ris_elements()), |i| aligned[i].clone());
    let h = effective_channels(ch, occluded, &phases, &g, link.attenuation_db)?;
    let s = (link.p_max / k as f64).sqrt();
    let cols: Vec<ComplexVector> = h
        .iter()
        .map(|hk| {
            let nrm = norm_sq(hk).sqrt();
            if nrm > 0.0 {
                hk.iter().map(|v| v * (s / nrm)).collect()
            } else {
                vec![Complex64::new(0.0, 0.0); hk.len()]
            }
        })
        .collect();
    Ok((SubAction { w: project_power(&BeamMatrix::from_columns(&cols)?, link.p_max), phases }, g))
}

/// Upper bound on the single-UE SE over every feasible precoder, phase
/// vector and mode: `|h^H Theta G w| <= sum_m |h_m| ||G_m|| ||w||`.
pub fn single_user_bound(ch: &ChannelSet, occluded: &[bool], link: &LinkParams) -> Result<f64> {
    if ch.num_ues() != 1 || occluded.len() != 1 {
        return Err(invalid("the single-user bound needs exactly one UE"));
    }
    let direct = norm_sq(&apply_blockage(&ch.h_bd[0], occluded[0], link.attenuation_db));
    let n = ch.g_br.cols();
    let amp: f64 = ch.h_rd[0]
        .iter()
        .enumerate()
        .map(|(m, h)| h.norm() * norm_sq(&ch.g_br.as_slice()[m * n..(m + 1) * n]).sqrt())
        .sum();
    Ok((1.0 + link.p_max * direct.max(amp * amp) / link.noise).log2())
}

/// One simulated deployment: arrays, world, frame history.
#[derive(Debug, Clone)]
pub struct Env {
    pub scenario: ScenarioConfig,
    pub bs: ArrayGeometry,
    pub ris: ArrayGeometry,
    pub lambda: f64,
    pub g_br: ComplexMatrix,
    pub link: LinkParams,
    /// `1 / sqrt(mean direct path gain)` over a grid of the UE region.
    pub state_scale: f64,
    pub world: WorldState,
    frames: VecDeque<Vec<f64>>,
    next_frame_time: f64,
}

impl Env {
    pub fn new(cfg: &ControlConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = cfg.system.lambda();
        let bs = cfg.system.bs_array(cfg.scenario.bs())?;
        let ris = cfg.system.ris_array()?;
        let g_br = mimo_channel(&bs, &ris, lambda)?;
        let region = cfg.scenario.region()?;
        let state_scale = 1.0 / mean_path_gain(&region, bs.center, lambda)?.sqrt();
        Ok(Self {
            scenario: cfg.scenario.clone(),
            bs,
            ris,
            lambda,
            g_br,
            link: cfg.link(),
            state_scale,
            world: WorldState::new(region, vec![], vec![], vec![])?,
            frames: VecDeque::new(),
            next_frame_time: 0.0,
        })
    }

    pub fn num_ues(&self) -> usize {
        self.world.ues.len()
    }

    /// Installs `world` and renders the frame history by running it forward
    /// `F - 1` frame periods.
    pub fn reset(&mut self, world: WorldState) -> Result<()> {
        let sc = &self.scenario;
        let dt = sc.frame_dt();
        self.frames.clear();
        let mut w = world;
        for i in 0..sc.frames {
            if i > 0 {
                w = step_world(&w, dt)?;
            }
            let mut buf = vec![0.0; sc.height * sc.width];
            render_frame(&w, sc.height, sc.width, &mut buf);
            self.frames.push_back(buf);
        }
        self.next_frame_time = w.time + dt;
        self.world = w;
        Ok(())
    }

    pub fn reset_random<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let w = WorldState::random(&self.scenario, rng)?;
        self.reset(w)
    }

    /// Moves the world by `dt`, rendering a frame at every camera tick passed.
    pub fn advance(&mut self, dt: f64) -> Result<()> {
        self.world = step_world(&self.world, dt)?;
        let (h, w) = (self.scenario.height, self.scenario.width);
        while self.world.time + 1e-12 >= self.next_frame_time {
            let mut buf = self.frames.pop_front().unwrap_or_else(|| vec![0.0; h * w]);
            render_frame(&self.world, h, w, &mut buf);
            self.frames.push_back(buf);
            self.next_frame_time += self.scenario.frame_dt();
        }
        Ok(())
    }

    /// Frame history, oldest first.
    pub fn frames(&self) -> FrameSequence {
        let sc = &self.scenario;
        let mut seq = FrameSequence::zeros(self.frames.len(), sc.height, sc.width);
        for (i, f) in self.frames.iter().enumerate() {
            seq.frame_mut(i).copy_from_slice(f);
        }
        seq
    }

    pub fn channels(&self) -> Result<ChannelSet> {
        let h_bd = self.world.ues.iter().map(|&u| los_channel(&self.bs, u, self.lambda)).collect::<Result<Vec<_>>>()?;
        let h_rd = self.world.ues.iter().map(|&u| los_channel(&self.ris, u, self.lambda)).collect::<Result<Vec<_>>>()?;
        Ok(ChannelSet { h_bd, h_rd, g_br: self.g_br.clone(), lambda: self.lambda })
    }

    pub fn occlusions(&self) -> Vec<bool> {
        self.world.occlusions(self.bs.center)
    }

    /// Estimated direct channel of every UE from the CSI model.
    pub fn direct_estimates(&self, csi: &CsiTransformer) -> Result<Vec<ComplexVector>> {
        self.world.ues.iter().map(|&u| csi_forward(&geometric_features(&self.bs, u)?, csi)).collect()
    }

    /// Sub-controller view: CSI estimate for direct-mode UEs, the modelled
    /// cascade under `phases` for RIS-mode UEs.
    pub fn sub_state(&self, direct: &[ComplexVector], g: &[u8], phases: &RisPhases) -> Result<SubState> {
        let h_eff = (0..self.num_ues())
            .map(|k| {
                if g[k] == 1 {
                    Ok(direct[k].clone())
                } else {
                    cascade_channel(&los_channel(&self.ris, self.world.ues[k], self.lambda)?, &self.g_br, phases)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubState { h_eff, g: g.to_vec() })
    }
}

fn mean_path_gain(region: &Aabb, bs: Position3, lambda: f64) -> Result<f64> {
    const G: usize = 5;
    let (lo, hi) = (region.min, region.max);
    let at = |a: f64, b: f64, i: usize| a + (b - a) * (i as f64 + 0.5) / G as f64;
    let mut acc = 0.0;
    for i in 0..G {
        for j in 0..G {
            for l in 0..G {
                let p = Position3::new(at(lo.x, hi.x, i), at(lo.y, hi.y, j), at(lo.z, hi.z, l));
                acc += path_loss(p.distance(bs), lambda)?;
            }
        }
    }
    Ok(acc / (G * G * G) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{cascade_gain, matched_filter_oracle};
    use crate::neural::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k1_config() -> ControlConfig {
        let mut c = ControlConfig::default();
        c.scenario.num_ues = 1;
        c.scenario.num_blockers = 0;
        c
    }

    fn world(ues: &[Position3]) -> WorldState {
        let r = ScenarioConfig::default().region().unwrap();
        WorldState::new(r, ues.to_vec(), vec![Position3::ORIGIN; ues.len()], vec![]).unwrap()
    }

    fn hp() -> AcHyper {
        AcHyper { gamma: 0.9, tau: 0.01, actor_lr: 1e-3, critic_lr: 1e-3 }
    }

    fn set_output_bias(ps: &mut ParamStore, ac_layers: &crate::neural::Mlp, v: f64) {
        let last = ac_layers.layers.last().unwrap();
        ps.get_mut(last.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        ps.get_mut(last.b).data_mut().iter_mut().for_each(|x| *x = v);
    }

    #[test]
    fn meta_reward_series() {
        assert_eq!(meta_reward(&[0.0; 10], 0.99), 0.0);
        assert_eq!(meta_reward(&[2.5; 8], 1.0), 20.0);
        let got = meta_reward(&[1.0; 154], 0.99);
        let expect = (1.0 - 0.99f64.powi(154)) / 0.01;
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn meta_act_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ac = ActorCritic::new(8, 2, &[4], OutputActivation::Sigmoid, hp(), &mut rng).unwrap();
        let mut noise = OuNoise::new(2, 0.15, 0.3).unwrap();
        let s = vec![0.3; 8];
        let actor = ac.actor.clone();
        set_output_bias(&mut ac.actor_ps, &actor, 40.0);
        assert_eq!(meta_act(&s, &ac, &mut noise, false, &mut rng).unwrap().0.g, vec![1, 1]);
        set_output_bias(&mut ac.actor_ps, &actor, 0.0);
        let (a, cont) = meta_act(&s, &ac, &mut noise, false, &mut rng).unwrap();
        assert_eq!(cont, vec![0.5, 0.5]);
        assert_eq!(a.g, vec![0, 0]);
    }

    #[test]
    fn exploration_is_seed_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ac = ActorCritic::new(8, 2, &[4], OutputActivation::Sigmoid, hp(), &mut rng).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noise = OuNoise::new(2, 0.15, 0.3).unwrap();
            (0..6).map(|_| meta_act(&[0.1; 8], &ac, &mut noise, true, &mut rng).unwrap().1).collect::<Vec<_>>()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert!(a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn zero_sub_output_gives_zero_precoder() {
        let layout = ActionLayout { antennas: 4, users: 2, ris_elements: 3, mode_bits: false };
        let (a, modes) = decode_sub_action(&vec![0.0; layout.dim()], &layout, 3.0, 3).unwrap();
        assert_eq!(a.w.power(), 0.0);
        assert!(a.phases.angles().iter().all(|&p| p == 0.0));
        assert!(modes.is_none());
        let no_ris = ActionLayout { ris_elements: 0, ..layout };
        assert_eq!(no_ris.dim(), 16);
        assert_eq!(decode_sub_action(&vec![0.5; 16], &no_ris, 3.0, 3).unwrap().0.phases.len(), 3);
    }

    #[test]
    fn zero_precoder_earns_pure_penalty() {
        let cfg = ControlConfig::default();
        let mut env = Env::new(&cfg).unwrap();
        env.reset(world(&[Position3::new(20.0, 3.0, 0.5), Position3::new(40.0, -8.0, 0.5)])).unwrap();
        let ch = env.channels().unwrap();
        let a = SubAction { w: BeamMatrix::zeros(16, 2), phases: RisPhases::zeros(16) };
        let out = env_step(&ch, &[false, false], &a, &[1, 1], &env.link).unwrap();
        assert_eq!(out.reward, -2.0);
        assert!(out.reward <= 0.0);
    }

    #[test]
    fn matched_filter_step_reaches_closed_form() {
        let cfg = k1_config();
        let mut env = Env::new(&cfg).unwrap();
        env.reset(world(&[Position3::new(25.0, 5.0, 0.4)])).unwrap();
        let ch = env.channels().unwrap();
        let (w, se) = matched_filter_oracle(&ch.h_bd[0], env.link.p_max, env.link.noise).unwrap();
        let out = env_step(&ch, &[false], &SubAction { w, phases: RisPhases::zeros(16) }, &[1], &env.link).unwrap();
        assert!((out.reward - se).abs() <= 1e-9 * se);
        assert_eq!(out.shortfall, 0.0);
    }

    #[test]
    fn aligned_ris_step_matches_alignment_oracle() {
        let cfg = k1_config();
        let mut env = Env::new(&cfg).unwrap();
        env.reset(world(&[Position3::new(30.0, -4.0, 0.6)])).unwrap();
        let ch = env.channels().unwrap();
        // beam fixed on the zero-phase cascade; the oracle phases then maximise |h^H Theta G w|
        let eff0 = cascade_channel(&ch.h_rd[0], &ch.g_br, &RisPhases::zeros(16)).unwrap();
        let nrm = norm_sq(&eff0).sqrt();
        let w_unit: Vec<Complex64> = eff0.iter().map(|v| v / nrm).collect();
        let c: Vec<Complex64> = (0..16).map(|m| (0..16).map(|n| ch.g_br[(m, n)] * w_unit[n]).sum()).collect();
        let (phases, gain) = ris_alignment_oracle(&ch.h_rd[0], &c).unwrap();
        assert!((cascade_gain(&ch.h_rd[0], &phases, &c) - gain).abs() <= 1e-9 * gain);
        let p = env.link.p_max;
        let w = BeamMatrix::from_columns(&[w_unit.iter().map(|v| v * p.sqrt()).collect()]).unwrap();
        let out = env_step(&ch, &[true], &SubAction { w, phases }, &[0], &env.link).unwrap();
        let expect = (1.0 + p * gain / env.link.noise).log2();
        assert!((out.report.se[0] - expect).abs() <= 1e-9 * expect);
    }

    #[test]
    fn alternating_alignment_is_monotone_and_bounded() {
        let cfg = k1_config();
        let mut env = Env::new(&cfg).unwrap();
        env.reset(world(&[Position3::new(45.0, 12.0, 0.2)])).unwrap();
        let ch = env.channels().unwrap();
        let mut prev = 0.0;
        for it in 0..6 {
            let (_, g) = align_ris(&ch.h_rd[0], &ch.g_br, it).unwrap();
            assert!(g >= prev * (1.0 - 1e-12));
            prev = g;
        }
        let bound = single_user_bound(&ch, &[true], &env.link).unwrap();
        let (a, _) = oracle_action(&ch, &[true], &env.link).unwrap();
        let (_, g) = oracle_action(&ch, &[true], &env.link).unwrap();
        let se = env_step(&ch, &[true], &a, &g, &env.link).unwrap().report.se[0];
        assert!(se <= bound + 1e-12);
    }

    #[test]
    fn oracle_is_matched_filter_when_unblocked() {
        let cfg = k1_config();
        let mut env = Env::new(&cfg).unwrap();
        env.reset(world(&[Position3::new(12.0, 1.0, 0.5)])).unwrap();
        let ch = env.channels().unwrap();
        let (a, g) = oracle_action(&ch, &[false], &env.link).unwrap();
        assert_eq!(g, vec![1]);
        let (_, se) = matched_filter_oracle(&ch.h_bd[0], env.link.p_max, env.link.noise).unwrap();
        let got = env_step(&ch, &[false], &a, &g, &env.link).unwrap().report.se[0];
        assert!((got - se).abs() <= 1e-9 * se);
        assert!(got <= single_user_bound(&ch, &[false], &env.link).unwrap() + 1e-12);
    }

    #[test]
    fn frame_history_tracks_camera_ticks() {
        let cfg = ControlConfig::default();
        let mut env = Env::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        env.reset_random(&mut rng).unwrap();
        let f0 = env.frames();
        assert_eq!(f0.frames, cfg.scenario.frames);
        env.advance(1e-3).unwrap();
        assert_eq!(env.frames(), f0);
        env.advance(cfg.scenario.frame_dt()).unwrap();
        let f1 = env.frames();
        assert_eq!(f1.frame(0), f0.frame(1));
    }

    #[test]
    fn meta_state_is_normalised() {
        let r = ScenarioConfig::default().region().unwrap();
        let s = MetaState::new(vec![0.2], vec![Position3::new(55.0, -25.0, 0.5)]).unwrap();
        assert_eq!(s.to_vector(&r), vec![0.2, 1.0, -1.0, 0.0]);
        assert!(MetaState::new(vec![1.2], vec![Position3::ORIGIN]).is_err());
    }
}
