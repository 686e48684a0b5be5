//! Episode driver shared by the hierarchical agents, the flat baselines and
//! the closed-form oracle.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ddpg_update, env_step, meta_act, meta_reward, oracle_action, sub_act, AcHyper, ActionLayout, ActorCritic, ControlConfig, Env, Level,
    MetaState, OuNoise, OutputActivation, ReplayBuffer, SubState, Transition,
};
use crate::error::{invalid, Error, Result};
use crate::estimators::{vit_forward, CsiTransformer, VitLite};
use crate::metrics::RisPhases;
use crate::seed::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    DrlNoRis,
    DrlRis,
    HdrlNoRis,
    HdrlRis,
    Oracle,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] = [Self::DrlNoRis, Self::DrlRis, Self::HdrlNoRis, Self::HdrlRis, Self::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::DrlNoRis => "drl_no_ris",
            Self::DrlRis => "drl_ris",
            Self::HdrlNoRis => "hdrl_no_ris",
            Self::HdrlRis => "hdrl_ris",
            Self::Oracle => "oracle",
        }
    }

    pub fn hierarchical(self) -> bool {
        matches!(self, Self::HdrlNoRis | Self::HdrlRis)
    }

    pub fn uses_ris(self) -> bool {
        matches!(self, Self::DrlRis | Self::HdrlRis | Self::Oracle)
    }

    pub fn learns(self) -> bool {
        self != Self::Oracle
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown agent kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

/// One executed TTI.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroRecord {
    pub phase: Phase,
    pub episode: usize,
    pub macro_index: usize,
    pub tau: usize,
    /// Run-wide micro-step counter.
    pub step: usize,
    pub reward: f64,
    pub shortfall: f64,
    pub sum_se: f64,
    pub se: Vec<f64>,
    pub power_w: f64,
    pub g: Vec<u8>,
    pub occluded: Vec<bool>,
    /// `||W||_F^2 <= p_max + 1e-12`.
    pub c1_ok: bool,
    /// Every phase finite, in `[0, 2 pi)`, with coefficient modulus 1.
    pub c2_ok: bool,
}

/// One macro-step; `meta_reward` discounts the micro rewards of steps
/// `first_step .. first_step + n_macro`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroRecord {
    pub phase: Phase,
    pub episode: usize,
    pub macro_index: usize,
    pub first_step: usize,
    pub g: Vec<u8>,
    pub p_hat: Vec<f64>,
    pub meta_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub kind: AgentKind,
    pub micro: Vec<MicroRecord>,
    pub macros: Vec<MacroRecord>,
    pub sub_updates: usize,
    pub meta_updates: usize,
}

impl Trace {
    fn new(kind: AgentKind) -> Self {
        Self { kind, micro: Vec::new(), macros: Vec::new(), sub_updates: 0, meta_updates: 0 }
    }

    fn episode_means(&self, phase: Phase, f: impl Fn(&MicroRecord) -> f64) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        let mut last = None;
        for r in self.micro.iter().filter(|r| r.phase == phase) {
            if last != Some(r.episode) {
                out.push((0.0, 0));
                last = Some(r.episode);
            }
            let e = out.last_mut().expect("pushed above");
            e.0 += f(r);
            e.1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n as f64).collect()
    }

    pub fn episode_rewards(&self, phase: Phase) -> Vec<f64> {
        self.episode_means(phase, |r| r.reward)
    }

    pub fn episode_sum_se(&self, phase: Phase) -> Vec<f64> {
        self.episode_means(phase, |r| r.sum_se)
    }

    /// Mean per-step sum SE over the evaluation episodes, or over the last
    /// tenth of training episodes when there are none.
    pub fn final_window_sum_se(&self) -> f64 {
        let eval = self.episode_sum_se(Phase::Eval);
        let v = if eval.is_empty() {
            let tr = self.episode_sum_se(Phase::Train);
            let w = (tr.len() / 10).max(1).min(tr.len());
            tr[tr.len() - w..].to_vec()
        } else {
            eval
        };
        if v.is_empty() {
            return f64::NAN;
        }
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Whether the moving average (window = a fifth of the episodes) of the
    /// per-episode training reward ends at least where it starts.
    pub fn reward_trend_nondecreasing(&self) -> bool {
        let r = self.episode_rewards(Phase::Train);
        if r.len() < 2 {
            return true;
        }
        let w = (r.len() / 5).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&r[r.len() - w..]) >= mean(&r[..w])
    }

    pub fn all_c1(&self) -> bool {
        self.micro.iter().all(|r| r.c1_ok)
    }

    pub fn all_c2(&self) -> bool {
        self.micro.iter().all(|r| r.c2_ok)
    }
}

/// Trained phase-1 estimators consumed by the learning agents.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub csi: &'a CsiTransformer,
    pub vit: &'a VitLite,
}

#[derive(Debug)]
pub struct Trainer {
    pub kind: AgentKind,
    pub cfg: ControlConfig,
    pub env: Env,
    pub meta: Option<ActorCritic>,
    pub sub: Option<ActorCritic>,
    pub meta_buffer: ReplayBuffer,
    pub sub_buffer: ReplayBuffer,
    pub layout: ActionLayout,
    meta_noise: OuNoise,
    sub_noise: OuNoise,
    world_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    micro_count: usize,
    step: usize,
}

impl Trainer {
    /// Networks draw from the `init` substream, worlds from `world`, noise and
    /// replay sampling from `exploration`.
    pub fn new(kind: AgentKind, cfg: &ControlConfig, seed: u64) -> Result<Self> {
        let env = Env::new(cfg)?;
        let (n, k, m) = (cfg.system.antennas(), cfg.scenario.num_ues, cfg.system.ris_elements());
        let layout = ActionLayout {
            antennas: n,
            users: k,
            ris_elements: if matches!(kind, AgentKind::HdrlRis | AgentKind::DrlRis) { m } else { 0 },
            mode_bits: kind == AgentKind::DrlRis,
        };
        let a = &cfg.agent;
        let mut init = substream(seed, "init");
        let hp = |gamma| AcHyper { gamma, tau: a.tau, actor_lr: a.actor_lr, critic_lr: a.critic_lr };
        let meta = if kind.hierarchical() {
            Some(ActorCritic::new(MetaState::dim(k), k, &a.hidden, OutputActivation::Sigmoid, hp(a.gamma_h), &mut init)?)
        } else {
            None
        };
        let sub = if kind.learns() {
            Some(ActorCritic::new(2 * n * k + k, layout.dim(), &a.hidden, OutputActivation::Tanh, hp(a.gamma_l), &mut init)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            cfg: cfg.clone(),
            env,
            meta,
            sub,
            meta_buffer: ReplayBuffer::new(a.meta_buffer)?,
            sub_buffer: ReplayBuffer::new(a.sub_buffer)?,
            layout,
            meta_noise: OuNoise::new(k, a.theta_ou, a.sigma_o)?,
            sub_noise: OuNoise::new(layout.dim(), a.theta_ou, a.sigma_o)?,
            world_rng: substream(seed, "world"),
            explore_rng: substream(seed, "exploration"),
            micro_count: 0,
            step: 0,
        })
    }

    fn check_models(&self, models: Option<Models<'_>>) -> Result<()> {
        if !self.kind.learns() {
            return Ok(());
        }
        let m = models.ok_or_else(|| Error::MissingPrerequisite(format!("{} needs trained CSI and blockage models", self.kind)))?;
        let (sc, n) = (&self.cfg.scenario, self.cfg.system.antennas());
        if m.csi.cfg.tokens != n {
            return Err(invalid(format!("CSI model expects {} antennas, system has {n}", m.csi.cfg.tokens)));
        }
        let v = &m.vit.cfg;
        if v.num_ues != sc.num_ues || v.channels != sc.frames || v.height != sc.height || v.width != sc.width {
            return Err(invalid("blockage model input or output shape does not match the scenario"));
        }
        Ok(())
    }

    /// Trains for the configured episodes, then runs the evaluation episodes.
    /// On divergence the networks are written to `dump_dir` before the error
    /// is returned.
    pub fn run(&mut self, models: Option<Models<'_>>, dump_dir: Option<&Path>) -> Result<Trace> {
        self.check_models(models)?;
        let mut trace = Trace::new(self.kind);
        let s = &self.cfg.schedule;
        let plan: Vec<(Phase, usize)> = (0..s.episodes)
            .map(|e| (Phase::Train, e))
            .chain((0..s.eval_episodes).map(|e| (Phase::Eval, e)))
            .collect();
        for (phase, ep) in plan {
            self.env.reset_random(&mut self.world_rng)?;
            let res = self.run_episode(models, phase, ep, &mut trace);
            if let Err(e) = res {
                if let (Error::Diverged(_), Some(dir)) = (&e, dump_dir) {
                    self.dump_checkpoints(dir)?;
                }
                return Err(e);
            }
        }
        Ok(trace)
    }

    /// Runs one episode on the world currently installed in `self.env`.
    pub fn run_episode(&mut self, models: Option<Models<'_>>, phase: Phase, episode: usize, trace: &mut Trace) -> Result<()> {
        self.check_models(models)?;
        let explore = phase == Phase::Train && self.kind.learns();
        let (k, m) = (self.cfg.scenario.num_ues, self.cfg.system.ris_elements());
        let sched = self.cfg.schedule.clone();
        let agent = self.cfg.agent.clone();
        let link = self.env.link;
        self.meta_noise.reset();
        self.sub_noise.reset();
        let mut phases = RisPhases::zeros(m);
        let mut p_hat = self.predict(models)?;
        let mut meta_s = self.meta_vector(&p_hat)?;
        let ones = vec![1u8; k];
        for t in 0..sched.t_macro {
            let (g_exec, meta_cont) = match (&self.meta, self.kind) {
                (Some(meta), kind) => {
                    let (a, cont) = meta_act(&meta_s, meta, &mut self.meta_noise, explore, &mut self.explore_rng)?;
                    (if kind.uses_ris() { a.g } else { ones.clone() }, Some(cont))
                }
                (None, _) => (ones.clone(), None),
            };
            let first_step = self.step;
            let mut rewards = Vec::with_capacity(sched.n_macro);
            let mut macro_g = None;
            let mut state = self.sub_input(models, &g_exec, &phases, &p_hat)?;
            for tau in 0..sched.n_macro {
                let ch = self.env.channels()?;
                let occ = self.env.occlusions();
                let (action, raw, g) = match (&self.sub, &state) {
                    (Some(sub), Some(s)) => {
                        let (a, raw, modes) =
                            sub_act(s, sub, &mut self.sub_noise, explore, &self.layout, link.p_max, m, &mut self.explore_rng)?;
                        (a, Some(raw), modes.unwrap_or_else(|| g_exec.clone()))
                    }
                    _ => {
                        let (a, g) = oracle_action(&ch, &occ, &link)?;
                        (a, None, g)
                    }
                };
                let out = env_step(&ch, &occ, &action, &g, &link)?;
                if !out.reward.is_finite() {
                    return Err(Error::Diverged(format!("non-finite reward at step {}", self.step)));
                }
                let power = action.w.power();
                trace.micro.push(MicroRecord {
                    phase,
                    episode,
                    macro_index: t,
                    tau,
                    step: self.step,
                    reward: out.reward,
                    shortfall: out.shortfall,
                    sum_se: out.report.sum_se,
                    se: out.report.se.clone(),
                    power_w: power,
                    g: g.clone(),
                    occluded: occ,
                    c1_ok: power <= link.p_max + 1e-12,
                    c2_ok: unit_modulus(&action.phases),
                });
                rewards.push(out.reward);
                macro_g.get_or_insert_with(|| g.clone());
                phases = action.phases;
                self.env.advance(sched.tti_s)?;
                self.step += 1;
                let done = t + 1 == sched.t_macro && tau + 1 == sched.n_macro;
                if let (Some(raw), Some(s)) = (raw, state.take()) {
                    let next = self.sub_input(models, &g_exec, &phases, &p_hat)?.expect("learning agents have a state");
                    if explore {
                        let level = if self.kind.hierarchical() { Level::Sub } else { Level::Flat };
                        self.sub_buffer.push(Transition {
                            level,
                            state: s,
                            action: raw,
                            reward: out.reward * agent.reward_scale,
                            next_state: next.clone(),
                            done,
                        })?;
                        self.micro_count += 1;
                        if self.micro_count % agent.update_every == 0 {
                            let sub = self.sub.as_mut().expect("learning agent");
                            if ddpg_update(&self.sub_buffer, sub, agent.batch_size, &mut self.explore_rng)?.performed {
                                trace.sub_updates += 1;
                            }
                        }
                    }
                    state = Some(next);
                }
            }
            let r_meta = meta_reward(&rewards, agent.gamma_l);
            let next_p = self.predict(models)?;
            let next_meta_s = self.meta_vector(&next_p)?;
            if let (Some(cont), true) = (meta_cont, explore) {
                self.meta_buffer.push(Transition {
                    level: Level::Meta,
                    state: meta_s,
                    action: cont,
                    reward: r_meta * agent.reward_scale,
                    next_state: next_meta_s.clone(),
                    done: t + 1 == sched.t_macro,
                })?;
                let meta = self.meta.as_mut().expect("hierarchical agent");
                if ddpg_update(&self.meta_buffer, meta, agent.meta_batch_size, &mut self.explore_rng)?.performed {
                    trace.meta_updates += 1;
                }
            }
            trace.macros.push(MacroRecord {
                phase,
                episode,
                macro_index: t,
                first_step,
                g: macro_g.unwrap_or_default(),
                p_hat,
                meta_reward: r_meta,
            });
            p_hat = next_p;
            meta_s = next_meta_s;
        }
        Ok(())
    }

    fn predict(&self, models: Option<Models<'_>>) -> Result<Vec<f64>> {
        match models {
            Some(m) if self.kind.learns() => Ok(vit_forward(&self.env.frames(), m.vit)?.into_iter().map(|p| p.clamp(0.0, 1.0)).collect()),
            _ => Ok(Vec::new()),
        }
    }

    fn meta_vector(&self, p_hat: &[f64]) -> Result<Vec<f64>> {
        if !self.kind.hierarchical() {
            return Ok(Vec::new());
        }
        Ok(MetaState::new(p_hat.to_vec(), self.env.world.ues.clone())?.to_vector(&self.env.world.region))
    }

    /// Flattened sub-controller input; `None` for the oracle.
    fn sub_input(&self, models: Option<Models<'_>>, g: &[u8], phases: &RisPhases, p_hat: &[f64]) -> Result<Option<Vec<f64>>> {
        let m = match models {
            Some(m) if self.kind.learns() => m,
            _ => return Ok(None),
        };
        let direct = self.env.direct_estimates(m.csi)?;
        let scale = self.env.state_scale;
        if self.kind.hierarchical() {
            Ok(Some(self.env.sub_state(&direct, g, phases)?.to_vector(scale)))
        } else {
            let mut v = SubState { h_eff: direct, g: Vec::new() }.to_vector(scale);
            v.extend_from_slice(p_hat);
            Ok(Some(v))
        }
    }

    /// Writes every network store under `dir`.
    pub fn dump_checkpoints(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        if let Some(m) = &self.meta {
            out.extend(m.write_checkpoints(dir, &format!("{}.meta", self.kind))?);
        }
        if let Some(s) = &self.sub {
            out.extend(s.write_checkpoints(dir, &format!("{}.sub", self.kind))?);
        }
        Ok(out)
    }
}

fn unit_modulus(p: &RisPhases) -> bool {
    p.angles().iter().all(|a| a.is_finite() && (0.0..std::f64::consts::TAU).contains(a))
        && p.coefficients().all(|c| (c.norm() - 1.0).abs() <= 1e-15)
}

/// Hierarchical agent with RIS.
pub fn train_hdrl(cfg: &ControlConfig, models: Models<'_>, seed: u64, dump_dir: Option<&Path>) -> Result<(Trainer, Trace)> {
    run_baseline(AgentKind::HdrlRis, cfg, Some(models), seed, dump_dir)
}

pub fn run_baseline(
    kind: AgentKind,
    cfg: &ControlConfig,
    models: Option<Models<'_>>,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<(Trainer, Trace)> {
    let mut t = Trainer::new(kind, cfg, seed)?;
    let trace = t.run(models, dump_dir)?;
    Ok((t, trace))
}
