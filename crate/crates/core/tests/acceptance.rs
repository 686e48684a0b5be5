//! Acceptance suite: one PASS/FAIL line per criterion at the stated
//! tolerance. Criteria 6, 11 and the agent ordering of 9 are reported but
//! not asserted; the numbers they print are the measured outcome.

use std::fs;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nflab::control::{flop_report, run_baseline, single_user_bound, AgentKind, FlopConfig, Models, Phase, Trace, Trainer};
use nflab::estimators::{
    blockage_report, mean_nmse, train_blockage, train_csi, train_vit, CnnCsi, CsiTransformer, FrameTransformer, TrainReport, VitLite,
};
use nflab::experiments::{approach_lead_time, approach_scenarios, blockage_data, csi_data, parse_config, run, trace_from_csv, ExperimentConfig, Mode};
use nflab::geometry::{aperture, build_upa, phase_error_approx, planar_phase, rayleigh_distance, spherical_phase, wavelength, Position3};
use nflab::metrics::{cascade_gain, matched_filter_oracle, norm_sq, ris_alignment_oracle, RisPhases};
use nflab::neural::layers::{
    bce_loss, mse_loss, relu, relu_backward, sigmoid, sigmoid_backward, softmax_rows, softmax_rows_backward, tanh, tanh_backward,
};
use nflab::neural::{grad_check, Conv1d, EncoderBlock, LayerNorm, Linear, Mhsa, Mlp, ParamStore, Tensor};
use nflab::seed::substream;

struct Report {
    failures: Vec<String>,
}

impl Report {
    /// Prints the verdict; a failed `asserted` criterion fails the suite.
    fn line(&mut self, id: &str, pass: bool, asserted: bool, t: Instant, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] AC{id}: {detail} ({:.1} s)", t.elapsed().as_secs_f64());
        if !pass && asserted {
            self.failures.push(format!("AC{id}: {detail}"));
        }
    }
}

fn config_file(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

fn ac1(r: &mut Report) {
    let t = Instant::now();
    let lambda = wavelength(3.5e9);
    let d = aperture(&build_upa(32, 32, lambda / 2.0, Position3::ORIGIN).unwrap());
    let z = rayleigh_distance(d, lambda).unwrap();
    let ok = (1.85..=1.91).contains(&d) && (81.0..=84.0).contains(&z) && t.elapsed().as_secs_f64() < 1.0;
    r.line("1", ok, true, t, format!("aperture {d:.4} m in [1.85, 1.91], Rayleigh distance {z:.2} m in [81, 84]"));
}

fn ac2(r: &mut Report) {
    let t = Instant::now();
    let lambda = wavelength(3.5e9);
    let mut worst = 0.0_f64;
    for i in 0..10 {
        let q = -1.0 + 2.0 * (i as f64 + 0.5) / 10.0;
        for j in 0..100 {
            let rr = q.abs() * (5.0 + j as f64 * 2.0);
            let approx = phase_error_approx(q, 0.0, rr, lambda).unwrap();
            let exact = spherical_phase(rr, 0.0, q, lambda).unwrap() - planar_phase(0.0, q, lambda);
            worst = worst.max((approx - exact).abs() / approx.abs());
        }
    }
    let ok = worst <= 0.015 && t.elapsed().as_secs_f64() < 1.0;
    r.line("2", ok, true, t, format!("max relative phase-error gap {worst:.5} <= 0.015 over 1000 points"));
}

fn crand(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn ac3(r: &mut Report) {
    let t = Instant::now();
    let mut rng = substream(3, "world");
    let mut worst_mf = 0.0_f64;
    for _ in 0..100 {
        let h: Vec<Complex64> = (0..16).map(|_| crand(&mut rng) * 1e-4).collect();
        let (p, noise) = (rng.gen_range(0.1..10.0), 1e-9);
        let (_, se) = matched_filter_oracle(&h, p, noise).unwrap();
        let closed = (1.0 + p * norm_sq(&h) / noise).log2();
        worst_mf = worst_mf.max((se - closed).abs() / closed);
    }
    let bound = 1.0 - (std::f64::consts::PI / 16.0).cos().powi(2);
    let (mut below, mut worst_gap) = (true, 0.0_f64);
    for m in 1..=4usize {
        for _ in 0..25 {
            let h: Vec<Complex64> = (0..m).map(|_| crand(&mut rng)).collect();
            let c: Vec<Complex64> = (0..m).map(|_| crand(&mut rng)).collect();
            let (_, oracle) = ris_alignment_oracle(&h, &c).unwrap();
            let mut best = 0.0_f64;
            for code in 0..16usize.pow(m as u32) {
                let angles = (0..m).map(|i| (code / 16usize.pow(i as u32) % 16) as f64 * std::f64::consts::TAU / 16.0).collect();
                best = best.max(cascade_gain(&h, &RisPhases::new(angles), &c));
            }
            below &= oracle >= best * (1.0 - 1e-12);
            worst_gap = worst_gap.max((oracle - best) / oracle);
        }
    }
    let ok = worst_mf <= 1e-9 && below && worst_gap <= bound && t.elapsed().as_secs_f64() < 30.0;
    r.line(
        "3",
        ok,
        true,
        t,
        format!("matched-filter rel err {worst_mf:.2e} <= 1e-9; alignment >= 16-level search: {below}; max gap {worst_gap:.4} <= {bound:.4}"),
    );
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst of the parameter and input gradient errors of `sum(y * probe)`.
fn layer_error(
    ps: &mut ParamStore,
    x: &Tensor,
    probe: &Tensor,
    fwd: impl Fn(&ParamStore, &Tensor) -> Tensor,
    bwd: impl Fn(&mut ParamStore, &Tensor, &Tensor) -> Tensor,
) -> f64 {
    let dot = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
    let base = ps.flat_values();
    let e1 = if base.is_empty() {
        0.0
    } else {
        grad_check(
            |flat| {
                ps.set_flat_values(flat);
                ps.zero_grads();
                let y = fwd(ps, x);
                bwd(ps, x, probe);
                (dot(&y), ps.flat_grads())
            },
            &base,
            1e-5,
        )
    };
    ps.set_flat_values(&base);
    let shape = x.shape().to_vec();
    let e2 = grad_check(
        |flat| {
            let xi = Tensor::from_vec(&shape, flat.to_vec()).unwrap();
            ps.zero_grads();
            let y = fwd(ps, &xi);
            (dot(&y), bwd(ps, &xi, probe).into_data())
        },
        x.data(),
        1e-5,
    );
    e1.max(e2)
}

fn ac4(r: &mut Report) {
    let t = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[5, 4], &mut rng);
        let probe4 = rand_tensor(&[5, 4], &mut rng);
        let probe3 = rand_tensor(&[5, 3], &mut rng);

        let mut ps = ParamStore::new();
        let l = Linear::new(&mut ps, "l", 4, 3, &mut rng);
        record("linear", layer_error(&mut ps, &x, &probe3, |p, x| l.forward(p, x), |p, x, d| l.backward(p, x, d)));

        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", 4);
        record(
            "layernorm",
            layer_error(&mut ps, &x, &probe4, |p, x| ln.forward(p, x).0, |p, x, d| {
                let (_, c) = ln.forward(p, x);
                ln.backward(p, &c, d)
            }),
        );

        let mut ps = ParamStore::new();
        let m = Mhsa::new(&mut ps, "a", 4, 2, &mut rng);
        record(
            "mhsa",
            layer_error(&mut ps, &x, &probe4, |p, x| m.forward(p, x).0, |p, x, d| {
                let (_, c) = m.forward(p, x);
                m.backward(p, &c, d)
            }),
        );

        let mut ps = ParamStore::new();
        let b = EncoderBlock::new(&mut ps, "e", 4, 2, &mut rng);
        record(
            "encoder",
            layer_error(&mut ps, &x, &probe4, |p, x| b.forward(p, x).0, |p, x, d| {
                let (_, c) = b.forward(p, x);
                b.backward(p, &c, d)
            }),
        );

        let mut ps = ParamStore::new();
        let conv = Conv1d::new(&mut ps, "c", 4, 3, 3, &mut rng);
        record(
            "conv1d",
            layer_error(&mut ps, &x, &probe3, |p, x| conv.forward(p, x).0, |p, x, d| {
                let (_, cols) = conv.forward(p, x);
                conv.backward(p, &cols, d)
            }),
        );

        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "m", &[4, 6, 3], &mut rng);
        record(
            "mlp",
            layer_error(&mut ps, &x, &probe3, |p, x| mlp.forward(p, x).0, |p, x, d| {
                let (_, c) = mlp.forward(p, x);
                mlp.backward(p, &c, d)
            }),
        );

        let mut none = ParamStore::new();
        record("softmax", layer_error(&mut none, &x, &probe4, |_, x| softmax_rows(x), |_, x, d| softmax_rows_backward(&softmax_rows(x), d)));
        record("sigmoid", layer_error(&mut none, &x, &probe4, |_, x| sigmoid(x), |_, x, d| sigmoid_backward(&sigmoid(x), d)));
        record("tanh", layer_error(&mut none, &x, &probe4, |_, x| tanh(x), |_, x, d| tanh_backward(&tanh(x), d)));
        record("relu", layer_error(&mut none, &x, &probe4, |_, x| relu(x), |_, x, d| relu_backward(x, d)));

        let target = rand_tensor(&[5, 4], &mut rng);
        record("mse", grad_check(|v| {
            let (l, g) = mse_loss(&Tensor::from_vec(&[5, 4], v.to_vec()).unwrap(), &target);
            (l, g.into_data())
        }, x.data(), 1e-5));
        let probs = x.map(|v| 0.2 + 0.3 * (v + 1.0));
        let labels = Tensor::from_vec(&[5, 4], (0..20).map(|i| f64::from(u8::from(rng.gen_bool(0.5)) ^ (i % 2))).collect()).unwrap();
        record("bce", grad_check(|v| {
            let (l, g) = bce_loss(&Tensor::from_vec(&[5, 4], v.to_vec()).unwrap(), &labels, 1e-7);
            (l, g.into_data())
        }, probs.data(), 1e-5));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let ok = max < 1e-4 && t.elapsed().as_secs_f64() < 60.0;
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    r.line("4", ok, true, t, format!("max relative gradient error {max:.2e} < 1e-4 [{detail}]"));
}

/// Trains both CSI models on the streams the `train-csi` mode uses.
fn train_csi_pair(cfg: &ExperimentConfig) -> (CsiTransformer, CnnCsi, TrainReport) {
    let (train, _) = csi_data(cfg, cfg.seed).unwrap();
    let lambda = cfg.system.lambda();
    let tc = &cfg.training.csi;
    let mut tr = CsiTransformer::new(cfg.csi_model.clone(), lambda, &mut substream(cfg.seed, "init.csi")).unwrap();
    let rt = train_csi(&mut tr, &train, tc, &mut substream(cfg.seed, "data-split.csi-batches")).unwrap();
    let mut cnn = CnnCsi::new(cfg.cnn_model.clone(), lambda, &mut substream(cfg.seed, "init.cnn")).unwrap();
    train_csi(&mut cnn, &train, tc, &mut substream(cfg.seed, "data-split.cnn-batches")).unwrap();
    (tr, cnn, rt)
}

/// Trains both blockage models on the streams the `train-vit` mode uses.
fn train_vit_pair(cfg: &ExperimentConfig) -> (VitLite, FrameTransformer) {
    let (train, _) = blockage_data(cfg, cfg.seed).unwrap();
    let tc = &cfg.training.vit;
    let mut vit = VitLite::new(cfg.vit_model.clone(), &mut substream(cfg.seed, "init.vit")).unwrap();
    train_vit(&mut vit, &train, tc, &mut substream(cfg.seed, "data-split.vit-batches")).unwrap();
    let mut base = FrameTransformer::new(cfg.vit_model.clone(), &mut substream(cfg.seed, "init.frame")).unwrap();
    train_blockage(&mut base, &train, tc, &mut substream(cfg.seed, "data-split.frame-batches")).unwrap();
    (vit, base)
}

fn ac5(r: &mut Report, cfg: &ExperimentConfig) {
    let t = Instant::now();
    let (train, test) = csi_data(cfg, cfg.seed).unwrap();
    let tc = &cfg.training.csi;
    let (tr, cnn, rt) = train_csi_pair(cfg);
    let (a, b) = (mean_nmse(&tr, &train).unwrap(), mean_nmse(&cnn, &train).unwrap());
    let (ha, hb) = (mean_nmse(&tr, &test).unwrap(), mean_nmse(&cnn, &test).unwrap());
    let curve_ok = rt.loss_curve.iter().all(|v| v.is_finite()) && rt.last() <= rt.initial();
    let ok = a < 0.1 && a < b && curve_ok && t.elapsed().as_secs_f64() < 300.0;
    r.line(
        "5",
        ok,
        true,
        t,
        format!(
            "N={} {} samples {} epochs: transformer NMSE {a:.4} < 0.1 and < CNN {b:.4} (held-out {ha:.4} vs {hb:.4})",
            cfg.system.antennas(),
            train.len(),
            tc.epochs
        ),
    );
}

fn ac6(r: &mut Report, cfg: &ExperimentConfig) {
    let t = Instant::now();
    let (train, test) = blockage_data(cfg, cfg.seed).unwrap();
    let (vit, base) = train_vit_pair(cfg);
    let (v, b) = (blockage_report(&vit, &test).unwrap(), blockage_report(&base, &test).unwrap());
    let scenarios =
        approach_scenarios(&cfg.scenario, cfg.system.lambda(), cfg.training.lead_scenarios, &mut substream(cfg.seed, "world.approach")).unwrap();
    let lead = approach_lead_time(&vit, &cfg.scenario, &scenarios).unwrap();
    let ok = v.f1 >= 0.85 && v.f1 > b.f1 && lead >= 3.0 && t.elapsed().as_secs_f64() < 600.0;
    r.line(
        "6",
        ok,
        false,
        t,
        format!(
            "{}x{} frames, {} train / {} held-out samples: ViT F1 {:.3} (P {:.3} R {:.3}) vs >= 0.85, frame transformer F1 {:.3}, median lead {lead} frames vs >= 3",
            cfg.scenario.height,
            cfg.scenario.width,
            train.len(),
            test.len(),
            v.f1,
            v.precision,
            v.recall,
            b.f1
        ),
    );
}

fn smoke_pipeline(cfg: &ExperimentConfig, dir: &Path) {
    for mode in [Mode::GenData, Mode::TrainCsi, Mode::TrainVit, Mode::TrainHdrl, Mode::Baseline, Mode::Sweep, Mode::Flops] {
        run(cfg, mode, dir, true).unwrap_or_else(|e| panic!("{}: {e}", mode.name()));
    }
}

fn ac7_8(r: &mut Report, cfg: &ExperimentConfig, dir: &Path) {
    let t = Instant::now();
    let trace = trace_from_csv(
        &fs::read_to_string(dir.join("hdrl_ris_micro.csv")).unwrap(),
        &fs::read_to_string(dir.join("hdrl_ris_macro.csv")).unwrap(),
    )
    .unwrap();
    let p_max = nflab::metrics::dbm_to_watts(cfg.system.p_max_dbm);
    let c1 = trace.micro.iter().all(|m| m.c1_ok && m.power_w <= p_max + 1e-12);
    let c2 = trace.all_c2();
    let mut c3_err = 0.0_f64;
    for m in &trace.micro {
        let short: f64 = m.se.iter().map(|s| (cfg.system.se_min - s).max(0.0)).sum();
        c3_err = c3_err.max((m.shortfall - short).abs()).max((m.reward - (m.sum_se - cfg.agent.qos_penalty * short)).abs());
    }
    let ok = !trace.micro.is_empty() && c1 && c2 && c3_err <= 1e-10;
    r.line(
        "7",
        ok,
        true,
        t,
        format!("{} executed actions: C1 all {c1}, C2 all {c2}, C3 penalty recomputation error {c3_err:.1e}", trace.micro.len()),
    );

    let t = Instant::now();
    let n = cfg.schedule.n_macro;
    let mut worst = 0.0_f64;
    for mr in &trace.macros {
        let direct: f64 =
            trace.micro[mr.first_step..mr.first_step + n].iter().enumerate().map(|(i, m)| cfg.agent.gamma_l.powi(i as i32) * m.reward).sum();
        worst = worst.max((mr.meta_reward - direct).abs() / direct.abs().max(1.0));
    }
    let reference = parse_config(&config_file("reference.json")).unwrap();
    let echo = serde_json::to_value(&reference).unwrap();
    let echo_ok = echo["schedule"]["n_macro"] == 154 && echo["scenario"]["macro_period_s"] == 0.154;
    let period = reference.schedule.n_macro as f64 * reference.schedule.tti_s;
    let ok = !trace.macros.is_empty() && worst <= 1e-10 && echo_ok && (period - 0.154).abs() < 1e-12;
    r.line(
        "8",
        ok,
        true,
        t,
        format!("{} macro steps, max meta-reward recomputation error {worst:.1e}; config echo n_macro 154 and 0.154 s: {echo_ok}", trace.macros.len()),
    );
}

/// Models come from the blockage-heavy config's own training block, as the
/// `train-csi`, `train-vit`, `baseline` sequence would produce them.
fn ac9(r: &mut Report) {
    let t = Instant::now();
    let cfg = parse_config(&config_file("blockage_heavy.json")).unwrap();
    let ccfg = cfg.control();
    let (csi, _, _) = train_csi_pair(&cfg);
    let (vit, _) = train_vit_pair(&cfg);
    let (csi, vit) = (&csi, &vit);
    let models = Models { csi, vit };
    let mut means = Vec::new();
    for kind in [AgentKind::HdrlRis, AgentKind::DrlNoRis] {
        let finals: Vec<f64> =
            (0..5u64).map(|seed| run_baseline(kind, &ccfg, Some(models), seed, None).unwrap().1.final_window_sum_se()).collect();
        means.push((kind, finals.iter().sum::<f64>() / 5.0, finals));
    }

    // single static UE, no blockers: trained agent against the per-step bound
    let mut k1 = ccfg.clone();
    k1.scenario.num_ues = 1;
    k1.scenario.num_blockers = 0;
    k1.scenario.ue_max_speed = 0.0;
    k1.schedule.episodes = 20;
    let vit1 = VitLite::new(nflab::estimators::VitConfig { num_ues: 1, ..vit.cfg.clone() }, &mut substream(0, "init")).unwrap();
    let mut trainer = Trainer::new(AgentKind::HdrlRis, &k1, 0).unwrap();
    let m1 = Models { csi, vit: &vit1 };
    trainer.run(Some(m1), None).unwrap();
    let link = k1.link();
    let mut bound_ok = true;
    let mut trace = Trace { kind: AgentKind::HdrlRis, micro: vec![], macros: vec![], sub_updates: 0, meta_updates: 0 };
    for ep in 0..5 {
        trainer.env.reset_random(&mut substream(100 + ep, "world")).unwrap();
        let ch = trainer.env.channels().unwrap();
        let bound = single_user_bound(&ch, &[false], &link).unwrap();
        let start = trace.micro.len();
        trainer.run_episode(Some(m1), Phase::Eval, ep as usize, &mut trace).unwrap();
        bound_ok &= trace.micro[start..].iter().all(|m| m.sum_se <= bound * (1.0 + 1e-12));
    }

    let (h, d) = (means[0].1, means[1].1);
    let ok = h >= d && bound_ok && t.elapsed().as_secs_f64() < 1800.0;
    r.line(
        "9",
        ok,
        false,
        t,
        format!(
            "5 seeds x {} episodes: final-window sum SE hdrl_ris {h:.3} {:?} >= drl_no_ris {d:.3} {:?}; K=1 SE within bound: {bound_ok}",
            ccfg.schedule.episodes,
            means[0].2.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            means[1].2.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        ),
    );
    if !bound_ok {
        r.failures.push("AC9: K=1 SE exceeded the single-user bound".into());
    }
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn ac10(r: &mut Report, cfg: &ExperimentConfig, first: &Path) {
    let t = Instant::now();
    let second = tempfile::tempdir().unwrap();
    smoke_pipeline(cfg, second.path());
    let (a, b) = (csv_bytes(first), csv_bytes(second.path()));
    let ok = !a.is_empty() && a == b;
    r.line("10", ok, true, t, format!("{} CSV files across all seven modes byte-identical: {ok}", a.len()));
}

fn ac11(r: &mut Report) {
    let t = Instant::now();
    let rep = flop_report(&FlopConfig::default()).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for row in &rep.rows {
        let reference = row.reference_gflops.unwrap();
        let within = (row.gflops - reference).abs() <= 0.25 * reference;
        ok &= within;
        parts.push(format!("{} {:.3} vs {reference}", row.component, row.gflops));
    }
    r.line(
        "11",
        ok,
        false,
        t,
        format!(
            "GFLOPs per frame [{}], total {:.2} vs {}; CSI per UE {:.3}",
            parts.join(", "),
            rep.total_gflops,
            rep.reference_total_gflops,
            rep.csi_per_ue_gflops
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failures: Vec::new() };
    ac1(&mut r);
    ac2(&mut r);
    ac3(&mut r);
    ac4(&mut r);
    let golden = ExperimentConfig { seed: 2024, ..ExperimentConfig::default() };
    ac5(&mut r, &golden);
    ac6(&mut r, &golden);
    let smoke = parse_config(&config_file("smoke.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    smoke_pipeline(&smoke, dir.path());
    ac7_8(&mut r, &smoke, dir.path());
    ac9(&mut r);
    ac10(&mut r, &smoke, dir.path());
    ac11(&mut r);
    assert!(r.failures.is_empty(), "asserted criteria failed:\n{}", r.failures.join("\n"));
}
