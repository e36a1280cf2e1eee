//! Throwaway geometry calibration probe. Not part of the suite; run with
//! `cargo test --release --test calibrate_tmp -- --ignored --nocapture`.

use std::time::Instant;

use distill_core::checkpoint::SavedModel;
use distill_core::data::{
    standardize_pair, Dataset, Split, CANONICAL_NOISE, CANONICAL_TURNS,
};
use distill_core::distill::{run_distillation, DistillConfig, Strategy};
use distill_core::nn::Network;
use distill_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gen(
    per_class: usize,
    r_in: f64,
    r_out: f64,
    angle: f64,
    rng: &mut ChaCha8Rng,
    split: Split,
) -> Dataset {
    let classes = 3;
    let n = classes * per_class;
    let mut x = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let phase = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        for _ in 0..per_class {
            let u: f64 = rng.random();
            let r = r_in + (r_out - r_in) * u;
            let theta = angle * CANONICAL_TURNS * u + phase;
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            x.push(r * theta.cos() + CANONICAL_NOISE * nx);
            x.push(r * theta.sin() + CANONICAL_NOISE * ny);
            labels.push(k);
        }
    }
    Dataset {
        x,
        n,
        d: 2,
        labels,
        classes,
        split,
    }
}

fn task_angle(seed: u64, r_in: f64, r_out: f64, angle: f64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = gen(500, r_in, r_out, angle, &mut rng, Split::Train);
    let mut test = gen(500, r_in, r_out, angle, &mut rng, Split::Test);
    standardize_pair(&mut train, &mut test);
    (train, test)
}

fn task(seed: u64, r_in: f64, r_out: f64) -> (Dataset, Dataset) {
    task_angle(seed, r_in, r_out, 2.0 * std::f64::consts::PI)
}

#[test]
#[ignore]
fn half_turn_check() {
    let reuse = DistillConfig {
        strategy: Strategy::IjckdReuse,
        ..DistillConfig::default()
    };
    let sr_only = DistillConfig {
        strategy: Strategy::IjckdReuse,
        alpha_ce: Some(0.0),
        ..DistillConfig::default()
    };
    let ce = DistillConfig::default();
    let pi = std::f64::consts::PI;
    let geoms = [(0.1, 3.1), (0.1, 3.6), (0.2, 3.2), (0.3, 3.3)];
    for &(r_in, r_out) in &geoms {
        let gap = (r_out - r_in) * (2.0 / 3.0) / CANONICAL_TURNS;
        println!("=== r {r_in}..{r_out} gap {gap:.2} gap/sigma {:.1} ===", gap / CANONICAL_NOISE);
        for seed in 0..4u64 {
            let (train, test) = task_angle(seed, r_in, r_out, pi);
            let (teacher, t_tr, t_te) = train_teacher(seed, &train, &test);
            let lmax = max_abs_logit(&teacher, &train);
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            cfg.lr = 0.03;
            let run = |dcfg: &DistillConfig, t: Option<&Network>| -> f64 {
                match run_distillation(dcfg, &cfg, t, &[2, 8], &train, &test) {
                    Ok(out) => out.final_test_acc().unwrap(),
                    Err(_) => f64::NAN,
                }
            };
            let c = run(&ce, None);
            let s = run(&sr_only, Some(&teacher));
            let r = run(&reuse, Some(&teacher));
            println!(
                "  seed {seed} teacher {t_tr:.3}/{t_te:.3} |o|max {lmax:.1}: ce {c:.3}  sr {s:.3}  reuse {r:.3}"
            );
        }
    }
}

fn train_teacher(seed: u64, train: &Dataset, test: &Dataset) -> (Network, f64, f64) {
    let mut tcfg = TrainConfig::default();
    tcfg.seed = 1000 + seed;
    let dcfg = DistillConfig::default();
    let out = run_distillation(&dcfg, &tcfg, None, &[2, 64, 64], train, test)
        .expect("teacher run");
    let (tr, te) = (out.final_train_acc().unwrap(), out.final_test_acc().unwrap());
    match out.model {
        SavedModel::Network(n) => (n, tr, te),
        _ => unreachable!("ce run saves a plain network"),
    }
}

fn student(
    seed: u64,
    dcfg: &DistillConfig,
    teacher: Option<&Network>,
    train: &Dataset,
    test: &Dataset,
) -> (f64, f64) {
    let mut tcfg = TrainConfig::default();
    tcfg.seed = seed;
    match run_distillation(dcfg, &tcfg, teacher, &[2, 8], train, test) {
        Ok(out) => (out.final_train_acc().unwrap(), out.final_test_acc().unwrap()),
        Err(e) => {
            println!("    DIVERGED: {e}");
            (f64::NAN, f64::NAN)
        }
    }
}

#[test]
#[ignore]
fn lr_sweep() {
    let reuse = DistillConfig {
        strategy: Strategy::IjckdReuse,
        ..DistillConfig::default()
    };
    let sr_only = DistillConfig {
        strategy: Strategy::IjckdReuse,
        alpha_ce: Some(0.0),
        ..DistillConfig::default()
    };
    let ce = DistillConfig::default();
    for seed in 0..4u64 {
        let (train, test) = task(seed, 1.0, 8.0);
        let (teacher, _, t_te) = train_teacher(seed, &train, &test);
        for lr in [0.05, 0.03, 0.02, 0.01] {
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            cfg.lr = lr;
            let run = |dcfg: &DistillConfig, t: Option<&Network>| -> f64 {
                match run_distillation(dcfg, &cfg, t, &[2, 8], &train, &test) {
                    Ok(out) => out.final_test_acc().unwrap(),
                    Err(_) => f64::NAN,
                }
            };
            let c = run(&ce, None);
            let s = run(&sr_only, Some(&teacher));
            let r = run(&reuse, Some(&teacher));
            println!(
                "seed {seed} teacher {t_te:.3} lr {lr}: ce {c:.3}  sr {s:.3}  reuse {r:.3}"
            );
        }
    }
}

#[test]
#[ignore]
fn ten_seed_check() {
    let pi = std::f64::consts::PI;
    let reuse = DistillConfig {
        strategy: Strategy::IjckdReuse,
        ..DistillConfig::default()
    };
    let sr_only = DistillConfig {
        strategy: Strategy::IjckdReuse,
        alpha_ce: Some(0.0),
        ..DistillConfig::default()
    };
    let ce = DistillConfig::default();
    let (r_in, r_out) = (0.5, 3.5);
    let (mut mc, mut ms, mut mr) = (vec![], vec![], vec![]);
    for seed in 0..10u64 {
        let (train, test) = task_angle(seed, r_in, r_out, pi);
        let (teacher, _, t_te) = train_teacher(seed, &train, &test);
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.lr = 0.03;
        cfg.epochs = 100;
        cfg.milestones = vec![60, 80, 90];
        let run = |dcfg: &DistillConfig, t: Option<&Network>| -> f64 {
            match run_distillation(dcfg, &cfg, t, &[2, 8], &train, &test) {
                Ok(out) => out.final_test_acc().unwrap(),
                Err(_) => f64::NAN,
            }
        };
        let c = run(&ce, None);
        let s = run(&sr_only, Some(&teacher));
        let r = run(&reuse, Some(&teacher));
        println!("seed {seed}: teacher {t_te:.3}  ce {c:.3}  sr {s:.3}  reuse {r:.3}");
        mc.push(c);
        ms.push(s);
        mr.push(r);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "MEANS ce {:.4} sr {:.4} reuse {:.4}  margins reuse-ce {:.2} reuse-sr {:.2}",
        mean(&mc),
        mean(&ms),
        mean(&mr),
        100.0 * (mean(&mr) - mean(&mc)),
        100.0 * (mean(&mr) - mean(&ms))
    );
}

#[test]
#[ignore]
fn full_board() {
    let pi = std::f64::consts::PI;
    let mk = |strategy: Strategy| DistillConfig {
        strategy,
        ..DistillConfig::default()
    };
    let mut small: Vec<(&str, DistillConfig)> = vec![
        ("ce", mk(Strategy::CeOnly)),
        ("sr_only", DistillConfig {
            alpha_ce: Some(0.0),
            ..mk(Strategy::IjckdReuse)
        }),
        ("reuse", mk(Strategy::IjckdReuse)),
        ("reuse_fm", DistillConfig {
            beta: Some(1.0),
            ..mk(Strategy::IjckdReuse)
        }),
        ("reuse_d3", DistillConfig {
            connector_depth: 3,
            ..mk(Strategy::IjckdReuse)
        }),
        ("simkd_d1", mk(Strategy::Simkd)),
        ("simkd_d3", DistillConfig {
            connector_depth: 3,
            ..mk(Strategy::Simkd)
        }),
        ("frozen_cls", DistillConfig {
            alpha: Some(0.0),
            ..mk(Strategy::IjckdReuse)
        }),
    ];
    let matched: Vec<(&str, DistillConfig)> = vec![
        ("srrl_m", mk(Strategy::Srrl)),
        ("reuse_m", mk(Strategy::IjckdReuse)),
        ("joint_m", mk(Strategy::IjckdJoint)),
        ("penalty_m", mk(Strategy::IjckdPenalty)),
    ];
    let (r_in, r_out) = (0.5, 3.5);
    let mut accs: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    let mut frob_drop = 0usize;
    for seed in 0..10u64 {
        let (train, test) = task_angle(seed, r_in, r_out, pi);
        let (teacher, _, t_te) = train_teacher(seed, &train, &test);
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.lr = 0.03;
        cfg.epochs = 100;
        cfg.milestones = vec![60, 80, 90];
        let mut line = format!("seed {seed}: teacher {t_te:.3}");
        for (name, dcfg) in small.iter_mut() {
            let a = match run_distillation(dcfg, &cfg, Some(&teacher), &[2, 8], &train, &test) {
                Ok(out) => out.final_test_acc().unwrap(),
                Err(e) => {
                    println!("  {name} DIVERGED: {e}");
                    f64::NAN
                }
            };
            let a = if *name == "ce" {
                match run_distillation(dcfg, &cfg, None, &[2, 8], &train, &test) {
                    Ok(out) => out.final_test_acc().unwrap(),
                    Err(_) => f64::NAN,
                }
            } else {
                a
            };
            line.push_str(&format!("  {name} {a:.3}"));
            accs.entry(name).or_default().push(a);
        }
        let mut mcfg = TrainConfig::default();
        mcfg.seed = seed;
        for (name, dcfg) in matched.iter() {
            match run_distillation(dcfg, &mcfg, Some(&teacher), &[2, 64], &train, &test) {
                Ok(out) => {
                    let a = out.final_test_acc().unwrap();
                    line.push_str(&format!("  {name} {a:.3}"));
                    accs.entry(name).or_default().push(a);
                    if *name == "srrl_m" {
                        let init = Network::init(&[2, 64], 3, seed).expect("init");
                        let f0 = distill_core::bound::frobenius_distance(
                            &teacher.g.w,
                            &init.g.w,
                        )
                        .expect("frob");
                        let f1 = out
                            .metrics
                            .last()
                            .and_then(|m| m.frob_dist)
                            .expect("srrl tracks frob");
                        if f1 < f0 {
                            frob_drop += 1;
                        }
                        let ws = match &out.model {
                            SavedModel::Network(n) => &n.g.w,
                            _ => unreachable!("srrl keeps its own head"),
                        };
                        let dot: f64 = ws
                            .data()
                            .iter()
                            .zip(teacher.g.w.data())
                            .map(|(a, b)| a * b)
                            .sum();
                        let n2 = |t: &distill_core::tensor::Tensor| {
                            t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
                        };
                        line.push_str(&format!(
                            " (frob {f0:.2}->{f1:.2} |Ws| {:.2} |Wt| {:.2} cos {:.2})",
                            n2(ws),
                            n2(&teacher.g.w),
                            dot / (n2(ws) * n2(&teacher.g.w))
                        ));
                    }
                }
                Err(e) => {
                    println!("  {name} DIVERGED: {e}");
                    accs.entry(name).or_default().push(f64::NAN);
                }
            }
        }
        println!("{line}");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("-- means --");
    for (name, v) in &accs {
        println!("{name}: {:.4}", mean(v));
    }
    println!("srrl frob drops: {frob_drop}/10");
    let m = |n: &str| mean(&accs[n]);
    println!("c6 fm-vs-plain: {:+.2}", 100.0 * (m("reuse_fm") - m("reuse")));
    println!("c7 simkd d3-d1: {:+.2}  reuse d3-d1: {:+.2}  reuse-simkd(d1): {:+.2}",
        100.0 * (m("simkd_d3") - m("simkd_d1")),
        100.0 * (m("reuse_d3") - m("reuse")),
        100.0 * (m("reuse") - m("simkd_d1")));
    println!("c8 frozen-vs-own: {:+.2}", 100.0 * (m("frozen_cls") - m("ce")));
    let band = [m("reuse_m"), m("joint_m"), m("penalty_m")];
    let bmax = band.iter().cloned().fold(f64::MIN, f64::max);
    let bmin = band.iter().cloned().fold(f64::MAX, f64::min);
    println!("c10 matched band width: {:.2}", 100.0 * (bmax - bmin));
}

#[test]
#[ignore]
fn diagnose_reuse() {
    let (train, test) = task(2, 0.5, 6.0);
    let mut tcfg = TrainConfig::default();
    tcfg.seed = 1002;
    let dcfg = DistillConfig::default();
    let out = run_distillation(&dcfg, &tcfg, None, &[2, 64, 64], &train, &test)
        .expect("teacher run");
    let teacher = match out.model {
        SavedModel::Network(n) => n,
        _ => unreachable!(),
    };
    let reuse = DistillConfig {
        strategy: Strategy::IjckdReuse,
        ..DistillConfig::default()
    };
    for epochs in [10usize, 20, 30, 36, 39] {
        let mut cfg = TrainConfig::default();
        cfg.seed = 2;
        cfg.epochs = epochs;
        cfg.milestones = vec![];
        match run_distillation(&reuse, &cfg, Some(&teacher), &[2, 8], &train, &test) {
            Err(e) => println!("epochs {epochs}: DIVERGED {e}"),
            Ok(out) => {
                let m = out.metrics.last().expect("metrics");
                let terms: Vec<String> = m
                    .terms
                    .iter()
                    .map(|(k, v)| format!("{k} {v:.4e}"))
                    .collect();
                let routed = match &out.model {
                    SavedModel::Routed(r) => r,
                    _ => unreachable!(),
                };
                for (bi, b) in routed.connector.blocks().iter().enumerate() {
                    let vmin = b.stats.var.iter().cloned().fold(f64::MAX, f64::min);
                    let vmax = b.stats.var.iter().cloned().fold(0.0_f64, f64::max);
                    let gmax = b.gamma.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                    let wmax = b.affine.w.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                    println!(
                        "epochs {epochs} acc {:.3} [{}] block{bi}: var [{vmin:.3e}, {vmax:.3e}] |gamma| {gmax:.2} |w| {wmax:.2}",
                        m.test_acc,
                        terms.join(" ")
                    );
                }
            }
        }
    }
}

fn max_abs_logit(net: &Network, ds: &Dataset) -> f64 {
    let logits = net.logits(&ds.features_tensor()).expect("eval logits");
    logits.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[test]
#[ignore]
fn geometry_sweep() {
    let geoms = [(0.5, 6.0), (1.0, 7.5), (1.0, 8.0), (1.0, 9.0)];
    let reuse = DistillConfig {
        strategy: Strategy::IjckdReuse,
        ..DistillConfig::default()
    };
    let sr_only = DistillConfig {
        strategy: Strategy::IjckdReuse,
        alpha_ce: Some(0.0),
        ..DistillConfig::default()
    };
    let ce = DistillConfig::default();
    for &(r_in, r_out) in &geoms {
        let gap = (r_out - r_in) / (CANONICAL_TURNS * 3.0);
        println!("=== r_in {r_in} r_out {r_out} gap {gap:.2} ===");
        for seed in 0..5u64 {
            let (train, test) = task(seed, r_in, r_out);
            let t0 = Instant::now();
            let (teacher, t_tr, t_te) = train_teacher(seed, &train, &test);
            let lmax = max_abs_logit(&teacher, &train);
            let (c_tr, c_te) = student(seed, &ce, None, &train, &test);
            let (_, s_te) = student(seed, &sr_only, Some(&teacher), &train, &test);
            let (_, r_te) = student(seed, &reuse, Some(&teacher), &train, &test);
            println!(
                "  seed {seed}: teacher {t_tr:.3}/{t_te:.3} |o|max {lmax:.1}  ce {c_tr:.3}/{c_te:.3}  sr {s_te:.3}  reuse {r_te:.3}  ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

#[test]
#[ignore]
fn per_criterion() {
    let pi = std::f64::consts::PI;
    let mk = |strategy: Strategy| DistillConfig {
        strategy,
        ..DistillConfig::default()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut cache = Vec::new();
    for seed in 0..10u64 {
        let (train, test) = task_angle(seed, 0.5, 3.5, pi);
        let (teacher, _, t_te) = train_teacher(seed, &train, &test);
        cache.push((seed, train, test, teacher, t_te));
    }
    println!(
        "teacher mean {:.4}",
        mean(&cache.iter().map(|c| c.4).collect::<Vec<_>>())
    );

    // c6: matched family at the default schedule, fm added on top of ce+sr.
    let t0 = Instant::now();
    let mut plain = Vec::new();
    let mut withfm = Vec::new();
    for (seed, train, test, teacher, _) in &cache {
        let mut cfg = TrainConfig::default();
        cfg.seed = *seed;
        let a = run_distillation(&mk(Strategy::IjckdReuse), &cfg, Some(teacher), &[2, 64], train, test)
            .map(|o| o.final_test_acc().unwrap())
            .unwrap_or(f64::NAN);
        let b = run_distillation(
            &DistillConfig { beta: Some(1.0), ..mk(Strategy::IjckdReuse) },
            &cfg, Some(teacher), &[2, 64], train, test,
        )
        .map(|o| o.final_test_acc().unwrap())
        .unwrap_or(f64::NAN);
        plain.push(a);
        withfm.push(b);
    }
    println!(
        "c6 matched default: ce+sr {:.4}  ce+sr+fm {:.4}  margin {:+.2} ({:.0}s)",
        mean(&plain), mean(&withfm),
        100.0 * (mean(&withfm) - mean(&plain)),
        t0.elapsed().as_secs_f64()
    );

    // c8: both arms at the default schedule on the canonical student.
    let t0 = Instant::now();
    let mut own = Vec::new();
    let mut frozen = Vec::new();
    for (seed, train, test, teacher, _) in &cache {
        let mut cfg = TrainConfig::default();
        cfg.seed = *seed;
        let a = run_distillation(&mk(Strategy::CeOnly), &cfg, None, &[2, 8], train, test)
            .map(|o| o.final_test_acc().unwrap())
            .unwrap_or(f64::NAN);
        let b = run_distillation(
            &DistillConfig { alpha: Some(0.0), ..mk(Strategy::IjckdReuse) },
            &cfg, Some(teacher), &[2, 8], train, test,
        )
        .map(|o| o.final_test_acc().unwrap())
        .unwrap_or(f64::NAN);
        own.push(a);
        frozen.push(b);
    }
    println!(
        "c8 default: own {:.4}  frozen {:.4}  diff {:+.2} ({:.0}s)",
        mean(&own), mean(&frozen),
        100.0 * (mean(&frozen) - mean(&own)),
        t0.elapsed().as_secs_f64()
    );

    // c9: srrl head shrinkage via weight decay.
    let n2 = |t: &distill_core::tensor::Tensor| {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    for wd in [2e-3, 5e-3, 1e-2] {
        let t0 = Instant::now();
        let mut drops = 0;
        let mut accs = Vec::new();
        let mut wss = Vec::new();
        let mut coss = Vec::new();
        for (seed, train, test, teacher, _) in &cache {
            let mut cfg = TrainConfig::default();
            cfg.seed = *seed;
            cfg.weight_decay = wd;
            match run_distillation(&mk(Strategy::Srrl), &cfg, Some(teacher), &[2, 64], train, test) {
                Ok(out) => {
                    accs.push(out.final_test_acc().unwrap());
                    let init = Network::init(&[2, 64], 3, *seed).expect("init");
                    let f0 = distill_core::bound::frobenius_distance(&teacher.g.w, &init.g.w)
                        .expect("frob");
                    let f1 = out.metrics.last().and_then(|m| m.frob_dist).expect("frob trace");
                    if f1 < f0 {
                        drops += 1;
                    }
                    let ws = match &out.model {
                        SavedModel::Network(n) => n.g.w.clone(),
                        _ => unreachable!(),
                    };
                    let dot: f64 = ws.data().iter().zip(teacher.g.w.data()).map(|(a, b)| a * b).sum();
                    wss.push(n2(&ws));
                    coss.push(dot / (n2(&ws) * n2(&teacher.g.w)));
                }
                Err(e) => println!("  srrl wd {wd} seed {seed} DIVERGED: {e}"),
            }
        }
        println!(
            "c9 wd {wd}: drops {drops}/10  acc {:.4}  |Ws| {:.2}  cos {:.2} ({:.0}s)",
            mean(&accs), mean(&wss), mean(&coss),
            t0.elapsed().as_secs_f64()
        );
    }

    // c10: matched triple across schedules; joint must survive every seed.
    let schedules: [(&str, f64, usize, Vec<usize>); 3] = [
        ("lr.03 e200", 0.03, 200, vec![120, 160, 180]),
        ("lr.025 e200", 0.025, 200, vec![120, 160, 180]),
        ("lr.02 e300", 0.02, 300, vec![180, 240, 270]),
    ];
    for (label, lr, epochs, ms) in &schedules {
        let t0 = Instant::now();
        let mut acc: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
        let mut died = 0;
        for (seed, train, test, teacher, _) in &cache {
            let mut cfg = TrainConfig::default();
            cfg.seed = *seed;
            cfg.lr = *lr;
            cfg.epochs = *epochs;
            cfg.milestones = ms.clone();
            for (name, dcfg) in [
                ("reuse", mk(Strategy::IjckdReuse)),
                ("joint", mk(Strategy::IjckdJoint)),
                ("penalty", mk(Strategy::IjckdPenalty)),
            ] {
                match run_distillation(&dcfg, &cfg, Some(teacher), &[2, 64], train, test) {
                    Ok(out) => acc.entry(name).or_default().push(out.final_test_acc().unwrap()),
                    Err(e) => {
                        died += 1;
                        println!("  {label} {name} seed {seed} DIVERGED: {e}");
                        acc.entry(name).or_default().push(f64::NAN);
                    }
                }
            }
        }
        let r = mean(&acc["reuse"]);
        let j = mean(&acc["joint"]);
        let p = mean(&acc["penalty"]);
        let hi = r.max(j).max(p);
        let lo = r.min(j).min(p);
        println!(
            "c10 {label}: reuse {r:.4}  joint {j:.4}  penalty {p:.4}  band {:.2}  died {died} ({:.0}s)",
            100.0 * (hi - lo),
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn c9_arch() {
    let pi = std::f64::consts::PI;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n2 = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    for widths in [vec![2usize, 64, 64], vec![2, 64]] {
        let mut drops = 0;
        let mut accs = Vec::new();
        for seed in 0..10u64 {
            let (train, test) = task_angle(seed, 0.5, 3.5, pi);
            let (teacher, _, _) = train_teacher(seed, &train, &test);
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            let dcfg = DistillConfig {
                strategy: Strategy::Srrl,
                ..DistillConfig::default()
            };
            let out = run_distillation(&dcfg, &cfg, Some(&teacher), &widths, &train, &test)
                .expect("srrl run");
            accs.push(out.final_test_acc().unwrap());
            let init = Network::init(&widths, 3, seed).expect("init");
            let f0 = distill_core::bound::frobenius_distance(&teacher.g.w, &init.g.w)
                .expect("frob");
            let trace: Vec<f64> = out.metrics.iter().filter_map(|m| m.frob_dist).collect();
            let f1 = *trace.last().unwrap();
            if f1 < f0 {
                drops += 1;
            }
            let ws = match &out.model {
                SavedModel::Network(n) => n.g.w.clone(),
                _ => unreachable!(),
            };
            let dot: f64 = ws.data().iter().zip(teacher.g.w.data()).map(|(a, b)| a * b).sum();
            let cos = dot / (n2(ws.data()) * n2(teacher.g.w.data()));
            println!(
                "  {widths:?} seed {seed}: frob {f0:.2} -> {f1:.2} (first rec {:.2}, min {:.2})  |Ws| {:.2}  cos {cos:.2}",
                trace.first().unwrap(),
                trace.iter().cloned().fold(f64::MAX, f64::min),
                n2(ws.data()),
            );
        }
        println!("{widths:?}: drops {drops}/10  acc {:.4}", mean(&accs));
    }
}

#[test]
#[ignore]
fn c10_long() {
    let pi = std::f64::consts::PI;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mk = |strategy: Strategy| DistillConfig {
        strategy,
        ..DistillConfig::default()
    };
    let mut acc: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for seed in 0..10u64 {
        let (train, test) = task_angle(seed, 0.5, 3.5, pi);
        let (teacher, _, _) = train_teacher(seed, &train, &test);
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.lr = 0.02;
        cfg.epochs = 400;
        cfg.milestones = vec![240, 320, 360];
        for (name, dcfg) in [
            ("reuse", mk(Strategy::IjckdReuse)),
            ("joint", mk(Strategy::IjckdJoint)),
            ("penalty", mk(Strategy::IjckdPenalty)),
        ] {
            match run_distillation(&dcfg, &cfg, Some(&teacher), &[2, 64], &train, &test) {
                Ok(out) => acc.entry(name).or_default().push(out.final_test_acc().unwrap()),
                Err(e) => {
                    println!("  {name} seed {seed} DIVERGED: {e}");
                    acc.entry(name).or_default().push(f64::NAN);
                }
            }
        }
    }
    let r = mean(&acc["reuse"]);
    let j = mean(&acc["joint"]);
    let p = mean(&acc["penalty"]);
    println!(
        "c10 lr.02 e400: reuse {r:.4}  joint {j:.4}  penalty {p:.4}  band {:.2}",
        100.0 * (r.max(j).max(p) - r.min(j).min(p))
    );
}

#[test]
#[ignore]
fn c9_sched() {
    let pi = std::f64::consts::PI;
    use distill_core::tensor::Tensor;
    let n2 = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let schedules: [(&str, f64, usize, Vec<usize>); 3] = [
        ("default", 0.05, 200, vec![120, 160, 180]),
        ("early-ms", 0.05, 200, vec![60, 100, 140]),
        ("long", 0.05, 300, vec![100, 180, 240]),
    ];
    for (label, lr, epochs, ms) in &schedules {
        let mut drop_init = 0;
        let mut drop_first = 0;
        let mut coss = Vec::new();
        let mut corrs = Vec::new();
        for seed in 0..10u64 {
            let (train, test) = task_angle(seed, 0.5, 3.5, pi);
            let (teacher, _, _) = train_teacher(seed, &train, &test);
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            cfg.lr = *lr;
            cfg.epochs = *epochs;
            cfg.milestones = ms.clone();
            let dcfg = DistillConfig {
                strategy: Strategy::Srrl,
                ..DistillConfig::default()
            };
            let out = run_distillation(&dcfg, &cfg, Some(&teacher), &[2, 64, 64], &train, &test)
                .expect("srrl run");
            let student = match &out.model {
                SavedModel::Network(n) => n,
                _ => unreachable!(),
            };
            let init = Network::init(&[2, 64, 64], 3, seed).expect("init");
            let f0 = distill_core::bound::frobenius_distance(&teacher.g.w, &init.g.w)
                .expect("frob");
            let trace: Vec<f64> = out.metrics.iter().filter_map(|m| m.frob_dist).collect();
            let f1 = *trace.last().unwrap();
            if f1 < f0 {
                drop_init += 1;
            }
            if f1 < trace[0] {
                drop_first += 1;
            }
            let ws = &student.g.w;
            let dot: f64 = ws.data().iter().zip(teacher.g.w.data()).map(|(a, b)| a * b).sum();
            coss.push(dot / (n2(ws.data()) * n2(teacher.g.w.data())));
            // per-unit feature correlation on test inputs
            let x = Tensor::new(vec![test.n, 2], test.x.clone()).expect("x");
            let fs = student.features(&x).expect("fs");
            let ft = teacher.features(&x).expect("ft");
            let n = test.n as f64;
            let h = 64usize;
            let mut cs = Vec::with_capacity(h);
            for j in 0..h {
                let (mut ms_, mut mt, mut vs_, mut vt, mut cv) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..test.n {
                    ms_ += fs.data()[i * h + j];
                    mt += ft.data()[i * h + j];
                }
                ms_ /= n;
                mt /= n;
                for i in 0..test.n {
                    let a = fs.data()[i * h + j] - ms_;
                    let b = ft.data()[i * h + j] - mt;
                    vs_ += a * a;
                    vt += b * b;
                    cv += a * b;
                }
                if vs_ > 1e-12 && vt > 1e-12 {
                    cs.push(cv / (vs_.sqrt() * vt.sqrt()));
                }
            }
            corrs.push(cs.iter().sum::<f64>() / cs.len().max(1) as f64);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{label}: drop-vs-init {drop_init}/10  drop-vs-first {drop_first}/10  cos {:.2}  unit-corr {:.2}",
            mean(&coss), mean(&corrs)
        );
    }
}

#[test]
#[ignore]
fn c9_matrix() {
    let pi = std::f64::consts::PI;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (bs, wd) in [(64usize, 5e-4), (32, 5e-4), (64, 1e-3), (32, 1e-3)] {
        let mut drop_first = 0;
        let mut drop_init = 0;
        let mut accs = Vec::new();
        let mut fails = String::new();
        for seed in 0..10u64 {
            let (train, test) = task_angle(seed, 0.5, 3.5, pi);
            let (teacher, _, _) = train_teacher(seed, &train, &test);
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            cfg.batch_size = bs;
            cfg.weight_decay = wd;
            let dcfg = DistillConfig {
                strategy: Strategy::Srrl,
                ..DistillConfig::default()
            };
            let out = run_distillation(&dcfg, &cfg, Some(&teacher), &[2, 64, 64], &train, &test)
                .expect("srrl run");
            accs.push(out.final_test_acc().unwrap());
            let init = Network::init(&[2, 64, 64], 3, seed).expect("init");
            let f0 = distill_core::bound::frobenius_distance(&teacher.g.w, &init.g.w)
                .expect("frob");
            let trace: Vec<f64> = out.metrics.iter().filter_map(|m| m.frob_dist).collect();
            let f1 = *trace.last().unwrap();
            if f1 < trace[0] {
                drop_first += 1;
            } else {
                fails.push_str(&format!(
                    " s{seed}[{:.2}->{:.2} pk{:.2}@{}]",
                    trace[0], f1,
                    trace.iter().cloned().fold(f64::MIN, f64::max),
                    trace.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0,
                ));
            }
            if f1 < f0 {
                drop_init += 1;
            }
        }
        println!(
            "bs {bs} wd {wd}: drop-first {drop_first}/10  drop-init {drop_init}/10  acc {:.4}  fails:{fails}",
            mean(&accs)
        );
    }
}

#[test]
#[ignore]
fn baked_matches_probe() {
    let pi = std::f64::consts::PI;
    for seed in [0u64, 7] {
        let (a_tr, a_te) = distill_core::data::canonical_task(seed);
        let (b_tr, b_te) = task_angle(seed, 0.5, 3.5, pi);
        assert_eq!(a_tr.x, b_tr.x, "train mismatch seed {seed}");
        assert_eq!(a_te.x, b_te.x, "test mismatch seed {seed}");
        assert_eq!(a_tr.labels, b_tr.labels);
    }
    println!("canonical_task reproduces the probe task bitwise");
}
