//! Acceptance suite. Prints one PASS/FAIL line per check and exits non-zero
//! if any check fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tta_core::adapt::{default_config, run_tta, Method};
use tta_core::harness::{gen_synthetic_dataset, run_experiment, ExperimentConfig, Split, StreamKind};
use tta_core::model::{Backbone, BackboneConfig, Checkpoint};
use tta_core::normalization::{
    ema_update_stats, iabn_correct_stats, instance_stats, soft_shrink, Alpha, ChannelStats, NormKind, NormLayer,
    NormMode,
};
use tta_core::numerics::{
    cross_entropy_with_grad, entropy_with_grad, finite_difference_grad, Layer, Tape, Tensor,
};
use tta_core::rng::derive_rng;
use tta_core::sampler::MemoryBank;
use tta_core::streams::{make_dirichlet_stream, make_iid_stream, StreamSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, l: usize) -> Tensor {
    let scale = rng.random_range(0.1..5.0);
    let shift = rng.random_range(-3.0..3.0);
    let data = (0..b * c * l).map(|_| shift + scale * gaussian(rng)).collect();
    Tensor::new(b, c, l, data).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, channels: usize, alpha: Alpha) -> NormLayer {
    let mut layer = NormLayer::iabn(channels, alpha);
    let stats = ChannelStats {
        mean: (0..channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
        var: (0..channels).map(|_| rng.random_range(0.05..4.0)).collect(),
    };
    layer.set_running(stats).unwrap();
    layer.gamma.value = (0..channels).map(|_| rng.random_range(0.5..2.0)).collect();
    layer.beta.value = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    layer
}

fn limit_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_in = 0.0f64;
    let mut worst_bn = 0.0f64;
    for _ in 0..1000 {
        let (b, c, l) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..17));
        let x = random_tensor(&mut rng, b, c, l);
        let zero = random_layer(&mut rng, c, Alpha::Finite(0.0));
        let mut inf = zero.clone();
        inf.kind = NormKind::InstanceAware { alpha: Alpha::Infinite };
        let inst = instance_stats(&x).unwrap();
        let (y0, _) = zero.forward(&x, NormMode::Eval).unwrap();
        let (yi, _) = inf.forward(&x, NormMode::Eval).unwrap();
        for bi in 0..b {
            for ci in 0..c {
                let (g, be) = (zero.gamma.value[ci], zero.beta.value[ci]);
                let (m, v) = (inst.mean_at(bi, ci), inst.var_at(bi, ci));
                let (rm, rv) = (zero.running.mean[ci], zero.running.var[ci]);
                for li in 0..l {
                    let xv = x.at(bi, ci, li);
                    let want_in = g * (xv - m) / (v + zero.epsilon).sqrt() + be;
                    let want_bn = g * (xv - rm) / (rv + zero.epsilon).sqrt() + be;
                    worst_in = worst_in.max((y0.at(bi, ci, li) - want_in).abs());
                    worst_bn = worst_bn.max((yi.at(bi, ci, li) - want_bn).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_in <= 1e-9 && worst_bn <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("max |IABN(0)-IN| = {worst_in:.2e}, max |IABN(inf)-BN| = {worst_bn:.2e}, {:.2?}", elapsed),
    )
}

fn shrinkage_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..100_000 {
        let x: f64 = rng.random_range(-10.0..10.0);
        let y: f64 = rng.random_range(-10.0..10.0);
        let lam = rng.random_range(0.0..5.0);
        let odd = soft_shrink(-x, lam) == -soft_shrink(x, lam);
        // allow a few ulps for the rounding of the subtractions
        let slack = 4.0 * f64::EPSILON * (x.abs() + y.abs() + lam);
        let lipschitz = (soft_shrink(x, lam) - soft_shrink(y, lam)).abs() <= (x - y).abs() + slack;
        let dead = if x.abs() <= lam { soft_shrink(x, lam) == 0.0 } else { soft_shrink(x, lam).abs() == x.abs() - lam };
        violations += usize::from(!(odd && lipschitz && dead));
    }
    let row = Tensor::new(1, 1, 5, vec![0.0, 0.0, 0.0, 0.0, 10.0]).unwrap();
    let reference = ChannelStats { mean: vec![0.0], var: vec![1.0] };
    let out = iabn_correct_stats(&instance_stats(&row).unwrap(), &reference, Alpha::Finite(4.0), 5).unwrap();
    let worked = (out.mean[0] - 0.21115).abs() < 1e-5 && (out.var[0] - 13.17157).abs() < 1e-5;
    outcome(
        violations == 0 && worked,
        format!("{violations} violations in 1e5 samples; worked example mu={:.5} var={:.5}", out.mean[0], out.var[0]),
    )
}

/// Positions of normalization affine parameters in the flat parameter list.
fn affine_slots(net: &Backbone) -> Vec<usize> {
    let mut slots = Vec::new();
    let mut k = 0;
    for layer in &net.net.layers {
        let n = layer.params().len();
        if matches!(layer, Layer::Norm(_)) {
            slots.extend(k..k + n);
        }
        k += n;
    }
    slots
}

fn gradient_checks() -> Outcome {
    let mut total = 0usize;
    let mut good = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let alpha = [Alpha::Finite(4.0), Alpha::Finite(1.0), Alpha::Finite(0.5)][seed as usize % 3];
        let config = BackboneConfig {
            conv_channels: vec![3, 4],
            input_len: 16,
            classes: 4,
            ..BackboneConfig::default().with_norm(NormKind::InstanceAware { alpha })
        };
        let mut net = Backbone::build(config, seed).unwrap();
        for norm in net.norm_layers_mut() {
            *norm = random_layer(&mut rng, norm.channels(), alpha);
        }
        let x = random_tensor(&mut rng, 4, 1, 16);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
        let slots = affine_slots(&net);
        for mode in [NormMode::Eval, NormMode::TestBatch] {
            for use_entropy in [true, false] {
                let loss = |logits: &Tensor| {
                    if use_entropy {
                        entropy_with_grad(logits).unwrap()
                    } else {
                        cross_entropy_with_grad(logits, &labels).unwrap()
                    }
                };
                let mut tape = Tape::new();
                let mut working = net.clone();
                let logits = working.forward(&x, mode, Some(&mut tape)).unwrap();
                let grads = working.net.backward(&tape, loss(&logits).1).unwrap();
                for &slot in &slots {
                    let analytic = grads.params[slot].as_ref().unwrap();
                    let base = net.net.params()[slot].value.clone();
                    let numeric = finite_difference_grad(
                        |theta| {
                            let mut probe = net.clone();
                            probe.net.params_mut()[slot].value = theta.to_vec();
                            loss(&probe.logits(&x, mode).unwrap()).0
                        },
                        &base,
                        1e-4,
                    );
                    for (a, n) in analytic.iter().zip(&numeric) {
                        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                        total += 1;
                        good += usize::from(rel <= 1e-4 || (a - n).abs() <= 1e-10);
                    }
                }
            }
        }
    }
    let frac = good as f64 / total as f64;
    outcome(frac >= 0.95, format!("{good}/{total} coordinates within 1e-4 relative error ({:.1}%)", 100.0 * frac))
}

fn reservoir_law() -> Outcome {
    const N: usize = 8;
    const T: u64 = 64;
    const SEEDS: u64 = 10_000;
    // chi-square critical value, 63 degrees of freedom, p = 0.001
    const CHI2_CRIT: f64 = 103.44;
    let mut worst = 0.0f64;
    let mut chi2 = [0.0f64; 2];
    for (k, pbrs) in [false, true].into_iter().enumerate() {
        let mut kept_on_offer = vec![0u64; T as usize + 1];
        let mut kept_at_end = vec![0u64; T as usize + 1];
        for seed in 0..SEEDS {
            let mut bank = MemoryBank::new(N, 1, derive_rng(seed, 99));
            for t in 1..=T {
                let stored = if pbrs { bank.pbrs_insert((), 0) } else { bank.rs_insert((), 0) };
                kept_on_offer[t as usize] += u64::from(stored.unwrap().stored());
            }
            for e in bank.entries() {
                kept_at_end[e.offer as usize] += 1;
            }
        }
        for t in N as u64 + 1..=T {
            let p = N as f64 / t as f64;
            let se = (p * (1.0 - p) / SEEDS as f64).sqrt();
            worst = worst.max((kept_on_offer[t as usize] as f64 / SEEDS as f64 - p).abs() / se);
        }
        let p = N as f64 / T as f64;
        let expected = SEEDS as f64 * p;
        chi2[k] = kept_at_end[1..].iter().map(|&o| (o as f64 - expected).powi(2) / (expected * (1.0 - p))).sum();
    }
    outcome(
        worst <= 3.0 && chi2.iter().all(|&c| c < CHI2_CRIT),
        format!(
            "offer t kept with prob N/t: worst deviation {worst:.2} SE; uniformity over items at t=T: chi2 RS {:.1}, PBRS {:.1} (< {CHI2_CRIT})",
            chi2[0], chi2[1]
        ),
    )
}

fn balance_dominance() -> Outcome {
    let labels: Vec<usize> = (0..5000).map(|i| i % 10).collect();
    let mut sums = [0.0f64; 2];
    for seed in 0..20u64 {
        let order = make_dirichlet_stream(&labels, &StreamSpec::uniform(0.1, 10, seed)).unwrap();
        for (k, pbrs) in [(0, true), (1, false)] {
            let mut bank = MemoryBank::new(64, 10, derive_rng(seed, 6));
            let mut acc = 0.0;
            let mut samples = 0;
            for (t, y) in order.labels(&labels).enumerate() {
                if pbrs {
                    bank.pbrs_insert((), y).unwrap();
                } else {
                    bank.rs_insert((), y).unwrap();
                }
                if (t + 1) % 64 == 0 {
                    let counts = bank.class_counts();
                    let mean = counts.iter().sum::<usize>() as f64 / 10.0;
                    acc += (counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / 10.0).sqrt();
                    samples += 1;
                }
            }
            sums[k] += acc / samples as f64 / 20.0;
        }
    }
    outcome(sums[0] < sums[1], format!("mean per-class count std: PBRS {:.3} vs RS {:.3}", sums[0], sums[1]))
}

fn ema_fixed_point() -> Outcome {
    let (v, n) = (2.5, 64usize);
    let target = v * n as f64 / (n as f64 - 1.0);
    let batch = ChannelStats { mean: vec![v], var: vec![v] };
    let mut running = ChannelStats { mean: vec![0.0], var: vec![1.0] };
    let mut steps = 0;
    while steps < 2000 {
        ema_update_stats(&mut running, &batch, 0.01, n).unwrap();
        steps += 1;
        if (running.mean[0] - target).abs() < 1e-6 && (running.var[0] - target).abs() < 1e-6 {
            break;
        }
    }
    let err = (running.mean[0] - target).abs().max((running.var[0] - target).abs());
    outcome(err < 1e-6, format!("|stat - vN/(N-1)| = {err:.2e} after {steps} steps"))
}

fn batch_free_inference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net =
        Backbone::build(BackboneConfig::default().with_norm(NormKind::InstanceAware { alpha: Alpha::Finite(4.0) }), 7)
            .unwrap();
    for norm in net.norm_layers_mut() {
        *norm = random_layer(&mut rng, norm.channels(), Alpha::Finite(4.0));
    }
    let mut mismatches = 0;
    for _ in 0..100 {
        let b = rng.random_range(2..33);
        let x = random_tensor(&mut rng, b, 1, 32);
        let batch = net.predict_batch(&x, NormMode::Eval).unwrap();
        for (i, p) in batch.iter().enumerate() {
            let single = net.predict(&x.sample(i)).unwrap();
            let same = single.class == p.class
                && single.probabilities.iter().zip(&p.probabilities).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatching samples over 100 batches"))
}

fn figure_two_and_ablation(dir: &std::path::Path) -> (Outcome, Outcome) {
    let start = Instant::now();
    let delta = StreamKind::Dirichlet { delta: 0.1 };
    let config = ExperimentConfig {
        methods: vec![Method::BnStats, Method::Note, Method::IabnOnly, Method::PbrsOnly],
        streams: vec![StreamKind::Iid, delta],
        seeds: vec![0, 1, 2],
        output_dir: dir.to_path_buf(),
        ..Default::default()
    };
    let report = run_experiment(&config).unwrap();
    let elapsed = start.elapsed();
    let err = |m, s| report.row(m, s).unwrap().mean_error;
    let bn_iid = err(Method::BnStats, StreamKind::Iid);
    let bn_d = err(Method::BnStats, delta);
    let note_iid = err(Method::Note, StreamKind::Iid);
    let note_d = err(Method::Note, delta);
    let a = bn_d - bn_iid >= 0.05;
    let b = note_d <= bn_d;
    let c = (note_iid - note_d).abs() <= 0.05;
    let fast = elapsed < Duration::from_secs(120);
    let fig = outcome(
        a && b && c && fast,
        format!(
            "(a) BN-stats {:.3} iid vs {:.3} non-iid [{}]; (b) NOTE {:.3} <= BN-stats {:.3} [{}]; (c) NOTE |{:.3}-{:.3}| <= 0.05 [{}]; {:.1?}",
            bn_iid,
            bn_d,
            ok(a),
            note_d,
            bn_d,
            ok(b),
            note_iid,
            note_d,
            ok(c),
            elapsed
        ),
    );
    let iabn = err(Method::IabnOnly, delta);
    let pbrs = err(Method::PbrsOnly, delta);
    let abl = outcome(
        note_d <= iabn + 0.01 && note_d <= pbrs + 0.01,
        format!("non-iid error: IABN+PBRS {note_d:.3}, IABN only {iabn:.3}, PBRS only {pbrs:.3}"),
    );
    (fig, abl)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fails"
    }
}

fn freeze_audit(dir: &std::path::Path) -> Outcome {
    let config = ExperimentConfig::default();
    let ckpt = tta_core::harness::train_checkpoint(&config, true, 0).unwrap();
    let path = dir.join("audit.ckpt");
    ckpt.save(&path).unwrap();
    let source = Checkpoint::load(&path).unwrap().backbone;
    let data = gen_synthetic_dataset(&config.task, Split::Target, 0).unwrap();
    let run = run_tta(Method::Note, &source, &data, &make_iid_stream(data.len(), 0), &default_config(Method::Note), 0)
        .unwrap();
    let mut changed = 0;
    let mut frozen_moved = 0;
    for (before, after) in source.net.layers.iter().zip(&run.backbone.net.layers) {
        for (p, q) in before.params().iter().zip(after.params()) {
            let diff = p.value.iter().zip(&q.value).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            if matches!(before, Layer::Norm(_)) {
                changed += diff;
            } else {
                frozen_moved += diff;
            }
        }
    }
    let expected = 2 * source.norm_channels();
    outcome(
        frozen_moved == 0 && changed == expected,
        format!("{frozen_moved} non-affine weights moved; {changed} affine scalars updated, expected {expected} ({} adapt steps)", run.adaptations),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "limit identities", limit_identities()),
        (2, "soft-shrinkage algebra", shrinkage_algebra()),
        (3, "affine gradient checks", gradient_checks()),
        (4, "reservoir inclusion law", reservoir_law()),
        (5, "PBRS balance dominance", balance_dominance()),
        (6, "EMA fixed point", ema_fixed_point()),
        (7, "batch-free inference", batch_free_inference()),
    ];
    let (fig, abl) = figure_two_and_ablation(dir.path());
    results.push((8, "non-i.i.d. robustness on the shifted task", fig));
    results.push((9, "ablation ordering", abl));
    results.push((10, "parameter-freeze audit", freeze_audit(dir.path())));
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
