//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ternres::cost::{block_stats, capacity, mult_reduction, power_perf_gain, size_reduction_vs_88, throughput_gains};
use ternres::residual::{block_sensitivity, layer_epsilon, DEFAULT_MAX_LEVELS};
use ternres::sim::lemmas::random_trials;
use ternres::sim::{batch_trace, forward_quantized, margin_check, top_gap, Lemma, Margin};
use ternres::store::container::{decode_quantized, encode_quantized};
use ternres::store::{load_quantized, partition_blocks, save_quantized, Tensor};
use ternres::ternary::{level_error, oracle_best_support, ORACLE_MAX_LEN};
use ternres::toy::{exact_ternary_network, gaussian_tensor, random_inputs, toy_network};
use ternres::{
    convert_model, downgrade, make_schedule, reconstruct, ternarize, ternary_residual_sq, LevelBudget, ScheduleSpec,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ternarizer_matches_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(1..=ORACLE_MAX_LEN);
        let w: Vec<f32> = match trial % 4 {
            // small integers produce ties and exact zeros
            0 => (0..n).map(|_| rng.random_range(-3i32..=3) as f32).collect(),
            1 => (0..n).map(|_| (normal(&mut rng).powi(3)) as f32).collect(),
            _ => (0..n).map(|_| normal(&mut rng) as f32).collect(),
        };
        let level = ternarize(&w).map_err(|e| e.to_string())?;
        let (alpha, signs) = oracle_best_support(&w).map_err(|e| e.to_string())?;
        let oracle = ternres::TernaryLevel {
            alpha,
            signs,
            threshold: 0.0,
        };
        let got = level_error(&w, &level).map_err(|e| e.to_string())?;
        let want = level_error(&w, &oracle).map_err(|e| e.to_string())?;
        let norm: f64 = w.iter().map(|&x| f64::from(x).powi(2)).sum();
        let rel = (got - want).abs() / want.max(1e-12 * norm).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || {
            format!("trial {trial}: {w:?} error {got} vs oracle {want}")
        })?;
    }
    Ok(format!("1000 vectors, worst relative gap {worst:.2e}"))
}

fn delta_strictly_decreases() -> Outcome {
    let mut iterations = 0;
    for seed in 0..100u64 {
        let mut w = gaussian_tensor("w", &[4096], 0.05 + seed as f64 * 0.01, seed);
        if seed % 2 == 1 {
            let heavy: Vec<f32> = w.data().iter().map(|x| x * x * x * 400.0).collect();
            w = Tensor::new("w", vec![4096], heavy).map_err(|e| e.to_string())?;
        }
        let conv = ternary_residual_sq(&w, 64, 0.005, DEFAULT_MAX_LEVELS).map_err(|e| e.to_string())?;
        for (i, pair) in conv.deltas.windows(2).enumerate() {
            ensure(pair[1] < pair[0], || {
                format!("seed {seed} iteration {}: {} -> {}", i + 1, pair[0], pair[1])
            })?;
        }
        ensure(conv.layer.delta <= 0.005, || {
            format!("seed {seed} stopped at {}", conv.layer.delta)
        })?;
        iterations += conv.deltas.len() - 1;
    }
    Ok(format!("100 conversions, {iterations} iterations, 0 violations"))
}

fn orthogonality_identities() -> Outcome {
    let mut worst_inner = 0.0f64;
    let mut worst_energy = 0.0f64;
    let mut worst_total = 0.0f64;
    for seed in 0..40u64 {
        let n = 64 + (seed as usize * 97) % 3000;
        let block = [16, 32, 64, 100][seed as usize % 4];
        let w = gaussian_tensor("w", &[n], 1.0, seed);
        let conv = ternary_residual_sq(&w, block, 0.002, DEFAULT_MAX_LEVELS).map_err(|e| e.to_string())?;
        let norm = w.norm_sq();
        let mut total = 0.0;
        for stack in &conv.layer.stacks {
            let b = &stack.block;
            let mut residual: Vec<f64> = w.data()[b.start..b.start + b.len]
                .iter()
                .map(|&x| f64::from(x))
                .collect();
            for level in &stack.levels {
                let before: f64 = residual.iter().map(|r| r * r).sum();
                level.subtract_from(&mut residual);
                let a = f64::from(level.alpha);
                let inner: f64 = level
                    .signs
                    .iter()
                    .zip(&residual)
                    .map(|(&s, r)| a * f64::from(s) * r)
                    .sum();
                let after: f64 = residual.iter().map(|r| r * r).sum();
                worst_inner = worst_inner.max(inner.abs() / norm);
                worst_energy = worst_energy.max((before - level.energy() - after).abs() / norm);
            }
            total += residual.iter().map(|r| r * r).sum::<f64>();
        }
        let stored = conv.layer.delta * norm;
        worst_total = worst_total.max((stored - total).abs() / total.max(f64::MIN_POSITIVE));
    }
    ensure(worst_inner <= 1e-5, || format!("inner product {worst_inner:.2e}·‖w‖²"))?;
    ensure(worst_energy <= 1e-5, || {
        format!("energy split off by {worst_energy:.2e}·‖w‖²")
    })?;
    ensure(worst_total <= 1e-6, || {
        format!("total error off by {worst_total:.2e} relative")
    })?;
    Ok(format!(
        "inner {worst_inner:.1e}, energy {worst_energy:.1e} (×‖w‖²); total {worst_total:.1e} rel"
    ))
}

fn block_sensitivity_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let n = 10 + (seed as usize * 131) % 5000;
        let block = 2 + (seed as usize * 7) % 120;
        let w = gaussian_tensor("w", &[n], 0.3, seed);
        let conv = ternary_residual_sq(&w, block, 0.01 + 0.01 * (seed % 5) as f64, DEFAULT_MAX_LEVELS)
            .map_err(|e| e.to_string())?;
        let rec = reconstruct(&conv.layer);
        let blocks = partition_blocks(&w, block).map_err(|e| e.to_string())?;
        let per_block = block_sensitivity(&w, &rec, &blocks).map_err(|e| e.to_string())?;
        let sum: f64 = per_block.iter().map(|e| e * e).sum();
        let eps = layer_epsilon(&w, &rec).map_err(|e| e.to_string())?;
        let rel = if sum == eps * eps {
            0.0
        } else {
            (sum - eps * eps).abs() / (eps * eps)
        };
        worst = worst.max(rel);
        ensure(rel <= 1e-12, || format!("seed {seed}: {sum} vs {}", eps * eps))?;
    }
    Ok(format!("50 layers, worst relative gap {worst:.1e}"))
}

/// Distinct values of `Σ_t α_t s_t` over every sign choice, per block, then
/// merged across blocks.
fn enumerate_capacity(alphas: &[Vec<f64>]) -> usize {
    let mut values = BTreeSet::new();
    for block in alphas {
        let mut sums = vec![0.0f64];
        for &a in block {
            sums = sums.iter().flat_map(|s| [s - a, *s, s + a]).collect();
        }
        values.extend(sums.into_iter().map(f64::to_bits));
    }
    // +0 and -0 are one value
    values.remove(&(-0.0f64).to_bits());
    values.insert(0.0f64.to_bits());
    values.len()
}

fn block_stats_rows() -> Outcome {
    let rows = [(64, vec![0], (136.0, 3, 1)), (64, vec![1], (272.0, 9, 2))];
    for (n, r, want) in &rows {
        let s = block_stats(*n, r).map_err(|e| e.to_string())?;
        ensure((s.size_bits, s.capacity, s.num_scaling_factors) == *want, || {
            format!("n={n} r={r:?}: {s:?}")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for residuals in [vec![0], vec![1], vec![2], vec![1, 0], vec![1, 1, 2]] {
        for _ in 0..20 {
            let alphas: Vec<Vec<f64>> = residuals
                .iter()
                .map(|&r| (0..=r).map(|_| rng.random_range(0.1..2.0)).collect())
                .collect();
            let counted = enumerate_capacity(&alphas) as u128;
            ensure(counted == capacity(&residuals), || {
                format!("{residuals:?}: enumerated {counted}, formula {}", capacity(&residuals))
            })?;
        }
    }
    Ok("(136, 3, 1), (272, 9, 2); enumeration agrees on 100 generic scale draws".into())
}

fn ratio_reproduction() -> Outcome {
    let (pc, pm) = throughput_gains(5.0, 64.0, 2.4);
    let checks = [
        ("mult_reduction(64, 2.4)", mult_reduction(64.0, 2.4), 26.7),
        ("mult_reduction(64, 2.0)", mult_reduction(64.0, 2.0), 32.0),
        ("size_reduction(64, 2.4)", size_reduction_vs_88(64.0, 2.4), 1.57),
        ("size_reduction(64, 2.0)", size_reduction_vs_88(64.0, 2.0), 1.88),
        ("power_perf(5.5, 2.5, 64)", power_perf_gain(5.5, 2.5, 64.0), 2.03),
        ("power_perf(5.5, 2.2, 64)", power_perf_gain(5.5, 2.2, 64.0), 2.30),
        ("pi_c(5, 64, 2.4)", pc, 1.93),
        ("pi_m(5, 64, 2.4)", pm, 1.64),
    ];
    let mut shown = Vec::new();
    for (label, got, want) in checks {
        ensure((got - want).abs() <= 0.05, || {
            format!("{label} = {got}, expected {want}")
        })?;
        shown.push(format!("{got:.2}"));
    }
    Ok(shown.join(" "))
}

fn decomposed_matches_dense() -> Outcome {
    let mut worst = 0.0f64;
    let mut passes = 0;
    for seed in 0..50u64 {
        let net = toy_network(1000 + seed);
        let eps_sq = [0.2, 0.05, 0.01, 0.002][seed as usize % 4];
        let n = [8, 16, 64, 100][seed as usize % 4];
        let schedule = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: eps_sq }).map_err(|e| e.to_string())?;
        let model = convert_model(&net, n, &schedule, DEFAULT_MAX_LEVELS)
            .map_err(|e| e.to_string())?
            .model;
        for (i, input) in random_inputs(&net, 2, seed).iter().enumerate() {
            let pass = forward_quantized(&net, &model, input, i == 1).map_err(|e| format!("seed {seed}: {e}"))?;
            worst = worst.max(pass.path_gap);
            passes += 1;
        }
    }
    ensure(worst <= 1e-5, || format!("gap {worst:.2e}"))?;
    Ok(format!("50 nets, {passes} passes, worst relative gap {worst:.2e}"))
}

fn zero_noise_identity() -> Outcome {
    let mut layers = 0;
    for seed in 0..5u64 {
        let net = exact_ternary_network(seed, 64);
        let schedule = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.01 }).map_err(|e| e.to_string())?;
        let model = convert_model(&net, 64, &schedule, DEFAULT_MAX_LEVELS)
            .map_err(|e| e.to_string())?
            .model;
        let inputs = random_inputs(&net, 4, seed);
        let entries = batch_trace(&net, &model, &inputs, false).map_err(|e| e.to_string())?;
        for input in &inputs {
            let pass = forward_quantized(&net, &model, input, false).map_err(|e| e.to_string())?;
            for e in &pass.trace.entries {
                ensure(e.delta == 0.0, || {
                    format!("seed {seed} layer {}: delta {}", e.layer, e.delta)
                })?;
            }
        }
        for e in &entries {
            ensure(e.delta == 0.0 && e.epsilon == 0.0, || {
                format!("seed {seed} layer {}: delta {} epsilon {}", e.layer, e.delta, e.epsilon)
            })?;
        }
        layers += entries.len();
    }
    Ok(format!("5 fixtures, {layers} traced layers, all exactly zero"))
}

fn lemma_suite() -> Outcome {
    let report = random_trials(1000, 2024).map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for lemma in [
        Lemma::Relu,
        Lemma::Maxpool,
        Lemma::Avgpool,
        Lemma::Matmul,
        Lemma::Conv,
        Lemma::BnScale,
    ] {
        let c = report.count(lemma);
        ensure(c >= 1000, || format!("{lemma:?} only ran {c} checks"))?;
        counts.push(format!("{lemma:?} {c}"));
    }
    if let Some(v) = report.violations().next() {
        return Err(format!("{} violations, first {v:?}", report.violation_count()));
    }
    Ok(format!("0 violations ({})", counts.join(", ")))
}

fn budget_monotonicity() -> Outcome {
    let net = toy_network(0);
    let inputs = random_inputs(&net, 8, 1);
    let mut rows = Vec::new();
    for eps in [0.3f64, 0.1, 0.03, 0.01] {
        let schedule =
            make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: eps * eps }).map_err(|e| e.to_string())?;
        let model = convert_model(&net, 64, &schedule, DEFAULT_MAX_LEVELS)
            .map_err(|e| e.to_string())?
            .model;
        let trace = batch_trace(&net, &model, &inputs, false).map_err(|e| e.to_string())?;
        rows.push((eps, trace.last().expect("non-empty").delta, model.total_levels()));
    }
    let shown: Vec<String> = rows
        .iter()
        .map(|(e, d, l)| format!("ε={e}: Δ={d:.4e} levels={l}"))
        .collect();
    for pair in rows.windows(2) {
        ensure(pair[1].1 < pair[0].1 && pair[1].2 >= pair[0].2, || shown.join("; "))?;
    }
    Ok(shown.join("; "))
}

fn margin_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut safe, mut boundary) = (0, 0);
    for trial in 0..100_000 {
        let k = rng.random_range(2..=10);
        let y: Vec<f32> = (0..k).map(|_| normal(&mut rng) as f32).collect();
        let (best, gap) = top_gap(&y).map_err(|e| e.to_string())?;
        let delta = gap / std::f64::consts::SQRT_2 * rng.random_range(0.5..1.1);
        if margin_check(&y, delta).map_err(|e| e.to_string())? != Margin::Safe {
            continue;
        }
        safe += 1;
        let mut dir: Vec<f64> = vec![0.0; k];
        if trial % 3 == 0 {
            // the cheapest flip: pull the winner down and the runner-up up
            let rival = (0..k)
                .filter(|&j| j != best)
                .max_by(|&a, &b| y[a].total_cmp(&y[b]))
                .expect("k >= 2");
            dir[best] = -1.0;
            dir[rival] = 1.0;
            boundary += 1;
        } else {
            dir.iter_mut().for_each(|d| *d = normal(&mut rng));
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let radius = if trial % 2 == 0 {
            delta
        } else {
            delta * rng.random::<f64>()
        };
        let y_hat: Vec<f64> = y
            .iter()
            .zip(&dir)
            .map(|(&v, d)| f64::from(v) + d / norm * radius)
            .collect();
        let flipped = (0..k).any(|j| j != best && y_hat[j] >= y_hat[best]);
        ensure(!flipped, || format!("trial {trial}: y {y:?} delta {delta} flipped"))?;
    }
    Ok(format!(
        "100000 draws, {safe} reported safe ({boundary} worst-case directions), 0 flips"
    ))
}

fn roundtrip_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..10u64 {
        let net = toy_network(seed);
        let schedule = make_schedule(
            &net,
            ScheduleSpec::DepthGraded {
                first: 0.005,
                last: 0.06,
            },
        )
        .map_err(|e| e.to_string())?;
        let model = convert_model(&net, [16, 64][seed as usize % 2], &schedule, DEFAULT_MAX_LEVELS)
            .map_err(|e| e.to_string())?
            .model;
        let path = dir.path().join(format!("{seed}.tq"));
        save_quantized(&model, &path).map_err(|e| e.to_string())?;
        let back = load_quantized(&path).map_err(|e| e.to_string())?;
        for (a, b) in model.layers.iter().zip(&back.layers) {
            let same = reconstruct(a)
                .data()
                .iter()
                .zip(reconstruct(b).data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("seed {seed} layer {} reconstruction changed", a.name))?;
        }
        let bytes = encode_quantized(&model).map_err(|e| e.to_string())?;
        let again =
            encode_quantized(&decode_quantized(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(bytes == again, || format!("seed {seed}: re-encoding differs"))?;

        let base = downgrade(&model, LevelBudget::Total(model.base_blocks())).map_err(|e| e.to_string())?;
        let s1 = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 1.0 }).map_err(|e| e.to_string())?;
        let loose = convert_model(&net, model.provenance.block_size, &s1, DEFAULT_MAX_LEVELS)
            .map_err(|e| e.to_string())?
            .model;
        ensure(base.manifest == loose.manifest && base.dense == loose.dense, || {
            format!("seed {seed}: manifests or dense tensors differ")
        })?;
        for (a, b) in base.layers.iter().zip(&loose.layers) {
            ensure(a.stacks == b.stacks && a.shape == b.shape, || {
                format!("seed {seed} layer {}: level stacks differ", a.name)
            })?;
            // downgrade tracks delta incrementally from level energies, which
            // drifts from a direct measurement by f32 rounding of the scales
            ensure((a.delta - b.delta).abs() <= 1e-6 * b.delta.max(1e-300), || {
                format!("seed {seed} layer {}: delta {} vs {}", a.name, a.delta, b.delta)
            })?;
        }
    }
    Ok("10 models bitwise after reload; keep=base matches the ε=1 conversion".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("ternarizer matches exhaustive oracle", ternarizer_matches_oracle),
        ("delta strictly decreases every iteration", delta_strictly_decreases),
        (
            "per-level orthogonality and energy identities",
            orthogonality_identities,
        ),
        ("block sensitivities sum to layer error", block_sensitivity_identity),
        ("size, capacity and scale counts", block_stats_rows),
        ("derived cost ratios", ratio_reproduction),
        ("decomposed inference matches dense", decomposed_matches_dense),
        ("zero-noise fixture traces exactly zero", zero_noise_identity),
        ("per-layer perturbation lemmas", lemma_suite),
        ("tighter budgets give smaller output error", budget_monotonicity),
        ("margin check never misses a flip", margin_soundness),
        ("container round trip and base downgrade", roundtrip_fidelity),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2}: {name} [{secs:.2}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {:>2}: {name} [{secs:.2}s] {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
