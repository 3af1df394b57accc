//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any hard criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use mupax::eval::{
    deletion_faithfulness, mass_share, run_two_class_eval, DeletionOrder, TwoClassEvalConfig,
    TwoClassTask,
};
use mupax::models::ModelError;
use mupax::oracle::{self, convergence_slope, crosscheck, OracleResult};
use mupax::sampler::Engine;
use mupax::{
    build_grid, explain, ChunkGrid, ExplainConfig, InputTensor, LossValue, PlantedModel,
    PlantedModelSpec, Predictor, SamplerConfig,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    x: Arc<InputTensor>,
    grid: Arc<ChunkGrid>,
    model: PlantedModel,
}

impl Instance {
    fn relevant_offsets(&self) -> Vec<usize> {
        self.model.spec().relevant_offsets().to_vec()
    }
}

/// Random planted instance with exactly `m` chunks, rank 1 or 2, ragged
/// boundary chunks allowed.
fn planted(rng: &mut ChaCha8Rng, m: usize) -> Instance {
    let counts: Vec<usize> = if rng.random_bool(0.5) {
        vec![m]
    } else {
        let divisors: Vec<usize> = (1..=m).filter(|d| m.is_multiple_of(*d)).collect();
        let a = divisors[rng.random_range(0..divisors.len())];
        vec![a, m / a]
    };
    let chunk: Vec<usize> = counts.iter().map(|_| rng.random_range(1..=3)).collect();
    let shape: Vec<usize> = counts
        .iter()
        .zip(&chunk)
        .map(|(&n, &c)| if n == 1 { c } else { (n - 1) * c + rng.random_range(1..=c) })
        .collect();
    let grid = build_grid(&shape, &chunk).unwrap();
    assert_eq!(grid.m(), m);
    let volume: usize = shape.iter().product();
    let values = (0..volume).map(|_| rng.random_range(0.05f32..1.0)).collect();
    let x = InputTensor::new(shape, values).unwrap();

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let n_rel = rng.random_range(1..=(m / 3).max(1));
    let n_noise = rng.random_range(0..=2.min(m - n_rel));
    let relevant = order[..n_rel].to_vec();
    let noise = order[n_rel..n_rel + n_noise].to_vec();
    let epsilon = if n_noise > 0 { rng.random_range(0.0..0.3) } else { 0.0 };
    let spec = PlantedModelSpec::new(grid.clone(), x.clone(), relevant, noise, epsilon).unwrap();
    Instance {
        x: Arc::new(x),
        grid: Arc::new(grid),
        model: PlantedModel::new(spec),
    }
}

fn oracle_at(inst: &Instance, w: f64) -> OracleResult {
    let engine = Engine::new(1, &inst.model).unwrap();
    oracle::enumerate(&inst.x, &inst.grid, &inst.model, w, &engine).unwrap()
}

fn config(n_target: usize, seed: u64) -> ExplainConfig {
    ExplainConfig::new(SamplerConfig::new(n_target, seed))
}

struct Outcome {
    pass: bool,
    soft: bool,
    detail: String,
}

fn hard(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        soft: false,
        detail,
    }
}

/// chi = X·A·G at every coordinate, recomputed from the oracle's parts.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(3..=12);
        let inst = planted(&mut rng, m);
        let all = oracle_at(&inst, f64::INFINITY);
        let mut mus: Vec<f64> = all.masks.iter().map(|e| e.mu).collect();
        mus.sort_by(f64::total_cmp);
        let w = mus[mus.len() * 3 / 10];
        let r = oracle_at(&inst, w);
        let xv = inst.x.values();
        for (o, &chi) in r.chi.iter().enumerate() {
            let j = inst.grid.chunk_of_offset(o);
            let expect = match r.goodness[j] {
                Some(g) => xv[o] as f64 * r.retention[j] * g,
                None => 0.0,
            };
            worst = worst.max((chi - expect).abs());
        }
    }
    let elapsed = started.elapsed();
    hard(
        worst <= 1e-12 && elapsed < Duration::from_secs(10),
        format!("oracle identity on 20 instances: max |chi - X*A*G| = {worst:.2e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut ok = true;
    let mut lines = Vec::new();
    for i in 0..3 {
        let inst = planted(&mut rng, 8);
        let started = Instant::now();
        let e = explain(
            &inst.model,
            inst.x.clone(),
            inst.grid.clone(),
            &config(50_000, 7 + i).with_workers(4),
        )
        .unwrap();
        let elapsed = started.elapsed();
        let exact = oracle_at(&inst, e.threshold.w).to_saliency();
        let rep = crosscheck(&exact, &e.map, 4.0).unwrap();
        let pass = rep.mean_abs_error <= 3.0 * rep.mean_se
            && rep.coverage >= 0.99
            && elapsed < Duration::from_secs(30);
        ok &= pass;
        lines.push(format!(
            "mae {:.2e} vs 3*se {:.2e}, within 4se {:.1}%, {elapsed:.2?}",
            rep.mean_abs_error,
            3.0 * rep.mean_se,
            100.0 * rep.coverage
        ));
    }
    hard(ok, format!("n=50000, m=8: {}", lines.join("; ")))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let inst = planted(&mut rng, 8);
    let w = explain(&inst.model, inst.x.clone(), inst.grid.clone(), &config(100, 1))
        .unwrap()
        .threshold
        .w;
    let exact = oracle_at(&inst, w);
    let mut points = Vec::new();
    for n in [100usize, 1_000, 10_000, 100_000] {
        let mut sq = 0.0;
        let seeds = 4;
        for seed in 0..seeds {
            let cfg = config(n, 1000 + seed).with_threshold(w);
            let e = explain(&inst.model, inst.x.clone(), inst.grid.clone(), &cfg).unwrap();
            sq += e
                .map
                .chi
                .iter()
                .zip(&exact.chi)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / exact.chi.len() as f64;
        }
        points.push((n as f64, (sq / seeds as f64).sqrt()));
    }
    let slope = convergence_slope(&points).unwrap();
    hard(
        (-0.6..=-0.4).contains(&slope),
        format!("log-log RMSE slope {slope:.3} over n=1e2..1e5"),
    )
}

fn criterion_4() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        any::<u64>(),
        3usize..10,
        20usize..120,
        prop_oneof![Just(None), (0.0f64..1.0).prop_map(Some), Just(Some(f64::INFINITY))],
        5.0f64..95.0,
    );
    let result = runner.run(&strategy, |(seed, m, n, threshold, pct)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = planted(&mut rng, m);
        let mut cfg = config(n, seed);
        cfg.sampler.n_calibration = 40;
        cfg.sampler.percentile_w = pct;
        cfg.threshold = threshold;
        let e = match explain(&inst.model, inst.x.clone(), inst.grid.clone(), &cfg) {
            Ok(e) => e,
            Err(mupax::Error::Sampler(mupax::sampler::SamplerError::BudgetExhausted(_))) => {
                return Ok(())
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for (&chi, &x) in e.map.chi.iter().zip(inst.x.values()) {
            prop_assert!(chi >= 0.0 && chi <= x as f64, "chi {chi} outside [0, {x}]");
        }
        Ok(())
    });
    hard(
        result.is_ok(),
        match result {
            Ok(()) => "0 <= chi <= X over 1000 random runs".into(),
            Err(e) => format!("boundedness failed: {e}"),
        },
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ok = true;
    let mut checked = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for i in 0..12 {
        let m = rng.random_range(4..=10);
        let inst = planted(&mut rng, m);
        let mut cfg = config(2000, 50 + i);
        cfg.sampler.percentile_w = [10.0, 30.0, 60.0][i as usize % 3];
        let e = explain(&inst.model, inst.x.clone(), inst.grid.clone(), &cfg).unwrap();
        let p_w = oracle_at(&inst, e.threshold.w).p_w;
        if p_w < 0.05 {
            continue;
        }
        checked += 1;
        let attempted = e.acceptance.attempted as f64;
        let p_hat = e.acceptance.p_hat();
        let by_estimate = (attempted - 2000.0 / p_hat).abs() / attempted;
        let by_exact = (attempted - 2000.0 / p_w).abs() / attempted;
        let z = (p_hat - p_w).abs() / (p_w * (1.0 - p_w) / attempted).sqrt().max(1e-300);
        worst_rel = worst_rel.max(by_estimate.max(by_exact));
        worst_z = worst_z.max(if p_w >= 1.0 { 0.0 } else { z });
        ok &= by_estimate <= 0.10 && by_exact <= 0.10 && (p_w >= 1.0 || z <= 4.0);
    }
    hard(
        ok && checked > 0,
        format!(
            "{checked} runs with p_W >= 0.05: worst |N - n/p| / N = {:.1}%, worst |p_hat - p_W| = {worst_z:.2} SE",
            100.0 * worst_rel
        ),
    )
}

fn criterion_6() -> Outcome {
    let task = Arc::new(TwoClassTask::standard());
    let mut wins = 0;
    let mut full_sum = 0.0;
    let mut masked_sum = 0.0;
    for trial in 0..100u64 {
        let mut sampler = SamplerConfig::new(200, trial);
        sampler.n_calibration = 128;
        let report = run_two_class_eval(
            &task,
            &TwoClassEvalConfig {
                instances: 30,
                dataset_seed: trial,
                explain: ExplainConfig::new(sampler),
                mask_percentile: 50.0,
                repeats: 1,
            },
        )
        .unwrap();
        full_sum += report.full.metrics.macro_f1;
        masked_sum += report.masked.metrics.macro_f1;
        if report.masked.metrics.macro_f1 >= report.full.metrics.macro_f1 {
            wins += 1;
        }
    }
    hard(
        wins >= 90,
        format!(
            "masked macro F1 >= full in {wins}/100 trials (mean {:.3} vs {:.3})",
            masked_sum / 100.0,
            full_sum / 100.0
        ),
    )
}

/// Planted model that burns a fixed amount of CPU per evaluation.
struct Slow {
    inner: PlantedModel,
    cost: Duration,
}

impl Predictor for Slow {
    fn input_shape(&self) -> &[usize] {
        self.inner.input_shape()
    }

    fn description(&self) -> String {
        "slow-planted".into()
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        let out = self.inner.evaluate(batch)?;
        for _ in batch {
            let t = Instant::now();
            while t.elapsed() < self.cost {
                std::hint::spin_loop();
            }
        }
        Ok(out)
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let inst = planted(&mut rng, 10);
    let bytes = |workers: usize| {
        let cfg = config(5_000, 3).with_workers(workers);
        explain(&inst.model, inst.x.clone(), inst.grid.clone(), &cfg)
            .unwrap()
            .map
            .to_mpxs_bytes()
            .unwrap()
    };
    let identical = bytes(1) == bytes(8);

    let slow = Slow {
        inner: inst.model.clone(),
        cost: Duration::from_micros(100),
    };
    let timed = |workers: usize| {
        let cfg = config(50_000, 4).with_workers(workers).with_threshold(f64::INFINITY);
        let t = Instant::now();
        let e = explain(&slow, inst.x.clone(), inst.grid.clone(), &cfg).unwrap();
        (t.elapsed(), e.map.to_mpxs_bytes().unwrap())
    };
    let (t1, b1) = timed(1);
    let (t4, b4) = timed(4);
    let speedup = t1.as_secs_f64() / t4.as_secs_f64();
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let fast_enough = speedup >= 2.0;
    Outcome {
        pass: identical && b1 == b4,
        soft: !fast_enough,
        detail: format!(
            "1 vs 8 workers byte-identical: {identical}; 50000 samples at 100us/eval: {t1:.2?} vs {t4:.2?} at 4 workers, speedup {speedup:.2}x on {cpus} CPU(s){}",
            if fast_enough { "" } else { " (speedup target 2x missed)" }
        ),
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut wins = 0;
    for run in 0..100u64 {
        let m = rng.random_range(6..=16);
        let inst = planted(&mut rng, m);
        let e = explain(&inst.model, inst.x.clone(), inst.grid.clone(), &config(300, run)).unwrap();
        let f = [0.05, 0.1, 0.2, 0.4];
        let top = deletion_faithfulness(&e.map, &inst.grid, &inst.x, &inst.model, &f, DeletionOrder::MostSalientFirst)
            .unwrap();
        let bottom =
            deletion_faithfulness(&e.map, &inst.grid, &inst.x, &inst.model, &f, DeletionOrder::LeastSalientFirst)
                .unwrap();
        let area = |curve: &[mupax::eval::DeletionPoint]| curve.iter().map(|p| p.mu).sum::<f64>();
        if area(&top) >= area(&bottom) {
            wins += 1;
        }
    }
    hard(
        wins >= 95,
        format!("deletion curve over fractions 0.05..0.4: top-ranked first raises mu at least as much as bottom-ranked first in {wins}/100 runs"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut drops = 0;
    let mut shares = Vec::new();
    let runs = 10;
    for i in 0..runs {
        let inst = planted(&mut rng, 12);
        let offsets = inst.relevant_offsets();
        let share = |pct: f64| {
            let mut cfg = config(3000, 90 + i);
            cfg.sampler.percentile_w = pct;
            let e = explain(&inst.model, inst.x.clone(), inst.grid.clone(), &cfg).unwrap();
            mass_share(&e.map, &offsets)
        };
        let (strict, loose) = (share(20.0), share(50.0));
        if loose < strict {
            drops += 1;
        }
        shares.push(format!("{strict:.3}->{loose:.3}"));
    }
    hard(
        drops == runs,
        format!("S* mass share, percentile_w 20 -> 50, drops in {drops}/{runs}: {}", shares.join(" ")),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 oracle identity", criterion_1),
        ("2 SLLN convergence", criterion_2),
        ("3 CLT rate", criterion_3),
        ("4 boundedness", criterion_4),
        ("5 budget relation", criterion_5),
        ("6 masks improve or preserve F1", criterion_6),
        ("7 determinism and parallel speedup", criterion_7),
        ("8 deletion faithfulness", criterion_8),
        ("9 threshold relaxation", criterion_9),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let o = run();
        let status = match (o.pass, o.soft) {
            (true, false) => "PASS",
            (true, true) => "PASS (soft target missed)",
            (false, _) => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {name}: {status} | {} [{:.1?}]", o.detail, t.elapsed());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
