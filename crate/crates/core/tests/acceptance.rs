//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Run with `cargo test --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use emseg::cli::{cmd_gen, cmd_train, TrainOptions, METRICS_FILE, SUMMARY_FILE};
use emseg::data::{decode_sample, generate, read_sample, write_sample, Benchmark, SyntheticSpec};
use emseg::engine::{run_stream, Method, RunConfig, RunResult, Toggles};
use emseg::memory::{ExemplarMemory, Policy};
use emseg::model::{grad_check, CosineHead, Scoring};
use emseg::rng::{substream, Stream};
use emseg::sampler::{sampling_probs, ClassConfidence};
use emseg::{Error, FeatureMap, LabelId, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn ids(v: impl IntoIterator<Item = u16>) -> BTreeSet<LabelId> {
    v.into_iter().map(LabelId).collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let (h, w, d) = (8, 8, 16);
        let scoring = if i % 2 == 0 { Scoring::Cosine } else { Scoring::Dot };
        let temperature = if scoring == Scoring::Cosine { 12.0 } else { 1.0 };
        let head = CosineHead::new(d, &ids(1..=4), temperature, scoring, &mut rng).unwrap();
        let data = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let features = FeatureMap::new(h, w, d, data).unwrap();
        let mut mask = Vec::with_capacity(h * w);
        let mut latent = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            let r: f64 = rng.random();
            if r < 0.5 {
                mask.push(Some(LabelId(rng.random_range(0..5))));
                latent.push(false);
            } else {
                mask.push(None);
                latent.push(r < 0.85);
            }
        }
        let excluded = ids([1 + (i % 4) as u16]);
        let gamma = if i < 50 { 0.0 } else { 0.5 };
        let err = grad_check(&head, &features, &mask, &latent, &excluded, gamma, 1e-5).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "max relative error {worst:.2e} over 100 instances in {:.2}s",
            secs(elapsed)
        ),
    )
}

/// Closed form evaluated as `1 / sum_j exp(eta (E_c - E_j))` with
/// compensated summation, independent of the shifted normalization the
/// library uses.
fn gibbs_oracle(energies: &[f64], eta: f64) -> Vec<f64> {
    energies
        .iter()
        .map(|&ec| {
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &ej in energies {
                let term = (eta * (ec - ej)).exp();
                let t = sum + term;
                comp += if sum.abs() >= term.abs() {
                    (sum - t) + term
                } else {
                    (term - t) + sum
                };
                sum = t;
            }
            1.0 / (sum + comp)
        })
        .collect()
}

fn gibbs_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=12u16);
        let classes = ids(1..=k);
        let energies: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let values: BTreeMap<LabelId, f64> = classes.iter().copied().zip(energies.iter().copied()).collect();
        let conf = ClassConfidence::from_values(values, 0.9).unwrap();
        let eta = rng.random_range(0.0..25.0);
        let got = sampling_probs(&conf, &classes, eta).unwrap();
        for (c, want) in classes.iter().zip(gibbs_oracle(&energies, eta)) {
            worst = worst.max((got.prob(*c) - want).abs());
        }
        let flat = sampling_probs(&conf, &classes, 0.0).unwrap();
        for c in &classes {
            worst_uniform = worst_uniform.max((flat.prob(*c) - 1.0 / f64::from(k)).abs());
        }
    }
    outcome(
        worst <= 1e-9 && worst_uniform <= 1e-12,
        format!("max deviation {worst:.2e} on 1000 draws, eta=0 deviation {worst_uniform:.2e}"),
    )
}

fn pixel_sample(id: u64, class: u16) -> Arc<Sample> {
    Arc::new(Sample::new(id, FeatureMap::zeros(1, 1, 1), vec![Some(LabelId(class))], 1).unwrap())
}

fn reservoir_statistics() -> Outcome {
    let (images, capacity, trials) = (1000u64, 50, 200u64);
    let mut counts = vec![0u64; images as usize];
    for trial in 0..trials {
        let mut mem = ExemplarMemory::new(capacity).unwrap();
        let mut rng = substream(trial, Stream::Reservoir);
        for id in 0..images {
            mem.offer(pixel_sample(id, 1), Policy::Reservoir, 1, &mut rng).unwrap();
        }
        for (_, s) in mem.iter() {
            counts[s.id as usize] += 1;
        }
    }
    let expected = (trials * capacity as u64) as f64 / images as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new(images as f64 - 1.0).unwrap().sf(stat);
    outcome(
        p > 0.001,
        format!("chi-square {stat:.1} on {} dof, p = {p:.4}", images - 1),
    )
}

fn class_balance_under_skew() -> Outcome {
    let mut reached = 0;
    for seed in 0..100u64 {
        let mut stream_rng = ChaCha8Rng::seed_from_u64(50_000 + seed);
        let mut rng = substream(seed, Stream::Reservoir);
        let mut mem = ExemplarMemory::new(40).unwrap();
        for id in 0..500u64 {
            let class = if stream_rng.random::<f64>() < 0.9 { 1 } else { 2 };
            mem.offer(pixel_sample(id, class), Policy::ClassBalanced, 2, &mut rng)
                .unwrap();
        }
        if mem.bucket_len(LabelId(2)) >= 20 {
            reached += 1;
        }
    }
    outcome(
        reached >= 95,
        format!("minority bucket reached quota 20 in {reached}/100 seeds"),
    )
}

fn benchmark(seed: u64) -> Benchmark {
    generate(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn config(seed: u64, method: Method, toggles: Toggles) -> RunConfig {
    RunConfig {
        seed,
        method,
        toggles,
        ..RunConfig::benchmark()
    }
}

/// Every run made by the suite, kept for the accounting check.
#[derive(Default)]
struct Ledger {
    runs: Vec<(String, u64, u64)>,
}

impl Ledger {
    fn run(&mut self, name: &str, bench: &Benchmark, cfg: &RunConfig) -> RunResult {
        let r = run_stream(bench, cfg).unwrap_or_else(|f| panic!("{name}: {f}"));
        self.runs.push((
            format!("{name} seed {}", cfg.seed),
            r.state.sgd_steps,
            r.incoming_batches,
        ));
        r
    }
}

fn estep_contract(ledger: &mut Ledger) -> Outcome {
    let r = ledger.run("ours", &benchmark(0), &config(0, Method::Ours, Toggles::all()));
    let a = r.audit;
    outcome(
        a.violations() == 0 && a.pseudo_labels > 0,
        format!(
            "{} samples scanned, {} pseudo labels, violations: {} ground truth, {} in origin group, {} below threshold",
            a.samples, a.pseudo_labels, a.ground_truth_modified, a.label_in_origin_group, a.below_threshold
        ),
    )
}

fn benchmark_separation(ledger: &mut Ledger) -> Outcome {
    let start = Instant::now();
    let (mut ours, mut er) = (0.0, 0.0);
    for seed in 0..5 {
        let bench = benchmark(seed);
        ours += ledger
            .run("ours", &bench, &config(seed, Method::Ours, Toggles::all()))
            .imiou;
        er += ledger
            .run("er", &bench, &config(seed, Method::Er, Toggles::none()))
            .imiou;
    }
    let (ours, er) = (100.0 * ours / 5.0, 100.0 * er / 5.0);
    let elapsed = start.elapsed();
    outcome(
        ours - er >= 5.0 && elapsed < Duration::from_secs(300),
        format!(
            "mean imIoU ours {ours:.2} vs er {er:.2} (+{:.2} points) over 5 seeds in {:.1}s",
            ours - er,
            secs(elapsed)
        ),
    )
}

fn ablation_trend(ledger: &mut Ledger) -> Outcome {
    let ladder: [(&str, Method, Toggles); 5] = [
        ("er", Method::Er, Toggles::none()),
        (
            "+cbes",
            Method::Ours,
            Toggles {
                cbes: true,
                ..Toggles::none()
            },
        ),
        (
            "+relabel",
            Method::Ours,
            Toggles {
                cbes: true,
                relabel_composite: true,
                ..Toggles::none()
            },
        ),
        (
            "+cosine",
            Method::Ours,
            Toggles {
                dynamic_sampling: false,
                ..Toggles::all()
            },
        ),
        ("+sampling", Method::Ours, Toggles::all()),
    ];
    let seeds = 10;
    let mut means = [0.0f64; 5];
    for seed in 0..seeds {
        let bench = benchmark(seed);
        for (i, (name, method, toggles)) in ladder.iter().enumerate() {
            means[i] += 100.0 * ledger.run(name, &bench, &config(seed, *method, *toggles)).imiou / seeds as f64;
        }
    }
    let steps_ok = means.windows(2).all(|w| w[1] >= w[0]);
    let total = means[4] - means[0];
    let trail: Vec<String> = ladder
        .iter()
        .zip(means)
        .map(|((n, _, _), m)| format!("{n} {m:.2}"))
        .collect();
    outcome(
        steps_ok && total >= 5.0,
        format!("{} over {seeds} seeds, full minus er {total:+.2}", trail.join(" -> ")),
    )
}

fn single_pass_accounting(ledger: &mut Ledger) -> Outcome {
    // one more run with an empty batch spliced into the stream
    let mut bench = benchmark(0);
    bench.schedule.tasks[0].insert(3, Vec::new());
    let r = ledger.run(
        "ours with empty batch",
        &bench,
        &config(0, Method::Ours, Toggles::all()),
    );
    let skipped = r.diagnostics.iter().filter(|d| d.warning.is_some()).count();
    let bad: Vec<&String> = ledger
        .runs
        .iter()
        .filter(|(_, s, b)| s != b)
        .map(|(n, _, _)| n)
        .collect();
    let expected = benchmark(0).schedule.num_incoming_batches() as u64;
    outcome(
        bad.is_empty() && r.state.sgd_steps == expected && skipped == 1,
        format!(
            "{} runs, {} with step count != incoming batches; empty batch skipped without a step ({} steps, {expected} batches)",
            ledger.runs.len(),
            bad.len(),
            r.state.sgd_steps
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, r#"{"synthetic": {"seed": 4}}"#).unwrap();
    let data = dir.path().join("data");
    let h1 = cmd_gen(Some(&cfg_path), None, &data).unwrap();
    let h2 = cmd_gen(Some(&cfg_path), None, &dir.path().join("data2")).unwrap();
    let opts = TrainOptions {
        seed: Some(4),
        ..Default::default()
    };
    let run = RunConfig::benchmark();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&data, &run, &opts, &a).unwrap();
    cmd_train(&data, &run, &opts, &b).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (summary, metrics) = (same(SUMMARY_FILE), same(METRICS_FILE));
    outcome(
        summary && metrics && h1 == h2,
        format!(
            "summary identical: {summary}, metrics identical: {metrics}, dataset hashes equal: {}",
            h1 == h2
        ),
    )
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for i in 0..1000u64 {
        let (h, w, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let data: Vec<f32> = (0..h * w * d).map(|_| f32::from_bits(rng.random())).collect();
        let mask = (0..h * w)
            .map(|_| rng.random_bool(0.8).then(|| LabelId(rng.random_range(0..0xFFFF))))
            .collect();
        let s = Sample::new(i, FeatureMap::new(h, w, d, data).unwrap(), mask, rng.random()).unwrap();
        let path = dir.path().join(format!("{i}.fsm"));
        write_sample(&path, &s).unwrap();
        let back = read_sample(&path, i).unwrap();
        let bits = |f: &FeatureMap| f.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let same = back.features.height == h
            && back.features.width == w
            && back.features.depth == d
            && bits(&back.features) == bits(&s.features)
            && back.mask == s.mask
            && back.origin_task == s.origin_task;
        if !same {
            mismatches += 1;
        }
    }
    let mut bytes = std::fs::read(dir.path().join("0.fsm")).unwrap();
    bytes[0] ^= 0x20;
    let rejected = match decode_sample(&bytes, 0) {
        Err(Error::Format { offset, reason }) => {
            println!("    corrupt magic -> format error at offset {offset}: {reason}");
            offset == 0
        }
        _ => false,
    };
    outcome(
        mismatches == 0 && rejected,
        format!("{mismatches}/1000 samples differ after write/read; corrupt magic rejected at offset 0: {rejected}"),
    )
}

fn main() {
    let mut ledger = Ledger::default();
    let estep = estep_contract(&mut ledger);
    // accounting looks back over every run, so it goes after the benchmarks
    let separation = benchmark_separation(&mut ledger);
    let ablation = ablation_trend(&mut ledger);
    let accounting = single_pass_accounting(&mut ledger);
    let results = vec![
        ("gradient correctness", gradient_correctness()),
        ("Gibbs replay distribution", gibbs_exactness()),
        ("reservoir retention uniformity", reservoir_statistics()),
        ("class balance under skew", class_balance_under_skew()),
        ("E-step contract", estep),
        ("single-pass accounting", accounting),
        ("benchmark separation", separation),
        ("ablation trend", ablation),
        ("determinism", determinism()),
        ("format round trip", format_round_trip()),
    ];

    let mut failed = 0;
    for (n, (name, o)) in results.iter().enumerate() {
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            n + 1,
            o.detail
        );
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
