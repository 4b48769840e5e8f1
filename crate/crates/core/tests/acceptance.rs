//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; exits non-zero if
//! any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use hetspec::bandit::SelectionRun;
use hetspec::matcher::{brute_force_matching, solve_max_weight_matching, MatchingInstance};
use hetspec::packer::{
    build_indicator, decomposed_attention, naive_padding, pack, reference_attention, Matrix,
    ToyAttentionInput,
};
use hetspec::pipeline::{Schedule, TimingOptions};
use hetspec::runner::config::{PipelineConfig, PipelineMode};
use hetspec::runner::experiment::{par_seeds, seeds, select, time_schedule};
use hetspec::runner::{
    ablation_ladder, policy_variants, preset, run_experiment, sweep_microbatch, write_report,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_rows(
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
    )
}

/// Softmax attention written out directly, independent of the library.
fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Vec<Vec<f64>> {
    (0..q.rows)
        .map(|i| {
            let logits: Vec<f64> = (0..k.rows)
                .map(|j| (0..q.cols).map(|c| q.get(i, c) * k.get(j, c)).sum())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..v.cols)
                .map(|c| (0..k.rows).map(|j| w[j] * v.get(j, c)).sum::<f64>() / z)
                .collect()
        })
        .collect()
}

fn attention_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=12)).collect();
        let width = rng.random_range(1..=n);
        let inputs: Vec<ToyAttentionInput> = lens
            .iter()
            .map(|&len| ToyAttentionInput {
                q: random_matrix(&mut rng, 2, 4),
                k: random_matrix(&mut rng, len, 4),
                v: random_matrix(&mut rng, len, 4),
            })
            .collect();
        let layout = pack(&lens, width).expect("pack");
        let mask = build_indicator(&layout).expect("mask");
        let got = decomposed_attention(&inputs, &layout, &mask).expect("attention");
        for (x, out) in inputs.iter().zip(&got) {
            let reference = reference_attention(&x.q, &x.k, &x.v).expect("reference");
            worst = worst.max(out.max_abs_diff(&reference));
            for (i, row) in naive_attention(&x.q, &x.k, &x.v).iter().enumerate() {
                for (c, want) in row.iter().enumerate() {
                    worst = worst.max((out.get(i, c) - want).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("max abs error {worst:.2e} over 1000 batches in {elapsed:.2?}"),
    )
}

fn matching_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=4);
        let mut caps = vec![0usize; m];
        let total = rng.random_range(1..=8);
        for _ in 0..total {
            caps[rng.random_range(0..m)] += 1;
        }
        // half the instances use small integers so ties are common
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        if trial % 2 == 0 {
                            rng.random_range(0..4) as f64
                        } else {
                            rng.random_range(0.0..100.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let inst = MatchingInstance::new(weights, caps).expect("instance");
        let km = solve_max_weight_matching(&inst).expect("km");
        let oracle = brute_force_matching(&inst).expect("oracle");
        let tol = if trial % 2 == 0 {
            0.0
        } else {
            1e-9 * oracle.total_weight.abs().max(1.0)
        };
        if (km.total_weight - oracle.total_weight).abs() > tol || !km.is_feasible(&inst.capacities)
        {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("{mismatches} mismatches in 1000 instances, {elapsed:.2?}"),
    )
}

/// Smallest padding over every way to cut each request into pieces placed
/// in distinct rows of a `width x length` tensor.
fn exhaustive_min_padding(lens: &[usize], width: usize) -> usize {
    fn place(lens: &[usize], i: usize, fill: &mut Vec<usize>, length: usize) -> bool {
        if i == lens.len() {
            return true;
        }
        let mut used = vec![false; fill.len()];
        split(lens, i, lens[i], 0, fill, &mut used, length)
    }
    fn split(
        lens: &[usize],
        i: usize,
        left: usize,
        row_from: usize,
        fill: &mut Vec<usize>,
        used: &mut Vec<bool>,
        length: usize,
    ) -> bool {
        if left == 0 {
            return place(lens, i + 1, fill, length);
        }
        for row in row_from..fill.len() {
            if used[row] {
                continue;
            }
            let room = length - fill[row];
            for piece in 1..=room.min(left) {
                fill[row] += piece;
                used[row] = true;
                if split(lens, i, left - piece, row + 1, fill, used, length) {
                    fill[row] -= piece;
                    used[row] = false;
                    return true;
                }
                fill[row] -= piece;
                used[row] = false;
            }
        }
        false
    }
    let total: usize = lens.iter().sum();
    let mut length = 1;
    loop {
        let mut fill = vec![0; width];
        if place(lens, 0, &mut fill, length) {
            return width * length - total;
        }
        length += 1;
    }
}

fn packing_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worse = 0;
    let mut cases = 0;
    for _ in 0..400 {
        let n = rng.random_range(1..=5);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=10)).collect();
        for width in 1..=3 {
            cases += 1;
            let got = pack(&lens, width).expect("pack").padding_tokens;
            if got != exhaustive_min_padding(&lens, width) {
                worse += 1;
            }
        }
    }
    let dist = LogNormal::new(128f64.ln(), 1.0).expect("lognormal");
    let mut reductions: Vec<f64> = (0..200)
        .map(|_| {
            let lens: Vec<usize> = (0..16)
                .map(|_| (dist.sample(&mut rng).round() as usize).clamp(1, 4096))
                .collect();
            let naive = naive_padding(&lens).expect("naive") as f64;
            let packed = pack(&lens, 16).expect("pack").padding_tokens as f64;
            if naive == 0.0 {
                0.0
            } else {
                1.0 - packed / naive
            }
        })
        .collect();
    reductions.sort_by(f64::total_cmp);
    let median = reductions[reductions.len() / 2];
    outcome(
        worse == 0 && median >= 0.30,
        format!(
            "{worse}/{cases} small instances above the exhaustive minimum; median padding reduction {:.1}%",
            median * 100.0
        ),
    )
}

fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn regret_sublinearity() -> Outcome {
    let start = Instant::now();
    let config = preset("hetero").expect("preset");
    let runs: Vec<SelectionRun> =
        par_seeds(&seeds(&config), |s| Ok(select(&config, s, None)?.1)).expect("runs");
    let epochs = runs[0].ledger.curve.len();
    let points: Vec<(f64, f64)> = (0..epochs)
        .map(|e| {
            let slot = runs[0].ledger.curve[e].slot as f64;
            let mean =
                runs.iter().map(|r| r.ledger.curve[e].total).sum::<f64>() / runs.len() as f64;
            (slot.log2(), mean)
        })
        .collect();
    let r2 = r_squared(&points);
    let at =
        |t: usize| runs.iter().map(|r| r.ledger.per_slot[t - 1]).sum::<f64>() / runs.len() as f64;
    let ratio = (at(2000) / 2000.0) / (at(200) / 200.0);
    let elapsed = start.elapsed();
    outcome(
        r2 >= 0.9 && ratio < 0.5 && elapsed < Duration::from_secs(60),
        format!(
            "R^2 = {r2:.4} over {epochs} epoch ends; (R(2000)/2000)/(R(200)/200) = {ratio:.3}; {elapsed:.2?}"
        ),
    )
}

fn policy_dominance() -> Outcome {
    let base = preset("hetero").expect("preset");
    let means: Vec<f64> = policy_variants(&base)
        .iter()
        .map(|c| run_experiment(c).expect("run").0.summary.goodput.mean)
        .collect();
    let (lbss, eps, greedy) = (means[0], means[1], means[2]);
    outcome(
        lbss >= 1.2 * eps && lbss >= 1.5 * greedy,
        format!(
            "goodput lbss {lbss:.1}, epsilon-greedy {eps:.1} ({:.2}x), greedy {greedy:.1} ({:.2}x)",
            lbss / eps,
            lbss / greedy
        ),
    )
}

fn pipeline_shape() -> Outcome {
    let config = preset("skewed").expect("preset");
    let counts: Vec<usize> = (1..=8).collect();
    let curve: Vec<f64> = sweep_microbatch(&config, &counts)
        .expect("sweep")
        .iter()
        .map(|p| p.goodput.mean)
        .collect();
    let peak = (0..curve.len())
        .max_by(|&a, &b| curve[a].total_cmp(&curve[b]))
        .expect("non-empty");
    let unimodal = peak > 0
        && peak + 1 < curve.len()
        && curve[..=peak].windows(2).all(|w| w[0] <= w[1])
        && curve[peak..].windows(2).all(|w| w[0] >= w[1]);

    let options = TimingOptions {
        packing: config.packer.decomposition,
    };
    let tuned = PipelineConfig {
        mode: PipelineMode::Tuned,
        ..config.pipeline.clone()
    };
    let per_seed = par_seeds(&seeds(&config), |seed| {
        let (spec, run) = select(&config, seed, None)?;
        let schedule = Schedule::from_history(&run.history, spec.num_ssms())?;
        let serial = PipelineConfig {
            mode: PipelineMode::Serial,
            ..config.pipeline.clone()
        };
        let (s, _) = time_schedule(&spec, &schedule, &serial, options)?;
        let (t, _) = time_schedule(&spec, &schedule, &tuned, options)?;
        let best = counts
            .iter()
            .map(|&b| {
                let fixed = PipelineConfig {
                    mode: PipelineMode::Pipelined,
                    micro_batches: b,
                    ..config.pipeline.clone()
                };
                let (trace, _) = time_schedule(&spec, &schedule, &fixed, options)?;
                hetspec::pipeline::throughput(&trace).map(|x| x.tokens_per_sec)
            })
            .collect::<hetspec::Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let ts = hetspec::pipeline::throughput(&s)?;
        let tt = hetspec::pipeline::throughput(&t)?;
        Ok((
            tt.tokens_per_sec / best,
            tt.idle_fraction <= ts.idle_fraction,
        ))
    })
    .expect("per-seed timing");
    let worst_share = per_seed.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
    let idle_ok = per_seed.iter().all(|x| x.1);
    let shape: Vec<String> = curve.iter().map(|g| format!("{g:.0}")).collect();
    outcome(
        unimodal && worst_share >= 0.9 && idle_ok,
        format!(
            "goodput by b=1..8 [{}], peak b={}; tuned >= {:.1}% of sweep best on every seed; idle reduced on every seed: {idle_ok}",
            shape.join(", "),
            peak + 1,
            worst_share * 100.0
        ),
    )
}

fn ablation_monotonicity() -> Outcome {
    let config = preset("mix").expect("preset");
    let steps = ablation_ladder(&config).expect("ablation");
    let means: Vec<f64> = steps
        .iter()
        .map(|s| s.report.summary.goodput.mean)
        .collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    let uplift = means[means.len() - 1] / means[0];
    let labels: Vec<String> = steps
        .iter()
        .zip(&means)
        .map(|(s, m)| format!("{} {m:.1}", s.label))
        .collect();
    outcome(
        monotone && uplift >= 1.5,
        format!("{}; uplift {uplift:.2}x", labels.join(" <= ")),
    )
}

fn determinism() -> Outcome {
    let mut identical = true;
    let mut checked = Vec::new();
    for name in ["mix", "skewed", "cp"] {
        let mut config = preset(name).expect("preset");
        config.repetitions = 3;
        config.bandit.max_slots = config.bandit.max_slots.min(300);
        config.output.traces = true;
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().expect("tempdir");
            let (report, traces) = run_experiment(&config).expect("run");
            let mut files: Vec<Vec<u8>> = write_report(&config, &report, &traces, dir.path())
                .expect("write")
                .iter()
                .map(|p| std::fs::read(p).expect("read back"))
                .collect();
            files.sort();
            bytes.push(files);
        }
        identical &= bytes[0] == bytes[1];
        checked.push(format!("{name} ({} files)", bytes[0].len()));
    }
    outcome(
        identical,
        format!("re-runs byte-identical for {}", checked.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("attention exactness", attention_exactness),
        ("matching optimality", matching_optimality),
        ("packing quality", packing_quality),
        ("regret sublinearity", regret_sublinearity),
        ("policy dominance", policy_dominance),
        ("pipeline shape", pipeline_shape),
        ("ablation monotonicity", ablation_monotonicity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {}: {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
