//! Seeded experiment execution: selection, then timing, then metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::{run_lbss, BanditConfig, RegretPoint, SelectionRun};
use crate::baselines::{run_epsilon_greedy, run_fixed, run_greedy};
use crate::error::{Error, Result};
use crate::model::{generate_workload, Request, RequestId, SsmId, SsmProfile, WorkloadSpec};
use crate::pipeline::{
    simulate_pipelined, simulate_serial, throughput, tune_micro_batches, EventTrace,
    MicroBatchPlan, Schedule, TimingOptions,
};

use super::config::{ExperimentConfig, PipelineConfig, PipelineMode, PolicyKind};
use super::trace_io::emit_trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub policy: String,
    /// Accepted tokens per second of simulated wall time.
    pub goodput: f64,
    pub accepted_tokens: u64,
    pub slots: usize,
    pub makespan_sec: f64,
    pub llm_busy_sec: f64,
    pub idle_fraction: f64,
    pub verifications: u64,
    pub mean_verify_sec: f64,
    pub verify_tokens: u64,
    pub padding_tokens: u64,
    pub naive_padding_tokens: u64,
    pub micro_batches: Vec<usize>,
    pub regret: f64,
    pub goodput_regret: f64,
    pub switching_cost: f64,
    pub regret_curve: Vec<RegretPoint>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub goodput: Stat,
    pub regret: Stat,
    pub idle_fraction: Stat,
    pub padding_tokens: Stat,
    pub mean_verify_sec: Stat,
}

impl Summary {
    pub fn of(runs: &[RunMetrics]) -> Self {
        let stat = |f: fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            goodput: stat(|r| r.goodput),
            regret: stat(|r| r.regret),
            idle_fraction: stat(|r| r.idle_fraction),
            padding_tokens: stat(|r| r.padding_tokens as f64),
            mean_verify_sec: stat(|r| r.mean_verify_sec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub policy: String,
    pub runs: Vec<RunMetrics>,
    pub summary: Summary,
}

impl MetricsReport {
    fn new(name: &str, policy: &str, runs: Vec<RunMetrics>) -> Self {
        Self {
            name: name.to_string(),
            policy: policy.to_string(),
            summary: Summary::of(&runs),
            runs,
        }
    }
}

/// M replicas of SSM `ssm`; every request sees that SSM's acceptance on
/// every replica.
pub fn homogeneous_workload(
    spec: &WorkloadSpec,
    requests: &[Request],
    ssm: SsmId,
) -> Result<(WorkloadSpec, Vec<Request>)> {
    let profile = spec.ssm(ssm)?.clone();
    let m = spec.num_ssms();
    let mut copy = spec.clone();
    copy.ssm_profiles = (0..m)
        .map(|id| SsmProfile {
            id,
            ..profile.clone()
        })
        .collect();
    for class in &mut copy.difficulty_mix {
        class.accept_lo = vec![class.accept_lo[ssm]; m];
        class.accept_hi = vec![class.accept_hi[ssm]; m];
    }
    let reqs = requests
        .iter()
        .map(|r| Request {
            accept_prob: vec![r.accept_prob[ssm]; m],
            ..r.clone()
        })
        .collect();
    Ok((copy, reqs))
}

/// Lane `i` goes to replica `i mod M`.
fn round_robin(spec: &WorkloadSpec) -> BTreeMap<RequestId, SsmId> {
    let m = spec.num_ssms();
    let lanes = spec.total_capacity().min(spec.num_requests);
    (0..lanes).map(|i| (i as RequestId, i % m)).collect()
}

/// Runs the configured selection policy for one seed. Returns the
/// workload the schedule refers to (replicated for the homogeneous
/// policy).
pub fn select(
    config: &ExperimentConfig,
    seed: u64,
    homogeneous_ssm: Option<SsmId>,
) -> Result<(WorkloadSpec, SelectionRun)> {
    let mut spec = config.workload.clone();
    spec.seed = seed;
    let requests = generate_workload(&spec)?;
    let bandit: &BanditConfig = &config.bandit;
    let run = match config.policy.kind {
        PolicyKind::Lbss => run_lbss(bandit, &spec, requests)?.0,
        PolicyKind::EpsilonGreedy => {
            run_epsilon_greedy(config.policy.epsilon, bandit, &spec, requests)?
        }
        PolicyKind::Greedy => run_greedy(bandit, &spec, requests)?,
        PolicyKind::Homogeneous => {
            let j = homogeneous_ssm
                .or(config.policy.homogeneous_ssm)
                .ok_or_else(|| Error::Config("homogeneous policy needs an ssm".into()))?;
            let (hspec, hreqs) = homogeneous_workload(&spec, &requests, j)?;
            let mut run = run_fixed(&round_robin(&hspec), bandit, &hspec, hreqs)?;
            run.policy = format!("homogeneous-ssm{j}");
            return Ok((hspec, run));
        }
    };
    Ok((spec, run))
}

/// Times a schedule under the configured pipeline mode. Returns the trace
/// and the micro-batch plan used.
pub fn time_schedule(
    spec: &WorkloadSpec,
    schedule: &Schedule,
    pipeline: &PipelineConfig,
    options: TimingOptions,
) -> Result<(EventTrace, Vec<usize>)> {
    let m = spec.num_ssms();
    let plan = match pipeline.mode {
        PipelineMode::Serial => {
            return Ok((simulate_serial(spec, schedule, options)?, vec![1; m]));
        }
        PipelineMode::Pipelined => MicroBatchPlan::uniform(m, pipeline.micro_batches),
        PipelineMode::Tuned => tune_micro_batches(spec, schedule, &pipeline.tuning(), options)?,
    };
    let trace = simulate_pipelined(spec, schedule, &plan, options)?;
    Ok((trace, plan.per_ssm))
}

pub fn metrics(
    seed: u64,
    run: &SelectionRun,
    trace: &EventTrace,
    micro_batches: Vec<usize>,
) -> Result<RunMetrics> {
    let tp = throughput(trace)?;
    let t = &trace.totals;
    Ok(RunMetrics {
        seed,
        policy: run.policy.clone(),
        goodput: tp.tokens_per_sec,
        accepted_tokens: t.accepted_tokens,
        slots: run.slots,
        makespan_sec: t.makespan_sec,
        llm_busy_sec: t.llm_busy_sec,
        idle_fraction: tp.idle_fraction,
        verifications: t.verifications,
        mean_verify_sec: t.llm_busy_sec / t.verifications.max(1) as f64,
        verify_tokens: t.verify_tokens,
        padding_tokens: t.padding_tokens,
        naive_padding_tokens: t.naive_padding_tokens,
        micro_batches,
        regret: run.ledger.total(),
        goodput_regret: run.ledger.goodput_regret,
        switching_cost: run.ledger.switching_cost,
        regret_curve: run.ledger.curve.clone(),
    })
}

fn options(config: &ExperimentConfig) -> TimingOptions {
    TimingOptions {
        packing: config.packer.decomposition,
    }
}

/// One repetition end to end.
pub fn run_once(
    config: &ExperimentConfig,
    seed: u64,
    homogeneous_ssm: Option<SsmId>,
) -> Result<(RunMetrics, EventTrace)> {
    let (spec, run) = select(config, seed, homogeneous_ssm)?;
    let schedule = Schedule::from_history(&run.history, spec.num_ssms())?;
    let (trace, plan) = time_schedule(&spec, &schedule, &config.pipeline, options(config))?;
    Ok((metrics(seed, &run, &trace, plan)?, trace))
}

/// Seeds `seed, seed + 1, ..` for each repetition.
pub fn seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.repetitions as u64)
        .map(|r| config.workload.seed.wrapping_add(r))
        .collect()
}

/// Applies `f` to every seed on worker threads; results keep seed order.
pub fn par_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seeds.len())
        .max(1);
    let chunk = seeds.len().div_ceil(workers).max(1);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| f(s)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked"));
        }
        out.into_iter().collect()
    })
}

/// Runs every repetition. For the homogeneous policy without a fixed SSM
/// each SSM is tried and the one with the best mean goodput is reported.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(MetricsReport, Vec<EventTrace>)> {
    config.validate()?;
    let seeds = seeds(config);
    let candidates: Vec<Option<SsmId>> = match (config.policy.kind, config.policy.homogeneous_ssm) {
        (PolicyKind::Homogeneous, None) => (0..config.workload.num_ssms()).map(Some).collect(),
        _ => vec![None],
    };
    let mut best: Option<(MetricsReport, Vec<EventTrace>)> = None;
    for candidate in candidates {
        let results = par_seeds(&seeds, |s| run_once(config, s, candidate))?;
        let (runs, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let policy = runs[0].policy.clone();
        let report = MetricsReport::new(&config.name, &policy, runs);
        if best
            .as_ref()
            .is_none_or(|(b, _)| report.summary.goodput.mean > b.summary.goodput.mean)
        {
            best = Some((report, traces));
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

/// Writes `<name>.report.json` (and traces if configured) under `dir`.
pub fn write_report(
    config: &ExperimentConfig,
    report: &MetricsReport,
    traces: &[EventTrace],
    dir: &Path,
) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let path = dir.join(format!("{}.report.json", config.name));
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    written.push(path);
    if config.output.traces {
        let ext = match config.output.trace_format {
            super::config::TraceFormat::Csv => "csv",
            super::config::TraceFormat::Json => "json",
        };
        for (run, trace) in report.runs.iter().zip(traces) {
            let path = dir.join(format!("{}.seed{}.trace.{ext}", config.name, run.seed));
            let tmp = path.with_extension("tmp");
            emit_trace(trace, &tmp, config.output.trace_format)?;
            std::fs::rename(&tmp, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub policy: String,
    pub goodput: Stat,
    pub regret: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<20} {:>23} {:>24}",
            "name", "policy", "goodput (tok/s)", "regret"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:<20} {:>12.3} ± {:<8.3} {:>12.1} ± {:<9.1}",
                r.name, r.policy, r.goodput.mean, r.goodput.std, r.regret.mean, r.regret.std
            );
        }
        out
    }
}

/// Runs each config and tabulates mean ± std goodput and regret. Every
/// config must share the same workload.
pub fn compare_policies(configs: &[ExperimentConfig]) -> Result<ComparisonTable> {
    if configs.len() < 2 {
        return Err(Error::Comparison("need at least two configs".into()));
    }
    if let Some(c) = configs.iter().find(|c| c.workload != configs[0].workload) {
        return Err(Error::Comparison(format!(
            "config {:?} uses a different workload than {:?}",
            c.name, configs[0].name
        )));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let (report, _) = run_experiment(c)?;
        rows.push(ComparisonRow {
            name: c.name.clone(),
            policy: report.policy.clone(),
            goodput: report.summary.goodput,
            regret: report.summary.regret,
        });
    }
    Ok(ComparisonTable { rows })
}

/// The selection comparison setup: LBSS, epsilon-greedy and the
/// prompt-length greedy policy, all with plain serial verification.
pub fn policy_variants(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    [
        PolicyKind::Lbss,
        PolicyKind::EpsilonGreedy,
        PolicyKind::Greedy,
    ]
    .into_iter()
    .map(|kind| {
        let mut c = base.clone();
        c.name = format!("{}-{}", base.name, kind.label());
        c.policy.kind = kind;
        c.packer.decomposition = false;
        c.pipeline.mode = PipelineMode::Serial;
        c
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub micro_batches: usize,
    pub goodput: Stat,
    pub idle_fraction: Stat,
}

/// Goodput for each uniform micro-batch count. Selection runs once per
/// seed; only the timing is repeated.
pub fn sweep_microbatch(config: &ExperimentConfig, counts: &[usize]) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    if counts.contains(&0) {
        return Err(Error::Config("micro-batch counts must be >= 1".into()));
    }
    let per_seed = par_seeds(&seeds(config), |seed| {
        let (spec, run) = select(config, seed, config.policy.homogeneous_ssm)?;
        let schedule = Schedule::from_history(&run.history, spec.num_ssms())?;
        counts
            .iter()
            .map(|&b| {
                let plan = MicroBatchPlan::uniform(spec.num_ssms(), b);
                let trace = simulate_pipelined(&spec, &schedule, &plan, options(config))?;
                throughput(&trace)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &b)| SweepPoint {
            micro_batches: b,
            goodput: Stat::of(
                &per_seed
                    .iter()
                    .map(|v| v[k].tokens_per_sec)
                    .collect::<Vec<_>>(),
            ),
            idle_fraction: Stat::of(
                &per_seed
                    .iter()
                    .map(|v| v[k].idle_fraction)
                    .collect::<Vec<_>>(),
            ),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStep {
    pub label: String,
    pub report: MetricsReport,
}

/// Adds one optimization at a time: homogeneous serial baseline (best
/// single SSM), heterogeneous selection, packed verification, then tuned
/// pipelining.
pub fn ablation_ladder(config: &ExperimentConfig) -> Result<Vec<AblationStep>> {
    config.validate()?;
    let mut vanilla = config.clone();
    vanilla.policy.kind = PolicyKind::Homogeneous;
    vanilla.policy.homogeneous_ssm = None;
    vanilla.packer.decomposition = false;
    vanilla.pipeline.mode = PipelineMode::Serial;
    let (vanilla_report, _) = run_experiment(&vanilla)?;

    let mut lbss = config.clone();
    lbss.policy.kind = PolicyKind::Lbss;
    let serial = PipelineConfig {
        mode: PipelineMode::Serial,
        ..config.pipeline.clone()
    };
    let tuned = PipelineConfig {
        mode: PipelineMode::Tuned,
        ..config.pipeline.clone()
    };
    let stages = [
        ("+hetero-selection", false, &serial),
        ("+packing", true, &serial),
        ("+pipeline", true, &tuned),
    ];
    let per_seed = par_seeds(&seeds(config), |seed| {
        let (spec, run) = select(&lbss, seed, None)?;
        let schedule = Schedule::from_history(&run.history, spec.num_ssms())?;
        stages
            .iter()
            .map(|(_, packing, pipeline)| {
                let (trace, plan) = time_schedule(
                    &spec,
                    &schedule,
                    pipeline,
                    TimingOptions { packing: *packing },
                )?;
                metrics(seed, &run, &trace, plan)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut steps = vec![AblationStep {
        label: "homogeneous-vanilla".into(),
        report: vanilla_report,
    }];
    for (k, (label, _, _)) in stages.iter().enumerate() {
        let runs = per_seed.iter().map(|v| v[k].clone()).collect();
        steps.push(AblationStep {
            label: label.to_string(),
            report: MetricsReport::new(&config.name, "lbss", runs),
        });
    }
    Ok(steps)
}
