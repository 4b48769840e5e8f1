//! Timing of speculation and verification on shared hardware.
//!
//! Outcomes (accepted tokens, KV lengths) come from a precomputed
//! [`Schedule`]; this module only decides *when* each SSM speculates and
//! when the LLM verifies. Pipelining therefore changes timing, never
//! outcomes.
//!
//! Pipelined execution splits every SSM batch into `b_j` micro-batches.
//! Micro-batch `m` of every SSM in a slot forms verification wave `m`; the
//! LLM verifies waves one at a time in order, each once all of its
//! micro-batches have arrived. With `b_j = 1` there is one wave per slot
//! and the timeline is the serial one.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bandit::SlotRecord;
use crate::error::{Error, Result};
use crate::model::{speculation_time, verification_time, RequestId, SsmId, WorkloadSpec};
use crate::packer::{naive_padding, pack};

/// One request's share of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub request_id: RequestId,
    /// KV tokens under verification.
    pub kv_len: u32,
    /// Tokens the verification appends to the output.
    pub tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotWork {
    pub slot: usize,
    /// Items per SSM in lane order.
    pub per_ssm: Vec<Vec<WorkItem>>,
}

impl SlotWork {
    pub fn is_empty(&self) -> bool {
        self.per_ssm.iter().all(Vec::is_empty)
    }
}

/// Per-slot work assignment with outcomes already drawn.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub num_ssms: usize,
    pub slots: Vec<SlotWork>,
}

impl Schedule {
    pub fn from_history(history: &[SlotRecord], num_ssms: usize) -> Result<Self> {
        let mut slots: Vec<SlotWork> = Vec::new();
        for r in history {
            let Some(j) = r.ssm else { continue };
            if j >= num_ssms {
                return Err(Error::UnknownSsm(j));
            }
            if slots.last().is_none_or(|s| s.slot != r.slot) {
                slots.push(SlotWork {
                    slot: r.slot,
                    per_ssm: vec![Vec::new(); num_ssms],
                });
            }
            let last = slots.last_mut().expect("pushed above");
            last.per_ssm[j].push(WorkItem {
                request_id: r.request_id,
                kv_len: r.kv_len,
                tokens: r.credited,
            });
        }
        Ok(Self { num_ssms, slots })
    }

    pub fn truncated(&self, slots: usize) -> Self {
        Self {
            num_ssms: self.num_ssms,
            slots: self.slots.iter().take(slots).cloned().collect(),
        }
    }

    pub fn accepted_tokens(&self) -> u64 {
        self.items().map(|i| i.tokens as u64).sum()
    }

    fn items(&self) -> impl Iterator<Item = &WorkItem> {
        self.slots.iter().flat_map(|s| s.per_ssm.iter().flatten())
    }

    pub fn max_batch(&self, ssm: SsmId) -> usize {
        self.slots
            .iter()
            .map(|s| s.per_ssm[ssm].len())
            .max()
            .unwrap_or(0)
    }
}

/// Number of micro-batches per SSM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatchPlan {
    pub per_ssm: Vec<usize>,
}

impl MicroBatchPlan {
    pub fn uniform(num_ssms: usize, b: usize) -> Self {
        Self {
            per_ssm: vec![b; num_ssms],
        }
    }

    pub fn serial(num_ssms: usize) -> Self {
        Self::uniform(num_ssms, 1)
    }

    pub fn validate(&self, num_ssms: usize) -> Result<()> {
        if self.per_ssm.len() != num_ssms {
            return Err(Error::Config(format!(
                "plan covers {} ssms, workload has {num_ssms}",
                self.per_ssm.len()
            )));
        }
        if self.per_ssm.contains(&0) {
            return Err(Error::Config("micro-batch count must be >= 1".into()));
        }
        Ok(())
    }

    /// Index ranges of the micro-batches of an SSM batch of `len` items.
    pub fn split(&self, ssm: SsmId, len: usize) -> Vec<Range<usize>> {
        split_near_equal(len, self.per_ssm[ssm])
    }
}

/// `parts` near-equal contiguous ranges covering `0..len`, larger ones
/// first. Never more ranges than items.
pub fn split_near_equal(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.min(len).max(1);
    if len == 0 {
        return Vec::new();
    }
    let (base, extra) = (len / parts, len % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Ssm(SsmId),
    Llm,
}

impl Resource {
    pub fn label(&self) -> String {
        match self {
            Resource::Ssm(j) => format!("ssm{j}"),
            Resource::Llm => "llm".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "llm" {
            return Some(Resource::Llm);
        }
        s.strip_prefix("ssm")?.parse().ok().map(Resource::Ssm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    SpecStart,
    SpecEnd,
    VerifyStart,
    VerifyEnd,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::SpecStart => "spec_start",
            EventKind::SpecEnd => "spec_end",
            EventKind::VerifyStart => "verify_start",
            EventKind::VerifyEnd => "verify_end",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "spec_start" => EventKind::SpecStart,
            "spec_end" => EventKind::SpecEnd,
            "verify_start" => EventKind::VerifyStart,
            "verify_end" => EventKind::VerifyEnd,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_sec: f64,
    pub kind: EventKind,
    pub resource: Resource,
    /// Micro-batch index on an SSM, wave index on the LLM.
    pub micro_batch: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceTotals {
    pub makespan_sec: f64,
    pub llm_busy_sec: f64,
    pub llm_idle_sec: f64,
    pub accepted_tokens: u64,
    pub verifications: u64,
    pub verify_tokens: u64,
    pub padding_tokens: u64,
    pub naive_padding_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<Event>,
    pub totals: TraceTotals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimingOptions {
    /// Pack verification KV tensors instead of padding to the longest.
    pub packing: bool,
}

struct Verification {
    duration: f64,
    tokens: u64,
    padding: u64,
    naive_padding: u64,
}

fn verification(
    spec: &WorkloadSpec,
    items: &[WorkItem],
    options: TimingOptions,
) -> Result<Verification> {
    let kv: Vec<usize> = items.iter().map(|i| i.kv_len as usize).collect();
    let naive = naive_padding(&kv)? as u64;
    let (tokens, padding) = if options.packing {
        let layout = pack(&kv, kv.len())?;
        let tokens = layout.kv_cells() + layout.extra_query_rows() * spec.window as usize;
        (tokens as u64, layout.padding_tokens as u64)
    } else {
        let max = kv.iter().copied().max().unwrap_or(0);
        ((kv.len() * max) as u64, naive)
    };
    Ok(Verification {
        duration: verification_time(&spec.llm, tokens),
        tokens,
        padding,
        naive_padding: naive,
    })
}

/// Orders events by time, then by insertion, through a min-heap.
#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Queued>,
    seq: u64,
}

struct Queued {
    event: Event,
    seq: u64,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .event
            .time_sec
            .total_cmp(&self.event.time_sec)
            .then(other.seq.cmp(&self.seq))
    }
}

impl EventQueue {
    fn push(&mut self, event: Event) {
        self.heap.push(Queued {
            event,
            seq: self.seq,
        });
        self.seq += 1;
    }

    fn drain(mut self) -> Vec<Event> {
        let mut out = Vec::with_capacity(self.heap.len());
        while let Some(q) = self.heap.pop() {
            out.push(q.event);
        }
        out
    }
}

fn check_capacity(spec: &WorkloadSpec, schedule: &Schedule) -> Result<()> {
    if schedule.num_ssms != spec.num_ssms() {
        return Err(Error::Config(format!(
            "schedule covers {} ssms, workload has {}",
            schedule.num_ssms,
            spec.num_ssms()
        )));
    }
    for slot in &schedule.slots {
        for (j, items) in slot.per_ssm.iter().enumerate() {
            let cap = spec.ssm_profiles[j].batch_capacity;
            if items.len() > cap {
                return Err(Error::Capacity {
                    ssm: j,
                    batch: items.len(),
                    capacity: cap,
                });
            }
        }
    }
    Ok(())
}

/// Every slot: all SSMs speculate in parallel, then one verification of
/// the combined batch starts when the slowest SSM is done.
pub fn simulate_serial(
    spec: &WorkloadSpec,
    schedule: &Schedule,
    options: TimingOptions,
) -> Result<EventTrace> {
    check_capacity(spec, schedule)?;
    let mut queue = EventQueue::default();
    let mut totals = TraceTotals::default();
    let mut now = 0.0f64;
    for slot in schedule.slots.iter().filter(|s| !s.is_empty()) {
        let mut ready = now;
        for (j, items) in slot.per_ssm.iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let t = speculation_time(&spec.ssm_profiles[j], items.len(), spec.window)?;
            let resource = Resource::Ssm(j);
            queue.push(event(now, EventKind::SpecStart, resource, 0, slot.slot));
            queue.push(event(now + t, EventKind::SpecEnd, resource, 0, slot.slot));
            ready = ready.max(now + t);
        }
        let all: Vec<WorkItem> = slot.per_ssm.iter().flatten().copied().collect();
        let v = verification(spec, &all, options)?;
        queue.push(event(
            ready,
            EventKind::VerifyStart,
            Resource::Llm,
            0,
            slot.slot,
        ));
        now = ready + v.duration;
        queue.push(event(
            now,
            EventKind::VerifyEnd,
            Resource::Llm,
            0,
            slot.slot,
        ));
        add_verification(&mut totals, &v, &all);
    }
    finish(queue, totals, now)
}

fn event(
    time_sec: f64,
    kind: EventKind,
    resource: Resource,
    micro_batch: usize,
    slot: usize,
) -> Event {
    Event {
        time_sec,
        kind,
        resource,
        micro_batch,
        slot,
    }
}

fn add_verification(totals: &mut TraceTotals, v: &Verification, items: &[WorkItem]) {
    totals.llm_busy_sec += v.duration;
    totals.verifications += 1;
    totals.verify_tokens += v.tokens;
    totals.padding_tokens += v.padding;
    totals.naive_padding_tokens += v.naive_padding;
    totals.accepted_tokens += items.iter().map(|i| i.tokens as u64).sum::<u64>();
}

fn finish(queue: EventQueue, mut totals: TraceTotals, end: f64) -> Result<EventTrace> {
    totals.makespan_sec = end;
    totals.llm_idle_sec = (end - totals.llm_busy_sec).max(0.0);
    Ok(EventTrace {
        events: queue.drain(),
        totals,
    })
}

/// Micro-batched execution. An SSM starts micro-batch `m` of slot `n` once
/// it is free and every request in it has finished verification in slot
/// `n - 1`; a request new to the slot waits for wave `m` (or the last
/// wave) of the previous slot instead.
pub fn simulate_pipelined(
    spec: &WorkloadSpec,
    schedule: &Schedule,
    plan: &MicroBatchPlan,
    options: TimingOptions,
) -> Result<EventTrace> {
    check_capacity(spec, schedule)?;
    plan.validate(spec.num_ssms())?;
    let m = spec.num_ssms();
    let mut queue = EventQueue::default();
    let mut totals = TraceTotals::default();
    let mut ssm_free = vec![0.0f64; m];
    let mut llm_free = 0.0f64;
    let mut verified_at: BTreeMap<RequestId, f64> = BTreeMap::new();
    let mut prev_waves: Vec<f64> = Vec::new();

    for slot in schedule.slots.iter().filter(|s| !s.is_empty()) {
        let splits: Vec<Vec<Range<usize>>> = (0..m)
            .map(|j| plan.split(j, slot.per_ssm[j].len()))
            .collect();
        let waves = splits.iter().map(Vec::len).max().unwrap_or(0);
        let mut wave_ends = Vec::with_capacity(waves);
        let mut done_this_slot: Vec<(RequestId, f64)> = Vec::new();

        for w in 0..waves {
            let fallback = prev_waves
                .get(w.min(prev_waves.len().saturating_sub(1)))
                .copied()
                .unwrap_or(0.0);
            let mut ready = 0.0f64;
            let mut items: Vec<WorkItem> = Vec::new();
            for j in 0..m {
                let Some(range) = splits[j].get(w) else {
                    continue;
                };
                let batch = &slot.per_ssm[j][range.clone()];
                let deps = batch
                    .iter()
                    .map(|i| verified_at.get(&i.request_id).copied().unwrap_or(fallback))
                    .fold(0.0, f64::max);
                let start = ssm_free[j].max(deps);
                let end =
                    start + speculation_time(&spec.ssm_profiles[j], batch.len(), spec.window)?;
                let resource = Resource::Ssm(j);
                queue.push(event(start, EventKind::SpecStart, resource, w, slot.slot));
                queue.push(event(end, EventKind::SpecEnd, resource, w, slot.slot));
                ssm_free[j] = end;
                ready = ready.max(end);
                items.extend_from_slice(batch);
            }
            let v = verification(spec, &items, options)?;
            let start = llm_free.max(ready);
            llm_free = start + v.duration;
            queue.push(event(
                start,
                EventKind::VerifyStart,
                Resource::Llm,
                w,
                slot.slot,
            ));
            queue.push(event(
                llm_free,
                EventKind::VerifyEnd,
                Resource::Llm,
                w,
                slot.slot,
            ));
            add_verification(&mut totals, &v, &items);
            done_this_slot.extend(items.iter().map(|i| (i.request_id, llm_free)));
            wave_ends.push(llm_free);
        }
        verified_at.extend(done_this_slot);
        prev_waves = wave_ends;
    }
    finish(queue, totals, llm_free)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub tokens_per_sec: f64,
    pub idle_fraction: f64,
}

pub fn throughput(trace: &EventTrace) -> Result<Throughput> {
    let t = &trace.totals;
    if trace.events.is_empty() || t.makespan_sec <= 0.0 {
        return Err(Error::Metric("empty trace has no throughput".into()));
    }
    Ok(Throughput {
        tokens_per_sec: t.accepted_tokens as f64 / t.makespan_sec,
        idle_fraction: t.llm_idle_sec / t.makespan_sec,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    /// First micro-batch count tried.
    pub b0: usize,
    /// Largest count tried.
    pub max_b: usize,
    /// Relative drop treated as degradation.
    pub threshold: f64,
    /// Slots simulated per candidate.
    pub probe_slots: usize,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            b0: 2,
            max_b: 8,
            threshold: 0.05,
            probe_slots: 20,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b0 == 0 || self.max_b == 0 || self.probe_slots == 0 {
            return Err(Error::Config(
                "b0, max_b and probe_slots must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Throughput of a uniform plan on the first `probe_slots` slots.
pub fn probe_throughput(
    spec: &WorkloadSpec,
    schedule: &Schedule,
    b: usize,
    probe_slots: usize,
    options: TimingOptions,
) -> Result<f64> {
    let probe = schedule.truncated(probe_slots);
    let trace = simulate_pipelined(
        spec,
        &probe,
        &MicroBatchPlan::uniform(spec.num_ssms(), b),
        options,
    )?;
    Ok(throughput(&trace)?.tokens_per_sec)
}

/// Starts at `b0` and keeps increasing `b` until probe throughput drops
/// more than `threshold` below the best seen (including `b = 1`). Returns
/// the best count probed before the drop.
pub fn tune_micro_batches(
    spec: &WorkloadSpec,
    schedule: &Schedule,
    tuning: &TuningConfig,
    options: TimingOptions,
) -> Result<MicroBatchPlan> {
    tuning.validate()?;
    let m = spec.num_ssms();
    if schedule.slots.iter().all(SlotWork::is_empty) {
        return Ok(MicroBatchPlan::serial(m));
    }
    let largest = (0..m).map(|j| schedule.max_batch(j)).max().unwrap_or(1);
    let max_b = tuning.max_b.min(largest).max(1);
    let mut best = probe_throughput(spec, schedule, 1, tuning.probe_slots, options)?;
    let mut chosen = 1;
    for b in tuning.b0.max(2)..=max_b {
        let t = probe_throughput(spec, schedule, b, tuning.probe_slots, options)?;
        if t < (1.0 - tuning.threshold) * best {
            break;
        }
        if t > best {
            best = t;
            chosen = b;
        }
    }
    Ok(MicroBatchPlan::uniform(m, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DifficultyClass, LlmProfile, PromptLenDist, SsmProfile, TargetLenDist};

    fn spec(tps: &[f64], overhead: f64) -> WorkloadSpec {
        WorkloadSpec {
            num_requests: 4,
            ssm_profiles: tps
                .iter()
                .enumerate()
                .map(|(id, &t)| SsmProfile {
                    id,
                    tokens_per_sec: t,
                    batch_capacity: 8,
                    batch_slowdown: 0.0,
                })
                .collect(),
            llm: LlmProfile {
                fixed_overhead_sec: overhead,
                per_token_sec: 0.0,
            },
            difficulty_mix: vec![DifficultyClass::exact(1.0, vec![0.5; tps.len()])],
            window: 4,
            seed: 0,
            bonus_token: true,
            prompt_len: PromptLenDist::default(),
            target_len: TargetLenDist::default(),
        }
    }

    fn item(id: RequestId) -> WorkItem {
        WorkItem {
            request_id: id,
            kv_len: 10,
            tokens: 2,
        }
    }

    fn schedule(per_ssm: Vec<Vec<WorkItem>>, slots: usize) -> Schedule {
        Schedule {
            num_ssms: per_ssm.len(),
            slots: (1..=slots)
                .map(|slot| SlotWork {
                    slot,
                    per_ssm: per_ssm.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn near_equal_split() {
        assert_eq!(split_near_equal(7, 3), vec![0..3, 3..5, 5..7]);
        assert_eq!(split_near_equal(2, 5), vec![0..1, 1..2]);
        assert!(split_near_equal(0, 2).is_empty());
    }

    #[test]
    fn single_request_idles_for_speculation() {
        // 4 tokens at 80 tok/s = 0.05 s of speculation per slot
        let s = spec(&[80.0], 0.02);
        let trace = simulate_serial(
            &s,
            &schedule(vec![vec![item(0)]], 3),
            TimingOptions::default(),
        )
        .unwrap();
        assert!((trace.totals.llm_idle_sec - 0.15).abs() < 1e-12);
        assert!((trace.totals.makespan_sec - 0.21).abs() < 1e-12);
    }

    #[test]
    fn verification_waits_for_slowest_ssm() {
        let s = spec(&[80.0, 40.0], 0.02);
        let trace = simulate_serial(
            &s,
            &schedule(vec![vec![item(0)], vec![item(1)]], 1),
            TimingOptions::default(),
        )
        .unwrap();
        let start = trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::VerifyStart)
            .unwrap();
        assert!((start.time_sec - 0.10).abs() < 1e-12);
        assert!(trace.totals.llm_idle_sec >= 0.05);
    }

    #[test]
    fn zero_requests_give_empty_trace() {
        let s = spec(&[80.0], 0.02);
        let empty = Schedule {
            num_ssms: 1,
            slots: Vec::new(),
        };
        let trace = simulate_serial(&s, &empty, TimingOptions::default()).unwrap();
        assert!(trace.events.is_empty());
        assert_eq!(trace.totals, TraceTotals::default());
        assert!(matches!(throughput(&trace), Err(Error::Metric(_))));
    }

    #[test]
    fn one_micro_batch_matches_serial() {
        let s = spec(&[80.0, 40.0], 0.02);
        let sched = schedule(vec![vec![item(0), item(1)], vec![item(2)]], 5);
        let a = simulate_serial(&s, &sched, TimingOptions::default()).unwrap();
        let b = simulate_pipelined(
            &s,
            &sched,
            &MicroBatchPlan::serial(2),
            TimingOptions::default(),
        )
        .unwrap();
        assert!((a.totals.makespan_sec - b.totals.makespan_sec).abs() < 1e-9);
        assert_eq!(a.events.len(), b.events.len());
        for (x, y) in a.events.iter().zip(&b.events) {
            assert!((x.time_sec - y.time_sec).abs() < 1e-9);
            assert_eq!(x.kind, y.kind);
        }
    }

    #[test]
    fn two_micro_batches_reduce_idle() {
        let mut s = spec(&[80.0, 40.0], 0.01);
        s.llm.per_token_sec = 1e-3;
        for p in &mut s.ssm_profiles {
            p.batch_slowdown = 1.0;
        }
        let sched = schedule(vec![vec![item(0), item(1)], vec![item(2), item(3)]], 10);
        let serial = simulate_serial(&s, &sched, TimingOptions::default()).unwrap();
        let piped = simulate_pipelined(
            &s,
            &sched,
            &MicroBatchPlan::uniform(2, 2),
            TimingOptions::default(),
        )
        .unwrap();
        assert!(piped.totals.llm_idle_sec < serial.totals.llm_idle_sec);
        assert_eq!(piped.totals.accepted_tokens, serial.totals.accepted_tokens);
    }

    #[test]
    fn throughput_arithmetic() {
        let trace = EventTrace {
            events: vec![event(2.0, EventKind::VerifyEnd, Resource::Llm, 0, 1)],
            totals: TraceTotals {
                makespan_sec: 2.0,
                llm_busy_sec: 2.0,
                accepted_tokens: 100,
                ..TraceTotals::default()
            },
        };
        let t = throughput(&trace).unwrap();
        assert_eq!(t.tokens_per_sec, 50.0);
        assert_eq!(t.idle_fraction, 0.0);
    }

    #[test]
    fn resource_labels_round_trip() {
        for r in [Resource::Llm, Resource::Ssm(3)] {
            assert_eq!(Resource::parse(&r.label()), Some(r));
        }
    }
}
