//! Learning-based SSM selection.
//!
//! Time is divided into epochs. Epoch `k` first explores for `alpha` slots,
//! grouped into chunks of `beta` slots during which every request keeps one
//! randomly drawn SSM, then exploits the maximum-weight matching on the
//! estimated goodputs for `2^k` slots. Estimates accumulate over all epochs.
//!
//! [`SlotSimulator`] owns the request population and plays slots for any
//! policy; the baselines in [`crate::baselines`] reuse it.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{self, MatchResult, MatchingInstance};
use crate::model::{
    self, ground_truth_goodput, profiled_round_time, sample_accepted_prefix, Request, RequestId,
    SpeculationOutcome, SsmId, SsmProfile, WorkloadSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    /// Exploration slots per epoch.
    pub alpha: usize,
    /// Chunk size; must divide `alpha`.
    pub beta: usize,
    /// Weight of switching cost against goodput regret.
    pub lambda: f64,
    /// Horizon `T` in slots.
    pub max_slots: usize,
    /// Precompute KV on the predicted destination SSM before switching.
    pub fast_switch: bool,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            alpha: 8,
            beta: 2,
            lambda: 1.0,
            max_slots: 2000,
            fast_switch: true,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 || self.beta == 0 {
            return Err(Error::Config("alpha and beta must be >= 1".into()));
        }
        if !self.alpha.is_multiple_of(self.beta) {
            return Err(Error::Config(format!(
                "beta = {} does not divide alpha = {}",
                self.beta, self.alpha
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if self.max_slots == 0 {
            return Err(Error::Config("max_slots must be >= 1".into()));
        }
        Ok(())
    }

    pub fn chunks_per_epoch(&self) -> usize {
        self.alpha / self.beta
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub sum: f64,
    pub count: u64,
}

impl Estimate {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub epoch: usize,
    pub estimates: BTreeMap<(RequestId, SsmId), Estimate>,
    pub assignment: BTreeMap<RequestId, SsmId>,
    pub prewarmed: BTreeMap<RequestId, SsmId>,
    /// First exploration chunk of the next epoch, drawn ahead of time so
    /// its destinations can be prewarmed.
    #[serde(skip)]
    pub next_draw: Option<BTreeMap<RequestId, SsmId>>,
}

impl BanditState {
    pub fn new() -> Self {
        Self {
            epoch: 1,
            ..Self::default()
        }
    }

    pub fn observe(&mut self, request: RequestId, ssm: SsmId, goodput: f64) {
        let e = self.estimates.entry((request, ssm)).or_default();
        e.sum += goodput;
        e.count += 1;
    }

    /// Mean observed goodput, `+inf` for pairs never observed.
    pub fn estimate(&self, request: RequestId, ssm: SsmId) -> f64 {
        self.estimates
            .get(&(request, ssm))
            .and_then(Estimate::mean)
            .unwrap_or(f64::INFINITY)
    }

    pub fn weights(&self, requests: &[RequestId], num_ssms: usize) -> Vec<Vec<f64>> {
        requests
            .iter()
            .map(|&r| (0..num_ssms).map(|j| self.estimate(r, j)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Exploration,
    Exploitation,
    /// Slot played by a non-epoch policy.
    Policy,
}

/// What happened to one request in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub request_id: RequestId,
    /// `None` when the request idled this slot (dropped or unmatched).
    pub ssm: Option<SsmId>,
    pub accepted: u32,
    pub bonus: u32,
    /// Tokens appended to the output (clamped at the request's target).
    pub credited: u32,
    /// KV tokens under verification this slot.
    pub kv_len: u32,
    pub wall_time_sec: f64,
    pub goodput: f64,
    /// Ground-truth expected goodput of the chosen pair, 0 when idle.
    pub expected_goodput: f64,
    pub switched: bool,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub slot: usize,
    pub epoch: usize,
    pub goodput_regret: f64,
    pub switching_cost: f64,
    pub total: f64,
}

/// Running regret: expected goodput shortfall against the best fixed
/// capacity-feasible assignment plus lambda-weighted realized switching.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub goodput_regret: f64,
    pub switching_cost: f64,
    pub lambda: f64,
    /// Total regret after each slot.
    pub per_slot: Vec<f64>,
    /// Snapshots at epoch ends (or policy checkpoints).
    pub curve: Vec<RegretPoint>,
}

impl RegretLedger {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn total(&self) -> f64 {
        self.goodput_regret + self.lambda * self.switching_cost
    }

    fn checkpoint(&mut self, slot: usize, epoch: usize) {
        self.curve.push(RegretPoint {
            slot,
            epoch,
            goodput_regret: self.goodput_regret,
            switching_cost: self.switching_cost,
            total: self.total(),
        });
    }
}

/// KV re-computation cost `z_i(t)` of moving `request` onto `to`. Zero when
/// the SSM does not change or when the destination was prewarmed.
pub fn switching_cost(
    request: &Request,
    from: SsmId,
    to: &SsmProfile,
    prewarmed: Option<SsmId>,
) -> f64 {
    if from == to.id || prewarmed == Some(to.id) {
        return 0.0;
    }
    request.context_len() as f64 / to.tokens_per_sec
}

/// Exploitation length of epoch `k`, `2^k` capped at `remaining`.
pub fn exploitation_duration(k: usize, remaining: usize) -> usize {
    if k >= usize::BITS as usize - 1 {
        return remaining;
    }
    (1usize << k).min(remaining)
}

/// Prewarm target per request: the SSM with the highest estimate, lowest
/// id on ties.
pub fn prewarm_destination(
    state: &BanditState,
    requests: &[RequestId],
    num_ssms: usize,
) -> BTreeMap<RequestId, SsmId> {
    requests
        .iter()
        .map(|&r| {
            let mut best = 0;
            for j in 1..num_ssms {
                if state.estimate(r, j) > state.estimate(r, best) {
                    best = j;
                }
            }
            (r, best)
        })
        .collect()
}

/// Uniform random SSM per request, then per-SSM overflow resolution: keep
/// `B_j` requests at random and redraw the rest among SSMs with residual
/// capacity. Requests that find no room idle.
pub fn draw_exploration<R: Rng + ?Sized>(
    requests: &[RequestId],
    capacities: &[usize],
    preset: &BTreeMap<RequestId, SsmId>,
    rng: &mut R,
) -> BTreeMap<RequestId, SsmId> {
    let m = capacities.len();
    let mut out: BTreeMap<RequestId, SsmId> = BTreeMap::new();
    let mut load = vec![0usize; m];
    for (&r, &j) in preset {
        if requests.contains(&r) && load[j] < capacities[j] {
            out.insert(r, j);
            load[j] += 1;
        }
    }
    let fresh: Vec<RequestId> = requests
        .iter()
        .copied()
        .filter(|r| !out.contains_key(r))
        .collect();
    let mut by_ssm: Vec<Vec<RequestId>> = vec![Vec::new(); m];
    for &r in &fresh {
        by_ssm[rng.random_range(0..m)].push(r);
    }
    let mut dropped = Vec::new();
    for (j, mut group) in by_ssm.into_iter().enumerate() {
        let room = capacities[j] - load[j];
        if group.len() > room {
            group.shuffle(rng);
            dropped.extend(group.split_off(room));
        }
        load[j] += group.len();
        out.extend(group.into_iter().map(|r| (r, j)));
    }
    dropped.sort_unstable();
    for r in dropped {
        let open: Vec<SsmId> = (0..m).filter(|&j| load[j] < capacities[j]).collect();
        if open.is_empty() {
            break;
        }
        let j = open[rng.random_range(0..open.len())];
        load[j] += 1;
        out.insert(r, j);
    }
    out
}

/// Plays slots for a request population: samples acceptance, credits
/// tokens, accounts switching and regret, and backfills finished requests
/// from the waiting pool (a replacement inherits its predecessor's SSM).
pub struct SlotSimulator {
    spec: WorkloadSpec,
    requests: Vec<Request>,
    active: Vec<RequestId>,
    waiting: VecDeque<RequestId>,
    /// Intended SSM per active request for the next slot.
    pub current: BTreeMap<RequestId, SsmId>,
    /// Prewarmed destination per request, consulted when it switches.
    pub prewarmed: BTreeMap<RequestId, SsmId>,
    last_ssm: Vec<Option<SsmId>>,
    streams: Vec<ChaCha8Rng>,
    round_time: Vec<f64>,
    truth: Option<Vec<Vec<f64>>>,
    optimum: Option<(Vec<RequestId>, f64)>,
    ledger: RegretLedger,
    history: Vec<SlotRecord>,
    slot: usize,
}

impl SlotSimulator {
    /// `requests` must be indexed by id (`requests[i].id == i`).
    pub fn new(spec: &WorkloadSpec, requests: Vec<Request>, lambda: f64) -> Result<Self> {
        spec.validate()?;
        for (i, r) in requests.iter().enumerate() {
            if r.id != i as RequestId {
                return Err(Error::Input(format!(
                    "request at position {i} has id {}",
                    r.id
                )));
            }
            if r.accept_prob.len() != spec.num_ssms() {
                return Err(Error::Input(format!(
                    "request {i} lacks acceptance for every ssm"
                )));
            }
        }
        let round_time = (0..spec.num_ssms())
            .map(|j| profiled_round_time(spec, j))
            .collect::<Result<Vec<_>>>()?;
        let truth = Some(ground_truth_goodput(spec, &requests)?);
        let streams = requests
            .iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(r.id);
                rng
            })
            .collect();
        let lanes = spec.total_capacity().min(requests.len());
        let active = (0..lanes as RequestId).collect();
        let waiting = (lanes as RequestId..requests.len() as RequestId).collect();
        Ok(Self {
            spec: spec.clone(),
            last_ssm: vec![None; requests.len()],
            requests,
            active,
            waiting,
            current: BTreeMap::new(),
            prewarmed: BTreeMap::new(),
            streams,
            round_time,
            truth,
            optimum: None,
            ledger: RegretLedger::new(lambda),
            history: Vec::new(),
            slot: 0,
        })
    }

    /// Hides ground truth so regret accounting is unavailable, as in a
    /// live deployment.
    pub fn without_ground_truth(mut self) -> Self {
        self.truth = None;
        self
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn active(&self) -> &[RequestId] {
        &self.active
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn slots_played(&self) -> usize {
        self.slot
    }

    pub fn ledger(&self) -> &RegretLedger {
        &self.ledger
    }

    pub fn history(&self) -> &[SlotRecord] {
        &self.history
    }

    pub fn ground_truth(&self) -> Option<&[Vec<f64>]> {
        self.truth.as_deref()
    }

    pub fn checkpoint(&mut self, epoch: usize) {
        let slot = self.slot;
        self.ledger.checkpoint(slot, epoch);
    }

    pub fn into_parts(self) -> (Vec<SlotRecord>, RegretLedger, Vec<Request>) {
        (self.history, self.ledger, self.requests)
    }

    fn best_fixed_value(&mut self) -> Result<Option<f64>> {
        let Some(truth) = &self.truth else {
            return Ok(None);
        };
        let mut key = self.active.clone();
        key.sort_unstable();
        if let Some((cached, value)) = &self.optimum {
            if *cached == key {
                return Ok(Some(*value));
            }
        }
        let weights = key.iter().map(|&r| truth[r as usize].clone()).collect();
        let value =
            matcher::max_weight_total(&MatchingInstance::new(weights, self.spec.capacities())?)?;
        self.optimum = Some((key, value));
        Ok(Some(value))
    }

    /// Plays one slot under `self.current` and returns its records.
    pub fn run_slot(&mut self, phase: Phase, epoch: usize) -> Result<Vec<SlotRecord>> {
        let m = self.spec.num_ssms();
        let mut load = vec![0usize; m];
        for r in &self.active {
            if let Some(&j) = self.current.get(r) {
                if j >= m {
                    return Err(Error::UnknownSsm(j));
                }
                load[j] += 1;
            }
        }
        for (j, (&l, ssm)) in load.iter().zip(&self.spec.ssm_profiles).enumerate() {
            if l > ssm.batch_capacity {
                return Err(Error::Capacity {
                    ssm: j,
                    batch: l,
                    capacity: ssm.batch_capacity,
                });
            }
        }

        let optimum = self.best_fixed_value()?;
        self.slot += 1;
        let window = self.spec.window;
        let bonus = u32::from(self.spec.bonus_token);
        let mut records = Vec::with_capacity(self.active.len());
        let mut expected_sum = 0.0;
        let mut cost_sum = 0.0;

        for &id in &self.active {
            let idx = id as usize;
            let Some(&ssm) = self.current.get(&id) else {
                records.push(SlotRecord {
                    slot: self.slot,
                    epoch,
                    phase,
                    request_id: id,
                    ssm: None,
                    accepted: 0,
                    bonus: 0,
                    credited: 0,
                    kv_len: self.requests[idx].kv_len(window),
                    wall_time_sec: 0.0,
                    goodput: 0.0,
                    expected_goodput: 0.0,
                    switched: false,
                    cost: 0.0,
                });
                continue;
            };
            let request = &mut self.requests[idx];
            let (switched, cost) = match self.last_ssm[idx] {
                Some(from) if from != ssm => (
                    true,
                    switching_cost(
                        request,
                        from,
                        &self.spec.ssm_profiles[ssm],
                        self.prewarmed.get(&id).copied(),
                    ),
                ),
                _ => (false, 0.0),
            };
            request.activate(ssm)?;
            let kv_len = request.kv_len(window);
            let accepted = sample_accepted_prefix(request, ssm, window, &mut self.streams[idx])?;
            let credited = request.record_tokens(accepted + bonus)?;
            let outcome = SpeculationOutcome {
                request_id: id,
                ssm_id: ssm,
                proposed: window,
                accepted,
                bonus,
                wall_time_sec: self.round_time[ssm],
            };
            let goodput = model::observed_goodput(&outcome)?;
            let expected = self.truth.as_ref().map_or(0.0, |t| t[idx][ssm]);
            expected_sum += expected;
            cost_sum += cost;
            self.last_ssm[idx] = Some(ssm);
            records.push(SlotRecord {
                slot: self.slot,
                epoch,
                phase,
                request_id: id,
                ssm: Some(ssm),
                accepted,
                bonus,
                credited,
                kv_len,
                wall_time_sec: outcome.wall_time_sec,
                goodput,
                expected_goodput: expected,
                switched,
                cost,
            });
        }

        if let Some(opt) = optimum {
            // the best fixed assignment is optimal for this slot's active set
            self.ledger.goodput_regret += (opt - expected_sum).max(0.0);
        }
        self.ledger.switching_cost += cost_sum;
        let total = self.ledger.total();
        self.ledger.per_slot.push(total);

        self.backfill();
        self.history.extend(records.iter().cloned());
        Ok(records)
    }

    fn backfill(&mut self) {
        for lane in 0..self.active.len() {
            let id = self.active[lane];
            if !self.requests[id as usize].is_finished() {
                continue;
            }
            let inherited = self.current.remove(&id);
            self.prewarmed.remove(&id);
            if let Some(next) = self.waiting.pop_front() {
                self.active[lane] = next;
                if let Some(j) = inherited {
                    self.current.insert(next, j);
                }
            } else {
                self.active[lane] = RequestId::MAX;
            }
        }
        self.active.retain(|&r| r != RequestId::MAX);
    }
}

/// One exploration stage: `alpha / beta` chunks of `beta` slots, each chunk
/// with a fresh random assignment. Every observed slot updates the
/// request's estimate for the SSM it ran on.
pub fn run_exploration_epoch<R: Rng + ?Sized>(
    state: &mut BanditState,
    config: &BanditConfig,
    sim: &mut SlotSimulator,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    let capacities = sim.spec().capacities();
    if capacities.iter().sum::<usize>() == 0 {
        return Err(Error::Config("total ssm capacity is zero".into()));
    }
    let m = capacities.len();
    let chunks = config.chunks_per_epoch();
    let mut draw = match state.next_draw.take() {
        Some(pre) => draw_exploration(sim.active(), &capacities, &pre, rng),
        None => draw_exploration(sim.active(), &capacities, &BTreeMap::new(), rng),
    };

    for chunk in 0..chunks {
        if sim.slots_played() >= config.max_slots || sim.active().is_empty() {
            break;
        }
        sim.current = draw.clone();
        state.assignment = draw.clone();
        let next_destination = if chunk + 1 < chunks {
            let next = draw_exploration(sim.active(), &capacities, &BTreeMap::new(), rng);
            draw = next.clone();
            next
        } else {
            prewarm_destination(state, sim.active(), m)
        };
        for step in 0..config.beta {
            if sim.slots_played() >= config.max_slots {
                break;
            }
            let records = sim.run_slot(Phase::Exploration, state.epoch)?;
            for r in &records {
                if let Some(j) = r.ssm {
                    state.observe(r.request_id, j, r.goodput);
                }
            }
            if step == 0 && config.fast_switch {
                sim.prewarmed = next_destination.clone();
                state.prewarmed = next_destination.clone();
            }
        }
    }
    Ok(())
}

/// Exploitation assignment: maximum-weight matching on the current
/// estimates, unobserved pairs ranked above every observed one.
pub fn plan_exploitation(
    state: &BanditState,
    requests: &[RequestId],
    ssm_profiles: &[SsmProfile],
) -> Result<BTreeMap<RequestId, Option<SsmId>>> {
    let weights = matcher::clamp_optimistic(&state.weights(requests, ssm_profiles.len()));
    let capacities = ssm_profiles.iter().map(|s| s.batch_capacity).collect();
    let MatchResult { assignment, .. } =
        matcher::solve_max_weight_matching(&MatchingInstance::new(weights, capacities)?)?;
    Ok(requests.iter().copied().zip(assignment).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionRun {
    pub policy: String,
    pub history: Vec<SlotRecord>,
    pub ledger: RegretLedger,
    pub slots: usize,
    pub credited_tokens: u64,
    /// Mean per-slot observed goodput over served (request, slot) pairs.
    pub mean_observed_goodput: f64,
}

impl SelectionRun {
    pub(crate) fn from_sim(policy: &str, sim: SlotSimulator) -> Self {
        let slots = sim.slots_played();
        let (history, ledger, _) = sim.into_parts();
        let served: Vec<&SlotRecord> = history.iter().filter(|r| r.ssm.is_some()).collect();
        let credited_tokens = history.iter().map(|r| r.credited as u64).sum();
        let mean_observed_goodput = if served.is_empty() {
            0.0
        } else {
            served.iter().map(|r| r.goodput).sum::<f64>() / served.len() as f64
        };
        Self {
            policy: policy.to_string(),
            history,
            ledger,
            slots,
            credited_tokens,
            mean_observed_goodput,
        }
    }
}

/// Seed for policy-side randomness, kept apart from the per-request
/// acceptance streams so policies see identical outcomes for identical
/// choices.
pub(crate) fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Runs the epoch loop until `max_slots` slots have been played.
pub fn run_lbss(
    config: &BanditConfig,
    spec: &WorkloadSpec,
    requests: Vec<Request>,
) -> Result<(SelectionRun, BanditState)> {
    config.validate()?;
    let mut sim = SlotSimulator::new(spec, requests, config.lambda)?;
    let mut rng = policy_rng(spec.seed);
    let mut state = BanditState::new();

    while sim.slots_played() < config.max_slots && !sim.active().is_empty() {
        run_exploration_epoch(&mut state, config, &mut sim, &mut rng)?;
        let remaining = config.max_slots - sim.slots_played();
        let duration = exploitation_duration(state.epoch, remaining);
        if duration > 0 && !sim.active().is_empty() {
            let plan = plan_exploitation(&state, sim.active(), &spec.ssm_profiles)?;
            sim.current = plan
                .iter()
                .filter_map(|(&r, j)| j.map(|j| (r, j)))
                .collect();
            state.assignment = sim.current.clone();
            let capacities = spec.capacities();
            let upcoming = draw_exploration(sim.active(), &capacities, &BTreeMap::new(), &mut rng);
            for step in 0..duration {
                let records = sim.run_slot(Phase::Exploitation, state.epoch)?;
                // exploitation slots feed the estimates too
                for r in &records {
                    if let Some(j) = r.ssm {
                        state.observe(r.request_id, j, r.goodput);
                    }
                }
                if step == 0 && config.fast_switch {
                    sim.prewarmed = upcoming.clone();
                    state.prewarmed = upcoming.clone();
                }
                if sim.active().is_empty() {
                    break;
                }
            }
            state.next_draw = Some(upcoming);
        }
        sim.checkpoint(state.epoch);
        state.epoch += 1;
    }
    Ok((SelectionRun::from_sim("lbss", sim), state))
}

/// Regret recomputed from raw history against ground-truth goodputs
/// indexed by request id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretBreakdown {
    pub goodput_regret: f64,
    pub switching_cost: f64,
    pub total: f64,
}

pub fn cumulative_regret(
    history: &[SlotRecord],
    ground_truth: Option<&[Vec<f64>]>,
    capacities: &[usize],
    lambda: f64,
) -> Result<RegretBreakdown> {
    let truth = ground_truth.ok_or_else(|| {
        Error::Unsupported("regret needs ground-truth goodputs (simulator only)".into())
    })?;
    let mut goodput_regret = 0.0;
    let mut switching = 0.0;
    for slot in slot_groups(history) {
        let mut ids: Vec<RequestId> = slot.iter().map(|r| r.request_id).collect();
        ids.sort_unstable();
        let weights = ids.iter().map(|&r| truth[r as usize].clone()).collect();
        let opt = matcher::max_weight_total(&MatchingInstance::new(weights, capacities.to_vec())?)?;
        let got: f64 = slot
            .iter()
            .filter_map(|r| r.ssm.map(|j| truth[r.request_id as usize][j]))
            .sum();
        goodput_regret += (opt - got).max(0.0);
        switching += slot.iter().map(|r| r.cost).sum::<f64>();
    }
    Ok(RegretBreakdown {
        goodput_regret,
        switching_cost: switching,
        total: goodput_regret + lambda * switching,
    })
}

/// Goodput regret with realized per-slot rewards in place of expectations.
pub fn realized_goodput_regret(
    history: &[SlotRecord],
    ground_truth: &[Vec<f64>],
    capacities: &[usize],
) -> Result<f64> {
    let mut regret = 0.0;
    for slot in slot_groups(history) {
        let weights = slot
            .iter()
            .map(|r| ground_truth[r.request_id as usize].clone())
            .collect();
        let opt = matcher::max_weight_total(&MatchingInstance::new(weights, capacities.to_vec())?)?;
        regret += opt - slot.iter().map(|r| r.goodput).sum::<f64>();
    }
    Ok(regret)
}

/// Splits a history into per-slot groups, in slot order.
pub fn slot_groups(history: &[SlotRecord]) -> Vec<&[SlotRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=history.len() {
        if i == history.len() || history[i].slot != history[start].slot {
            if i > start {
                out.push(&history[start..i]);
            }
            start = i;
        }
    }
    out
}
