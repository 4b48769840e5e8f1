//! Requests, model profiles, the acceptance process and the timing cost model.
//!
//! Everything here is a pure function of its inputs plus a caller-owned rng.
//! Acceptance follows prefix-rejection semantics: the verifier keeps the
//! leading run of proposed tokens that it agrees with, then (optionally)
//! emits one correction token of its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RequestId = u64;
pub type SsmId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Waiting,
    Active(SsmId),
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub prompt_len: u32,
    pub target_len: u32,
    /// Ground-truth per-token acceptance probability, indexed by ssm id.
    /// Only the simulator reads this; selection policies never do.
    pub accept_prob: Vec<f64>,
    pub generated_len: u32,
    pub state: RequestState,
    /// Index of the difficulty class the request was drawn from.
    pub class: usize,
}

impl Request {
    pub fn acceptance(&self, ssm: SsmId) -> Result<f64> {
        self.accept_prob
            .get(ssm)
            .copied()
            .ok_or(Error::UnknownSsm(ssm))
    }

    /// Tokens resident in the KV cache during verification: prompt, output
    /// so far and the speculation window under review.
    pub fn kv_len(&self, window: u32) -> u32 {
        self.prompt_len + self.generated_len + window
    }

    /// Tokens whose KV must be recomputed when the request moves to another SSM.
    pub fn context_len(&self) -> u32 {
        self.prompt_len + self.generated_len
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    /// Moves the request onto `ssm`. Legal from `Waiting` or `Active`.
    pub fn activate(&mut self, ssm: SsmId) -> Result<()> {
        if ssm >= self.accept_prob.len() {
            return Err(Error::UnknownSsm(ssm));
        }
        match self.state {
            RequestState::Waiting | RequestState::Active(_) => {
                self.state = RequestState::Active(ssm);
                Ok(())
            }
            RequestState::Finished => Err(Error::Input(format!(
                "request {} is finished and cannot be reactivated",
                self.id
            ))),
        }
    }

    /// Appends up to `tokens` generated tokens, clamped at `target_len`.
    /// Returns the number actually credited and finishes the request when
    /// the target is reached.
    pub fn record_tokens(&mut self, tokens: u32) -> Result<u32> {
        if !matches!(self.state, RequestState::Active(_)) {
            return Err(Error::Input(format!("request {} is not active", self.id)));
        }
        let credited = tokens.min(self.target_len - self.generated_len);
        self.generated_len += credited;
        if self.generated_len >= self.target_len {
            self.state = RequestState::Finished;
        }
        Ok(credited)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmProfile {
    pub id: SsmId,
    /// Speculation speed for a single request, tokens per second.
    pub tokens_per_sec: f64,
    pub batch_capacity: usize,
    /// Relative slowdown per extra request in the batch.
    pub batch_slowdown: f64,
}

impl SsmProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.tokens_per_sec.is_finite() && self.tokens_per_sec > 0.0) {
            return Err(Error::Config(format!(
                "ssm {}: tokens_per_sec must be positive",
                self.id
            )));
        }
        if self.batch_capacity == 0 {
            return Err(Error::Config(format!(
                "ssm {}: batch_capacity must be at least 1",
                self.id
            )));
        }
        if !(self.batch_slowdown.is_finite() && self.batch_slowdown >= 0.0) {
            return Err(Error::Config(format!(
                "ssm {}: batch_slowdown must be non-negative",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmProfile {
    pub fixed_overhead_sec: f64,
    /// Cost of one KV or query token in a verification pass, padding included.
    pub per_token_sec: f64,
}

impl LlmProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_overhead_sec.is_finite() && self.fixed_overhead_sec >= 0.0) {
            return Err(Error::Config("llm fixed_overhead_sec must be >= 0".into()));
        }
        if !(self.per_token_sec.is_finite() && self.per_token_sec > 0.0) {
            return Err(Error::Config("llm per_token_sec must be > 0".into()));
        }
        Ok(())
    }
}

/// One class in the workload's difficulty mix: a weight and, per SSM, the
/// range the request's acceptance probability is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyClass {
    #[serde(default)]
    pub name: String,
    pub weight: f64,
    pub accept_lo: Vec<f64>,
    pub accept_hi: Vec<f64>,
}

impl DifficultyClass {
    pub fn exact(weight: f64, accept: Vec<f64>) -> Self {
        Self {
            name: String::new(),
            weight,
            accept_lo: accept.clone(),
            accept_hi: accept,
        }
    }
}

/// Prompt lengths are lognormal around `median`, clamped to `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLenDist {
    pub median: f64,
    pub sigma: f64,
    pub min: u32,
    pub max: u32,
}

impl Default for PromptLenDist {
    fn default() -> Self {
        Self {
            median: 128.0,
            sigma: 0.0,
            min: 1,
            max: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLenDist {
    pub min: u32,
    pub max: u32,
}

impl Default for TargetLenDist {
    fn default() -> Self {
        Self { min: 256, max: 256 }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub num_requests: usize,
    pub ssm_profiles: Vec<SsmProfile>,
    pub llm: LlmProfile,
    pub difficulty_mix: Vec<DifficultyClass>,
    pub window: u32,
    pub seed: u64,
    /// Whether each verification emits one verifier token after the
    /// accepted prefix.
    #[serde(default = "default_true")]
    pub bonus_token: bool,
    #[serde(default)]
    pub prompt_len: PromptLenDist,
    #[serde(default)]
    pub target_len: TargetLenDist,
}

impl WorkloadSpec {
    pub fn num_ssms(&self) -> usize {
        self.ssm_profiles.len()
    }

    pub fn capacities(&self) -> Vec<usize> {
        self.ssm_profiles.iter().map(|s| s.batch_capacity).collect()
    }

    pub fn total_capacity(&self) -> usize {
        self.ssm_profiles.iter().map(|s| s.batch_capacity).sum()
    }

    pub fn ssm(&self, id: SsmId) -> Result<&SsmProfile> {
        self.ssm_profiles.get(id).ok_or(Error::UnknownSsm(id))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ssm_profiles.is_empty() {
            return Err(Error::Config("workload has no ssm profiles".into()));
        }
        for (idx, ssm) in self.ssm_profiles.iter().enumerate() {
            if ssm.id != idx {
                return Err(Error::Config(format!(
                    "ssm ids must be 0..M in order; position {idx} has id {}",
                    ssm.id
                )));
            }
            ssm.validate()?;
        }
        self.llm.validate()?;
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.difficulty_mix.is_empty() {
            return Err(Error::Config("difficulty_mix is empty".into()));
        }
        let m = self.ssm_profiles.len();
        let mut total = 0.0;
        for (c, class) in self.difficulty_mix.iter().enumerate() {
            if !(class.weight.is_finite() && class.weight >= 0.0) {
                return Err(Error::Config(format!("class {c}: weight must be >= 0")));
            }
            total += class.weight;
            if class.accept_lo.len() != m || class.accept_hi.len() != m {
                return Err(Error::Config(format!(
                    "class {c}: acceptance ranges must list all {m} ssms"
                )));
            }
            for (lo, hi) in class.accept_lo.iter().zip(&class.accept_hi) {
                if !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || lo > hi {
                    return Err(Error::Config(format!(
                        "class {c}: acceptance range [{lo}, {hi}] not within [0, 1]"
                    )));
                }
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "difficulty weights sum to {total}, expected 1"
            )));
        }
        let p = &self.prompt_len;
        if p.min == 0 || p.min > p.max || !(p.median > 0.0) || !(p.sigma >= 0.0) {
            return Err(Error::Config("invalid prompt_len distribution".into()));
        }
        let t = &self.target_len;
        if t.min == 0 || t.min > t.max {
            return Err(Error::Config("invalid target_len range".into()));
        }
        Ok(())
    }
}

/// Draws the request population. Identical spec and seed give an identical
/// workload.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prompt = LogNormal::new(spec.prompt_len.median.ln(), spec.prompt_len.sigma)
        .map_err(|e| Error::Config(format!("prompt_len: {e}")))?;

    let mut requests = Vec::with_capacity(spec.num_requests);
    for id in 0..spec.num_requests {
        let class = pick_class(&spec.difficulty_mix, rng.random::<f64>());
        let mix = &spec.difficulty_mix[class];
        let accept_prob = mix
            .accept_lo
            .iter()
            .zip(&mix.accept_hi)
            .map(|(&lo, &hi)| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect();
        let raw: f64 = prompt.sample(&mut rng);
        let prompt_len = (raw.round() as u32).clamp(spec.prompt_len.min, spec.prompt_len.max);
        let target_len = rng.random_range(spec.target_len.min..=spec.target_len.max);
        requests.push(Request {
            id: id as RequestId,
            prompt_len,
            target_len,
            accept_prob,
            generated_len: 0,
            state: RequestState::Waiting,
            class,
        });
    }
    Ok(requests)
}

fn pick_class(mix: &[DifficultyClass], u: f64) -> usize {
    let mut acc = 0.0;
    for (idx, class) in mix.iter().enumerate() {
        acc += class.weight;
        if u < acc {
            return idx;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    mix.iter().rposition(|c| c.weight > 0.0).unwrap_or(0)
}

/// Length of the leading run of accepted tokens among `window` proposals,
/// each accepted independently with the request's probability for `ssm`.
pub fn sample_accepted_prefix<R: Rng + ?Sized>(
    request: &Request,
    ssm: SsmId,
    window: u32,
    rng: &mut R,
) -> Result<u32> {
    let p = request.acceptance(ssm)?;
    let mut accepted = 0;
    while accepted < window {
        if rng.random::<f64>() < p {
            accepted += 1;
        } else {
            break;
        }
    }
    Ok(accepted)
}

/// Closed-form mean of [`sample_accepted_prefix`]: `sum_{k=1..w} p^k`.
pub fn expected_accepted_prefix(p: f64, window: u32) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for _ in 0..window {
        term *= p;
        sum += term;
    }
    sum
}

/// Expected tokens emitted by one verification round.
pub fn expected_round_tokens(p: f64, window: u32, bonus_token: bool) -> f64 {
    expected_accepted_prefix(p, window) + if bonus_token { 1.0 } else { 0.0 }
}

/// Seconds for `ssm` to propose `window` tokens for each request of a batch.
pub fn speculation_time(ssm: &SsmProfile, batch_size: usize, window: u32) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be >= 1".into()));
    }
    if batch_size > ssm.batch_capacity {
        return Err(Error::Capacity {
            ssm: ssm.id,
            batch: batch_size,
            capacity: ssm.batch_capacity,
        });
    }
    let base = window as f64 / ssm.tokens_per_sec;
    Ok(base * (1.0 + ssm.batch_slowdown * (batch_size - 1) as f64))
}

/// Seconds for one verifier forward pass over `total_tokens` (padding included).
pub fn verification_time(llm: &LlmProfile, total_tokens: u64) -> f64 {
    llm.fixed_overhead_sec + llm.per_token_sec * total_tokens as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculationOutcome {
    pub request_id: RequestId,
    pub ssm_id: SsmId,
    pub proposed: u32,
    pub accepted: u32,
    pub bonus: u32,
    pub wall_time_sec: f64,
}

/// Tokens the verifier kept per second of wall time for one round.
pub fn observed_goodput(outcome: &SpeculationOutcome) -> Result<f64> {
    if !(outcome.wall_time_sec > 0.0) {
        return Err(Error::Arithmetic(format!(
            "non-positive wall time {} for request {}",
            outcome.wall_time_sec, outcome.request_id
        )));
    }
    Ok((outcome.accepted + outcome.bonus) as f64 / outcome.wall_time_sec)
}

/// Profiled round latency the selector divides by when it scores a slot:
/// a full batch of speculation on `ssm` plus one full-cluster verification
/// pass at the median prompt length.
pub fn profiled_round_time(spec: &WorkloadSpec, ssm: SsmId) -> Result<f64> {
    let profile = spec.ssm(ssm)?;
    let spec_sec = speculation_time(profile, profile.batch_capacity, spec.window)?;
    let tokens =
        spec.total_capacity() as f64 * (spec.prompt_len.median.round() + spec.window as f64);
    Ok(spec_sec + verification_time(&spec.llm, tokens as u64))
}

/// Expected per-round goodput of every (request, ssm) pair under the
/// profiled latency. Simulator-only knowledge.
pub fn ground_truth_goodput(spec: &WorkloadSpec, requests: &[Request]) -> Result<Vec<Vec<f64>>> {
    let round: Vec<f64> = (0..spec.num_ssms())
        .map(|j| profiled_round_time(spec, j))
        .collect::<Result<_>>()?;
    requests
        .iter()
        .map(|r| {
            (0..spec.num_ssms())
                .map(|j| {
                    Ok(
                        expected_round_tokens(r.acceptance(j)?, spec.window, spec.bonus_token)
                            / round[j],
                    )
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_ssm_spec(p: f64) -> WorkloadSpec {
        WorkloadSpec {
            num_requests: 1,
            ssm_profiles: vec![SsmProfile {
                id: 0,
                tokens_per_sec: 100.0,
                batch_capacity: 8,
                batch_slowdown: 0.0,
            }],
            llm: LlmProfile {
                fixed_overhead_sec: 0.01,
                per_token_sec: 0.001,
            },
            difficulty_mix: vec![DifficultyClass::exact(1.0, vec![p])],
            window: 5,
            seed: 3,
            bonus_token: true,
            prompt_len: PromptLenDist::default(),
            target_len: TargetLenDist::default(),
        }
    }

    fn request(p: Vec<f64>) -> Request {
        Request {
            id: 0,
            prompt_len: 10,
            target_len: 100,
            accept_prob: p,
            generated_len: 0,
            state: RequestState::Active(0),
            class: 0,
        }
    }

    #[test]
    fn degenerate_mix_gives_exact_probability() {
        let reqs = generate_workload(&one_ssm_spec(0.5)).unwrap();
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].accept_prob, vec![0.5]);
    }

    #[test]
    fn workload_is_deterministic() {
        let spec = one_ssm_spec(0.7);
        let a = serde_json::to_string(&generate_workload(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_workload(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_ssm_list_is_a_config_error() {
        let mut spec = one_ssm_spec(0.5);
        spec.ssm_profiles.clear();
        assert!(matches!(generate_workload(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn bad_weights_rejected() {
        let mut spec = one_ssm_spec(0.5);
        spec.difficulty_mix[0].weight = 0.9;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn certain_acceptance_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                sample_accepted_prefix(&request(vec![1.0]), 0, 5, &mut rng).unwrap(),
                5
            );
            assert_eq!(
                sample_accepted_prefix(&request(vec![0.0]), 0, 5, &mut rng).unwrap(),
                0
            );
        }
    }

    #[test]
    fn unknown_ssm_lookup_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_accepted_prefix(&request(vec![0.5]), 3, 5, &mut rng),
            Err(Error::UnknownSsm(3))
        );
    }

    #[test]
    fn speculation_time_formula() {
        let mut ssm = SsmProfile {
            id: 0,
            tokens_per_sec: 100.0,
            batch_capacity: 8,
            batch_slowdown: 0.0,
        };
        assert!((speculation_time(&ssm, 8, 5).unwrap() - 0.05).abs() < 1e-12);
        ssm.batch_slowdown = 0.1;
        assert!((speculation_time(&ssm, 2, 5).unwrap() - 0.055).abs() < 1e-12);
        assert!(matches!(
            speculation_time(&ssm, 9, 5),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn verification_time_formula() {
        let llm = LlmProfile {
            fixed_overhead_sec: 0.01,
            per_token_sec: 0.001,
        };
        assert!((verification_time(&llm, 0) - 0.01).abs() < 1e-12);
        assert!((verification_time(&llm, 240) - 0.25).abs() < 1e-12);
        assert!((verification_time(&llm, 160) - 0.17).abs() < 1e-12);
    }

    #[test]
    fn goodput_arithmetic() {
        let mut o = SpeculationOutcome {
            request_id: 0,
            ssm_id: 0,
            proposed: 4,
            accepted: 4,
            bonus: 1,
            wall_time_sec: 0.1,
        };
        assert!((observed_goodput(&o).unwrap() - 50.0).abs() < 1e-9);
        o.accepted = 0;
        assert!((observed_goodput(&o).unwrap() - 10.0).abs() < 1e-9);
        o.bonus = 0;
        assert_eq!(observed_goodput(&o).unwrap(), 0.0);
        o.wall_time_sec = 0.0;
        assert!(matches!(observed_goodput(&o), Err(Error::Arithmetic(_))));
    }

    #[test]
    fn state_transitions() {
        let mut r = request(vec![0.5, 0.5]);
        r.state = RequestState::Waiting;
        r.activate(0).unwrap();
        r.activate(1).unwrap();
        r.generated_len = 98;
        assert_eq!(r.record_tokens(5).unwrap(), 2);
        assert!(r.is_finished());
        assert!(r.activate(0).is_err());
        assert!(r.record_tokens(1).is_err());
    }
}
