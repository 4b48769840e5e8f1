//! Reference selection policies that the bandit is compared against.

use std::collections::BTreeMap;

use rand::Rng;

use crate::bandit::{
    draw_exploration, plan_exploitation, policy_rng, BanditConfig, BanditState, Phase,
    SelectionRun, SlotSimulator,
};
use crate::error::{Error, Result};
use crate::model::{Request, RequestId, SsmId, SsmProfile, WorkloadSpec};

fn play_slot(
    sim: &mut SlotSimulator,
    state: &mut BanditState,
    phase: Phase,
    epoch: usize,
) -> Result<()> {
    for r in sim.run_slot(phase, epoch)? {
        if let Some(j) = r.ssm {
            state.observe(r.request_id, j, r.goodput);
        }
    }
    Ok(())
}

/// Keeps one assignment for the whole horizon. Requests admitted later
/// take over the SSM of the request they replace.
pub fn run_fixed(
    assignment: &BTreeMap<RequestId, SsmId>,
    config: &BanditConfig,
    spec: &WorkloadSpec,
    requests: Vec<Request>,
) -> Result<SelectionRun> {
    config.validate()?;
    let mut sim = SlotSimulator::new(spec, requests, config.lambda)?;
    sim.current = sim
        .active()
        .iter()
        .filter_map(|r| assignment.get(r).map(|&j| (*r, j)))
        .collect();
    while sim.slots_played() < config.max_slots && !sim.active().is_empty() {
        sim.run_slot(Phase::Policy, 0)?;
    }
    sim.checkpoint(0);
    Ok(SelectionRun::from_sim("fixed", sim))
}

/// Every slot, with probability `epsilon` all requests use the matching on
/// current estimates; otherwise every request draws an SSM at random.
pub fn run_epsilon_greedy(
    epsilon: f64,
    config: &BanditConfig,
    spec: &WorkloadSpec,
    requests: Vec<Request>,
) -> Result<SelectionRun> {
    config.validate()?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut sim = SlotSimulator::new(spec, requests, config.lambda)?;
    let mut rng = policy_rng(spec.seed);
    let mut state = BanditState::new();
    let capacities = spec.capacities();
    while sim.slots_played() < config.max_slots && !sim.active().is_empty() {
        let exploit = rng.random::<f64>() < epsilon;
        sim.current = if exploit {
            plan_exploitation(&state, sim.active(), &spec.ssm_profiles)?
                .into_iter()
                .filter_map(|(r, j)| j.map(|j| (r, j)))
                .collect()
        } else {
            draw_exploration(sim.active(), &capacities, &BTreeMap::new(), &mut rng)
        };
        let phase = if exploit {
            Phase::Exploitation
        } else {
            Phase::Exploration
        };
        play_slot(&mut sim, &mut state, phase, 0)?;
    }
    sim.checkpoint(0);
    Ok(SelectionRun::from_sim("epsilon-greedy", sim))
}

/// SSM order used by the prompt-length policy: fastest (smallest) first.
pub fn size_order(ssms: &[SsmProfile]) -> Vec<SsmId> {
    let mut order: Vec<SsmId> = (0..ssms.len()).collect();
    order.sort_by(|&a, &b| {
        ssms[b]
            .tokens_per_sec
            .total_cmp(&ssms[a].tokens_per_sec)
            .then(a.cmp(&b))
    });
    order
}

/// Preferred SSM by prompt length: the workload's prompt lengths are split
/// into `M` quantile bands and band `q` maps to the `q`-th smallest SSM.
pub fn prompt_length_preference(requests: &[Request], ssms: &[SsmProfile]) -> Vec<SsmId> {
    let order = size_order(ssms);
    let m = order.len();
    let mut ranked: Vec<usize> = (0..requests.len()).collect();
    ranked.sort_by_key(|&i| (requests[i].prompt_len, i));
    let mut pref = vec![0; requests.len()];
    for (rank, &i) in ranked.iter().enumerate() {
        pref[i] = order[rank * m / requests.len().max(1)];
    }
    pref
}

/// Greedy prompt-length policy. A request keeps the SSM it got on
/// admission; if its preferred SSM is full it spills to the next larger
/// one, wrapping around.
pub fn run_greedy(
    config: &BanditConfig,
    spec: &WorkloadSpec,
    requests: Vec<Request>,
) -> Result<SelectionRun> {
    config.validate()?;
    let pref = prompt_length_preference(&requests, &spec.ssm_profiles);
    let order = size_order(&spec.ssm_profiles);
    let capacities = spec.capacities();
    let mut sim = SlotSimulator::new(spec, requests, config.lambda)?;
    while sim.slots_played() < config.max_slots && !sim.active().is_empty() {
        let active = sim.active().to_vec();
        let mut load = vec![0usize; capacities.len()];
        let mut current: BTreeMap<RequestId, SsmId> = BTreeMap::new();
        // requests that have already run keep their ssm; newcomers are
        // placed by preference rather than inheriting a lane
        let mut unplaced = Vec::new();
        for &r in &active {
            match sim.current.get(&r) {
                Some(&j) if sim.requests()[r as usize].generated_len > 0 => {
                    current.insert(r, j);
                    load[j] += 1;
                }
                _ => unplaced.push(r),
            }
        }
        for r in unplaced {
            let start = order
                .iter()
                .position(|&j| j == pref[r as usize])
                .unwrap_or(0);
            let slot = (0..order.len())
                .map(|k| order[(start + k) % order.len()])
                .find(|&j| load[j] < capacities[j]);
            if let Some(j) = slot {
                load[j] += 1;
                current.insert(r, j);
            }
        }
        sim.current = current;
        sim.run_slot(Phase::Policy, 0)?;
    }
    sim.checkpoint(0);
    Ok(SelectionRun::from_sim("greedy", sim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, DifficultyClass, LlmProfile, PromptLenDist, TargetLenDist};

    fn spec() -> WorkloadSpec {
        WorkloadSpec {
            num_requests: 6,
            ssm_profiles: vec![
                SsmProfile {
                    id: 0,
                    tokens_per_sec: 100.0,
                    batch_capacity: 2,
                    batch_slowdown: 0.0,
                },
                SsmProfile {
                    id: 1,
                    tokens_per_sec: 400.0,
                    batch_capacity: 2,
                    batch_slowdown: 0.0,
                },
            ],
            llm: LlmProfile {
                fixed_overhead_sec: 0.01,
                per_token_sec: 1e-5,
            },
            difficulty_mix: vec![DifficultyClass::exact(1.0, vec![0.8, 0.4])],
            window: 4,
            seed: 3,
            bonus_token: true,
            prompt_len: PromptLenDist {
                median: 100.0,
                sigma: 1.0,
                min: 1,
                max: 4096,
            },
            target_len: TargetLenDist { min: 20, max: 40 },
        }
    }

    #[test]
    fn fastest_ssm_counts_as_smallest() {
        assert_eq!(size_order(&spec().ssm_profiles), vec![1, 0]);
    }

    #[test]
    fn short_prompts_prefer_small_ssms() {
        let s = spec();
        let reqs = model::generate_workload(&s).unwrap();
        let pref = prompt_length_preference(&reqs, &s.ssm_profiles);
        let shortest = (0..reqs.len()).min_by_key(|&i| reqs[i].prompt_len).unwrap();
        let longest = (0..reqs.len()).max_by_key(|&i| reqs[i].prompt_len).unwrap();
        assert_eq!(pref[shortest], 1);
        assert_eq!(pref[longest], 0);
    }

    #[test]
    fn policies_respect_capacity_and_finish() {
        let s = spec();
        let config = BanditConfig {
            max_slots: 200,
            ..BanditConfig::default()
        };
        let reqs = model::generate_workload(&s).unwrap();
        for run in [
            run_greedy(&config, &s, reqs.clone()).unwrap(),
            run_epsilon_greedy(0.2, &config, &s, reqs.clone()).unwrap(),
        ] {
            let total: u64 = reqs.iter().map(|r| r.target_len as u64).sum();
            assert_eq!(run.credited_tokens, total, "{}", run.policy);
        }
    }

    #[test]
    fn bad_epsilon_rejected() {
        let s = spec();
        let reqs = model::generate_workload(&s).unwrap();
        assert!(run_epsilon_greedy(1.5, &BanditConfig::default(), &s, reqs).is_err());
    }
}
