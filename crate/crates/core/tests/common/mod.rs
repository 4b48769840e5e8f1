#![allow(dead_code)]

use hetspec::model::{
    DifficultyClass, LlmProfile, PromptLenDist, SsmProfile, TargetLenDist, WorkloadSpec,
};

/// Small workload: one exact-acceptance class per row of `accept`, SSM `j`
/// running at `200 / (j + 1)` tokens/s.
pub fn spec(accept: Vec<Vec<f64>>, capacity: usize, n: usize, seed: u64) -> WorkloadSpec {
    let m = accept[0].len();
    let share = 1.0 / accept.len() as f64;
    WorkloadSpec {
        num_requests: n,
        ssm_profiles: (0..m)
            .map(|id| SsmProfile {
                id,
                tokens_per_sec: 200.0 / (id + 1) as f64,
                batch_capacity: capacity,
                batch_slowdown: 0.05,
            })
            .collect(),
        llm: LlmProfile {
            fixed_overhead_sec: 0.01,
            per_token_sec: 1e-5,
        },
        difficulty_mix: accept
            .into_iter()
            .map(|a| DifficultyClass::exact(share, a))
            .collect(),
        window: 4,
        seed,
        bonus_token: true,
        prompt_len: PromptLenDist {
            median: 64.0,
            sigma: 0.5,
            min: 8,
            max: 512,
        },
        target_len: TargetLenDist { min: 40, max: 400 },
    }
}
