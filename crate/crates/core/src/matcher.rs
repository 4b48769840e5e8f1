//! Capacity-constrained maximum-weight assignment of requests to SSMs.
//!
//! Each SSM `j` is expanded into `B_j` identical replica columns and the
//! resulting bipartite graph is solved with the Kuhn-Munkres (Hungarian)
//! algorithm. Among all optimal assignments the solver returns the
//! lexicographically smallest one (request 0 first, lowest SSM first,
//! `Unassigned` last), found by walking alternating cycles inside the
//! tight-edge subgraph of the optimal dual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SsmId;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingInstance {
    /// `weights[i][j]`: value of serving request `i` on SSM `j`.
    pub weights: Vec<Vec<f64>>,
    pub capacities: Vec<usize>,
}

impl MatchingInstance {
    pub fn new(weights: Vec<Vec<f64>>, capacities: Vec<usize>) -> Result<Self> {
        let inst = Self {
            weights,
            capacities,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn num_requests(&self) -> usize {
        self.weights.len()
    }

    pub fn num_ssms(&self) -> usize {
        self.capacities.len()
    }

    pub fn total_capacity(&self) -> usize {
        self.capacities.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.capacities.len();
        if self.total_capacity() == 0 {
            return Err(Error::Config("total ssm capacity is zero".into()));
        }
        for (i, row) in self.weights.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Input(format!(
                    "weight row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            if let Some(w) = row.iter().find(|w| !w.is_finite()) {
                return Err(Error::Input(format!("non-finite weight {w} in row {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Per request: the chosen SSM, or `None` when left unassigned.
    pub assignment: Vec<Option<SsmId>>,
    pub total_weight: f64,
}

impl MatchResult {
    pub fn load(&self, num_ssms: usize) -> Vec<usize> {
        let mut load = vec![0; num_ssms];
        for j in self.assignment.iter().flatten() {
            load[*j] += 1;
        }
        load
    }

    pub fn is_feasible(&self, capacities: &[usize]) -> bool {
        self.load(capacities.len())
            .iter()
            .zip(capacities)
            .all(|(l, c)| l <= c)
    }
}

/// Replica-expanded square weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaMatrix {
    pub weights: Vec<Vec<f64>>,
    /// Owning SSM of each column; `None` marks a dummy column.
    pub column_ssm: Vec<Option<SsmId>>,
    /// Rows `0..real_rows` are requests; the rest are dummies.
    pub real_rows: usize,
}

impl ReplicaMatrix {
    pub fn size(&self) -> usize {
        self.weights.len()
    }
}

/// Expands every SSM into `B_j` identical columns and pads the matrix to
/// square with zero-weight dummy rows or columns.
pub fn expand_replicas(instance: &MatchingInstance) -> ReplicaMatrix {
    let n = instance.num_requests();
    let mut column_ssm: Vec<Option<SsmId>> = instance
        .capacities
        .iter()
        .enumerate()
        .flat_map(|(j, &b)| std::iter::repeat_n(Some(j), b))
        .collect();
    let size = n.max(column_ssm.len());
    column_ssm.resize(size, None);

    let weights = (0..size)
        .map(|i| {
            column_ssm
                .iter()
                .map(|col| match (instance.weights.get(i), col) {
                    (Some(row), Some(j)) => row[*j],
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    ReplicaMatrix {
        weights,
        column_ssm,
        real_rows: n,
    }
}

struct Hungarian {
    /// `row_of[c]`: row matched to column `c`.
    row_of: Vec<usize>,
    col_of: Vec<usize>,
    /// `reduced[i][c] = cost - u_i - v_c`, non-negative, zero on the matching.
    reduced: Vec<Vec<f64>>,
}

/// Min-cost perfect assignment on a square matrix, `O(n^3)`.
fn hungarian(cost: &[Vec<f64>]) -> Hungarian {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_of = vec![0; n];
    let mut col_of = vec![0; n];
    for j in 1..=n {
        row_of[j - 1] = p[j] - 1;
        col_of[p[j] - 1] = j - 1;
    }
    let reduced = (0..n)
        .map(|i| (0..n).map(|j| cost[i][j] - u[i + 1] - v[j + 1]).collect())
        .collect();
    Hungarian {
        row_of,
        col_of,
        reduced,
    }
}

fn solve_raw(instance: &MatchingInstance) -> Result<(ReplicaMatrix, Hungarian)> {
    instance.validate()?;
    let replicas = expand_replicas(instance);
    let cost: Vec<Vec<f64>> = replicas
        .weights
        .iter()
        .map(|row| row.iter().map(|w| -w).collect())
        .collect();
    let solved = hungarian(&cost);
    Ok((replicas, solved))
}

fn total_of(instance: &MatchingInstance, assignment: &[Option<SsmId>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| instance.weights[i][j]))
        .sum()
}

/// Optimal total weight only; skips the canonical tie-break.
pub fn max_weight_total(instance: &MatchingInstance) -> Result<f64> {
    if instance.num_requests() == 0 {
        instance.validate()?;
        return Ok(0.0);
    }
    let (replicas, solved) = solve_raw(instance)?;
    let assignment: Vec<Option<SsmId>> = (0..replicas.real_rows)
        .map(|i| replicas.column_ssm[solved.col_of[i]])
        .collect();
    Ok(total_of(instance, &assignment))
}

/// Maximum-weight capacity-feasible assignment. When `sum B_j < N` exactly
/// `sum B_j` requests are assigned; otherwise every request is.
pub fn solve_max_weight_matching(instance: &MatchingInstance) -> Result<MatchResult> {
    if instance.num_requests() == 0 {
        instance.validate()?;
        return Ok(MatchResult {
            assignment: Vec::new(),
            total_weight: 0.0,
        });
    }
    let (replicas, solved) = solve_raw(instance)?;
    let Hungarian {
        mut row_of,
        mut col_of,
        reduced,
    } = solved;

    let scale = instance
        .weights
        .iter()
        .flatten()
        .fold(1.0f64, |acc, w| acc.max(w.abs()));
    let tol = 1e-9 * scale;
    let n = replicas.size();
    let tight = |i: usize, c: usize| reduced[i][c] <= tol;

    // option rank: ssm id, dummy columns last
    let rank = |c: usize| replicas.column_ssm[c].unwrap_or(usize::MAX);

    for i in 0..replicas.real_rows {
        let mut options: Vec<usize> = (0..n).filter(|&c| tight(i, c)).collect();
        options.sort_by_key(|&c| (rank(c), c));
        for c in options {
            if rank(c) >= rank(col_of[i]) {
                // current column is already the best reachable option
                break;
            }
            let old = col_of[i];
            let r = row_of[c];
            let mut visited = vec![false; n];
            visited[c] = true;
            let mut path = Vec::new();
            if reroute(r, old, i, &tight, &row_of, &mut visited, &mut path) {
                // path holds (row, new column) pairs along the alternating cycle
                for (row, col) in path {
                    row_of[col] = row;
                    col_of[row] = col;
                }
                row_of[c] = i;
                col_of[i] = c;
                break;
            }
        }
    }

    let assignment: Vec<Option<SsmId>> = (0..replicas.real_rows)
        .map(|i| replicas.column_ssm[col_of[i]])
        .collect();
    let total_weight = total_of(instance, &assignment);
    Ok(MatchResult {
        assignment,
        total_weight,
    })
}

/// Finds tight columns for `row` and successors so that the chain ends on
/// `target`, touching only rows after `pivot`.
fn reroute(
    row: usize,
    target: usize,
    pivot: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    row_of: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    if row <= pivot {
        return false;
    }
    for c in 0..visited.len() {
        if visited[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = row_of[c];
        if reroute(next, target, pivot, tight, row_of, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}

/// Largest instance the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive search over all feasible assignments, lexicographic order,
/// keeping the first maximizer. Test oracle for the Hungarian path.
pub fn brute_force_matching(instance: &MatchingInstance) -> Result<MatchResult> {
    instance.validate()?;
    let n = instance.num_requests();
    let total_cap = instance.total_capacity();
    if n > BRUTE_FORCE_LIMIT || total_cap > BRUTE_FORCE_LIMIT {
        return Err(Error::Size(format!(
            "N = {n}, sum B = {total_cap}; limit is {BRUTE_FORCE_LIMIT}"
        )));
    }
    let must_assign = n.min(total_cap);
    let mut state = BruteState {
        instance,
        remaining: instance.capacities.clone(),
        current: Vec::with_capacity(n),
        best: None,
        must_assign,
    };
    state.search(0, 0);
    let (assignment, total_weight) = state.best.expect("at least one feasible assignment");
    Ok(MatchResult {
        assignment,
        total_weight,
    })
}

struct BruteState<'a> {
    instance: &'a MatchingInstance,
    remaining: Vec<usize>,
    current: Vec<Option<SsmId>>,
    best: Option<(Vec<Option<SsmId>>, f64)>,
    must_assign: usize,
}

impl BruteState<'_> {
    fn search(&mut self, i: usize, assigned: usize) {
        let n = self.instance.num_requests();
        if i == n {
            if assigned != self.must_assign {
                return;
            }
            let total = total_of(self.instance, &self.current);
            let better = match &self.best {
                None => true,
                Some((_, best)) => total > *best + 1e-12 * best.abs().max(1.0),
            };
            if better {
                self.best = Some((self.current.clone(), total));
            }
            return;
        }
        for j in 0..self.instance.num_ssms() {
            if self.remaining[j] == 0 {
                continue;
            }
            self.remaining[j] -= 1;
            self.current.push(Some(j));
            self.search(i + 1, assigned + 1);
            self.current.pop();
            self.remaining[j] += 1;
        }
        // leaving request i out is only legal if the rest can still fill capacity
        if assigned + (n - i - 1) >= self.must_assign {
            self.current.push(None);
            self.search(i + 1, assigned);
            self.current.pop();
        }
    }
}

/// Replaces `+inf` (unobserved) weights with one more than the largest
/// finite weight so they keep priority while arithmetic stays finite.
pub fn clamp_optimistic(weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let max_finite = weights
        .iter()
        .flatten()
        .copied()
        .filter(|w| w.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let ceiling = if max_finite.is_finite() {
        max_finite + 1.0
    } else {
        1.0
    };
    weights
        .iter()
        .map(|row| {
            row.iter()
                .map(|&w| if w == f64::INFINITY { ceiling } else { w })
                .collect()
        })
        .collect()
}
