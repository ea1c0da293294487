//! Budget-driven configuration search.
//!
//! For each reserve ratio the bit allocation is a multiple-choice knapsack:
//! pick one width per group, minimizing summed loss under a size budget. It is
//! solved exactly by dynamic programming, first per channel (widths 1..=16)
//! and then per group inside each channel's share of the budget (widths
//! 0..=16). The size model is affine in the widths; its offset `s_delta` is
//! recalibrated against real encoded sizes until the container lands within
//! tolerance of the budget.

use serde::Serialize;
use thiserror::Error;

use crate::codec::{CodecError, Encoded, PrepareConfig, PreparedScene, SizeBreakdown};
use crate::model::GaussianCloud;
use crate::quant::{BitWidthMatrix, LossTable, MAX_BITS, WIDTH_OPTIONS};
use crate::splat::{self, Camera, DEFAULT_BETA};
use crate::transform::{Channel, TransformPlan, CHANNEL_COUNT};

/// Largest DP table width (capacity units) before sizes are coarsened.
const DP_UNITS: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("infeasible: the smallest choice needs {min_size} units")]
pub struct Infeasible {
    pub min_size: u64,
}

/// Exact multiple-choice knapsack: one option per item, minimal total loss
/// with total size at most `budget`. Among optimal choices the
/// lexicographically smallest option-index vector is returned.
///
/// Tables wider than 65536 capacity units are solved with sizes rounded up to
/// a coarser unit, which keeps every returned choice within budget.
pub fn mckp_solve(losses: &[Vec<f64>], sizes: &[Vec<u64>], budget: u64) -> Result<Vec<usize>, Infeasible> {
    assert_eq!(losses.len(), sizes.len());
    let min_size: u64 = sizes.iter().map(|s| s.iter().copied().min().unwrap_or(0)).sum();
    if min_size > budget {
        return Err(Infeasible { min_size });
    }
    let max_size: u64 = sizes.iter().map(|s| s.iter().copied().max().unwrap_or(0)).sum();
    let cap = budget.min(max_size);
    let unit = cap.div_ceil(DP_UNITS).max(1);
    let width = (cap / unit) as usize;
    let coarse: Vec<Vec<usize>> = sizes
        .iter()
        .map(|s| s.iter().map(|&v| v.div_ceil(unit) as usize).collect())
        .collect();
    // drop options beaten on both axes (no larger and strictly lower loss)
    let live: Vec<Vec<usize>> = losses
        .iter()
        .zip(&coarse)
        .map(|(l, s)| {
            (0..l.len())
                .filter(|&o| !(0..l.len()).any(|p| s[p] <= s[o] && l[p] < l[o]))
                .collect()
        })
        .collect();
    let g = losses.len();
    let mut best = vec![vec![f64::INFINITY; width + 1]; g + 1];
    best[g].iter_mut().for_each(|v| *v = 0.0);
    for i in (0..g).rev() {
        let (head, tail) = best.split_at_mut(i + 1);
        let (row, next) = (&mut head[i], &tail[0]);
        for c in 0..=width {
            let mut v = f64::INFINITY;
            for &o in &live[i] {
                let s = coarse[i][o];
                if s <= c {
                    v = v.min(losses[i][o] + next[c - s]);
                }
            }
            row[c] = v;
        }
    }
    if !best[0][width].is_finite() {
        // coarsening lost feasibility; the smallest options still fit exactly
        return Ok(sizes
            .iter()
            .zip(losses)
            .map(|(s, l)| {
                (0..s.len())
                    .min_by(|&a, &b| s[a].cmp(&s[b]).then(l[a].total_cmp(&l[b])).then(a.cmp(&b)))
                    .unwrap()
            })
            .collect());
    }
    let mut choice = Vec::with_capacity(g);
    let mut c = width;
    for i in 0..g {
        let target = best[i][c];
        let o = (0..losses[i].len())
            .find(|&o| {
                let s = coarse[i][o];
                s <= c && losses[i][o] + best[i + 1][c - s] == target
            })
            .expect("optimal option present");
        choice.push(o);
        c -= coarse[i][o];
    }
    Ok(choice)
}

/// Channel widths `1..=16` from per-channel losses and sizes indexed by `width - 1`.
pub fn solve_channel_ilp(loss: &[[f64; 16]], sizes: &[[u64; 16]], budget: u64) -> Result<Vec<u8>, Infeasible> {
    let l: Vec<Vec<f64>> = loss.iter().map(|r| r.to_vec()).collect();
    let s: Vec<Vec<u64>> = sizes.iter().map(|r| r.to_vec()).collect();
    Ok(mckp_solve(&l, &s, budget)?.into_iter().map(|o| o as u8 + 1).collect())
}

/// Proportional split `S_c = S_T q_c / sum(q)`; the rounding remainder goes to
/// the channel with the largest width (lowest index on ties).
pub fn split_channel_budget(qc: &[u8], total: u64) -> Vec<u64> {
    let sum: u64 = qc.iter().map(|&q| u64::from(q)).sum();
    if sum == 0 {
        return vec![0; qc.len()];
    }
    let mut out: Vec<u64> = qc
        .iter()
        .map(|&q| (u128::from(total) * u128::from(q) / u128::from(sum)) as u64)
        .collect();
    let rest = total - out.iter().sum::<u64>();
    let largest = (0..qc.len()).max_by(|&a, &b| qc[a].cmp(&qc[b]).then(b.cmp(&a))).unwrap();
    out[largest] += rest;
    out
}

/// Group widths `0..=16` for one channel; `omega` holds additive losses per
/// width and `lens` the group lengths (size of width `b` is `len * b` bits).
pub fn solve_group_ilp(omega: &[[f64; WIDTH_OPTIONS]], lens: &[usize], budget_bits: u64) -> Vec<u8> {
    let l: Vec<Vec<f64>> = omega.iter().map(|r| r.to_vec()).collect();
    let s: Vec<Vec<u64>> = lens
        .iter()
        .map(|&n| (0..WIDTH_OPTIONS as u64).map(|b| n as u64 * b).collect())
        .collect();
    mckp_solve(&l, &s, budget_bits)
        .expect("width 0 is always feasible")
        .into_iter()
        .map(|o| o as u8)
        .collect()
}

/// Literal objective: the sum of per-group losses.
pub fn total_quality(table: &LossTable, q: &BitWidthMatrix) -> f64 {
    let mut s = 0.0;
    for (i, row) in q.rows.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            s += table.get(i, j, b);
        }
    }
    s
}

/// Norm of the whole residual, combining group norms (for L2 the square root
/// of the total squared error).
pub fn aggregate_quality(table: &LossTable, q: &BitWidthMatrix) -> f64 {
    let it = q
        .rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &b)| table.get(i, j, b)));
    table.norm.aggregate(it)
}

/// Affine size estimate in bytes: `sum P_ij q_ij + const + s_delta` with
/// `P_ij = n_ij / 8`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeModel {
    pub p: Vec<Vec<f64>>,
    pub const_bytes: f64,
    pub s_delta: f64,
}

impl SizeModel {
    pub fn new(prep: &PreparedScene, plan: &TransformPlan, const_bytes: f64, s_delta: f64) -> Self {
        let part = prep.partition(plan);
        Self {
            p: part
                .layouts
                .iter()
                .map(|l| (0..l.blocks()).map(|j| l.block_len(j) as f64 / 8.0).collect())
                .collect(),
            const_bytes,
            s_delta,
        }
    }

    pub fn variable(&self, q: &BitWidthMatrix) -> f64 {
        let mut s = 0.0;
        for (prow, qrow) in self.p.iter().zip(&q.rows) {
            for (p, &b) in prow.iter().zip(qrow) {
                s += p * f64::from(b);
            }
        }
        s
    }

    pub fn estimate(&self, q: &BitWidthMatrix) -> f64 {
        self.variable(q) + self.const_bytes + self.s_delta
    }
}

/// Result of the two-level allocation for one attribute budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub channel_bits: [u8; CHANNEL_COUNT],
    pub plan: TransformPlan,
    pub q: BitWidthMatrix,
}

/// Smallest attribute payload in bits (every channel at width 1).
pub fn min_attribute_bits(prep: &PreparedScene) -> u64 {
    Channel::ALL
        .iter()
        .map(|&ch| {
            let plan = TransformPlan::from_channel_bits(&[1; CHANNEL_COUNT]);
            prep.stream(&plan, ch.id()).len() as u64
        })
        .sum()
}

/// Channel-level then group-level allocation under `budget_bits`.
pub fn allocate(prep: &PreparedScene, budget_bits: u64) -> Result<Allocation, Infeasible> {
    let norm = prep.norm;
    let mut loss = vec![[0.0; 16]; CHANNEL_COUNT];
    let mut sizes = vec![[0u64; 16]; CHANNEL_COUNT];
    for ch in Channel::ALL {
        let c = ch.id();
        for b in 1..=MAX_BITS {
            let raw = ch.is_scale() && b <= crate::transform::SCALE_RAW_MAX_BITS;
            let table = if raw { &prep.raw_loss } else { &prep.raht_loss };
            let n = if raw { prep.leaf_count() } else { prep.leaf_count() - 1 };
            loss[c][b as usize - 1] = table.omega[c].iter().map(|o| norm.additive(o[b as usize])).sum();
            sizes[c][b as usize - 1] = n as u64 * u64::from(b);
        }
    }
    let qc = solve_channel_ilp(&loss, &sizes, budget_bits)?;
    let channel_bits: [u8; CHANNEL_COUNT] = std::array::from_fn(|c| qc[c]);
    let plan = TransformPlan::from_channel_bits(&channel_bits);
    let part = prep.partition(&plan);
    let table = prep.loss(&plan);
    let budgets = split_channel_budget(&qc, budget_bits);
    let rows = (0..CHANNEL_COUNT)
        .map(|c| {
            let layout = &part.layouts[c];
            let lens: Vec<usize> = (0..layout.blocks()).map(|j| layout.block_len(j)).collect();
            let omega: Vec<[f64; WIDTH_OPTIONS]> =
                table.omega[c].iter().map(|o| o.map(|v| norm.additive(v))).collect();
            solve_group_ilp(&omega, &lens, budgets[c])
        })
        .collect();
    Ok(Allocation {
        channel_bits,
        plan,
        q: BitWidthMatrix { rows },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub budget: u64,
    pub tau_grid: Vec<f64>,
    pub max_rounds: usize,
    pub tolerance: f64,
    pub beta: f64,
    pub prepare: PrepareConfig,
}

impl SearchConfig {
    pub const DEFAULT_TAU_GRID: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.8, 1.0];

    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            tau_grid: Self::DEFAULT_TAU_GRID.to_vec(),
            max_rounds: 8,
            tolerance: 0.05,
            beta: DEFAULT_BETA,
            prepare: PrepareConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no reserve ratio reaches {budget} bytes within tolerance; closest container is {closest} bytes")]
    Infeasible { budget: u64, closest: u64 },
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TauStatus {
    Converged,
    SkippedCapacity,
    Infeasible,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundDiagnostics {
    pub attribute_budget: f64,
    pub estimate: f64,
    pub essential: u64,
    pub s_a: u64,
    pub s_delta: f64,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauDiagnostics {
    pub tau: f64,
    pub gaussians: usize,
    pub status: TauStatus,
    pub iterations: usize,
    pub s_a: Option<u64>,
    pub s_delta: f64,
    pub const_bytes: u64,
    pub attr8_bytes: u64,
    /// Norm of the full quantization residual.
    pub omega: Option<f64>,
    /// Sum of per-group norms.
    pub omega_sum: Option<f64>,
    pub loss_table_entries: usize,
    pub rounds: Vec<RoundDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchReport {
    pub budget_bytes: u64,
    pub tolerance: f64,
    pub tau_grid: Vec<f64>,
    pub blocks: usize,
    pub per_tau: Vec<TauDiagnostics>,
    pub chosen_tau: f64,
    pub achieved_bytes: u64,
    pub relative_error: f64,
    pub omega: f64,
    pub omega_sum: f64,
    /// Winner under a maximize-loss reading of the keep-best comparison.
    pub literal_max_reading_tau: f64,
    /// True when every ratio was skipped and the largest was used with full widths.
    pub fallback: bool,
    pub channel_bits: Vec<u8>,
    pub transform_mask: u16,
    pub retained: usize,
    pub q: Vec<Vec<u8>>,
    pub sizes: SizeBreakdown,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub report: SearchReport,
    pub encoded: Encoded,
}

struct TauResult {
    diag: TauDiagnostics,
    best: Option<(Encoded, Allocation)>,
}

fn relative(a: f64, target: f64) -> f64 {
    (a - target).abs() / target
}

/// Algorithm body for one prepared ratio.
fn evaluate_tau(prep: &PreparedScene, cfg: &SearchConfig, allow_skip: bool) -> Result<TauResult, CodecError> {
    let budget = cfg.budget as f64;
    let plan8 = TransformPlan::from_channel_bits(&[8; CHANNEL_COUNT]);
    let q8 = BitWidthMatrix::uniform(CHANNEL_COUNT, prep.blocks, 8);
    let e8 = prep.encode(&plan8, &q8, 0)?;
    let const_bytes = (e8.sizes.total - e8.sizes.group_payload) as u64;
    let attr8 = e8.sizes.group_payload as u64;
    let mut diag = TauDiagnostics {
        tau: prep.tau,
        gaussians: prep.leaf_count(),
        status: TauStatus::NotConverged,
        iterations: 0,
        s_a: None,
        s_delta: 0.0,
        const_bytes,
        attr8_bytes: attr8,
        omega: None,
        omega_sum: None,
        loss_table_entries: 2 * CHANNEL_COUNT * prep.blocks * WIDTH_OPTIONS,
        rounds: Vec::new(),
    };
    if allow_skip && (const_bytes + 2 * attr8) < cfg.budget {
        diag.status = TauStatus::SkippedCapacity;
        return Ok(TauResult { diag, best: None });
    }
    let min_bits = min_attribute_bits(prep);
    let mut s_delta = 0.0f64;
    let mut last_q: Option<BitWidthMatrix> = None;
    let mut best: Option<(Encoded, Allocation)> = None;
    for _ in 0..cfg.max_rounds {
        // keep the attribute budget at least the all-width-1 payload
        let ceiling = budget - const_bytes as f64 - min_bits as f64 / 8.0;
        s_delta = s_delta.min(ceiling.max(0.0));
        let attr_budget = budget - const_bytes as f64 - s_delta;
        if attr_budget < 0.0 {
            diag.status = TauStatus::Infeasible;
            break;
        }
        let alloc = match allocate(prep, (attr_budget * 8.0).floor() as u64) {
            Ok(a) => a,
            Err(_) => {
                diag.status = TauStatus::Infeasible;
                break;
            }
        };
        diag.iterations += 1;
        let model = SizeModel::new(prep, &alloc.plan, const_bytes as f64, s_delta);
        let estimate = model.estimate(&alloc.q);
        let essential = prep.encode(&alloc.plan, &alloc.q, 0)?;
        let essential_total = essential.sizes.total as u64;
        let filled = prep.fill_retention(essential, cfg.budget)?;
        let s_a = filled.sizes.total as u64;
        let next_delta = essential_total as f64 - model.variable(&alloc.q) - const_bytes as f64;
        diag.rounds.push(RoundDiagnostics {
            attribute_budget: attr_budget,
            estimate,
            essential: essential_total,
            s_a,
            s_delta,
            retained: filled.retained,
        });
        let fixed_point = last_q.as_ref() == Some(&alloc.q);
        last_q = Some(alloc.q.clone());
        if relative(s_a as f64, budget) < cfg.tolerance {
            diag.status = TauStatus::Converged;
            diag.s_a = Some(s_a);
            diag.s_delta = s_delta;
            best = Some((filled, alloc));
        } else if diag.s_a.is_none()
            || relative(s_a as f64, budget) < relative(diag.s_a.unwrap() as f64, budget)
        {
            diag.s_a = Some(s_a);
        }
        if relative(essential_total as f64, budget) < cfg.tolerance || fixed_point {
            break;
        }
        s_delta = next_delta;
    }
    if let Some((enc, alloc)) = &best {
        let table = prep.loss(&alloc.plan);
        diag.omega = Some(aggregate_quality(&table, &enc.q));
        diag.omega_sum = Some(total_quality(&table, &enc.q));
        diag.status = TauStatus::Converged;
    } else if diag.status == TauStatus::Converged {
        diag.status = TauStatus::NotConverged;
    }
    Ok(TauResult { diag, best })
}

type Winner = (f64, f64, Encoded, Allocation);

fn consider(
    r: TauResult,
    tau: f64,
    per_tau: &mut Vec<TauDiagnostics>,
    winner: &mut Option<Winner>,
    literal: &mut Option<(f64, f64)>,
) {
    if let (Some((enc, alloc)), Some(omega)) = (r.best, r.diag.omega) {
        if winner.as_ref().is_none_or(|w| omega < w.1) {
            *winner = Some((tau, omega, enc, alloc));
        }
        if literal.is_none_or(|l| omega > l.1) {
            *literal = Some((tau, omega));
        }
    }
    per_tau.push(r.diag);
}

/// Runs the full search on `cloud`.
pub fn search(cloud: &GaussianCloud, cams: &[Camera], cfg: &SearchConfig) -> Result<SearchOutcome, SearchError> {
    if cfg.budget == 0 {
        return Err(SearchError::Config("budget must be positive".into()));
    }
    if !(cfg.tolerance > 0.0 && cfg.tolerance < 1.0) {
        return Err(SearchError::Config("tolerance must be in (0, 1)".into()));
    }
    let mut grid = cfg.tau_grid.clone();
    if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(SearchError::Config("tau grid must be a nonempty subset of (0, 1]".into()));
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let scores = splat::importance(cloud, cams, cfg.beta).i_g;
    let top = PreparedScene::new(cloud, &scores, grid[0], &cfg.prepare, None)?;
    let centroids = top.sh.as_ref().map(|k| k.centroids.clone());

    let mut per_tau = Vec::with_capacity(grid.len());
    let mut winner: Option<Winner> = None;
    let mut literal: Option<(f64, f64)> = None;
    for &tau in &grid {
        let r = if tau == grid[0] {
            evaluate_tau(&top, cfg, true)?
        } else {
            let prep = PreparedScene::new(cloud, &scores, tau, &cfg.prepare, centroids.as_deref())?;
            evaluate_tau(&prep, cfg, true)?
        };
        consider(r, tau, &mut per_tau, &mut winner, &mut literal);
    }
    let mut fallback = false;
    if winner.is_none() {
        if let Some(tau) = per_tau
            .iter()
            .filter(|d| d.status == TauStatus::SkippedCapacity)
            .map(|d| d.tau)
            .max_by(f64::total_cmp)
        {
            fallback = true;
            let r = if tau == grid[0] {
                evaluate_tau(&top, cfg, false)?
            } else {
                let prep = PreparedScene::new(cloud, &scores, tau, &cfg.prepare, centroids.as_deref())?;
                evaluate_tau(&prep, cfg, false)?
            };
            let idx = per_tau.iter().position(|d| d.tau == tau).unwrap();
            per_tau.remove(idx);
            consider(r, tau, &mut per_tau, &mut winner, &mut literal);
        }
    }
    let Some((tau, omega, encoded, alloc)) = winner else {
        let closest = per_tau
            .iter()
            .flat_map(|d| d.rounds.iter().map(|r| r.s_a).chain(std::iter::once(d.const_bytes)))
            .min_by_key(|&s| s.abs_diff(cfg.budget))
            .unwrap_or(0);
        return Err(SearchError::Infeasible {
            budget: cfg.budget,
            closest,
        });
    };
    let omega_sum = per_tau.iter().find(|d| d.tau == tau).and_then(|d| d.omega_sum).unwrap_or(0.0);
    let report = SearchReport {
        budget_bytes: cfg.budget,
        tolerance: cfg.tolerance,
        tau_grid: grid.clone(),
        blocks: cfg.prepare.blocks,
        per_tau,
        chosen_tau: tau,
        achieved_bytes: encoded.sizes.total as u64,
        relative_error: relative(encoded.sizes.total as f64, cfg.budget as f64),
        omega,
        omega_sum,
        literal_max_reading_tau: literal.map_or(tau, |l| l.0),
        fallback,
        channel_bits: alloc.channel_bits.to_vec(),
        transform_mask: encoded.plan.to_mask(),
        retained: encoded.retained,
        q: encoded.q.rows.clone(),
        sizes: encoded.sizes,
    };
    Ok(SearchOutcome { report, encoded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_takes_best_affordable() {
        let l = vec![vec![5.0, 2.0, 1.0]];
        let s = vec![vec![1, 3, 9]];
        assert_eq!(mckp_solve(&l, &s, 4).unwrap(), vec![1]);
        assert_eq!(mckp_solve(&l, &s, 100).unwrap(), vec![2]);
        assert_eq!(mckp_solve(&l, &s, 0), Err(Infeasible { min_size: 1 }));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let l = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let s = vec![vec![2, 1], vec![1, 2]];
        assert_eq!(mckp_solve(&l, &s, 10).unwrap(), vec![0, 0]);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_channel_budget(&[8, 16], 3000), vec![1000, 2000]);
        assert_eq!(split_channel_budget(&[4, 4, 4], 100), vec![34, 33, 33]);
        assert_eq!(split_channel_budget(&[3, 7, 5], 1001).iter().sum::<u64>(), 1001);
    }

    #[test]
    fn group_extremes() {
        let omega: Vec<[f64; WIDTH_OPTIONS]> = (0..3)
            .map(|_| std::array::from_fn(|b| 1.0 / (1.0 + b as f64)))
            .collect();
        assert_eq!(solve_group_ilp(&omega, &[10, 10, 10], 10_000), vec![16; 3]);
        assert_eq!(solve_group_ilp(&omega, &[10, 10, 10], 5), vec![0; 3]);
    }

    #[test]
    fn coarse_units_respect_budget() {
        let l: Vec<Vec<f64>> = (0..5).map(|i| (0..8).map(|o| (8 - o + i) as f64).collect()).collect();
        let s: Vec<Vec<u64>> = (0..5).map(|i| (0..8).map(|o| 70_001 * o as u64 + i).collect()).collect();
        let budget = 1_000_003;
        let c = mckp_solve(&l, &s, budget).unwrap();
        assert!(c.iter().enumerate().map(|(i, &o)| s[i][o]).sum::<u64>() <= budget);
    }
}
