//! Exact top-k multiple-choice knapsack over the candidate table: pick at
//! most one proposal per layer (or keep it) maximizing the summed proxy
//! score while `reference + Σ delta_flash <= flash_max`.
//!
//! Plans are totally ordered by objective (descending), then predicted size
//! (ascending), then the per-layer option indices in table order
//! (lexicographic, keep = 0, proposals numbered from 1 in table order).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CandidateTable, SizeMode};

/// Size budget, either absolute or as a compression ratio of the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    FlashMax(i64),
    TargetCompression(f64),
}

impl Budget {
    /// Absolute `flash_max` for a reference of size `reference`.
    pub fn resolve(&self, reference: i64) -> Result<i64> {
        let flash_max = match *self {
            Budget::FlashMax(f) => f,
            Budget::TargetCompression(c) => {
                if !(c > 1.0) || !c.is_finite() {
                    return Err(Error::arg(format!("target compression must be > 1, got {c}")));
                }
                (reference as f64 / c).floor() as i64
            }
        };
        if flash_max <= 0 {
            return Err(Error::arg(format!("flash_max must be positive, got {flash_max}")));
        }
        Ok(flash_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    ExactBnb,
    ExactDp,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::ExactBnb => "exact_bnb",
            Solver::ExactDp => "exact_dp",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_bnb" | "bnb" => Ok(Solver::ExactBnb),
            "exact_dp" | "dp" => Ok(Solver::ExactDp),
            _ => Err(Error::arg(format!("unknown solver `{s}` (expected exact_bnb or exact_dp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k: usize,
    pub solver: Solver,
    /// Size quantum for the DP solver; `None` picks 1 for parameter tables
    /// and 64 for byte tables.
    pub dp_scale: Option<i64>,
    /// Branch-and-bound node limit; hitting it clears the optimality flag.
    pub max_nodes: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 1,
            solver: Solver::ExactBnb,
            dp_scale: None,
            max_nodes: 50_000_000,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::arg("k must be at least 1"));
        }
        if self.dp_scale.is_some_and(|s| s < 1) {
            return Err(Error::arg("dp_scale must be at least 1"));
        }
        Ok(())
    }

    fn scale_for(&self, mode: SizeMode) -> i64 {
        self.dp_scale.unwrap_or(match mode {
            SizeMode::Params => 1,
            SizeMode::Bytes => 64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "choice", rename_all = "snake_case")]
pub enum Choice {
    Keep,
    Decompose { r1: usize, r2: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer_id: String,
    #[serde(flatten)]
    pub choice: Choice,
    pub delta_acc: f64,
    pub delta_flash: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    /// 1-based position in the returned list
    pub rank_in_topk: usize,
    pub predicted_total_delta_acc: f64,
    pub predicted_size: i64,
    /// one entry per table row, in table order
    pub choices: Vec<LayerChoice>,
}

impl RankPlan {
    /// Layers that get decomposed, with their ranks.
    pub fn decompositions(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.choices.iter().filter_map(|c| match c.choice {
            Choice::Decompose { r1, r2 } => Some((c.layer_id.as_str(), r1, r2)),
            Choice::Keep => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub solver: Solver,
    pub size_mode: SizeMode,
    pub reference_size: i64,
    pub flash_max: i64,
    pub min_achievable_size: i64,
    pub requested_k: usize,
    /// fewer feasible assignments exist than were requested
    pub fewer_than_k: bool,
    pub nodes_expanded: u64,
    pub proven_optimal: bool,
    pub plans: Vec<RankPlan>,
}

/// Smallest size reachable by taking each layer's most-saving option.
pub fn min_achievable_size(table: &CandidateTable) -> i64 {
    table.reference_size()
        + table
            .rows()
            .iter()
            .map(|(_, entries)| entries.iter().map(|e| e.delta_flash).min().unwrap_or(0).min(0))
            .sum::<i64>()
}

#[derive(Debug, Clone, Copy)]
struct Opt {
    acc: f64,
    flash: i64,
}

/// One complete assignment, option index per row (0 = keep).
#[derive(Debug, Clone)]
struct Scored {
    objective: f64,
    size: i64,
    picks: Vec<usize>,
}

fn plan_order(a: &Scored, b: &Scored) -> Ordering {
    b.objective
        .total_cmp(&a.objective)
        .then(a.size.cmp(&b.size))
        .then_with(|| a.picks.cmp(&b.picks))
}

struct Instance {
    groups: Vec<Vec<Opt>>,
    reference: i64,
}

impl Instance {
    fn from_table(table: &CandidateTable) -> Self {
        let groups = table
            .rows()
            .iter()
            .map(|(_, entries)| {
                std::iter::once(Opt { acc: 0.0, flash: 0 })
                    .chain(entries.iter().map(|e| Opt {
                        acc: e.delta_acc,
                        flash: e.delta_flash,
                    }))
                    .collect()
            })
            .collect();
        Self {
            groups,
            reference: table.reference_size(),
        }
    }

    /// Objective and size summed in table order.
    fn score(&self, picks: Vec<usize>) -> Scored {
        let mut objective = 0.0;
        let mut size = self.reference;
        for (g, &p) in self.groups.iter().zip(&picks) {
            objective += g[p].acc;
            size += g[p].flash;
        }
        Scored { objective, size, picks }
    }
}

/// Sorted list of the best `k` assignments seen so far.
struct TopK {
    k: usize,
    items: Vec<Scored>,
}

impl TopK {
    fn offer(&mut self, s: Scored) {
        let pos = self.items.partition_point(|x| plan_order(x, &s) == Ordering::Less);
        if pos < self.k {
            self.items.insert(pos, s);
            self.items.truncate(self.k);
        }
    }

    fn threshold(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].objective)
    }
}

struct SolveOutcome {
    found: Vec<Scored>,
    nodes: u64,
    proven: bool,
}

/// Per-suffix LP relaxation of the remaining groups: start every group at
/// its best-scoring option and buy extra savings along the upper concave
/// hulls, cheapest slope first.
struct Relaxation {
    base_acc: f64,
    base_savings: f64,
    /// (savings gained, score lost) per hull segment, best slope first
    segments: Vec<(f64, f64)>,
}

impl Relaxation {
    fn bound(&self, need: f64) -> f64 {
        let mut acc = self.base_acc;
        let mut need = need - self.base_savings;
        if need <= 0.0 {
            return acc;
        }
        for &(ds, dv) in &self.segments {
            if ds >= need {
                return acc + dv * (need / ds);
            }
            acc += dv;
            need -= ds;
        }
        f64::NEG_INFINITY
    }
}

/// Upper concave hull in the (savings, score) plane to the right of the
/// best-scoring option, as (Δsavings, Δscore, slope) segments.
fn hull_segments(opts: &[Opt]) -> (f64, f64, Vec<(f64, f64, f64)>) {
    let pts: Vec<(f64, f64)> = opts.iter().map(|o| (-(o.flash as f64), o.acc)).collect();
    let best = pts
        .iter()
        .copied()
        .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |b, p| {
            if p.1 > b.1 || (p.1 == b.1 && p.0 > b.0) {
                p
            } else {
                b
            }
        });
    let mut right: Vec<(f64, f64)> = pts.into_iter().filter(|p| p.0 > best.0).collect();
    right.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    right.dedup_by(|b, a| a.0 == b.0);
    let mut hull = vec![best];
    for p in right {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // drop b if it lies on or below the chord a→p
            if (b.1 - a.1) * (p.0 - a.0) <= (p.1 - a.1) * (b.0 - a.0) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let segs = hull
        .windows(2)
        .map(|w| {
            let (ds, dv) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            (ds, dv, dv / ds)
        })
        .collect();
    (best.1, best.0, segs)
}

fn solve_bnb(inst: &Instance, flash_max: i64, k: usize, max_nodes: u64) -> SolveOutcome {
    let n = inst.groups.len();
    let max_saving = |g: &[Opt]| g.iter().map(|o| -o.flash).max().unwrap_or(0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&g| std::cmp::Reverse(max_saving(&inst.groups[g])));

    let hulls: Vec<_> = order.iter().map(|&g| hull_segments(&inst.groups[g])).collect();
    let relax: Vec<Relaxation> = (0..=n)
        .map(|d| {
            let mut segments: Vec<(f64, f64, f64)> = hulls[d..].iter().flat_map(|h| h.2.iter().copied()).collect();
            segments.sort_by(|a, b| b.2.total_cmp(&a.2));
            Relaxation {
                base_acc: hulls[d..].iter().map(|h| h.0).sum(),
                base_savings: hulls[d..].iter().map(|h| h.1).sum(),
                segments: segments.into_iter().map(|(ds, dv, _)| (ds, dv)).collect(),
            }
        })
        .collect();
    let option_order: Vec<Vec<usize>> = order
        .iter()
        .map(|&g| {
            let opts = &inst.groups[g];
            let mut idx: Vec<usize> = (0..opts.len()).collect();
            idx.sort_by(|&a, &b| {
                opts[b]
                    .acc
                    .total_cmp(&opts[a].acc)
                    .then(opts[a].flash.cmp(&opts[b].flash))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    struct Dfs<'a> {
        inst: &'a Instance,
        order: &'a [usize],
        option_order: &'a [Vec<usize>],
        relax: &'a [Relaxation],
        top: TopK,
        picks: Vec<usize>,
        nodes: u64,
        max_nodes: u64,
        aborted: bool,
    }

    impl Dfs<'_> {
        fn visit(&mut self, depth: usize, acc: f64, need: i64) {
            self.nodes += 1;
            if self.nodes > self.max_nodes {
                self.aborted = true;
                return;
            }
            if depth == self.order.len() {
                if need <= 0 {
                    let s = self.inst.score(self.picks.clone());
                    self.top.offer(s);
                }
                return;
            }
            let g = self.order[depth];
            for &o in &self.option_order[depth] {
                if self.aborted {
                    return;
                }
                let opt = self.inst.groups[g][o];
                let next_need = need + opt.flash;
                let next_acc = acc + opt.acc;
                let bound = next_acc + self.relax[depth + 1].bound(next_need as f64);
                if bound == f64::NEG_INFINITY {
                    continue;
                }
                if let Some(kth) = self.top.threshold() {
                    let slack = 1e-9 * (1.0 + kth.abs() + bound.abs());
                    if bound < kth - slack {
                        continue;
                    }
                }
                self.picks[g] = o;
                self.visit(depth + 1, next_acc, next_need);
                self.picks[g] = 0;
            }
        }
    }

    let mut dfs = Dfs {
        inst,
        order: &order,
        option_order: &option_order,
        relax: &relax,
        top: TopK { k, items: Vec::new() },
        picks: vec![0; n],
        nodes: 0,
        max_nodes,
        aborted: false,
    };
    dfs.visit(0, 0.0, inst.reference - flash_max);
    SolveOutcome {
        found: dfs.top.items,
        nodes: dfs.nodes,
        proven: !dfs.aborted,
    }
}

/// Persistent choice history for DP partial plans (newest first).
struct Hist {
    pick: usize,
    prev: Option<Rc<Hist>>,
}

fn picks_of(h: &Option<Rc<Hist>>, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cur = h.as_ref();
    while let Some(node) = cur {
        out.push(node.pick);
        cur = node.prev.as_ref();
    }
    out.reverse();
    out
}

#[derive(Clone)]
struct Partial {
    acc: f64,
    flash: i64,
    hist: Option<Rc<Hist>>,
}

const MAX_DP_STATES: usize = 4_000_000;

fn partial_order(a: &Partial, b: &Partial, depth: usize) -> Ordering {
    b.acc
        .total_cmp(&a.acc)
        .then(a.flash.cmp(&b.flash))
        .then_with(|| picks_of(&a.hist, depth).cmp(&picks_of(&b.hist, depth)))
}

/// DP over quantized savings, rows in table order. Savings are rounded
/// down (growth rounded up), so every DP-feasible plan is truly feasible;
/// with `scale == 1` the result is exact.
fn solve_dp(inst: &Instance, flash_max: i64, k: usize, scale: i64) -> Result<SolveOutcome> {
    let n = inst.groups.len();
    let q = |saving: i64| saving.div_euclid(scale);
    let need = inst.reference - flash_max;
    let need_q = -(-need).div_euclid(scale);
    // suffix sums of the best and worst quantized saving per row
    let mut best_rest = vec![0i64; n + 1];
    let mut growth_rest = vec![0i64; n + 1];
    for d in (0..n).rev() {
        let qs = inst.groups[d].iter().map(|o| q(-o.flash));
        best_rest[d] = best_rest[d + 1] + qs.clone().max().unwrap_or(0);
        growth_rest[d] = growth_rest[d + 1] + (-qs.min().unwrap_or(0)).max(0);
    }

    let mut states: BTreeMap<i64, Vec<Partial>> = BTreeMap::new();
    states.insert(
        0,
        vec![Partial {
            acc: 0.0,
            flash: 0,
            hist: None,
        }],
    );
    let mut nodes = 0u64;
    for d in 0..n {
        let cap = need_q + growth_rest[d + 1];
        let mut next: BTreeMap<i64, Vec<Partial>> = BTreeMap::new();
        for (&s, parts) in &states {
            for (o, opt) in inst.groups[d].iter().enumerate() {
                let ns = (s + q(-opt.flash)).min(cap);
                if ns + best_rest[d + 1] < need_q {
                    continue;
                }
                let bucket = next.entry(ns).or_default();
                for p in parts {
                    nodes += 1;
                    let cand = Partial {
                        acc: p.acc + opt.acc,
                        flash: p.flash + opt.flash,
                        hist: Some(Rc::new(Hist {
                            pick: o,
                            prev: p.hist.clone(),
                        })),
                    };
                    let pos = bucket.partition_point(|x| partial_order(x, &cand, d + 1) == Ordering::Less);
                    if pos < k {
                        bucket.insert(pos, cand);
                        bucket.truncate(k);
                    }
                }
            }
        }
        if next.len() > MAX_DP_STATES {
            return Err(Error::arg(format!(
                "DP state space exceeds {MAX_DP_STATES} states; raise dp_scale or use exact_bnb"
            )));
        }
        states = next;
    }

    let mut found: Vec<Scored> = states
        .range(need_q..)
        .flat_map(|(_, parts)| parts.iter().map(|p| inst.score(picks_of(&p.hist, n))))
        .filter(|s| s.size <= flash_max)
        .collect();
    found.sort_by(plan_order);
    found.truncate(k);
    Ok(SolveOutcome {
        found,
        nodes,
        proven: scale == 1,
    })
}

/// Top-`cfg.k` plans under `budget`, best first.
pub fn solve(table: &CandidateTable, budget: &Budget, cfg: &SearchConfig) -> Result<SearchReport> {
    cfg.validate()?;
    table.validate()?;
    let reference = table.reference_size();
    let flash_max = budget.resolve(reference)?;
    let min_size = min_achievable_size(table);
    if min_size > flash_max {
        return Err(Error::Infeasible {
            flash_max,
            min_size,
        });
    }
    let inst = Instance::from_table(table);
    let outcome = match cfg.solver {
        Solver::ExactBnb => solve_bnb(&inst, flash_max, cfg.k, cfg.max_nodes),
        Solver::ExactDp => solve_dp(&inst, flash_max, cfg.k, cfg.scale_for(table.meta.size_mode))?,
    };
    if outcome.found.is_empty() {
        // only reachable when DP quantization or the node limit hides every plan
        return Err(Error::Infeasible {
            flash_max,
            min_size,
        });
    }

    let rows = table.rows();
    let plans: Vec<RankPlan> = outcome
        .found
        .iter()
        .enumerate()
        .map(|(i, s)| RankPlan {
            rank_in_topk: i + 1,
            predicted_total_delta_acc: s.objective,
            predicted_size: s.size,
            choices: rows
                .iter()
                .zip(&s.picks)
                .map(|((layer, entries), &p)| match p {
                    0 => LayerChoice {
                        layer_id: layer.to_string(),
                        choice: Choice::Keep,
                        delta_acc: 0.0,
                        delta_flash: 0,
                    },
                    p => {
                        let e = &entries[p - 1];
                        LayerChoice {
                            layer_id: layer.to_string(),
                            choice: Choice::Decompose { r1: e.r1, r2: e.r2 },
                            delta_acc: e.delta_acc,
                            delta_flash: e.delta_flash,
                        }
                    }
                })
                .collect(),
        })
        .collect();
    Ok(SearchReport {
        solver: cfg.solver,
        size_mode: table.meta.size_mode,
        reference_size: reference,
        flash_max,
        min_achievable_size: min_size,
        requested_k: cfg.k,
        fewer_than_k: plans.len() < cfg.k,
        nodes_expanded: outcome.nodes,
        proven_optimal: outcome.proven,
        plans,
    })
}

/// Alias of [`solve`] for `k > 1` call sites.
pub fn topk(table: &CandidateTable, budget: &Budget, cfg: &SearchConfig) -> Result<SearchReport> {
    solve(table, budget, cfg)
}

/// Check a plan against `table`: recomputed size and score must match exactly.
pub fn verify_plan(table: &CandidateTable, plan: &RankPlan) -> Result<()> {
    let rows = table.rows();
    if rows.len() != plan.choices.len() {
        return Err(Error::Table(format!(
            "plan has {} choices, table has {} layers",
            plan.choices.len(),
            rows.len()
        )));
    }
    let mut size = table.reference_size();
    let mut acc = 0.0;
    for ((layer, entries), c) in rows.iter().zip(&plan.choices) {
        if *layer != c.layer_id {
            return Err(Error::Table(format!("plan layer `{}` does not match table layer `{layer}`", c.layer_id)));
        }
        if let Choice::Decompose { r1, r2 } = c.choice {
            let e = entries
                .iter()
                .find(|e| e.r1 == r1 && e.r2 == r2)
                .ok_or_else(|| Error::Table(format!("no table entry for `{layer}` at ({r1}, {r2})")))?;
            size += e.delta_flash;
            acc += e.delta_acc;
        }
    }
    if size != plan.predicted_size || acc != plan.predicted_total_delta_acc {
        return Err(Error::Table(format!(
            "plan predicts ({}, {}), table gives ({acc}, {size})",
            plan.predicted_total_delta_acc, plan.predicted_size
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::decompose::ProposalGrid;
    use crate::estimators::{CalibConfig, CandidateEntry, TableMeta, NMSE_EPS};
    use rand::Rng;

    pub(crate) fn table_from(reference: i64, rows: &[Vec<(f64, i64)>]) -> CandidateTable {
        let entries = rows
            .iter()
            .enumerate()
            .flat_map(|(l, opts)| {
                opts.iter().enumerate().map(move |(j, &(acc, flash))| CandidateEntry {
                    layer_id: format!("l{l}"),
                    r1: j + 1,
                    r2: j + 1,
                    delta_acc: acc,
                    delta_flash: flash,
                    nmse: -acc,
                })
            })
            .collect();
        CandidateTable {
            meta: TableMeta {
                model_name: "synthetic".into(),
                size_mode: SizeMode::Params,
                reference_params: reference,
                reference_bytes: 4 * reference,
                reference_proxy: 0.0,
                grid: ProposalGrid::default(),
                calib: CalibConfig::default(),
                nmse_eps: NMSE_EPS,
            },
            entries,
        }
    }

    /// Exhaustive enumeration in the documented order.
    pub(crate) fn brute_force(table: &CandidateTable, flash_max: i64) -> Vec<(f64, i64, Vec<usize>)> {
        let inst = Instance::from_table(table);
        let mut all = Vec::new();
        let mut picks = vec![0usize; inst.groups.len()];
        loop {
            let s = inst.score(picks.clone());
            if s.size <= flash_max {
                all.push(s);
            }
            let mut d = 0;
            loop {
                if d == picks.len() {
                    all.sort_by(plan_order);
                    return all.into_iter().map(|s| (s.objective, s.size, s.picks)).collect();
                }
                picks[d] += 1;
                if picks[d] < inst.groups[d].len() {
                    break;
                }
                picks[d] = 0;
                d += 1;
            }
        }
    }

    pub(crate) fn picks(table: &CandidateTable, plan: &RankPlan) -> Vec<usize> {
        table
            .rows()
            .iter()
            .zip(&plan.choices)
            .map(|((_, entries), c)| match c.choice {
                Choice::Keep => 0,
                Choice::Decompose { r1, r2 } => 1 + entries.iter().position(|e| e.r1 == r1 && e.r2 == r2).unwrap(),
            })
            .collect()
    }

    pub(crate) fn random_instance(rng: &mut impl Rng, max_layers: usize, max_props: usize) -> CandidateTable {
        let layers = rng.random_range(1..=max_layers);
        let rows: Vec<Vec<(f64, i64)>> = (0..layers)
            .map(|_| {
                let n = rng.random_range(1..=max_props);
                (0..n)
                    .map(|_| {
                        // coarse values make exact ties common
                        let acc = if rng.random_bool(0.3) {
                            -(rng.random_range(0..4) as f64) * 0.25
                        } else {
                            -rng.random::<f64>()
                        };
                        let flash = if rng.random_bool(0.1) {
                            rng.random_range(1..50)
                        } else {
                            -rng.random_range(1..200)
                        };
                        (acc, flash)
                    })
                    .collect()
            })
            .collect();
        // large enough that every assignment keeps a positive size
        table_from(2000, &rows)
    }

    #[test]
    fn unconstrained_budget_keeps_everything() {
        let t = table_from(1000, &[vec![(-0.1, -100), (-0.5, -300)], vec![(-0.2, -50)]]);
        let r = solve(&t, &Budget::FlashMax(1000), &SearchConfig::default()).unwrap();
        assert_eq!(r.plans[0].predicted_total_delta_acc, 0.0);
        assert!(r.plans[0].choices.iter().all(|c| c.choice == Choice::Keep));
        assert!(r.proven_optimal);
    }

    #[test]
    fn zero_cost_savings_are_taken() {
        let t = table_from(1000, &[vec![(0.0, -100), (-0.5, -300)]]);
        let r = solve(&t, &Budget::FlashMax(2000), &SearchConfig::default()).unwrap();
        assert_eq!(r.plans[0].predicted_size, 900);
    }

    #[test]
    fn minimum_budget_forces_max_savings() {
        let t = table_from(
            1000,
            &[vec![(-0.1, -100), (-0.5, -300)], vec![(-0.2, -50), (-0.9, -60)], vec![(-0.3, 20)]],
        );
        let min = min_achievable_size(&t);
        assert_eq!(min, 1000 - 300 - 60);
        let r = solve(&t, &Budget::FlashMax(min), &SearchConfig::default()).unwrap();
        assert_eq!(picks(&t, &r.plans[0]), vec![2, 2, 0]);
        match solve(&t, &Budget::FlashMax(min - 1), &SearchConfig::default()) {
            Err(Error::Infeasible { min_size, .. }) => assert_eq!(min_size, min),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn min_size_examples() {
        assert_eq!(min_achievable_size(&table_from(500, &[])), 500);
        assert_eq!(min_achievable_size(&table_from(20000, &[vec![(-0.1, -17088)]])), 20000 - 17088);
    }

    #[test]
    fn matches_enumeration_on_random_instances() {
        let mut rng = crate::rng::seeded(11);
        for _ in 0..300 {
            let t = random_instance(&mut rng, 5, 4);
            let min = min_achievable_size(&t);
            let flash_max = rng.random_range(min..=t.reference_size() + 50);
            let oracle = brute_force(&t, flash_max);
            for solver in [Solver::ExactBnb, Solver::ExactDp] {
                let cfg = SearchConfig {
                    k: 4,
                    solver,
                    ..SearchConfig::default()
                };
                let r = solve(&t, &Budget::FlashMax(flash_max), &cfg).unwrap();
                let got: Vec<_> = r
                    .plans
                    .iter()
                    .map(|p| (p.predicted_total_delta_acc, p.predicted_size, picks(&t, p)))
                    .collect();
                let want: Vec<_> = oracle.iter().take(4).cloned().collect();
                assert_eq!(got, want, "{solver}");
                assert_eq!(r.fewer_than_k, oracle.len() < 4);
                for p in &r.plans {
                    verify_plan(&t, p).unwrap();
                    assert!(p.predicted_size <= flash_max);
                }
            }
        }
    }

    #[test]
    fn full_enumeration_order_with_large_k() {
        let mut rng = crate::rng::seeded(5);
        for _ in 0..20 {
            let t = random_instance(&mut rng, 3, 3);
            let oracle = brute_force(&t, t.reference_size());
            let cfg = SearchConfig {
                k: oracle.len(),
                ..SearchConfig::default()
            };
            let r = solve(&t, &Budget::FlashMax(t.reference_size()), &cfg).unwrap();
            assert_eq!(r.plans.len(), oracle.len());
            let got: Vec<_> = r.plans.iter().map(|p| picks(&t, p)).collect();
            let want: Vec<_> = oracle.iter().map(|o| o.2.clone()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ties_prefer_smaller_size() {
        let t = table_from(1000, &[vec![(-0.5, -100), (-0.5, -200)]]);
        let cfg = SearchConfig {
            k: 2,
            ..SearchConfig::default()
        };
        let r = solve(&t, &Budget::FlashMax(950), &cfg).unwrap();
        assert_eq!(r.plans[0].predicted_size, 800);
        assert_eq!(r.plans[1].predicted_size, 900);
        assert!(!r.fewer_than_k);
        let r = solve(&t, &Budget::FlashMax(950), &SearchConfig { k: 5, ..cfg }).unwrap();
        assert!(r.fewer_than_k);
        assert_eq!(r.plans.len(), 2);
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::TargetCompression(2.0).resolve(1001).unwrap(), 500);
        assert!(Budget::TargetCompression(1.0).resolve(1000).is_err());
        assert!(Budget::FlashMax(0).resolve(1000).is_err());
    }

    #[test]
    fn plans_json_roundtrip() {
        let t = table_from(1000, &[vec![(-0.1, -100)], vec![(-0.2, -50)]]);
        let r = solve(&t, &Budget::FlashMax(920), &SearchConfig::default()).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"choice\":\"decompose\""));
        let back: SearchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn dp_with_coarse_scale_stays_feasible() {
        let mut rng = crate::rng::seeded(3);
        for _ in 0..50 {
            let t = random_instance(&mut rng, 5, 4);
            let flash_max = min_achievable_size(&t) + 40;
            let cfg = SearchConfig {
                solver: Solver::ExactDp,
                dp_scale: Some(16),
                ..SearchConfig::default()
            };
            if let Ok(r) = solve(&t, &Budget::FlashMax(flash_max), &cfg) {
                assert!(!r.proven_optimal);
                assert!(r.plans.iter().all(|p| p.predicted_size <= flash_max));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn relaxing_budget_never_hurts(seed in 0u64..500, extra in 0i64..200) {
            let mut rng = crate::rng::seeded(seed);
            let t = random_instance(&mut rng, 6, 5);
            let tight = min_achievable_size(&t) + rng.random_range(0..100);
            let cfg = SearchConfig::default();
            let a = solve(&t, &Budget::FlashMax(tight), &cfg).unwrap();
            let b = solve(&t, &Budget::FlashMax(tight + extra), &cfg).unwrap();
            proptest::prop_assert!(b.plans[0].predicted_total_delta_acc >= a.plans[0].predicted_total_delta_acc);
        }

        #[test]
        fn argmax_is_scale_invariant(seed in 0u64..500, c in proptest::sample::select(vec![0.5, 2.0, 1024.0])) {
            let mut rng = crate::rng::seeded(seed);
            let t = random_instance(&mut rng, 6, 5);
            let budget = Budget::FlashMax(min_achievable_size(&t) + 50);
            let mut scaled = t.clone();
            scaled.entries.iter_mut().for_each(|e| e.delta_acc *= c);
            let cfg = SearchConfig::default();
            let a = solve(&t, &budget, &cfg).unwrap();
            let b = solve(&scaled, &budget, &cfg).unwrap();
            proptest::prop_assert_eq!(picks(&t, &a.plans[0]), picks(&scaled, &b.plans[0]));
        }
    }
}
