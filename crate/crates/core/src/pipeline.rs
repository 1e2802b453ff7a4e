//! Batch workflow behind the command-line tool: build, profile, search,
//! rewrite, evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decompose::{decompose_in_model, propose_ranks, Method, ProposalGrid, RankProposal};
use crate::error::{Error, Result};
use crate::estimators::{build_tables, candidate_evaluations, CalibConfig, CandidateTable, NmseAccumulator, SizeMode};
use crate::infer::{forward, forward_traced};
use crate::ir::{
    build_arch, deserialize, encode, replace_layer, serialize, serialized_size, write_atomic, ArchName, LayerSpec,
    ModelIR,
};
use crate::search::{solve, Budget, RankPlan, SearchConfig, SearchReport};

pub const PLANS_FILE: &str = "plans.json";
pub const REPORT_FILE: &str = "report.json";

/// Budget section of the config file; exactly one field may be set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub flash_max: Option<i64>,
    pub target_compression: Option<f64>,
}

impl BudgetConfig {
    pub fn budget(&self) -> Result<Budget> {
        match (self.flash_max, self.target_compression) {
            (Some(f), None) => Ok(Budget::FlashMax(f)),
            (None, Some(c)) => Ok(Budget::TargetCompression(c)),
            (None, None) => Err(Error::Config("set one of flash_max or target_compression".into())),
            (Some(_), Some(_)) => Err(Error::Config(
                "flash_max and target_compression are mutually exclusive".into(),
            )),
        }
    }
}

/// Settings for a pipeline run, loadable from a TOML file.
///
/// ```toml
/// model = "runs/testnet"
/// size_mode = "params"
/// method = "hooi"
///
/// [grid]
/// start = 8
/// steps = [8]
///
/// [calib]
/// batches = 4
/// batch_size = 8
/// seed = 0
///
/// [budget]
/// target_compression = 2.0
///
/// [search]
/// k = 5
/// solver = "exact_bnb"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub grid: ProposalGrid,
    pub calib: CalibConfig,
    pub budget: BudgetConfig,
    pub search: SearchConfig,
    pub size_mode: SizeMode,
    pub method: Method,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.grid.validate()?;
        cfg.calib.validate()?;
        cfg.search.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// FNV-1a over the serialized weights blob.
pub fn weights_checksum(m: &ModelIR) -> Result<String> {
    let (_, blob) = encode(m)?;
    let hash = blob.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    });
    Ok(format!("{hash:016x}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub id: String,
    pub kind: String,
    pub params: usize,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub input_shape: [usize; 3],
    pub params: usize,
    pub bytes: u64,
    pub weights_checksum: String,
    pub candidate_layers: usize,
    pub layers: Vec<LayerSummary>,
}

pub fn summarize(m: &ModelIR) -> Result<ModelSummary> {
    let grid = ProposalGrid::default();
    let candidates: std::collections::HashSet<String> =
        propose_ranks(m, &grid).into_iter().map(|p| p.layer_id).collect();
    Ok(ModelSummary {
        name: m.name.clone(),
        input_shape: m.input_shape,
        params: m.param_count(),
        bytes: serialized_size(m)?,
        weights_checksum: weights_checksum(m)?,
        candidate_layers: candidates.len(),
        layers: m
            .layers()
            .iter()
            .map(|l| LayerSummary {
                id: l.id.clone(),
                kind: l.op.kind_name().to_string(),
                params: l.op.param_count(),
                candidate: candidates.contains(&l.id),
            })
            .collect(),
    })
}

/// Build a reference architecture and write it to `out`.
pub fn cmd_arch(name: ArchName, num_classes: usize, seed: u64, out: &Path) -> Result<ModelSummary> {
    let m = build_arch(name, num_classes, seed)?;
    serialize(&m, out)?;
    summarize(&m)
}

pub fn cmd_info(model: &Path) -> Result<ModelSummary> {
    summarize(&deserialize(model)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TablesRun {
    pub table: CandidateTable,
    pub candidate_layers: usize,
    pub wall_seconds: f64,
}

/// Profile every candidate of the model at `model` and write the tables to `out`.
pub fn cmd_tables(model: &Path, cfg: &RunConfig, out: &Path) -> Result<TablesRun> {
    let m = deserialize(model)?;
    let start = Instant::now();
    let table = build_tables(&m, &cfg.grid, &cfg.calib, cfg.size_mode)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    if table.entries.is_empty() {
        log::warn!("model `{}` has no decomposable layers; writing empty tables", m.name);
    }
    table.write(out)?;
    Ok(TablesRun {
        candidate_layers: table.rows().len(),
        table,
        wall_seconds,
    })
}

/// Solve the prebuilt tables in `tables` for one budget; writes `plans.json`.
pub fn cmd_search(tables: &Path, budget: &Budget, search: &SearchConfig, out: &Path) -> Result<SearchReport> {
    let table = CandidateTable::read(tables)?;
    let evaluations = candidate_evaluations();
    let report = solve(&table, budget, search)?;
    log::info!(
        "search reused tables: {} candidate evaluations performed",
        candidate_evaluations() - evaluations
    );
    write_json(&out.join(PLANS_FILE), &report)?;
    Ok(report)
}

pub fn read_plans(path: &Path) -> Result<SearchReport> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::malformed(None, format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFidelity {
    pub layer_id: String,
    pub r1: usize,
    pub r2: usize,
    /// block fed the reference layer's own input
    pub local_nmse: f64,
    /// block output inside the rewritten model vs the reference layer output
    pub propagated_nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub method: Method,
    pub plan_rank: usize,
    pub size_mode: SizeMode,
    pub predicted_size: i64,
    pub reference_params: usize,
    pub achieved_params: usize,
    pub reference_bytes: u64,
    pub achieved_bytes: u64,
    /// reference params / achieved params
    pub compression_ratio: f64,
    pub output_nmse: f64,
    pub calib: CalibConfig,
    pub layers: Vec<LayerFidelity>,
}

impl RewriteReport {
    pub fn achieved_size(&self) -> i64 {
        match self.size_mode {
            SizeMode::Params => self.achieved_params as i64,
            SizeMode::Bytes => self.achieved_bytes as i64,
        }
    }
}

/// Apply every decomposition of `plan` to `m`.
pub fn apply_plan(m: &ModelIR, plan: &RankPlan, method: Method) -> Result<ModelIR> {
    let mut out = m.clone();
    for (id, r1, r2) in plan.decompositions() {
        if m.layer(id).is_none() {
            return Err(Error::UnknownLayer(format!("plan names `{id}`, which the model does not have")));
        }
        let block = decompose_in_model(m, &RankProposal::new(id, r1, r2), method)?;
        out = replace_layer(&out, id, &block)?;
    }
    Ok(out)
}

fn fidelity(reference: &ModelIR, rewritten: &ModelIR, plan: &RankPlan, calib: &CalibConfig) -> Result<(f64, Vec<LayerFidelity>)> {
    let decomposed: Vec<(&str, usize, usize)> = plan.decompositions().collect();
    let ref_ids: Vec<&str> = decomposed.iter().map(|d| d.0).collect();
    let expand_ids: Vec<String> = ref_ids.iter().map(|id| format!("{id}.expand")).collect();
    let expand_refs: Vec<&str> = expand_ids.iter().map(String::as_str).collect();
    let blocks: Vec<Vec<&LayerSpec>> = ref_ids
        .iter()
        .map(|id| {
            rewritten
                .layers()
                .iter()
                .filter(|l| l.decomposed_from.as_deref() == Some(*id))
                .collect()
        })
        .collect();

    let mut output = NmseAccumulator::default();
    let mut local = vec![NmseAccumulator::default(); ref_ids.len()];
    let mut propagated = vec![NmseAccumulator::default(); ref_ids.len()];
    for b in 0..calib.batches {
        let x = calib.batch(b, reference.input_shape);
        output.add(&forward(rewritten, &x)?, &forward(reference, &x)?)?;
        if ref_ids.is_empty() {
            continue;
        }
        let ref_traces = forward_traced(reference, &x, &ref_ids)?;
        let new_traces = forward_traced(rewritten, &x, &expand_refs)?;
        for (i, t) in ref_traces.iter().enumerate() {
            let y = crate::infer::chain_forward(blocks[i].iter().copied(), |id| rewritten.params(id), t.input())?;
            local[i].add(&y, &t.output)?;
            propagated[i].add(&new_traces[i].output, &t.output)?;
        }
    }
    let layers = decomposed
        .iter()
        .enumerate()
        .map(|(i, &(id, r1, r2))| LayerFidelity {
            layer_id: id.to_string(),
            r1,
            r2,
            local_nmse: local[i].nmse(),
            propagated_nmse: propagated[i].nmse(),
        })
        .collect();
    Ok((output.nmse(), layers))
}

/// Rewrite the model at `model` according to plan `plan_rank` (1-based) of
/// `plans`, writing the compressed model and `report.json` into `out`.
pub fn cmd_rewrite(
    model: &Path,
    plans: &SearchReport,
    plan_rank: usize,
    method: Method,
    calib: &CalibConfig,
    out: &Path,
) -> Result<RewriteReport> {
    calib.validate()?;
    let reference = deserialize(model)?;
    let plan = plans
        .plans
        .iter()
        .find(|p| p.rank_in_topk == plan_rank)
        .ok_or_else(|| Error::arg(format!("plans file has no plan ranked {plan_rank}")))?;
    let rewritten = apply_plan(&reference, plan, method)?;
    let (output_nmse, layers) = fidelity(&reference, &rewritten, plan, calib)?;
    serialize(&rewritten, out)?;
    let report = RewriteReport {
        method,
        plan_rank,
        size_mode: plans.size_mode,
        predicted_size: plan.predicted_size,
        reference_params: reference.param_count(),
        achieved_params: rewritten.param_count(),
        reference_bytes: serialized_size(&reference)?,
        achieved_bytes: serialized_size(&rewritten)?,
        compression_ratio: reference.param_count() as f64 / rewritten.param_count() as f64,
        output_nmse,
        calib: *calib,
        layers,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub params_a: usize,
    pub params_b: usize,
    /// params of `a` / params of `b`
    pub compression_ratio: f64,
    pub output_nmse: f64,
    /// NMSE of `b` against `a` at every layer of `a` that `b` also produces
    pub layers: BTreeMap<String, f64>,
    pub calib: CalibConfig,
}

/// Run both models on the same calibration batches and compare them.
pub fn cmd_eval(a: &ModelIR, b: &ModelIR, calib: &CalibConfig) -> Result<EvalReport> {
    calib.validate()?;
    if a.input_shape != b.input_shape {
        return Err(Error::shape(
            "input",
            format!("models take different inputs: {:?} vs {:?}", a.input_shape, b.input_shape),
        ));
    }
    // layer of `b` standing in for each layer of `a`
    let mut pairs: Vec<(&str, String)> = Vec::new();
    for l in a.layers() {
        let stand_in = if b.layer(&l.id).is_some_and(|bl| bl.decomposed_from.is_none()) {
            Some(l.id.clone())
        } else {
            b.layers()
                .iter()
                .rev()
                .find(|bl| bl.decomposed_from.as_deref() == Some(l.id.as_str()))
                .map(|bl| bl.id.clone())
        };
        if let Some(s) = stand_in {
            pairs.push((&l.id, s));
        }
    }
    let a_ids: Vec<&str> = pairs.iter().map(|p| p.0).collect();
    let b_ids: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let mut output = NmseAccumulator::default();
    let mut per_layer = vec![NmseAccumulator::default(); pairs.len()];
    let mut comparable = vec![true; pairs.len()];
    for i in 0..calib.batches {
        let x = calib.batch(i, a.input_shape);
        let ta = forward_traced(a, &x, &a_ids)?;
        let tb = forward_traced(b, &x, &b_ids)?;
        output.add(&forward(b, &x)?, &forward(a, &x)?)?;
        for (j, (ra, rb)) in ta.iter().zip(&tb).enumerate() {
            if ra.output.dims() == rb.output.dims() {
                per_layer[j].add(&rb.output, &ra.output)?;
            } else {
                comparable[j] = false;
            }
        }
    }
    Ok(EvalReport {
        params_a: a.param_count(),
        params_b: b.param_count(),
        compression_ratio: a.param_count() as f64 / b.param_count() as f64,
        output_nmse: output.nmse(),
        layers: pairs
            .iter()
            .zip(per_layer)
            .zip(comparable)
            .filter(|(_, ok)| *ok)
            .map(|(((id, _), acc), _)| (id.to_string(), acc.nmse()))
            .collect(),
        calib: *calib,
    })
}

pub fn write_eval_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{Choice, Solver};

    fn small_calib() -> CalibConfig {
        CalibConfig {
            batches: 2,
            batch_size: 2,
            seed: 1,
        }
    }

    #[test]
    fn config_parsing() {
        let cfg = RunConfig::from_toml_str(
            r#"
            size_mode = "bytes"
            method = "hosvd"
            [grid]
            start = 4
            steps = [2, 4]
            [calib]
            seed = 9
            [budget]
            target_compression = 3.0
            [search]
            k = 3
            solver = "exact_dp"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.grid, ProposalGrid::new(4, vec![2, 4]).unwrap());
        assert_eq!(cfg.calib.seed, 9);
        assert_eq!(cfg.calib.batches, 4);
        assert_eq!(cfg.search.k, 3);
        assert_eq!(cfg.search.solver, Solver::ExactDp);
        assert_eq!(cfg.size_mode, SizeMode::Bytes);
        assert_eq!(cfg.method, Method::Hosvd);
        assert_eq!(cfg.budget.budget().unwrap(), Budget::TargetCompression(3.0));

        let defaults = RunConfig::from_toml_str("").unwrap();
        assert_eq!(defaults.method, Method::Hooi);
        assert!(defaults.budget.budget().is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[grid]\nstart = 0").is_err());
        let both = BudgetConfig {
            flash_max: Some(10),
            target_compression: Some(2.0),
        };
        assert!(both.budget().is_err());
    }

    #[test]
    fn keep_all_rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model");
        cmd_arch(ArchName::TestnetSmall, 10, 5, &model).unwrap();
        let cfg = RunConfig {
            calib: small_calib(),
            ..RunConfig::default()
        };
        let tables = dir.path().join("tables");
        cmd_tables(&model, &cfg, &tables).unwrap();
        let plans = cmd_search(&tables, &Budget::FlashMax(10_000_000), &SearchConfig::default(), &tables).unwrap();
        assert!(plans.plans[0].choices.iter().all(|c| c.choice == Choice::Keep));
        let out = dir.path().join("rewritten");
        let report = cmd_rewrite(&model, &plans, 1, Method::Hooi, &small_calib(), &out).unwrap();
        assert_eq!(report.output_nmse, 0.0);
        for f in [crate::ir::MANIFEST_FILE, crate::ir::WEIGHTS_FILE] {
            assert_eq!(fs::read(model.join(f)).unwrap(), fs::read(out.join(f)).unwrap());
        }
    }

    #[test]
    fn full_rank_rewrite_is_lossless() {
        let m = build_arch(ArchName::TestnetSmall, 10, 2).unwrap();
        let choices = m
            .layers()
            .iter()
            .filter(|l| l.conv().is_some())
            .map(|l| {
                let c = l.conv().unwrap();
                crate::search::LayerChoice {
                    layer_id: l.id.clone(),
                    choice: Choice::Decompose {
                        r1: c.in_ch,
                        r2: c.out_ch,
                    },
                    delta_acc: 0.0,
                    delta_flash: 0,
                }
            })
            .collect();
        let plan = RankPlan {
            rank_in_topk: 1,
            predicted_total_delta_acc: 0.0,
            predicted_size: 0,
            choices,
        };
        let rewritten = apply_plan(&m, &plan, Method::Hooi).unwrap();
        let (nmse, layers) = fidelity(&m, &rewritten, &plan, &small_calib()).unwrap();
        assert!(nmse <= 1e-6, "{nmse}");
        assert!(layers.iter().all(|l| l.local_nmse <= 1e-8 && l.propagated_nmse <= 1e-6));
        let eval = cmd_eval(&m, &rewritten, &small_calib()).unwrap();
        assert!(eval.output_nmse <= 1e-6);
        assert!(eval.layers.contains_key("conv3.conv"));
    }

    #[test]
    fn eval_against_self_is_zero() {
        let m = build_arch(ArchName::TestnetSmall, 10, 2).unwrap();
        let r = cmd_eval(&m, &m, &small_calib()).unwrap();
        assert_eq!(r.output_nmse, 0.0);
        assert!(r.layers.values().all(|&v| v == 0.0));
        assert_eq!(r.compression_ratio, 1.0);
        let other = build_arch(ArchName::StresnetPico, 10, 2).unwrap();
        let mut shifted = other.clone();
        shifted.input_shape = [3, 16, 16];
        assert!(matches!(cmd_eval(&m, &shifted, &small_calib()), Err(Error::Shape { .. })));
    }

    #[test]
    fn plan_model_mismatch_is_reported() {
        let m = build_arch(ArchName::TestnetSmall, 10, 2).unwrap();
        let plan = RankPlan {
            rank_in_topk: 1,
            predicted_total_delta_acc: 0.0,
            predicted_size: 0,
            choices: vec![crate::search::LayerChoice {
                layer_id: "missing.conv".into(),
                choice: Choice::Decompose { r1: 8, r2: 8 },
                delta_acc: 0.0,
                delta_flash: 0,
            }],
        };
        assert!(matches!(apply_plan(&m, &plan, Method::Hosvd), Err(Error::UnknownLayer(_))));
    }
}
