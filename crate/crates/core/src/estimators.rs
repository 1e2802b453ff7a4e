//! Per-candidate size deltas and feature-map NMSE scores, assembled into the
//! accuracy and flash lookup tables.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{
    bias_of, conv_block_from_factors, kernel_of, linear_block_from_svd, matrix_of, propose_layer, ProposalGrid,
    RankProposal,
};
use crate::error::{Error, Result};
use crate::infer::{chain_forward, forward_traced, FeatureMap, TraceRecord};
use crate::ir::{replace_layer, serialized_size, write_atomic, DecomposedBlock, LayerSpec, ModelIR};
use crate::rng;
use crate::tensor::{svd, SvdResult, Tucker2Basis};

/// Denominator floor of the NMSE; also the snap-to-zero threshold for `delta_acc`.
pub const NMSE_EPS: f64 = 1e-12;

pub const ACC_TABLE_FILE: &str = "acc_table.csv";
pub const FLASH_TABLE_FILE: &str = "flash_table.csv";
pub const SIDECAR_FILE: &str = "tables.json";

static CANDIDATE_EVALUATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of candidate blocks scored by this process so far.
pub fn candidate_evaluations() -> usize {
    CANDIDATE_EVALUATIONS.load(Ordering::Relaxed)
}

/// Parameter count of the decomposed block minus that of the original layer.
pub fn delta_flash_analytic(layer: &LayerSpec, p: &RankProposal) -> Result<i64> {
    if p.layer_id != layer.id {
        return Err(Error::arg(format!("proposal targets `{}`, not `{}`", p.layer_id, layer.id)));
    }
    let (r1, r2) = (p.r1 as i64, p.r2 as i64);
    if let Some(c) = layer.conv() {
        if c.groups != 1 {
            return Err(Error::arg(format!("grouped conv `{}` has no decomposition", layer.id)));
        }
        if p.r1 == 0 || p.r1 > c.in_ch || p.r2 == 0 || p.r2 > c.out_ch {
            return Err(Error::arg(format!("ranks ({}, {}) out of range for `{}`", p.r1, p.r2, layer.id)));
        }
        let (i, o, k2) = (c.in_ch as i64, c.out_ch as i64, c.kernel_area() as i64);
        Ok(i * r1 + r1 * r2 * k2 + r2 * o - o * i * k2)
    } else if let Some(l) = layer.linear() {
        if p.r1 != p.r2 || p.r1 == 0 || p.r1 > l.in_features.min(l.out_features) {
            return Err(Error::arg(format!("rank ({}, {}) invalid for linear `{}`", p.r1, p.r2, layer.id)));
        }
        let (i, o) = (l.in_features as i64, l.out_features as i64);
        Ok(r1 * (i + o) - i * o)
    } else {
        Err(Error::arg(format!("layer `{}` is not decomposable", layer.id)))
    }
}

/// Serialized byte size of `m` with `block` substituted, minus that of `m`.
pub fn delta_flash_serialized(m: &ModelIR, block: &DecomposedBlock) -> Result<i64> {
    let replaced = replace_layer(m, &block.original_id, block)?;
    Ok(serialized_size(&replaced)? as i64 - serialized_size(m)? as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub nmse: f64,
    /// `-nmse`, snapped to exactly 0 when `nmse <= NMSE_EPS`
    pub delta_acc: f64,
}

impl ProxyScore {
    fn from_nmse(nmse: f64) -> Self {
        let delta_acc = if nmse <= NMSE_EPS { 0.0 } else { -nmse };
        Self { nmse, delta_acc }
    }
}

/// Squared-error sums pooled over calibration batches.
#[derive(Debug, Clone, Copy, Default)]
pub struct NmseAccumulator {
    err: f64,
    energy: f64,
    count: usize,
}

impl NmseAccumulator {
    pub fn add(&mut self, pred: &FeatureMap, target: &FeatureMap) -> Result<()> {
        if pred.dims() != target.dims() {
            return Err(Error::shape(
                "block",
                format!("block output {:?} differs from reference {:?}", pred.dims(), target.dims()),
            ));
        }
        for (p, t) in pred.data().iter().zip(target.data()) {
            self.err += (p - t) * (p - t);
            self.energy += t * t;
        }
        self.count += target.data().len();
        Ok(())
    }

    /// `mean((pred − target)²) / (mean(target²) + NMSE_EPS)` over everything added.
    pub fn nmse(&self) -> f64 {
        let n = self.count.max(1) as f64;
        (self.err / n) / (self.energy / n + NMSE_EPS)
    }

    pub fn score(&self) -> ProxyScore {
        ProxyScore::from_nmse(self.nmse())
    }
}

fn run_block(block: &DecomposedBlock, x: &FeatureMap) -> Result<FeatureMap> {
    chain_forward(block.layers.layers(), |id| block.weights.get(id), x)
}

fn score_block(block: &DecomposedBlock, traces: &[&TraceRecord]) -> Result<ProxyScore> {
    CANDIDATE_EVALUATIONS.fetch_add(1, Ordering::Relaxed);
    let mut sums = NmseAccumulator::default();
    for t in traces {
        sums.add(&run_block(block, t.input())?, &t.output)?;
    }
    Ok(sums.score())
}

/// Feed the captured reference input through `block` and compare with the
/// captured reference output.
pub fn mse_proxy(trace: &TraceRecord, block: &DecomposedBlock) -> Result<ProxyScore> {
    if trace.layer_id != block.original_id {
        return Err(Error::arg(format!(
            "trace of `{}` cannot score a block for `{}`",
            trace.layer_id, block.original_id
        )));
    }
    score_block(block, &[trace])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            batches: 4,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 || self.batch_size == 0 {
            return Err(Error::arg("calibration needs at least one batch of one sample"));
        }
        Ok(())
    }

    /// Standard-normal batch `i` for a model with input shape `chw`.
    pub fn batch(&self, i: usize, chw: [usize; 3]) -> FeatureMap {
        FeatureMap::standard_normal(self.batch_size, chw, rng::derive_seed(self.seed, i as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeMode {
    /// parameter counts
    #[default]
    Params,
    /// serialized model bytes
    Bytes,
}

impl SizeMode {
    pub fn model_size(self, m: &ModelIR) -> Result<i64> {
        Ok(match self {
            SizeMode::Params => m.param_count() as i64,
            SizeMode::Bytes => serialized_size(m)? as i64,
        })
    }
}

impl fmt::Display for SizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeMode::Params => "params",
            SizeMode::Bytes => "bytes",
        })
    }
}

impl FromStr for SizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(SizeMode::Params),
            "bytes" => Ok(SizeMode::Bytes),
            _ => Err(Error::arg(format!("unknown size mode `{s}` (expected params or bytes)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub layer_id: String,
    pub r1: usize,
    pub r2: usize,
    pub delta_acc: f64,
    pub delta_flash: i64,
    pub nmse: f64,
}

impl CandidateEntry {
    pub fn proposal(&self) -> RankProposal {
        RankProposal::new(&self.layer_id, self.r1, self.r2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub model_name: String,
    pub size_mode: SizeMode,
    pub reference_params: i64,
    pub reference_bytes: i64,
    /// proxy score of the unmodified model
    pub reference_proxy: f64,
    pub grid: ProposalGrid,
    pub calib: CalibConfig,
    pub nmse_eps: f64,
}

/// Candidate entries ordered by (layer index, rank).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTable {
    pub meta: TableMeta,
    pub entries: Vec<CandidateEntry>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: TableMeta,
    nmse: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow<V> {
    layer_id: String,
    r1: usize,
    r2: usize,
    value: V,
}

impl CandidateTable {
    pub fn reference_size(&self) -> i64 {
        match self.meta.size_mode {
            SizeMode::Params => self.meta.reference_params,
            SizeMode::Bytes => self.meta.reference_bytes,
        }
    }

    /// Entries grouped per layer, layers in table order.
    pub fn rows(&self) -> Vec<(&str, &[CandidateEntry])> {
        self.entries
            .chunk_by(|a, b| a.layer_id == b.layer_id)
            .map(|c| (c[0].layer_id.as_str(), c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (layer, _) in self.rows() {
            if !seen.insert(layer) {
                return Err(Error::Table(format!("entries of layer `{layer}` are not contiguous")));
            }
        }
        for e in &self.entries {
            if !e.delta_acc.is_finite() || !e.nmse.is_finite() {
                return Err(Error::Table(format!("non-finite score for `{}`", e.layer_id)));
            }
        }
        Ok(())
    }

    /// Write `acc_table.csv`, `flash_table.csv` and the JSON sidecar into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let acc = self.csv(|e| e.delta_acc)?;
        let flash = self.csv(|e| e.delta_flash)?;
        let sidecar = Sidecar {
            meta: self.meta.clone(),
            nmse: self.entries.iter().map(|e| e.nmse).collect(),
        };
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        write_atomic(&dir.join(ACC_TABLE_FILE), &acc)?;
        write_atomic(&dir.join(FLASH_TABLE_FILE), &flash)?;
        write_atomic(&dir.join(SIDECAR_FILE), &json)?;
        Ok(())
    }

    fn csv<V: Serialize>(&self, value: impl Fn(&CandidateEntry) -> V) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(CsvRow {
                layer_id: e.layer_id.clone(),
                r1: e.r1,
                r2: e.r2,
                value: value(e),
            })?;
        }
        if self.entries.is_empty() {
            w.write_record(["layer_id", "r1", "r2", "value"])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join(SIDECAR_FILE))?)?;
        let acc: Vec<CsvRow<f64>> = read_csv(&dir.join(ACC_TABLE_FILE))?;
        let flash: Vec<CsvRow<i64>> = read_csv(&dir.join(FLASH_TABLE_FILE))?;
        if acc.len() != flash.len() || acc.len() != sidecar.nmse.len() {
            return Err(Error::Table(format!(
                "table sizes disagree: {} accuracy rows, {} flash rows, {} sidecar scores",
                acc.len(),
                flash.len(),
                sidecar.nmse.len()
            )));
        }
        let entries = acc
            .into_iter()
            .zip(flash)
            .zip(sidecar.nmse)
            .map(|((a, f), nmse)| {
                if (&a.layer_id, a.r1, a.r2) != (&f.layer_id, f.r1, f.r2) {
                    return Err(Error::Table(format!(
                        "row mismatch: ({}, {}, {}) vs ({}, {}, {})",
                        a.layer_id, a.r1, a.r2, f.layer_id, f.r1, f.r2
                    )));
                }
                Ok(CandidateEntry {
                    layer_id: a.layer_id,
                    r1: a.r1,
                    r2: a.r2,
                    delta_acc: a.value,
                    delta_flash: f.value,
                    nmse,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let table = Self {
            meta: sidecar.meta,
            entries,
        };
        table.validate()?;
        Ok(table)
    }
}

fn read_csv<V: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<V>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

enum Basis {
    Conv(Tucker2Basis),
    Linear(SvdResult),
}

fn basis_for(m: &ModelIR, layer: &LayerSpec) -> Result<Basis> {
    if layer.conv().is_some() {
        Ok(Basis::Conv(Tucker2Basis::new(&kernel_of(m, &layer.id)?)?))
    } else {
        let w = matrix_of(m, &layer.id)?;
        let full = w.rows().min(w.cols());
        Ok(Basis::Linear(svd(&w, full)?))
    }
}

fn candidate_block(m: &ModelIR, layer: &LayerSpec, basis: &Basis, p: &RankProposal) -> Result<DecomposedBlock> {
    let bias = bias_of(m, &layer.id);
    match basis {
        Basis::Conv(b) => conv_block_from_factors(layer, &b.truncate(p.r1, p.r2)?, bias.as_deref()),
        Basis::Linear(s) => linear_block_from_svd(layer, s, p.r1, bias.as_deref()),
    }
}

/// Score every proposal of every candidate layer with HOSVD blocks against
/// reference activations on the calibration batches.
///
/// The reference model is traced once per batch; candidates are evaluated in
/// parallel and collected in (layer, rank) order.
pub fn build_tables(m: &ModelIR, grid: &ProposalGrid, calib: &CalibConfig, size_mode: SizeMode) -> Result<CandidateTable> {
    grid.validate()?;
    calib.validate()?;
    let candidates: Vec<(&LayerSpec, Vec<RankProposal>)> = m
        .layers()
        .iter()
        .map(|l| (l, propose_layer(l, grid)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    let ids: Vec<&str> = candidates.iter().map(|(l, _)| l.id.as_str()).collect();

    let mut traces: Vec<Vec<TraceRecord>> = vec![Vec::new(); ids.len()];
    if !ids.is_empty() {
        for b in 0..calib.batches {
            let records = forward_traced(m, &calib.batch(b, m.input_shape), &ids)?;
            for (slot, r) in traces.iter_mut().zip(records) {
                slot.push(r);
            }
        }
    }
    log::info!(
        "traced {} candidate layers over {} calibration batches",
        ids.len(),
        calib.batches
    );

    let bases: Vec<Basis> = candidates
        .par_iter()
        .map(|(l, _)| basis_for(m, l))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, &RankProposal)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, (_, ps))| ps.iter().map(move |p| (i, p)))
        .collect();
    let entries: Vec<CandidateEntry> = jobs
        .par_iter()
        .map(|&(i, p)| {
            let layer = candidates[i].0;
            let block = candidate_block(m, layer, &bases[i], p)?;
            let refs: Vec<&TraceRecord> = traces[i].iter().collect();
            let score = score_block(&block, &refs)?;
            let delta_flash = match size_mode {
                SizeMode::Params => delta_flash_analytic(layer, p)?,
                SizeMode::Bytes => delta_flash_serialized(m, &block)?,
            };
            Ok(CandidateEntry {
                layer_id: p.layer_id.clone(),
                r1: p.r1,
                r2: p.r2,
                delta_acc: score.delta_acc,
                delta_flash,
                nmse: score.nmse,
            })
        })
        .collect::<Result<_>>()?;

    Ok(CandidateTable {
        meta: TableMeta {
            model_name: m.name.clone(),
            size_mode,
            reference_params: m.param_count() as i64,
            reference_bytes: serialized_size(m)? as i64,
            reference_proxy: 0.0,
            grid: grid.clone(),
            calib: *calib,
            nmse_eps: NMSE_EPS,
        },
        entries,
    })
}
