//! Angular error metric, evaluation reports, ablation rules and K sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::memory::Memory;
use crate::model::{AlignmentModel, Prediction, Reference, WeightingRule};
use crate::retrieval::{cosine_topk, filter_by_task, TaskSynonymTable};
use crate::synthgen::Scene;

/// Angle between two unit vectors in degrees.
pub fn mae(a: Vec2, b: Vec2) -> Result<f64> {
    for v in [a, b] {
        if !((v.norm() - 1.0).abs() <= 1e-6) {
            return Err(Error::contract(format!("({}, {}) is not a unit vector", v.x, v.y)));
        }
    }
    // atan2 form of arccos(<a, b>): same value for unit vectors, but well
    // conditioned near 0° and 180°.
    let cross = a.x * b.y - a.y * b.x;
    Ok(cross.abs().atan2(a.dot(b)).to_degrees())
}

/// Maps a variant name to its weighting rule.
pub fn ablation(name: &str) -> Result<WeightingRule> {
    name.parse()
}

/// Anything that predicts a direction for a scene from its references.
pub trait DirectionPredictor {
    fn predict_scene(&self, scene: &Scene, refs: &[Reference<'_>], rule: WeightingRule) -> Result<Prediction>;
}

impl DirectionPredictor for AlignmentModel {
    fn predict_scene(&self, scene: &Scene, refs: &[Reference<'_>], rule: WeightingRule) -> Result<Prediction> {
        self.predict(&scene.query_image(), refs, rule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub rule: WeightingRule,
    pub synonyms: TaskSynonymTable,
    pub seed: u64,
    pub variant: String,
    pub config_hash: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 3,
            rule: WeightingRule::Full,
            synonyms: TaskSynonymTable::default(),
            seed: 0,
            variant: String::new(),
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub query_id: String,
    pub task: String,
    /// `None` for a degenerate prediction, scored as 180°.
    pub predicted: Option<Vec2>,
    pub truth: Vec2,
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, f64>,
    pub overall: f64,
    pub records: Vec<SampleRecord>,
    pub k: usize,
    pub rule: WeightingRule,
    pub seed: u64,
    pub variant: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_records(mut records: Vec<SampleRecord>, opts: &EvalOptions) -> Self {
        records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &records {
            let e = sums.entry(r.task.clone()).or_default();
            e.0 += r.error_deg;
            e.1 += 1;
        }
        let overall = if records.is_empty() {
            f64::NAN
        } else {
            records.iter().map(|r| r.error_deg).sum::<f64>() / records.len() as f64
        };
        Self {
            per_task: sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect(),
            overall,
            records,
            k: opts.k,
            rule: opts.rule,
            seed: opts.seed,
            variant: opts.variant.clone(),
            config_hash: opts.config_hash.clone(),
        }
    }
}

/// Refuses to evaluate when any test scene is stored in the memory.
pub fn check_leakage(test: &[Scene], memory: &Memory) -> Result<()> {
    match test.iter().find(|s| memory.contains_id(&s.id)) {
        Some(s) => Err(Error::Leakage(s.id.clone())),
        None => Ok(()),
    }
}

/// Retrieves up to `k` references for `scene` from its task-filtered memory.
pub fn retrieve_references<'m>(
    scene: &Scene,
    memory: &'m Memory,
    k: usize,
    synonyms: &TaskSynonymTable,
) -> Result<Vec<Reference<'m>>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let subset = filter_by_task(memory, scene.task.as_str(), synonyms);
    let top = cosine_topk(memory, &scene.embedding, &subset, k, Some(&scene.id))?;
    Ok(top
        .entries
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let e = memory.entry(r.index);
            Reference {
                image: &e.image,
                direction: e.affordance.direction,
                similarity: r.similarity,
                slot: i + 1,
            }
        })
        .collect())
}

pub fn evaluate<P: DirectionPredictor>(
    model: &P,
    test: &[Scene],
    memory: &Memory,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_leakage(test, memory)?;
    let mut records = Vec::with_capacity(test.len());
    for scene in test {
        let refs = retrieve_references(scene, memory, opts.k, &opts.synonyms)?;
        let p = model.predict_scene(scene, &refs, opts.rule)?;
        let error_deg = match p.direction {
            Some(d) => mae(d, scene.gt.direction)?,
            None => 180.0,
        };
        records.push(SampleRecord {
            query_id: scene.id.clone(),
            task: scene.task.as_str().to_string(),
            predicted: p.direction,
            truth: scene.gt.direction,
            error_deg,
        });
    }
    Ok(EvalReport::from_records(records, opts))
}

/// 64-bit FNV-1a, used to tag reports with the configuration they came from.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn report_to_string(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# RAAP evaluation report");
    let _ = writeln!(s, "variant: {}", r.variant);
    let _ = writeln!(s, "k: {}", r.k);
    let _ = writeln!(s, "rule: {}", r.rule);
    let _ = writeln!(s, "rule_definition: {}", r.rule.describe());
    let _ = writeln!(s, "seed: {}", r.seed);
    let _ = writeln!(s, "config_hash: {}", r.config_hash);
    let _ = writeln!(s, "samples: {}", r.records.len());
    let _ = writeln!(s, "overall_mae_deg: {:.6}", r.overall);
    for (t, m) in &r.per_task {
        let _ = writeln!(s, "task_mae_deg.{t}: {m:.6}");
    }
    let _ = writeln!(s, "records:");
    let _ = writeln!(s, "query_id\ttask\tpred_x\tpred_y\tgt_x\tgt_y\terror_deg");
    for rec in &r.records {
        let (px, py) = rec
            .predicted
            .map_or(("nan".to_string(), "nan".to_string()), |p| (format!("{:.9}", p.x), format!("{:.9}", p.y)));
        let _ = writeln!(
            s,
            "{}\t{}\t{px}\t{py}\t{:.9}\t{:.9}\t{:.6}",
            rec.query_id, rec.task, rec.truth.x, rec.truth.y, rec.error_deg
        );
    }
    s
}

pub fn save_report(r: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_to_string(r)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepRow {
    pub k: usize,
    pub mae: f64,
    pub seeds: usize,
}

/// One row per K, averaging the overall MAE of every report for that K.
pub fn k_sweep(reports: &[EvalReport], ks: &[usize]) -> Vec<KSweepRow> {
    ks.iter()
        .map(|&k| {
            let m: Vec<f64> = reports.iter().filter(|r| r.k == k).map(|r| r.overall).collect();
            KSweepRow {
                k,
                mae: if m.is_empty() { f64::NAN } else { m.iter().sum::<f64>() / m.len() as f64 },
                seeds: m.len(),
            }
        })
        .collect()
}

pub fn k_sweep_to_string(rows: &[KSweepRow]) -> String {
    let mut s = String::from("k,mae_deg,seeds\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{}", r.k, r.mae, r.seeds);
    }
    s
}
