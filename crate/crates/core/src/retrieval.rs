//! Two-stage retrieval: task-relevance filtering followed by exact cosine
//! top-K over appearance embeddings.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{normalize_task, Memory};

/// Groups of task labels treated as mutually relevant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<String>>", into = "Vec<Vec<String>>")]
pub struct TaskSynonymTable {
    groups: Vec<BTreeSet<String>>,
}

impl TaskSynonymTable {
    pub fn new(groups: Vec<Vec<String>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let set: BTreeSet<String> = g.iter().map(|t| normalize_task(t)).collect();
            for t in &set {
                if !seen.insert(t.clone()) {
                    return Err(Error::Config(format!(
                        "task {t:?} appears in more than one synonym group"
                    )));
                }
            }
            out.push(set);
        }
        Ok(Self { groups: out })
    }

    /// Labels relevant to `task`; an unlisted label maps to itself alone.
    pub fn group(&self, task: &str) -> BTreeSet<String> {
        let task = normalize_task(task);
        self.groups
            .iter()
            .find(|g| g.contains(&task))
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([task]))
    }

    pub fn groups(&self) -> &[BTreeSet<String>] {
        &self.groups
    }
}

impl TryFrom<Vec<Vec<String>>> for TaskSynonymTable {
    type Error = Error;

    fn try_from(groups: Vec<Vec<String>>) -> Result<Self> {
        Self::new(groups)
    }
}

impl From<TaskSynonymTable> for Vec<Vec<String>> {
    fn from(t: TaskSynonymTable) -> Self {
        t.groups.into_iter().map(|g| g.into_iter().collect()).collect()
    }
}

/// Memory indices whose task lies in the synonym group of `task`, in
/// insertion order.
pub fn filter_by_task(memory: &Memory, task: &str, synonyms: &TaskSynonymTable) -> Vec<usize> {
    let group = synonyms.group(task);
    memory
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| group.contains(&e.task))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved {
    /// Index into the memory.
    pub index: usize,
    /// Cosine similarity in `[-1, 1]`.
    pub similarity: f64,
}

/// Retrieved entries ordered by similarity (descending), ties by memory
/// insertion index (ascending).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalResult {
    pub entries: Vec<Retrieved>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|r| r.index).collect()
    }

    pub fn similarities(&self) -> Vec<f64> {
        self.entries.iter().map(|r| r.similarity).collect()
    }
}

/// Cosine similarity; `-inf` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub(crate) fn rank_order(a: &Retrieved, b: &Retrieved) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

/// Exact top-`k` by cosine similarity within `subset`.
///
/// The entry whose id equals `exclude` is removed before ranking; entries
/// with zero-norm embeddings are never returned.
pub fn cosine_topk(
    memory: &Memory,
    query: &[f64],
    subset: &[usize],
    k: usize,
    exclude: Option<&str>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::contract("cosine_topk requires k >= 1"));
    }
    if !memory.is_empty() && query.len() != memory.d_emb() {
        return Err(Error::Schema(format!(
            "query embedding has dimension {}, memory has {}",
            query.len(),
            memory.d_emb()
        )));
    }
    let mut scored: Vec<Retrieved> = subset
        .iter()
        .filter(|&&i| exclude != Some(memory.entry(i).id.as_str()))
        .map(|&i| Retrieved {
            index: i,
            similarity: cosine(query, &memory.entry(i).embedding),
        })
        .filter(|r| r.similarity.is_finite())
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(k);
    Ok(RetrievalResult { entries: scored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::image::FeatureImage;
    use crate::memory::{Affordance2D, MemoryEntry};

    fn memory(embs: &[(&str, Vec<f64>)]) -> Memory {
        let a = Affordance2D::new(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)).unwrap();
        Memory::from_entries(
            embs.iter()
                .enumerate()
                .map(|(i, (task, e))| MemoryEntry {
                    id: format!("e{i}"),
                    image: FeatureImage::zeros(1, 1, 1),
                    embedding: e.clone(),
                    task: normalize_task(task),
                    affordance: a,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn filter_examples() {
        let m = memory(&[
            ("open drawer", vec![1.0]),
            ("open microwave", vec![1.0]),
            ("close drawer", vec![1.0]),
            ("open drawer", vec![1.0]),
        ]);
        let none = TaskSynonymTable::default();
        assert_eq!(filter_by_task(&m, "open drawer", &none), vec![0, 3]);
        let syn = TaskSynonymTable::new(vec![vec![
            "open drawer".into(),
            "open microwave".into(),
        ]])
        .unwrap();
        assert_eq!(filter_by_task(&m, "open drawer", &syn), vec![0, 1, 3]);
        assert!(filter_by_task(&m, "pour water", &syn).is_empty());
    }

    #[test]
    fn overlapping_groups_rejected() {
        let r = TaskSynonymTable::new(vec![
            vec!["a".into(), "b".into()],
            vec!["b".into(), "c".into()],
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn exact_match_ranks_first() {
        let m = memory(&[
            ("t", vec![0.0, 1.0, 0.0]),
            ("t", vec![0.3, 0.4, 0.5]),
            ("t", vec![1.0, 1.0, 0.0]),
        ]);
        let r = cosine_topk(&m, &[0.3, 0.4, 0.5], &[0, 1, 2], 2, None).unwrap();
        assert_eq!(r.entries[0].index, 1);
        assert!((r.entries[0].similarity - 1.0).abs() < 1e-12);
        let all = cosine_topk(&m, &[0.3, 0.4, 0.5], &[0, 1, 2], 10, None).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.entries.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn exclusion_zero_norm_and_ties() {
        let m = memory(&[
            ("t", vec![1.0, 0.0]),
            ("t", vec![0.0, 0.0]),
            ("t", vec![2.0, 0.0]),
            ("t", vec![1.0, 0.0]),
        ]);
        let r = cosine_topk(&m, &[1.0, 0.0], &[0, 1, 2, 3], 4, Some("e2")).unwrap();
        assert_eq!(r.indices(), vec![0, 3]);
        assert!(matches!(
            cosine_topk(&m, &[1.0], &[0], 1, None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn matches_exhaustive_sort() {
        let embs: Vec<(&str, Vec<f64>)> = (0..5)
            .map(|i| {
                let f = i as f64;
                ("t", vec![(f * 1.7).sin(), (f * 0.9).cos(), f * 0.1 - 0.2])
            })
            .collect();
        let m = memory(&embs);
        let q = [0.2, -0.5, 0.9];
        let r = cosine_topk(&m, &q, &[0, 1, 2, 3, 4], 3, None).unwrap();
        // oracle: all pairwise similarities, sorted by value
        let mut all: Vec<(f64, usize)> = embs
            .iter()
            .enumerate()
            .map(|(i, (_, e))| {
                let dot: f64 = e.iter().zip(&q).map(|(a, b)| a * b).sum();
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt()
                    * q.iter().map(|v| v * v).sum::<f64>().sqrt();
                (dot / n, i)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(r.indices(), all.iter().take(3).map(|x| x.1).collect::<Vec<_>>());
        for (got, want) in r.similarities().iter().zip(&all) {
            assert!((got - want.0).abs() < 1e-12);
        }
    }
}
