//! Episode construction, flip augmentation, and the Adam training loop.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::image::FeatureImage;
use crate::lifting::{DepthMap, Intrinsics};
use crate::memory::{Affordance2D, Memory};
use crate::model::{AlignmentModel, Reference, WeightingRule};
use crate::retrieval::{cosine_topk, filter_by_task, TaskSynonymTable};
use crate::synthgen::{Scene, CHANNELS, CH_DIR_X, HISTOGRAM_BINS, X_ODD_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// References per episode.
    pub k: usize,
    pub candidate_pool: usize,
    pub episodes_per_query: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_prob: f64,
    /// Mirror the references together with a flipped query.
    pub flip_references: bool,
    pub min_improvement: f64,
    pub rule: WeightingRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            candidate_pool: 15,
            episodes_per_query: 5,
            max_epochs: 50,
            patience: 5,
            lr: 3e-4,
            batch_size: 16,
            seed: 0,
            flip_prob: 0.5,
            flip_references: false,
            min_improvement: 1e-6,
            rule: WeightingRule::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(10..=20).contains(&self.candidate_pool) {
            return bad(format!("candidate_pool {} outside 10..=20", self.candidate_pool));
        }
        if self.k > self.candidate_pool {
            return bad(format!("k={} exceeds candidate_pool={}", self.k, self.candidate_pool));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 || self.episodes_per_query == 0 {
            return bad("patience, max_epochs, batch_size and episodes_per_query must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        Ok(())
    }
}

/// One training example: a query with `K` sampled references.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Index into the training scenes.
    pub query: usize,
    pub query_id: String,
    /// Memory indices in retrieval-rank order.
    pub refs: Vec<usize>,
    pub similarities: Vec<f64>,
    pub target: Vec2,
    pub flip: bool,
}

/// Per query: task filter, top-`candidate_pool` retrieval excluding the
/// query itself, then `episodes_per_query` draws of `K` references.
pub fn build_episodes(
    train: &[Scene],
    memory: &Memory,
    synonyms: &TaskSynonymTable,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(train.len() * cfg.episodes_per_query);
    for (qi, scene) in train.iter().enumerate() {
        let (ranked, sims) = if cfg.k == 0 {
            (Vec::new(), Vec::new())
        } else {
            let subset = filter_by_task(memory, scene.task.as_str(), synonyms);
            let pool = cosine_topk(memory, &scene.embedding, &subset, cfg.candidate_pool, Some(&scene.id))?;
            if pool.is_empty() {
                warn!("query {} has no candidates; skipped", scene.id);
                continue;
            }
            if pool.len() < cfg.k {
                warn!(
                    "query {} has {} candidates for k={}; using the full pool",
                    scene.id,
                    pool.len(),
                    cfg.k
                );
            }
            (pool.indices(), pool.similarities())
        };
        for _ in 0..cfg.episodes_per_query {
            let take = cfg.k.min(ranked.len());
            let mut picks = rand::seq::index::sample(rng, ranked.len(), take).into_vec();
            picks.sort_unstable();
            let flip = rng.random_bool(cfg.flip_prob);
            out.push(Episode {
                query: qi,
                query_id: scene.id.clone(),
                refs: picks.iter().map(|&p| ranked[p]).collect(),
                similarities: picks.iter().map(|&p| sims[p]).collect(),
                target: scene.gt.direction,
                flip,
            });
        }
    }
    Ok(out)
}

/// Text listing of episodes, one per line, for reproducibility checks.
pub fn episodes_to_string(episodes: &[Episode], memory: &Memory) -> String {
    let mut s = String::new();
    for e in episodes {
        let ids: Vec<&str> = e.refs.iter().map(|&i| memory.entry(i).id.as_str()).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{:?}\t{:?},{:?}\t{}",
            e.query_id,
            ids.join(","),
            e.similarities,
            e.target.x,
            e.target.y,
            e.flip
        );
    }
    s
}

pub fn flip_direction(a: Vec2) -> Vec2 {
    Vec2::new(-a.x, a.y)
}

pub fn flip_image(image: &FeatureImage) -> FeatureImage {
    image.hflip(&X_ODD_CHANNELS)
}

pub fn flip_affordance(a: &Affordance2D, width: usize) -> Affordance2D {
    Affordance2D {
        contact: Vec2::new(width as f64 - 1.0 - a.contact.x, a.contact.y),
        direction: flip_direction(a.direction),
    }
}

fn flip_depth(depth: &DepthMap) -> DepthMap {
    let (h, w) = (depth.height(), depth.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(depth.at(w - 1 - x, y));
        }
    }
    DepthMap::new(h, w, data).expect("same size")
}

/// Mirror of an embedding: x-means negate, orientation bins reflect
/// `φ → π − φ`.
fn flip_embedding(e: &[f64]) -> Vec<f64> {
    let mut out = e.to_vec();
    if e.len() == CHANNELS + HISTOGRAM_BINS {
        out[CH_DIR_X] = -e[CH_DIR_X];
        let half = HISTOGRAM_BINS / 2;
        for b in 0..HISTOGRAM_BINS {
            out[CHANNELS + (half + HISTOGRAM_BINS - 1 - b) % HISTOGRAM_BINS] = e[CHANNELS + b];
        }
    }
    out
}

/// Horizontally mirrored copy of a scene: image, depth, camera, contact,
/// and direction all reflect about the vertical axis.
pub fn hflip_augment(scene: &Scene) -> Scene {
    let w = scene.image.width();
    let i = scene.intrinsics;
    Scene {
        id: scene.id.clone(),
        task: scene.task,
        image: flip_image(&scene.image),
        depth: flip_depth(&scene.depth),
        intrinsics: Intrinsics {
            cx: w as f64 - 1.0 - i.cx,
            ..i
        },
        gt: flip_affordance(&scene.gt, w),
        embedding: flip_embedding(&scene.embedding),
        hides_direction: scene.hides_direction,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per completed epoch.
    pub history: Vec<f64>,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Loss and gradient of one episode under the current parameters.
pub fn episode_loss_and_grad(
    model: &AlignmentModel,
    train: &[Scene],
    memory: &Memory,
    e: &Episode,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let scene = &train[e.query];
    let mut query = scene.query_image();
    let mut target = e.target;
    if e.flip {
        query = flip_image(&query);
        target = flip_direction(target);
    }
    let flipped_refs: Vec<(FeatureImage, Vec2)>;
    let mut refs: Vec<Reference> = Vec::with_capacity(e.refs.len());
    if e.flip && cfg.flip_references {
        flipped_refs = e
            .refs
            .iter()
            .map(|&i| {
                let r = memory.entry(i);
                (flip_image(&r.image), flip_direction(r.affordance.direction))
            })
            .collect();
        for (slot, ((img, dir), &s)) in flipped_refs.iter().zip(&e.similarities).enumerate() {
            refs.push(Reference {
                image: img,
                direction: *dir,
                similarity: s,
                slot: slot + 1,
            });
        }
    } else {
        for (slot, (&i, &s)) in e.refs.iter().zip(&e.similarities).enumerate() {
            let r = memory.entry(i);
            refs.push(Reference {
                image: &r.image,
                direction: r.affordance.direction,
                similarity: s,
                slot: slot + 1,
            });
        }
    }
    model.loss_and_grad(&query, &refs, target, cfg.rule)
}

/// Adam over mini-batches of episodes with early stopping on the epoch
/// training loss. Parameters of the final epoch are kept.
pub fn train(
    model: &mut AlignmentModel,
    train_scenes: &[Scene],
    memory: &Memory,
    episodes: &[Episode],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    let n = model.param_count();
    let mut adam = Adam::new(n);
    let mut params = model.flat_params();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_E90C);
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; n];
            for &ei in batch {
                let e = &episodes[ei];
                let (loss, g) = episode_loss_and_grad(model, train_scenes, memory, e, cfg)?;
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        episode: ei,
                        msg: format!("query {} (epoch {epoch}) produced loss {loss}", e.query_id),
                    });
                }
                total += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut params, &grad, cfg.lr);
            model.set_flat_params(&params)?;
        }
        let mean = total / episodes.len() as f64;
        history.push(mean);
        debug!("epoch {epoch}: mean loss {mean:.6}");
        if mean < best - cfg.min_improvement {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("early stop after epoch {epoch}: no improvement for {stale} epochs");
                return Ok(TrainReport {
                    history,
                    stopped_early: true,
                });
            }
        }
    }
    Ok(TrainReport {
        history,
        stopped_early: false,
    })
}

/// `epoch,mean_loss` rows.
pub fn loss_history_to_string(history: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{l:?}", i + 1);
    }
    s
}

pub fn save_loss_history(history: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_history_to_string(history)).map_err(|e| Error::io(path, e))
}
