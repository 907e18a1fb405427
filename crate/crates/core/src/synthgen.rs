//! Deterministic synthetic scenes standing in for annotated interaction
//! datasets.
//!
//! Every scene shows one rectangular object with a small detached handle on
//! one short edge. Images have four channels:
//!
//! | channel | meaning                                           |
//! |---------|---------------------------------------------------|
//! | 0       | object mask (body and handle)                     |
//! | 1       | handle mask                                       |
//! | 2, 3    | x / y of the action direction on body pixels      |
//!
//! The same array is used as encoder input and as the per-pixel
//! correspondence feature map.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::image::FeatureImage;
use crate::lifting::{DepthMap, Intrinsics};
use crate::memory::{Affordance2D, Memory, MemoryEntry};
use crate::store::{decode_f64s, encode_f64s, header_value, join_floats, parse_field, parse_floats};

pub const IMAGE_SIZE: usize = 48;
pub const CHANNELS: usize = 4;
pub const CH_MASK: usize = 0;
pub const CH_HANDLE: usize = 1;
pub const CH_DIR_X: usize = 2;
pub const CH_DIR_Y: usize = 3;
/// Channels holding x-components, negated by a horizontal flip.
pub const X_ODD_CHANNELS: [usize; 1] = [CH_DIR_X];
pub const HISTOGRAM_BINS: usize = 8;
/// Embedding: channel means followed by the orientation histogram.
pub const EMBEDDING_DIM: usize = CHANNELS + HISTOGRAM_BINS;
pub const DEFAULT_NOISE: f64 = 0.05;
/// Largest deviation of a pickup direction from straight up.
pub const PICKUP_JITTER: f64 = 10.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Open,
    Close,
    Pickup,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Open, Task::Close, Task::Pickup];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Open => "open",
            Task::Close => "close",
            Task::Pickup => "pickup",
        }
    }

    fn ordinal(self) -> u64 {
        match self {
            Task::Open => 0,
            Task::Close => 1,
            Task::Pickup => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "open" => Ok(Task::Open),
            "close" => Ok(Task::Close),
            "pickup" => Ok(Task::Pickup),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Noiseless,
    Noisy,
    ReferenceInformative,
    NoisyReferenceInformative,
}

/// A benchmark configuration: observation noise and whether query images
/// hide the direction channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkVariant {
    pub kind: VariantKind,
    pub noise: f64,
    pub hides_direction: bool,
}

impl BenchmarkVariant {
    pub fn new(kind: VariantKind) -> Self {
        let (noise, hides_direction) = match kind {
            VariantKind::Noiseless => (0.0, false),
            VariantKind::Noisy => (DEFAULT_NOISE, false),
            VariantKind::ReferenceInformative => (0.0, true),
            VariantKind::NoisyReferenceInformative => (DEFAULT_NOISE, true),
        };
        Self {
            kind,
            noise,
            hides_direction,
        }
    }

    pub fn noiseless() -> Self {
        Self::new(VariantKind::Noiseless)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            VariantKind::Noiseless => "noiseless",
            VariantKind::Noisy => "noisy",
            VariantKind::ReferenceInformative => "reference-informative",
            VariantKind::NoisyReferenceInformative => "noisy-reference-informative",
        }
    }
}

impl FromStr for BenchmarkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim() {
            "noiseless" => VariantKind::Noiseless,
            "noisy" => VariantKind::Noisy,
            "reference-informative" => VariantKind::ReferenceInformative,
            "noisy-reference-informative" => VariantKind::NoisyReferenceInformative,
            other => return Err(Error::Config(format!("unknown benchmark variant {other:?}"))),
        };
        Ok(Self::new(kind))
    }
}

/// One synthetic observation with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub task: Task,
    /// Full observation, including noise; this is what enters the memory.
    pub image: FeatureImage,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub gt: Affordance2D,
    /// Appearance descriptor computed from the noiseless rendering.
    pub embedding: Vec<f64>,
    /// Query views of this scene carry no direction channels.
    pub hides_direction: bool,
}

impl Scene {
    /// The image seen when this scene is a query.
    pub fn query_image(&self) -> FeatureImage {
        if !self.hides_direction {
            return self.image.clone();
        }
        let mut img = self.image.clone();
        for px in img.data_mut().chunks_mut(CHANNELS) {
            px[CH_DIR_X] = 0.0;
            px[CH_DIR_Y] = 0.0;
        }
        img
    }

    pub fn memory_entry(&self) -> MemoryEntry {
        MemoryEntry {
            id: self.id.clone(),
            image: self.image.clone(),
            embedding: self.embedding.clone(),
            task: self.task.as_str().to_string(),
            affordance: self.gt,
        }
    }
}

/// Pose and shape parameters drawn for one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePose {
    pub center: Vec2,
    /// Object axis angle in `[0, π)`; the rendered body depends only on this.
    pub axis: f64,
    /// Whether the object faces `axis + π` rather than `axis`.
    pub reversed: bool,
    pub half_length: f64,
    pub half_width: f64,
    /// Handle on the `+axis` side when true.
    pub handle_forward: bool,
    pub pickup_jitter: f64,
    pub depth_z0: f64,
    pub depth_tilt: (f64, f64),
}

impl ScenePose {
    /// Object pose angle `θ ∈ [0, 2π)`.
    pub fn theta(&self) -> f64 {
        self.axis + if self.reversed { std::f64::consts::PI } else { 0.0 }
    }

    pub fn direction(&self, task: Task) -> Vec2 {
        let facing = if self.reversed {
            Vec2::from_angle(self.axis).neg()
        } else {
            Vec2::from_angle(self.axis)
        };
        match task {
            Task::Open => facing,
            Task::Close => facing.neg(),
            Task::Pickup => Vec2::new(0.0, -1.0).rotate(self.pickup_jitter),
        }
    }
}

fn draw_pose(rng: &mut ChaCha8Rng, variant: &BenchmarkVariant) -> ScenePose {
    use std::f64::consts::PI;
    let theta: f64 = rng.random_range(0.0..2.0 * PI);
    let (axis, reversed) = if theta >= PI { (theta - PI, true) } else { (theta, false) };
    let cx = 23.5 + rng.random_range(-3.0..3.0);
    let cy = 23.5 + rng.random_range(-3.0..3.0);
    let half_length = rng.random_range(9.0..13.0);
    let half_width = rng.random_range(4.0..7.0);
    let coin: bool = rng.random();
    let pickup_jitter = rng.random_range(-PICKUP_JITTER..PICKUP_JITTER);
    let depth_z0 = rng.random_range(0.8..1.2);
    let depth_tilt = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    // The handle marks the facing side unless the variant hides direction,
    // in which case its side is an independent coin flip.
    let handle_forward = if variant.hides_direction { coin } else { !reversed };
    ScenePose {
        center: Vec2::new(cx, cy),
        axis,
        reversed,
        half_length,
        half_width,
        handle_forward,
        pickup_jitter,
        depth_z0,
        depth_tilt,
    }
}

/// Default synthetic camera for `IMAGE_SIZE` images.
pub fn default_intrinsics() -> Intrinsics {
    let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    Intrinsics {
        fx: 60.0,
        fy: 60.0,
        cx: c,
        cy: c,
    }
}

/// Renders the noiseless image, handle top-left pixel, and depth map.
fn render(pose: &ScenePose, direction: Vec2, intr: &Intrinsics) -> (FeatureImage, (usize, usize), DepthMap) {
    let n = IMAGE_SIZE;
    let u = Vec2::from_angle(pose.axis);
    let v = Vec2::new(-u.y, u.x);
    let mut img = FeatureImage::zeros(n, n, CHANNELS);
    for y in 0..n {
        for x in 0..n {
            let d = Vec2::new(x as f64, y as f64).sub(pose.center);
            if d.dot(u).abs() <= pose.half_length && d.dot(v).abs() <= pose.half_width {
                let px = img.pixel_mut(x, y);
                px[CH_MASK] = 1.0;
                px[CH_DIR_X] = direction.x;
                px[CH_DIR_Y] = direction.y;
            }
        }
    }
    let side = if pose.handle_forward { 1.0 } else { -1.0 };
    let hc = pose.center.add(u.scale(side * (pose.half_length + 2.5)));
    let tl = ((hc.x - 0.5).round() as usize, (hc.y - 0.5).round() as usize);
    for y in tl.1..tl.1 + 2 {
        for x in tl.0..tl.0 + 2 {
            img.pixel_mut(x, y).copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        }
    }
    let normal = nalgebra::Vector3::new(pose.depth_tilt.0, pose.depth_tilt.1, 1.0).normalize();
    let offset = normal.z * pose.depth_z0;
    let mut depth = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            if img.get(x, y, CH_MASK) > 0.0 {
                let ray = intr.ray(x as f64, y as f64);
                depth[y * n + x] = offset / normal.dot(&ray);
            }
        }
    }
    (img, tl, DepthMap::new(n, n, depth).expect("sized"))
}

/// Channel means followed by the normalised orientation histogram of the
/// direction field over body pixels.
pub fn embedding_of(image: &FeatureImage) -> Vec<f64> {
    let mut emb = vec![0.0; EMBEDDING_DIM];
    let npx = (image.width() * image.height()) as f64;
    let mut body = 0usize;
    for px in image.data().chunks(image.channels()) {
        for c in 0..CHANNELS.min(image.channels()) {
            emb[c] += px[c] / npx;
        }
        let (dx, dy) = (px[CH_DIR_X], px[CH_DIR_Y]);
        if px[CH_MASK] > 0.5 && (dx != 0.0 || dy != 0.0) {
            let angle = dy.atan2(dx).rem_euclid(2.0 * std::f64::consts::PI);
            let bin = ((angle / (2.0 * std::f64::consts::PI) * HISTOGRAM_BINS as f64) as usize)
                .min(HISTOGRAM_BINS - 1);
            emb[CHANNELS + bin] += 1.0;
            body += 1;
        }
    }
    if body > 0 {
        for h in &mut emb[CHANNELS..] {
            *h /= body as f64;
        }
    }
    emb
}

/// Builds a scene from an explicit pose.
pub fn scene_from_pose(
    id: String,
    task: Task,
    pose: &ScenePose,
    variant: &BenchmarkVariant,
    noise_seed: u64,
) -> Scene {
    let intr = default_intrinsics();
    let direction = pose.direction(task);
    let (clean, tl, depth) = render(pose, direction, &intr);
    let embedding = embedding_of(&clean);
    let mut image = clean;
    if variant.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, variant.noise).expect("positive std");
        for v in image.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let gt = Affordance2D::new(Vec2::new(tl.0 as f64, tl.1 as f64), direction)
        .expect("rotated unit vectors are unit");
    Scene {
        id,
        task,
        image,
        depth,
        intrinsics: intr,
        gt,
        embedding,
        hides_direction: variant.hides_direction,
    }
}

/// Generates one scene; identical arguments give identical scenes.
pub fn generate_scene(task: Task, seed: u64, variant: &BenchmarkVariant) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = draw_pose(&mut rng, variant);
    let noise_seed: u64 = rng.random();
    scene_from_pose(format!("{task}-{seed:016x}"), task, &pose, variant, noise_seed)
}

/// Pose drawn for `seed`, exposed for oracles built on the generator.
pub fn pose_for_seed(seed: u64, variant: &BenchmarkVariant) -> ScenePose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_pose(&mut rng, variant)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train scenes, test scenes, and the memory built from the train scenes.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub memory: Memory,
    pub variant: BenchmarkVariant,
}

/// `n_train` + `n_test` scenes per task with disjoint ids; the memory holds
/// only train scenes.
pub fn generate_split(
    n_train: usize,
    n_test: usize,
    tasks: &[Task],
    seed: u64,
    variant: &BenchmarkVariant,
) -> Result<Split> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    let mut train = Vec::with_capacity(n_train * tasks.len());
    let mut test = Vec::with_capacity(n_test * tasks.len());
    for &task in tasks {
        for i in 0..n_train + n_test {
            let s = mix(seed, task.ordinal() + 1, i as u64);
            let mut scene = generate_scene(task, s, variant);
            scene.id = format!("{task}-{i:04}");
            if i < n_train {
                train.push(scene);
            } else {
                test.push(scene);
            }
        }
    }
    let memory = Memory::from_entries(train.iter().map(Scene::memory_entry).collect())?;
    Ok(Split {
        train,
        test,
        memory,
        variant: *variant,
    })
}

pub const SCENES_MAGIC: &str = "RAAP-SCENES";
const SCENES_VERSION: usize = 1;

/// One scene per line: id, task, H, W, C, image, depth, intrinsics,
/// contact, direction, embedding, hides-direction flag. Images and depth
/// maps are base64 `f64` payloads.
pub fn scenes_to_string(scenes: &[Scene]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{SCENES_MAGIC}\tversion={SCENES_VERSION}\tcount={}\timage=base64-f64le",
        scenes.len()
    );
    for s in scenes {
        let i = s.intrinsics;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.id,
            s.task,
            s.image.height(),
            s.image.width(),
            s.image.channels(),
            encode_f64s(s.image.data()),
            encode_f64s(s.depth.data()),
            join_floats(&[i.fx, i.fy, i.cx, i.cy]),
            join_floats(&[s.gt.contact.x, s.gt.contact.y]),
            join_floats(&[s.gt.direction.x, s.gt.direction.y]),
            join_floats(&s.embedding),
            s.hides_direction,
        );
    }
    out
}

pub fn scenes_from_str(text: &str) -> Result<Vec<Scene>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty scene file".into(),
    })?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&SCENES_MAGIC) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("missing {SCENES_MAGIC} header"),
        });
    }
    let version: usize = parse_field(header_value(&fields, "version", 1)?, "version", 1)?;
    if version != SCENES_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported scene file version {version}"),
        });
    }
    let count: usize = parse_field(header_value(&fields, "count", 1)?, "count", 1)?;
    let mut scenes = Vec::with_capacity(count);
    let mut last = 1;
    for (ln, line) in lines {
        last = ln;
        if line.is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split('\t').collect();
        if p.len() != 12 {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 12 fields, found {}", p.len()),
            });
        }
        let bad = |e: Error| Error::Parse {
            line: ln,
            msg: e.to_string(),
        };
        let task: Task = p[1].parse().map_err(bad)?;
        let h: usize = parse_field(p[2], "height", ln)?;
        let w: usize = parse_field(p[3], "width", ln)?;
        let c: usize = parse_field(p[4], "channels", ln)?;
        let image = FeatureImage::new(h, w, c, decode_f64s(p[5], ln)?).map_err(bad)?;
        let depth = DepthMap::new(h, w, decode_f64s(p[6], ln)?).map_err(bad)?;
        let k = parse_floats(p[7], ln)?;
        let contact = parse_floats(p[8], ln)?;
        let dir = parse_floats(p[9], ln)?;
        if k.len() != 4 || contact.len() != 2 || dir.len() != 2 {
            return Err(Error::Parse {
                line: ln,
                msg: "intrinsics need 4 values, contact and direction 2".into(),
            });
        }
        let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3]).map_err(bad)?;
        let gt = Affordance2D::new(Vec2::new(contact[0], contact[1]), Vec2::new(dir[0], dir[1])).map_err(bad)?;
        scenes.push(Scene {
            id: p[0].to_string(),
            task,
            image,
            depth,
            intrinsics,
            gt,
            embedding: parse_floats(p[10], ln)?,
            hides_direction: parse_field(p[11], "flag", ln)?,
        });
    }
    if scenes.len() != count {
        return Err(Error::Parse {
            line: last + 1,
            msg: format!("expected {count} scenes, found {}", scenes.len()),
        });
    }
    Ok(scenes)
}

pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scenes_to_string(scenes)).map_err(|e| Error::io(path, e))
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scenes_from_str(&text)
}

/// Split membership: a header with the generator settings, then one
/// `split<TAB>id<TAB>task` row per scene.
pub fn manifest_to_string(split: &Split, seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# variant={}\tnoise={:?}\tseed={seed}\ttrain={}\ttest={}",
        split.variant.name(),
        split.variant.noise,
        split.train.len(),
        split.test.len()
    );
    for (name, set) in [("train", &split.train), ("test", &split.test)] {
        for s in set.iter() {
            let _ = writeln!(out, "{name}\t{}\t{}", s.id, s.task);
        }
    }
    out
}
