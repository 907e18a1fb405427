//! The visual affordance memory: construction from annotated samples,
//! trajectory reduction, and the line-delimited store format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::image::FeatureImage;
use crate::store::{
    decode_f64s, encode_f64s, header_value, join_floats, parse_field, parse_floats,
};

pub const MEMORY_MAGIC: &str = "RAAP-MEMORY";
pub const MEMORY_FORMAT_VERSION: u32 = 1;
const EMPTY_MARKER: &str = "EMPTY";

/// Tolerance on the unit-norm invariant of stored directions.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Net displacement below which a trajectory is considered degenerate.
pub const DEGENERATE_DISPLACEMENT: f64 = 1e-6;

/// A contact point and unit post-contact direction in image coordinates
/// (origin top-left, x to the right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affordance2D {
    pub contact: Vec2,
    pub direction: Vec2,
}

impl Affordance2D {
    pub fn new(contact: Vec2, direction: Vec2) -> Result<Self> {
        if !contact.is_finite() || !direction.is_finite() {
            return Err(Error::contract("affordance has non-finite components"));
        }
        if (direction.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::contract(format!(
                "affordance direction ({}, {}) is not unit-norm",
                direction.x, direction.y
            )));
        }
        Ok(Self { contact, direction })
    }

    pub fn contact_in_bounds(&self, width: usize, height: usize) -> bool {
        self.contact.x >= 0.0
            && self.contact.y >= 0.0
            && self.contact.x < width as f64
            && self.contact.y < height as f64
    }
}

/// An annotated 2D motion trace with at least two finite points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory2D {
    points: Vec<Vec2>,
}

impl Trajectory2D {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::contract(format!(
                "trajectory needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::contract("trajectory contains non-finite points"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }
}

/// How a trajectory is reduced to one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionReduction {
    /// First principal axis of the centred points, signed by net displacement.
    #[default]
    Pca,
    /// Normalised `last - first`.
    Endpoint,
}

/// Reduces a trajectory to its dominant unit direction, or `None` when it
/// does not define one (no net displacement, or all points coincide).
pub fn reduce_trajectory(t: &Trajectory2D, method: DirectionReduction) -> Option<Vec2> {
    let pts = t.points();
    let first = pts[0];
    let last = pts[pts.len() - 1];
    let net = last.sub(first);
    if net.norm() < DEGENERATE_DISPLACEMENT {
        return None;
    }
    let axis = match method {
        DirectionReduction::Endpoint => net,
        DirectionReduction::Pca => principal_axis(pts)?,
    };
    let axis = if axis.dot(net) < 0.0 { axis.neg() } else { axis };
    axis.normalized()
}

fn principal_axis(pts: &[Vec2]) -> Option<Vec2> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vec2::default(), |a, p| a.add(*p)).scale(1.0 / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = p.sub(mean);
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    sxx /= n;
    sxy /= n;
    syy /= n;
    if sxx + syy <= 0.0 {
        return None;
    }
    if sxy == 0.0 {
        return Some(if sxx >= syy {
            Vec2::new(1.0, 0.0)
        } else {
            Vec2::new(0.0, 1.0)
        });
    }
    let half_diff = 0.5 * (sxx - syy);
    let lambda = 0.5 * (sxx + syy) + (half_diff * half_diff + sxy * sxy).sqrt();
    // Two algebraically equivalent eigenvector forms; keep the better
    // conditioned one.
    let a = Vec2::new(lambda - syy, sxy);
    let b = Vec2::new(sxy, lambda - sxx);
    let v = if a.norm() >= b.norm() { a } else { b };
    v.normalized()
}

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize_task(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One stored interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Identifier of the source observation (used for leakage checks and
    /// self-exclusion during training).
    pub id: String,
    pub image: FeatureImage,
    pub embedding: Vec<f64>,
    pub task: String,
    pub affordance: Affordance2D,
}

/// Where a sample's direction comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AffordanceSource {
    /// Annotated trace; the first point is taken as the contact.
    Trajectory(Trajectory2D),
    Affordance(Affordance2D),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: FeatureImage,
    pub embedding: Vec<f64>,
    pub task: String,
    pub source: AffordanceSource,
}

/// An immutable, insertion-ordered collection of [`MemoryEntry`] values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Memory {
    d_emb: usize,
    entries: Vec<MemoryEntry>,
    by_task: BTreeMap<String, Vec<usize>>,
}

impl Memory {
    /// Assembles a memory from already-validated entries.
    pub fn from_entries(entries: Vec<MemoryEntry>) -> Result<Self> {
        let d_emb = entries.first().map_or(0, |e| e.embedding.len());
        let mut by_task: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.len() != d_emb {
                return Err(Error::Schema(format!(
                    "entry {} has embedding dimension {}, expected {d_emb}",
                    e.id,
                    e.embedding.len()
                )));
            }
            if (e.affordance.direction.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Schema(format!(
                    "entry {} has a non-unit direction",
                    e.id
                )));
            }
            by_task.entry(e.task.clone()).or_default().push(i);
        }
        Ok(Self {
            d_emb,
            entries,
            by_task,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &MemoryEntry {
        &self.entries[index]
    }

    /// Entry indices per task label, in insertion order.
    pub fn task_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_task
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.position_of(id).is_some()
    }
}

/// Reduces trajectories, drops samples without a valid direction, and
/// indexes the remainder by task.
pub fn build_memory(samples: Vec<Sample>, method: DirectionReduction) -> Result<Memory> {
    if samples.is_empty() {
        return Err(Error::contract("build_memory needs at least one sample"));
    }
    let total = samples.len();
    let mut entries = Vec::with_capacity(total);
    for s in samples {
        let affordance = match &s.source {
            AffordanceSource::Affordance(a) => Some(*a),
            AffordanceSource::Trajectory(t) => reduce_trajectory(t, method)
                .map(|direction| Affordance2D {
                    contact: t.points()[0],
                    direction,
                }),
        };
        let Some(affordance) = affordance else {
            log::debug!("dropping sample {}: no valid post-contact direction", s.id);
            continue;
        };
        entries.push(MemoryEntry {
            id: s.id,
            image: s.image,
            embedding: s.embedding,
            task: normalize_task(&s.task),
            affordance,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyMemory(format!(
            "all {total} samples had degenerate trajectories"
        )));
    }
    Memory::from_entries(entries)
}

/// Serialises a memory to its text form.
pub fn memory_to_string(m: &Memory) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MEMORY_MAGIC}\tversion={MEMORY_FORMAT_VERSION}\td_emb={}\tentries={}\timage=base64-f64le",
        m.d_emb(),
        m.len()
    );
    if m.is_empty() {
        out.push_str(EMPTY_MARKER);
        out.push('\n');
        return out;
    }
    for e in m.entries() {
        let a = e.affordance;
        let _ = writeln!(
            out,
            "{MEMORY_FORMAT_VERSION}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.task,
            e.image.height(),
            e.image.width(),
            e.image.channels(),
            encode_f64s(e.image.data()),
            join_floats(&e.embedding),
            join_floats(&[a.contact.x, a.contact.y]),
            join_floats(&[a.direction.x, a.direction.y]),
        );
    }
    out
}

/// Parses the text form written by [`memory_to_string`].
pub fn memory_from_str(text: &str) -> Result<Memory> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&MEMORY_MAGIC) {
        return Err(Error::Parse {
            line: hline,
            msg: format!("expected `{MEMORY_MAGIC}` header"),
        });
    }
    let version: u32 = parse_field(header_value(&fields, "version", hline)?, "version", hline)?;
    if version != MEMORY_FORMAT_VERSION {
        return Err(Error::Parse {
            line: hline,
            msg: format!("unsupported format version {version}"),
        });
    }
    let d_emb: usize = parse_field(header_value(&fields, "d_emb", hline)?, "d_emb", hline)?;
    let count: usize = parse_field(header_value(&fields, "entries", hline)?, "entries", hline)?;

    let mut entries = Vec::with_capacity(count);
    let mut last_line = hline;
    for (ln, line) in lines {
        last_line = ln;
        if line.trim().is_empty() {
            continue;
        }
        if line == EMPTY_MARKER {
            if count != 0 {
                return Err(Error::Parse {
                    line: ln,
                    msg: "empty marker in a non-empty store".into(),
                });
            }
            continue;
        }
        entries.push(parse_entry(line, ln, d_emb)?);
    }
    if entries.len() != count {
        return Err(Error::Parse {
            line: last_line + 1,
            msg: format!(
                "expected {count} entries, found {} (truncated file?)",
                entries.len()
            ),
        });
    }
    if count == 0 {
        return Ok(Memory {
            d_emb,
            ..Memory::default()
        });
    }
    Memory::from_entries(entries)
}

fn parse_entry(line: &str, ln: usize, d_emb: usize) -> Result<MemoryEntry> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 10 {
        return Err(Error::Parse {
            line: ln,
            msg: format!("expected 10 fields, found {}", f.len()),
        });
    }
    let version: u32 = parse_field(f[0], "record version", ln)?;
    if version != MEMORY_FORMAT_VERSION {
        return Err(Error::Parse {
            line: ln,
            msg: format!("unsupported record version {version}"),
        });
    }
    let (h, w, c): (usize, usize, usize) = (
        parse_field(f[3], "H", ln)?,
        parse_field(f[4], "W", ln)?,
        parse_field(f[5], "C", ln)?,
    );
    let pixels = decode_f64s(f[6], ln)?;
    let image = FeatureImage::new(h, w, c, pixels).map_err(|e| Error::Parse {
        line: ln,
        msg: e.to_string(),
    })?;
    let embedding = parse_floats(f[7], ln)?;
    if embedding.len() != d_emb {
        return Err(Error::Schema(format!(
            "line {ln}: embedding has dimension {}, header says {d_emb}",
            embedding.len()
        )));
    }
    let contact = parse_pair(f[8], ln)?;
    let direction = parse_pair(f[9], ln)?;
    Ok(MemoryEntry {
        id: f[1].to_string(),
        task: f[2].to_string(),
        image,
        embedding,
        affordance: Affordance2D { contact, direction },
    })
}

pub(crate) fn parse_pair(text: &str, ln: usize) -> Result<Vec2> {
    match parse_floats(text, ln)?.as_slice() {
        [x, y] => Ok(Vec2::new(*x, *y)),
        other => Err(Error::Parse {
            line: ln,
            msg: format!("expected an x,y pair, found {} values", other.len()),
        }),
    }
}

pub fn save_memory(m: &Memory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, memory_to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn load_memory(path: impl AsRef<Path>) -> Result<Memory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    memory_from_str(&text)
}
