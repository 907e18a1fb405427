//! Cross-image alignment model regressing the post-contact direction.
//!
//! Query and reference images share a patch encoder. Each reference is
//! modulated by its own action vector (FiLM), tagged with a slot embedding,
//! and weighted by a learned gate combined with its retrieval similarity.
//! The query attends over the concatenated reference tokens, and a
//! pre-norm transformer reads the result out through a CLS token.

mod checkpoint;
#[cfg(test)]
mod tests;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::image::FeatureImage;
use crate::numeric::{softmax_in_place, Graph, Tensor, Var};

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};

/// Predictions with a smaller raw norm are flagged as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Added inside the log of the per-key attention bias.
pub const LOG_BIAS_FLOOR: f64 = 1e-12;

/// How the final reference weights enter cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Additive `log(w + 1e-12)` on every key logit of reference `k`.
    #[default]
    LogBias,
    /// Attend to each reference separately and mix outputs by weight.
    PerReference,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::LogBias => "log-bias",
            AttentionMode::PerReference => "per-reference",
        }
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-bias" => Ok(AttentionMode::LogBias),
            "per-reference" => Ok(AttentionMode::PerReference),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Reference weighting rule; `Full` is the trained model, the others are
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingRule {
    #[default]
    Full,
    NoGating,
    NoSimilarity,
    Uniform,
}

impl WeightingRule {
    pub const ALL: [WeightingRule; 4] = [
        WeightingRule::Full,
        WeightingRule::NoGating,
        WeightingRule::NoSimilarity,
        WeightingRule::Uniform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightingRule::Full => "full",
            WeightingRule::NoGating => "no_gating",
            WeightingRule::NoSimilarity => "no_similarity",
            WeightingRule::Uniform => "uniform",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            WeightingRule::Full => "softmax(s)*gate / (sum + eps)",
            WeightingRule::NoGating => "softmax(s)*1 / (sum + eps)",
            WeightingRule::NoSimilarity => "(1/K)*gate / (sum + eps)",
            WeightingRule::Uniform => "1/K",
        }
    }
}

impl fmt::Display for WeightingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(WeightingRule::Full),
            "no_gating" | "no-gating" => Ok(WeightingRule::NoGating),
            "no_similarity" | "no-similarity" => Ok(WeightingRule::NoSimilarity),
            "uniform" => Ok(WeightingRule::Uniform),
            other => Err(Error::Config(format!("unknown weighting rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub k_max: usize,
    pub film_hidden: usize,
    pub gate_hidden: usize,
    pub head_hidden: usize,
    pub eps: f64,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: crate::synthgen::IMAGE_SIZE,
            width: crate::synthgen::IMAGE_SIZE,
            channels: crate::synthgen::CHANNELS,
            patch: 8,
            d: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 6,
            k_max: 4,
            film_hidden: 32,
            gate_hidden: 32,
            head_hidden: 32,
            eps: 1e-8,
            attention: AttentionMode::LogBias,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("film_hidden", self.film_hidden),
            ("gate_hidden", self.gate_hidden),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.d % self.n_heads != 0 {
            return bad(format!("d={} not divisible by n_heads={}", self.d, self.n_heads));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn n_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Every parameter block in storage order with its shape.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.d;
        let mut v: Vec<(String, usize, usize)> = Vec::new();
        let mut push = |n: &str, r: usize, c: usize| v.push((n.to_string(), r, c));
        push("enc.w", self.patch_dim(), d);
        push("enc.b", 1, d);
        push("enc.pos", self.n_tokens(), d);
        push("film.w1", 2, self.film_hidden);
        push("film.b1", 1, self.film_hidden);
        push("film.w2", self.film_hidden, 2 * d);
        push("film.b2", 1, 2 * d);
        if self.k_max > 0 {
            push("ref_id", self.k_max, d);
        }
        push("gate.w1", 2 * d, self.gate_hidden);
        push("gate.b1", 1, self.gate_hidden);
        push("gate.w2", self.gate_hidden, 1);
        push("gate.b2", 1, 1);
        // Key projections carry no bias: it would shift every logit of a
        // row equally and never receive a gradient.
        for p in ["xattn.q", "xattn.k", "xattn.v", "xattn.o"] {
            push(&format!("{p}.w"), d, d);
            if p != "xattn.k" {
                push(&format!("{p}.b"), 1, d);
            }
        }
        push("cls", 1, d);
        for l in 0..self.n_layers {
            let p = format!("layer{l}");
            push(&format!("{p}.ln1.g"), 1, d);
            push(&format!("{p}.ln1.b"), 1, d);
            for m in ["q", "k", "v", "o"] {
                push(&format!("{p}.attn.{m}.w"), d, d);
                if m != "k" {
                    push(&format!("{p}.attn.{m}.b"), 1, d);
                }
            }
            push(&format!("{p}.ln2.g"), 1, d);
            push(&format!("{p}.ln2.b"), 1, d);
            push(&format!("{p}.ff.w1"), d, self.d_ff);
            push(&format!("{p}.ff.b1"), 1, self.d_ff);
            push(&format!("{p}.ff.w2"), self.d_ff, d);
            push(&format!("{p}.ff.b2"), 1, d);
        }
        push("final_ln.g", 1, d);
        push("final_ln.b", 1, d);
        push("head.w1", d, self.head_hidden);
        push("head.b1", 1, self.head_hidden);
        push("head.w2", self.head_hidden, 2);
        push("head.b2", 1, 2);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// One retrieved reference as seen by the model.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub image: &'a FeatureImage,
    pub direction: Vec2,
    pub similarity: f64,
    /// Reference-ID slot, 1-based.
    pub slot: usize,
}

impl<'a> Reference<'a> {
    /// References in retrieval order with slots `1..=K`.
    pub fn ranked(items: &[(&'a FeatureImage, Vec2, f64)]) -> Vec<Reference<'a>> {
        items
            .iter()
            .enumerate()
            .map(|(i, &(image, direction, similarity))| Reference {
                image,
                direction,
                similarity,
                slot: i + 1,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub raw: Vec2,
    /// `raw / ‖raw‖`, or `None` when the prediction is degenerate.
    pub direction: Option<Vec2>,
}

impl Prediction {
    fn from_raw(raw: Vec2) -> Self {
        let n = raw.norm();
        let direction = (n.is_finite() && n >= DEGENERATE_NORM).then(|| raw.scale(1.0 / n));
        Self { raw, direction }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl AlignmentModel {
    /// Random initialisation, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, r, c) in config.layout() {
            let t = if name.ends_with(".g") {
                Tensor::full(&[r, c], 1.0)
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&[r, c])
            } else {
                let std = match name.as_str() {
                    "enc.pos" | "cls" | "ref_id" => 0.02,
                    // small so modulation starts near identity
                    "film.w2" => 0.1 / (r as f64).sqrt(),
                    _ => 1.0 / (r as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::matrix(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())?
            };
            names.push(name);
            params.push(t);
        }
        Self::from_parts(config, names, params)
    }

    pub(crate) fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != names.len() || names.len() != params.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter blocks, found {}",
                layout.len(),
                names.len()
            )));
        }
        for ((lname, r, c), (name, t)) in layout.iter().zip(names.iter().zip(&params)) {
            if lname != name || t.shape() != [*r, *c] {
                return Err(Error::Schema(format!(
                    "parameter {name} {:?} does not match expected {lname} [{r}, {c}]",
                    t.shape()
                )));
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                op: "set_flat_params",
                lhs: vec![self.param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for t in &mut self.params {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind<'m>(&'m self, g: &mut Graph, requires_grad: bool) -> Result<Bound<'m>> {
        let vars = self
            .params
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { model: self, vars })
    }

    /// Direction prediction without gradient tracking.
    pub fn predict(&self, query: &FeatureImage, refs: &[Reference<'_>], rule: WeightingRule) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let raw = b.forward(&mut g, query, refs, rule)?;
        let v = g.value(raw).data();
        Ok(Prediction::from_raw(Vec2::new(v[0], v[1])))
    }

    /// Loss and flattened parameter gradient for one example.
    pub fn loss_and_grad(
        &self,
        query: &FeatureImage,
        refs: &[Reference<'_>],
        target: Vec2,
        rule: WeightingRule,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, true)?;
        let raw = b.forward(&mut g, query, refs, rule)?;
        let loss = direction_loss(&mut g, raw, target)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let mut grad = Vec::with_capacity(self.param_count());
        for (&v, t) in b.vars.iter().zip(&self.params) {
            match g.grad(v) {
                Some(gr) => grad.extend_from_slice(gr),
                None => grad.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        Ok((value, grad))
    }
}

/// `½‖raw − target‖²` on the unnormalised prediction.
pub fn direction_loss(g: &mut Graph, raw: Var, target: Vec2) -> Result<Var> {
    let t = g.constant(Tensor::row(vec![target.x, target.y])?)?;
    let diff = g.sub(raw, t)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 0.5)
}

/// Plain-number loss, identical to [`direction_loss`].
pub fn loss_value(raw: Vec2, target: Vec2) -> f64 {
    let d = raw.sub(target);
    0.5 * (d.x * d.x + d.y * d.y)
}

fn softmax_checked(s: &[f64]) -> Result<Vec<f64>> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite similarity in {s:?}")));
    }
    let mut out = s.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Final per-reference weights from similarities `s` and gate values `w`:
/// `softmax(s)_k·w_k / (Σ_j softmax(s)_j·w_j + ε)`.
pub fn dual_weights(s: &[f64], w: &[f64], eps: f64) -> Result<Vec<f64>> {
    if s.len() != w.len() || s.is_empty() {
        return Err(Error::Dimension {
            op: "dual_weights",
            lhs: vec![s.len()],
            rhs: vec![w.len()],
        });
    }
    if !(eps > 0.0) {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }
    let sm = softmax_checked(s)?;
    let num: Vec<f64> = sm.iter().zip(w).map(|(a, b)| a * b).collect();
    let den: f64 = num.iter().sum::<f64>() + eps;
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Weights under an ablation rule; `w` are the gate values.
pub fn rule_weights(rule: WeightingRule, s: &[f64], w: &[f64], eps: f64) -> Result<Vec<f64>> {
    let k = s.len();
    match rule {
        WeightingRule::Full => dual_weights(s, w, eps),
        WeightingRule::NoGating => dual_weights(s, &vec![1.0; k], eps),
        WeightingRule::NoSimilarity => dual_weights(&vec![0.0; k], w, eps),
        WeightingRule::Uniform => Ok(vec![1.0 / k as f64; k]),
    }
}

/// Model parameters placed on a graph.
pub struct Bound<'m> {
    model: &'m AlignmentModel,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.model.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"));
        match self.model.index.get(&format!("{prefix}.b")) {
            Some(&i) => affine(g, x, w, self.vars[i]),
            None => g.matmul(x, w),
        }
    }

    /// Patch tokens `[N×d]` with positional embeddings.
    pub fn encode_patches(&self, g: &mut Graph, image: &FeatureImage) -> Result<Var> {
        let c = self.cfg();
        if (image.height(), image.width(), image.channels()) != (c.height, c.width, c.channels) {
            return Err(Error::Dimension {
                op: "encode_patches",
                lhs: vec![image.height(), image.width(), image.channels()],
                rhs: vec![c.height, c.width, c.channels],
            });
        }
        let (n, pd, data) = image.patchify(c.patch)?;
        let x = g.constant(Tensor::matrix(n, pd, data)?)?;
        let t = affine(g, x, self.var("enc.w"), self.var("enc.b"))?;
        g.add(t, self.var("enc.pos"))
    }

    /// `(γ, β)` rows for action vector `a`, with `γ = 1 + output`.
    pub fn film_params(&self, g: &mut Graph, a: Vec2) -> Result<(Var, Var)> {
        if ((a.norm()) - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "FiLM conditioning vector ({}, {}) is not unit length",
                a.x, a.y
            )));
        }
        let d = self.cfg().d;
        let av = g.constant(Tensor::row(vec![a.x, a.y])?)?;
        let h = affine(g, av, self.var("film.w1"), self.var("film.b1"))?;
        let h = g.gelu(h)?;
        let o = affine(g, h, self.var("film.w2"), self.var("film.b2"))?;
        let gamma = g.slice_cols(o, 0, d)?;
        let gamma = g.add_const(gamma, 1.0)?;
        let beta = g.slice_cols(o, d, d)?;
        Ok((gamma, beta))
    }

    pub fn film_modulate(&self, g: &mut Graph, tokens: Var, a: Vec2) -> Result<Var> {
        let (gamma, beta) = self.film_params(g, a)?;
        modulate(g, tokens, gamma, beta)
    }

    /// Adds the slot-`k` embedding (1-based) to every token.
    pub fn add_ref_id(&self, g: &mut Graph, tokens: Var, k: usize) -> Result<Var> {
        let k_max = self.cfg().k_max;
        if k == 0 || k > k_max {
            return Err(Error::contract(format!("reference slot {k} outside 1..={k_max}")));
        }
        let e = g.slice_rows(self.var("ref_id"), k - 1, 1)?;
        let n = g.shape(tokens).0;
        let e = g.repeat_rows(e, n)?;
        g.add(tokens, e)
    }

    /// `σ(MLP([z_q; z_r]))` as a 1×1 node.
    pub fn gate(&self, g: &mut Graph, zq: Var, zr: Var) -> Result<Var> {
        let x = g.concat_cols(&[zq, zr])?;
        let h = affine(g, x, self.var("gate.w1"), self.var("gate.b1"))?;
        let h = g.gelu(h)?;
        let o = affine(g, h, self.var("gate.w2"), self.var("gate.b2"))?;
        g.sigmoid(o)
    }

    /// Final weights `[1×K]` on the graph under `rule`.
    pub fn dual_weights(&self, g: &mut Graph, s: &[f64], gates: &[Var], rule: WeightingRule) -> Result<Var> {
        let k = s.len();
        if gates.len() != k || k == 0 {
            return Err(Error::Dimension {
                op: "dual_weights",
                lhs: vec![k],
                rhs: vec![gates.len()],
            });
        }
        let eps = self.cfg().eps;
        let sm = match rule {
            WeightingRule::Full | WeightingRule::NoGating => softmax_checked(s)?,
            WeightingRule::NoSimilarity => {
                softmax_checked(s)?;
                vec![1.0 / k as f64; k]
            }
            WeightingRule::Uniform => {
                softmax_checked(s)?;
                return g.constant(Tensor::row(vec![1.0 / k as f64; k])?);
            }
        };
        let sm = g.constant(Tensor::row(sm)?)?;
        let w = match rule {
            WeightingRule::NoGating => g.constant(Tensor::row(vec![1.0; k])?)?,
            _ => g.concat_cols(gates)?,
        };
        let num = g.mul(sm, w)?;
        let den = g.sum(num)?;
        let den = g.add_const(den, eps)?;
        let inv = g.recip(den)?;
        g.mul(num, inv)
    }

    fn attention_heads(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let c = self.cfg();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let logits = g.matmul_nt(qh, kh)?;
            let mut logits = g.scale(logits, scale)?;
            if let Some(b) = bias {
                logits = g.add(logits, b)?;
            }
            let attn = g.softmax_rows(logits)?;
            heads.push(g.matmul(attn, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat_cols(&heads)
        }
    }

    /// Query tokens fused with the weighted reference memory:
    /// `F_q + W_o·Attn(F_q, concat(refs))`. With no references the query is
    /// returned unchanged.
    pub fn gated_cross_attention(&self, g: &mut Graph, fq: Var, refs: &[Var], w_final: Option<Var>) -> Result<Var> {
        if refs.is_empty() {
            return Ok(fq);
        }
        let w_final = w_final.ok_or_else(|| Error::contract("reference weights missing"))?;
        if g.shape(w_final) != (1, refs.len()) {
            let (r, c) = g.shape(w_final);
            return Err(Error::Dimension {
                op: "gated_cross_attention",
                lhs: vec![1, refs.len()],
                rhs: vec![r, c],
            });
        }
        let nq = g.shape(fq).0;
        let q = self.linear(g, fq, "xattn.q")?;
        let mixed = match self.cfg().attention {
            AttentionMode::LogBias => {
                let mem = g.concat_rows(refs)?;
                let k = self.linear(g, mem, "xattn.k")?;
                let v = self.linear(g, mem, "xattn.v")?;
                let lw = g.add_const(w_final, LOG_BIAS_FLOOR)?;
                let lw = g.ln(lw)?;
                let mut src = Vec::new();
                for (j, &r) in refs.iter().enumerate() {
                    src.extend(std::iter::repeat_n(j, g.shape(r).0));
                }
                let bias = g.gather_cols(lw, src)?;
                let bias = g.repeat_rows(bias, nq)?;
                self.attention_heads(g, q, k, v, Some(bias))?
            }
            AttentionMode::PerReference => {
                let mut acc: Option<Var> = None;
                for (j, &r) in refs.iter().enumerate() {
                    let k = self.linear(g, r, "xattn.k")?;
                    let v = self.linear(g, r, "xattn.v")?;
                    let out = self.attention_heads(g, q, k, v, None)?;
                    let wj = g.slice_cols(w_final, j, 1)?;
                    let term = g.mul(out, wj)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term)?,
                    });
                }
                acc.expect("at least one reference")
            }
        };
        let out = self.linear(g, mixed, "xattn.o")?;
        g.add(fq, out)
    }

    fn encoder_layer(&self, g: &mut Graph, x: Var, l: usize) -> Result<Var> {
        let p = format!("layer{l}");
        let h = g.layer_norm_rows(x, self.var(&format!("{p}.ln1.g")), self.var(&format!("{p}.ln1.b")))?;
        let q = self.linear(g, h, &format!("{p}.attn.q"))?;
        let k = self.linear(g, h, &format!("{p}.attn.k"))?;
        let v = self.linear(g, h, &format!("{p}.attn.v"))?;
        let a = self.attention_heads(g, q, k, v, None)?;
        let a = self.linear(g, a, &format!("{p}.attn.o"))?;
        let x = g.add(x, a)?;
        let h = g.layer_norm_rows(x, self.var(&format!("{p}.ln2.g")), self.var(&format!("{p}.ln2.b")))?;
        let f = affine(g, h, self.var(&format!("{p}.ff.w1")), self.var(&format!("{p}.ff.b1")))?;
        let f = g.gelu(f)?;
        let f = affine(g, f, self.var(&format!("{p}.ff.w2")), self.var(&format!("{p}.ff.b2")))?;
        g.add(x, f)
    }

    /// Raw `[1×2]` direction for `query` given `refs`.
    pub fn forward(&self, g: &mut Graph, query: &FeatureImage, refs: &[Reference<'_>], rule: WeightingRule) -> Result<Var> {
        let c = self.cfg();
        if refs.len() > c.k_max {
            return Err(Error::contract(format!(
                "{} references exceed k_max={}",
                refs.len(),
                c.k_max
            )));
        }
        let fq = self.encode_patches(g, query)?;
        let fused = if refs.is_empty() {
            fq
        } else {
            let zq = g.mean_rows(fq)?;
            let mut tokens = Vec::with_capacity(refs.len());
            let mut gates = Vec::with_capacity(refs.len());
            for r in refs {
                let f = self.encode_patches(g, r.image)?;
                let f = self.film_modulate(g, f, r.direction)?;
                let f = self.add_ref_id(g, f, r.slot)?;
                let zr = g.mean_rows(f)?;
                gates.push(self.gate(g, zq, zr)?);
                tokens.push(f);
            }
            let s: Vec<f64> = refs.iter().map(|r| r.similarity).collect();
            let w = self.dual_weights(g, &s, &gates, rule)?;
            self.gated_cross_attention(g, fq, &tokens, Some(w))?
        };
        let mut x = g.concat_rows(&[self.var("cls"), fused])?;
        for l in 0..c.n_layers {
            x = self.encoder_layer(g, x, l)?;
        }
        let cls = g.slice_rows(x, 0, 1)?;
        let cls = g.layer_norm_rows(cls, self.var("final_ln.g"), self.var("final_ln.b"))?;
        let h = affine(g, cls, self.var("head.w1"), self.var("head.b1"))?;
        let h = g.gelu(h)?;
        affine(g, h, self.var("head.w2"), self.var("head.b2"))
    }
}

/// `x·w + b` with `b` repeated over the rows of `x`.
fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let n = g.shape(y).0;
    let b = if n == 1 { b } else { g.repeat_rows(b, n)? };
    g.add(y, b)
}

/// Row-wise `γ ⊙ x + β`.
pub fn modulate(g: &mut Graph, tokens: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.shape(tokens).0;
    let gm = g.repeat_rows(gamma, n)?;
    let bt = g.repeat_rows(beta, n)?;
    let y = g.mul(tokens, gm)?;
    g.add(y, bt)
}

/// Mean over tokens.
pub fn global_pool(g: &mut Graph, tokens: Var) -> Result<Var> {
    g.mean_rows(tokens)
}
