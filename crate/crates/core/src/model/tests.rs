use super::*;
use crate::numeric::{finite_diff_check, gelu_scalar, sigmoid_scalar};
use rand::Rng;

fn tiny(attention: AttentionMode) -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        channels: 2,
        patch: 4,
        d: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        k_max: 2,
        film_hidden: 6,
        gate_hidden: 5,
        head_hidden: 7,
        eps: 1e-8,
        attention,
    }
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureImage {
    FeatureImage::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set(m: &mut AlignmentModel, name: &str, f: impl Fn(usize) -> f64) {
    for (i, v) in m.param_mut(name).unwrap().data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn values(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn token_count_matches_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, w, p) in [(12, 12, 4), (8, 16, 4), (48, 48, 8), (48, 48, 4), (6, 9, 3)] {
        let cfg = ModelConfig {
            height: h,
            width: w,
            patch: p,
            channels: 4,
            ..tiny(AttentionMode::LogBias)
        };
        let m = AlignmentModel::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let t = b.encode_patches(&mut g, &random_image(h, w, 4, &mut rng)).unwrap();
        assert_eq!(g.shape(t), ((h / p) * (w / p), cfg.d));
    }
}

#[test]
fn indivisible_patch_is_config_error() {
    let cfg = ModelConfig {
        height: 10,
        ..tiny(AttentionMode::LogBias)
    };
    assert!(matches!(AlignmentModel::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn zero_image_encodes_to_bias_rows() {
    let mut m = AlignmentModel::new(tiny(AttentionMode::LogBias), 2).unwrap();
    set(&mut m, "enc.pos", |_| 0.0);
    set(&mut m, "enc.b", |i| i as f64 * 0.5);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let t = b.encode_patches(&mut g, &FeatureImage::zeros(8, 8, 2)).unwrap();
    for row in values(&g, t).chunks(8) {
        for (i, v) in row.iter().enumerate() {
            assert_eq!(*v, i as f64 * 0.5);
        }
    }
}

#[test]
fn film_examples() {
    let mut m = AlignmentModel::new(tiny(AttentionMode::LogBias), 3).unwrap();
    set(&mut m, "film.w2", |_| 0.0);
    set(&mut m, "film.b2", |_| 0.0);
    let tokens: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = Vec2::new(0.6, 0.8);

    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::matrix(4, 8, tokens.clone()).unwrap()).unwrap();
    let y = b.film_modulate(&mut g, x, a).unwrap();
    assert_eq!(values(&g, y), tokens);

    // γ = 0: every token equals β
    set(&mut m, "film.b2", |i| if i < 8 { -1.0 } else { i as f64 });
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::matrix(4, 8, tokens.clone()).unwrap()).unwrap();
    let y = b.film_modulate(&mut g, x, a).unwrap();
    for row in values(&g, y).chunks(8) {
        for (i, v) in row.iter().enumerate() {
            assert_eq!(*v, (i + 8) as f64);
        }
    }

    // γ = 2, β = 1 on (1, -1, ...) gives (3, -1, ...)
    set(&mut m, "film.b2", |_| 1.0);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let alt: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let x = g.constant(Tensor::matrix(4, 8, alt).unwrap()).unwrap();
    let y = b.film_modulate(&mut g, x, a).unwrap();
    for (i, v) in values(&g, y).iter().enumerate() {
        assert_eq!(*v, if i % 2 == 0 { 3.0 } else { -1.0 });
    }

    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::matrix(4, 8, tokens).unwrap()).unwrap();
    assert!(matches!(
        b.film_modulate(&mut g, x, Vec2::new(1.0, 1.0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn ref_id_examples() {
    let mut m = AlignmentModel::new(tiny(AttentionMode::LogBias), 4).unwrap();
    let tokens: Vec<f64> = (0..32).map(|i| i as f64).collect();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::matrix(4, 8, tokens.clone()).unwrap()).unwrap();
    let y1 = b.add_ref_id(&mut g, x, 1).unwrap();
    let y2 = b.add_ref_id(&mut g, x, 2).unwrap();
    assert_ne!(values(&g, y1), values(&g, y2));
    let e = m.param("ref_id").unwrap().data().to_vec();
    for (k, y) in [(1usize, y1), (2, y2)] {
        let got = values(&g, y);
        for t in 0..4 {
            for c in 0..8 {
                assert_eq!(got[t * 8 + c], tokens[t * 8 + c] + e[(k - 1) * 8 + c]);
            }
        }
    }
    assert!(matches!(b.add_ref_id(&mut g, x, 0), Err(Error::Contract(_))));
    assert!(matches!(b.add_ref_id(&mut g, x, 3), Err(Error::Contract(_))));

    set(&mut m, "ref_id", |_| 0.0);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::matrix(4, 8, tokens.clone()).unwrap()).unwrap();
    let y = b.add_ref_id(&mut g, x, 2).unwrap();
    assert_eq!(values(&g, y), tokens);
}

#[test]
fn pooling_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::row(vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
    let p = global_pool(&mut g, one).unwrap();
    assert_eq!(values(&g, p), vec![1.0, -2.0, 3.0]);
    let pm = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, -1.0, 2.0, -3.0]).unwrap()).unwrap();
    let p = global_pool(&mut g, pm).unwrap();
    assert_eq!(values(&g, p), vec![0.0; 3]);
    let data: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
    let x = g.constant(Tensor::matrix(3, 4, data.clone()).unwrap()).unwrap();
    let p = global_pool(&mut g, x).unwrap();
    let got = values(&g, p);
    for c in 0..4 {
        let want = (data[c] + data[4 + c] + data[8 + c]) / 3.0;
        assert!((got[c] - want).abs() < 1e-15);
    }
}

#[test]
fn gate_examples() {
    let cfg = ModelConfig {
        d: 2,
        n_heads: 1,
        gate_hidden: 2,
        ..tiny(AttentionMode::LogBias)
    };
    let mut m = AlignmentModel::new(cfg, 5).unwrap();
    for n in ["gate.w1", "gate.b1", "gate.w2", "gate.b2"] {
        set(&mut m, n, |_| 0.0);
    }
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let zq = g.constant(Tensor::row(vec![3.0, -1.0]).unwrap()).unwrap();
    let zr = g.constant(Tensor::row(vec![0.5, 2.0]).unwrap()).unwrap();
    let w = b.gate(&mut g, zq, zr).unwrap();
    assert_eq!(values(&g, w), vec![0.5]);

    // two hidden neurons by hand
    let w1 = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]; // [4x2] row-major
    set(&mut m, "gate.w1", |i| w1[i]);
    set(&mut m, "gate.b1", |i| [0.05, -0.05][i]);
    set(&mut m, "gate.w2", |i| [1.5, -0.7][i]);
    set(&mut m, "gate.b2", |_| 0.2);
    let x = [3.0, -1.0, 0.5, 2.0];
    let mut h = [0.05, -0.05];
    for (j, hj) in h.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *hj += xi * w1[i * 2 + j];
        }
    }
    let want = sigmoid_scalar(gelu_scalar(h[0]) * 1.5 - gelu_scalar(h[1]) * 0.7 + 0.2);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let zq = g.constant(Tensor::row(vec![3.0, -1.0]).unwrap()).unwrap();
    let zr = g.constant(Tensor::row(vec![0.5, 2.0]).unwrap()).unwrap();
    let w = b.gate(&mut g, zq, zr).unwrap();
    assert!((values(&g, w)[0] - want).abs() < 1e-14);
    assert!(want > 0.0 && want < 1.0);
}

#[test]
fn dual_weight_examples() {
    let w = dual_weights(&[1.0, 1.0], &[0.8, 0.4], 1e-8).unwrap();
    assert!((w[0] - 2.0 / 3.0).abs() < 1e-4 && (w[1] - 1.0 / 3.0).abs() < 1e-4);
    let one = dual_weights(&[3.7], &[0.3], 1e-8).unwrap();
    assert!((one[0] - 1.0).abs() < 1e-6);
    let s = [0.3, -0.2, 0.9];
    let gates = [0.2, 0.9, 0.5];
    let base = dual_weights(&s, &gates, 1e-8).unwrap();
    let shifted = dual_weights(&s.map(|v| v + 100.0), &gates, 1e-8).unwrap();
    for (a, b) in base.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(matches!(dual_weights(&[f64::NAN], &[0.5], 1e-8), Err(Error::Numeric(_))));
}

#[test]
fn graph_dual_weights_match_plain_rules() {
    let m = AlignmentModel::new(tiny(AttentionMode::LogBias), 6).unwrap();
    let s = [0.2, 0.7];
    let gates = [0.3, 0.6];
    for rule in WeightingRule::ALL {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let gv: Vec<Var> = gates.iter().map(|&v| g.constant(Tensor::scalar(v)).unwrap()).collect();
        let w = b.dual_weights(&mut g, &s, &gv, rule).unwrap();
        let want = rule_weights(rule, &s, &gates, 1e-8).unwrap();
        for (a, b) in values(&g, w).iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{rule}");
        }
    }
    assert_eq!(rule_weights(WeightingRule::Uniform, &[0.0; 4], &[0.1; 4], 1e-8).unwrap(), vec![0.25; 4]);
    let ng = rule_weights(WeightingRule::NoGating, &[0.0, 0.0], &[0.9, 0.1], 1e-8).unwrap();
    assert!((ng[0] - 0.5).abs() < 1e-7 && (ng[1] - 0.5).abs() < 1e-7);
}

fn cross_attention_output(m: &AlignmentModel, fq: &[f64], refs: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let q = g.constant(Tensor::matrix(4, 8, fq.to_vec()).unwrap()).unwrap();
    let rv: Vec<Var> = refs
        .iter()
        .map(|r| g.constant(Tensor::matrix(4, 8, r.clone()).unwrap()).unwrap())
        .collect();
    let wv = g.constant(Tensor::row(w.to_vec()).unwrap()).unwrap();
    let out = b.gated_cross_attention(&mut g, q, &rv, Some(wv)).unwrap();
    values(&g, out)
}

#[test]
fn one_hot_weights_confine_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fq: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r1: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r2: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    for mode in [AttentionMode::LogBias, AttentionMode::PerReference] {
        let m = AlignmentModel::new(tiny(mode), 8).unwrap();
        let both = cross_attention_output(&m, &fq, &[r1.clone(), r2.clone()], &[0.0, 1.0]);
        let only = cross_attention_output(&m, &fq, std::slice::from_ref(&r2), &[1.0]);
        for (a, b) in both.iter().zip(&only) {
            assert!((a - b).abs() < 1e-9, "{mode:?}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_values_leave_query_unchanged() {
    let mut m = AlignmentModel::new(tiny(AttentionMode::LogBias), 9).unwrap();
    for n in ["xattn.v.w", "xattn.v.b", "xattn.o.b"] {
        set(&mut m, n, |_| 0.0);
    }
    let fq: Vec<f64> = (0..32).map(|i| (i as f64 * 0.1).sin()).collect();
    let r: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).cos()).collect();
    assert_eq!(cross_attention_output(&m, &fq, &[r.clone(), r], &[0.5, 0.5]), fq);

    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let q = g.constant(Tensor::matrix(4, 8, fq.clone()).unwrap()).unwrap();
    let out = b.gated_cross_attention(&mut g, q, &[], None).unwrap();
    assert_eq!(values(&g, out), fq);
}

struct Fixture {
    query: FeatureImage,
    images: Vec<FeatureImage>,
    dirs: Vec<Vec2>,
    sims: Vec<f64>,
}

fn fixture(seed: u64, k: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Fixture {
        query: random_image(8, 8, 2, &mut rng),
        images: (0..k).map(|_| random_image(8, 8, 2, &mut rng)).collect(),
        dirs: (0..k)
            .map(|_| Vec2::from_angle(rng.random_range(0.0..std::f64::consts::TAU)))
            .collect(),
        sims: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

impl Fixture {
    fn refs(&self) -> Vec<Reference<'_>> {
        (0..self.images.len())
            .map(|i| Reference {
                image: &self.images[i],
                direction: self.dirs[i],
                similarity: self.sims[i],
                slot: i + 1,
            })
            .collect()
    }
}

#[test]
fn prediction_is_deterministic_and_two_dimensional() {
    let m = AlignmentModel::new(tiny(AttentionMode::LogBias), 10).unwrap();
    let f = fixture(11, 2);
    let a = m.predict(&f.query, &f.refs(), WeightingRule::Full).unwrap();
    let b = m.predict(&f.query, &f.refs(), WeightingRule::Full).unwrap();
    assert_eq!(a, b);
    let d = a.direction.unwrap();
    assert!((d.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn permuting_references_with_their_slots_is_invariant() {
    for mode in [AttentionMode::LogBias, AttentionMode::PerReference] {
        let m = AlignmentModel::new(tiny(mode), 12).unwrap();
        let f = fixture(13, 2);
        let refs = f.refs();
        let swapped = vec![refs[1], refs[0]];
        let a = m.predict(&f.query, &refs, WeightingRule::Full).unwrap().raw;
        let b = m.predict(&f.query, &swapped, WeightingRule::Full).unwrap().raw;
        assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    }
}

#[test]
fn uniform_similarity_shift_is_invariant() {
    let m = AlignmentModel::new(tiny(AttentionMode::LogBias), 14).unwrap();
    let f = fixture(15, 2);
    let a = m.predict(&f.query, &f.refs(), WeightingRule::Full).unwrap().raw;
    let shifted: Vec<Reference> = f
        .refs()
        .into_iter()
        .map(|r| Reference {
            similarity: r.similarity + 5.0,
            ..r
        })
        .collect();
    let b = m.predict(&f.query, &shifted, WeightingRule::Full).unwrap().raw;
    assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
}

#[test]
fn no_reference_path_ignores_reference_parameters() {
    let mut m = AlignmentModel::new(tiny(AttentionMode::LogBias), 16).unwrap();
    let f = fixture(17, 0);
    let before = m.predict(&f.query, &[], WeightingRule::Full).unwrap();
    for name in m.names().to_vec() {
        if ["film.", "ref_id", "gate.", "xattn."].iter().any(|p| name.starts_with(p)) {
            set(&mut m, &name, |i| i as f64 * 0.3 - 1.0);
        }
    }
    assert_eq!(m.predict(&f.query, &[], WeightingRule::Full).unwrap(), before);
}

#[test]
fn too_many_references_is_contract_error() {
    let m = AlignmentModel::new(tiny(AttentionMode::LogBias), 18).unwrap();
    let f = fixture(19, 3);
    assert!(matches!(
        m.predict(&f.query, &f.refs(), WeightingRule::Full),
        Err(Error::Contract(_))
    ));
}

#[test]
fn loss_examples() {
    assert_eq!(loss_value(Vec2::new(0.6, 0.8), Vec2::new(0.6, 0.8)), 0.0);
    assert!((loss_value(Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)) - 1.0).abs() < 1e-15);
    assert!((loss_value(Vec2::new(0.6, 0.8), Vec2::new(1.0, 0.0)) - 0.4).abs() < 1e-15);
    let mut g = Graph::new();
    let raw = g.leaf(Tensor::row(vec![0.6, 0.8]).unwrap(), true).unwrap();
    let l = direction_loss(&mut g, raw, Vec2::new(1.0, 0.0)).unwrap();
    assert!((g.value(l).data()[0] - 0.4).abs() < 1e-15);
    g.backward(l).unwrap();
    let gr = g.grad(raw).unwrap();
    assert!((gr[0] + 0.4).abs() < 1e-15 && (gr[1] - 0.8).abs() < 1e-15);
}

#[test]
fn degenerate_prediction_is_flagged() {
    let mut m = AlignmentModel::new(tiny(AttentionMode::LogBias), 20).unwrap();
    set(&mut m, "head.w2", |_| 0.0);
    set(&mut m, "head.b2", |_| 0.0);
    let f = fixture(21, 1);
    let p = m.predict(&f.query, &f.refs(), WeightingRule::Full).unwrap();
    assert_eq!(p.direction, None);
}

#[test]
fn full_model_gradient_matches_central_differences() {
    for mode in [AttentionMode::LogBias, AttentionMode::PerReference] {
        let m = AlignmentModel::new(tiny(mode), 22).unwrap();
        let f = fixture(23, 2);
        let target = Vec2::new(0.0, 1.0);
        let (_, grad) = m.loss_and_grad(&f.query, &f.refs(), target, WeightingRule::Full).unwrap();
        let flat = m.flat_params();
        let mut work = m.clone();
        let coords: Vec<usize> = (0..flat.len()).step_by(7).collect();
        let err = finite_diff_check(
            |p| {
                work.set_flat_params(p)?;
                let pred = work.predict(&f.query, &f.refs(), WeightingRule::Full)?;
                Ok(loss_value(pred.raw, target))
            },
            &flat,
            &grad,
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?}: {err}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = AlignmentModel::new(tiny(AttentionMode::PerReference), 24).unwrap();
    let text = checkpoint_to_string(&m);
    let back = checkpoint_from_str(&text).unwrap();
    assert_eq!(back, m);
    let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    assert!(matches!(checkpoint_from_str(&truncated), Err(Error::Parse { .. })));
    assert_eq!(m.param_count(), m.config().param_count());
}

