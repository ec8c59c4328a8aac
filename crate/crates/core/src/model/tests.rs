use super::*;
use crate::corpus::Keypoint;
use crate::tensor::gradcheck;
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        input: FrameShape::new(8, 8, 1),
        stages: vec![
            StageConfig {
                channels: 2,
                kernel: 3,
                stride: 1,
                pool: 2,
            },
            StageConfig {
                channels: 3,
                kernel: 3,
                stride: 1,
                pool: 2,
            },
        ],
        embed_dim: 8,
        use_batchnorm: true,
        dropout_p: 0.0,
        mean_subtract: true,
        input_mean: vec![0.5],
    }
}

fn random_frame(shape: FrameShape, seed: u64) -> Frame {
    let mut r = rng(seed);
    let px = (0..shape.len()).map(|_| r.random::<f32>()).collect();
    Frame::new(shape, px, 0).unwrap()
}

fn model_with_heads(seed: u64) -> Model {
    let mut m = Model::new(tiny_config(), seed).unwrap();
    let mut r = rng(seed + 1);
    m.add_head(Head::Triplet, &mut r);
    m.add_head(Head::Pair, &mut r);
    m.add_head(Head::Classify { classes: 4 }, &mut r);
    m
}

fn input_of(m: &Model, g: &mut Graph, frames: &[&Frame]) -> NodeId {
    let bufs: Vec<&[f32]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
    let t = m.frames_to_tensor(&bufs).unwrap();
    g.input(t)
}

#[test]
fn default_config_is_valid_and_geometry_is_consistent() {
    let c = BackboneConfig::default();
    c.validate().unwrap();
    let names: Vec<String> = c.layers().into_iter().map(|l| l.name).collect();
    assert_eq!(names, ["conv1", "pool1", "conv2", "pool2", "conv3", "pool3"]);
    assert_eq!(c.flat_dim(), 64 * 4 * 4);
    let mut bad = c.clone();
    bad.embed_dim = 4;
    assert!(bad.validate().is_err());
    let mut shrink = c;
    shrink.stages = vec![shrink.stages[0].clone(); 6];
    assert!(shrink.validate().unwrap_err().to_string().contains("empty map"));
}

#[test]
fn embed_is_deterministic_and_checks_shape() {
    let mut m = model_with_heads(1);
    let f = random_frame(m.config.input, 2);
    assert_eq!(m.embed(&f).unwrap(), m.embed(&f).unwrap());
    let wrong = random_frame(FrameShape::new(9, 8, 1), 3);
    assert!(matches!(m.embed(&wrong), Err(ModelError::Input { .. })));
}

#[test]
fn zero_frame_through_zero_affine_layers_embeds_to_zero() {
    let mut cfg = tiny_config();
    cfg.mean_subtract = false;
    let mut m = Model::new(cfg, 4).unwrap();
    for p in m.store.iter_mut() {
        if p.trainable {
            p.value.data.fill(0.0);
        }
    }
    let e = m.embed(&Frame::zeros(m.config.input, 0)).unwrap();
    assert!(e.iter().all(|&v| v == 0.0));
}

#[test]
fn triplet_stack_matches_standalone_embedding_and_shares_leaves() {
    let mut m = model_with_heads(5);
    let fs: Vec<Frame> = (0..3).map(|k| random_frame(m.config.input, 10 + k)).collect();
    let mut g = Graph::new();
    let xs: Vec<NodeId> = fs.iter().map(|f| input_of(&m, &mut g, &[f])).collect();
    let mut embeds = Vec::new();
    for &x in &xs {
        embeds.push(m.embed_batch(&mut g, x, Mode::Infer, &mut rng(0)).unwrap());
    }
    for (k, f) in fs.iter().enumerate() {
        assert_eq!(g.value(embeds[k]).data, m.embed(f).unwrap());
    }
    // Every backbone parameter is bound to one leaf, requested once per stack.
    let id = m.store.id("conv1.w").unwrap();
    assert_eq!(g.param_uses(id), 3);
    let leaf = g.param_leaf(id).unwrap();
    assert_eq!(g.param(&m.store, id), leaf);
}

#[test]
fn permuting_stacks_with_fixed_concat_order_gives_identical_logits() {
    let mut m = model_with_heads(6);
    let fs: Vec<Frame> = (0..3).map(|k| random_frame(m.config.input, 20 + k)).collect();
    let direct = m
        .infer_head("triplet", &[fs.iter().map(|f| f.pixels.as_slice()).collect()])
        .unwrap();
    // Evaluate the stacks in reverse order, then concatenate in the original order.
    let mut g = Graph::new();
    let mut e = [NodeId(0); 3];
    for k in (0..3).rev() {
        let x = input_of(&m, &mut g, &[&fs[k]]);
        e[k] = m.embed_batch(&mut g, x, Mode::Infer, &mut rng(0)).unwrap();
    }
    let cat = g.concat(&e).unwrap();
    let w = g.param_by_name(&m.store, "head.triplet.w").unwrap();
    let b = g.param_by_name(&m.store, "head.triplet.b").unwrap();
    let y = g.dense(cat, w, b).unwrap();
    assert_eq!(g.value(y).data, direct[0]);
}

#[test]
fn shared_gradient_is_sum_of_per_stack_gradients() {
    let mut m = model_with_heads(7);
    let fs: Vec<Frame> = (0..6).map(|k| random_frame(m.config.input, 30 + k)).collect();
    let groups: Vec<[&Frame; 2]> = (0..3).map(|k| [&fs[2 * k], &fs[2 * k + 1]]).collect();
    let mut g = Graph::new();
    let xs: Vec<NodeId> = groups.iter().map(|p| input_of(&m, &mut g, p)).collect();
    let logits = m
        .triplet_logits(&mut g, [xs[0], xs[1], xs[2]], Mode::Train, &mut rng(0))
        .unwrap();
    let loss = g.softmax_xent(logits, &[1, 0]).unwrap();
    g.backward(loss).unwrap();
    let leaf = g.param_leaf(m.store.id("conv1.w").unwrap()).unwrap();
    let shared = g.grad(leaf).unwrap().to_vec();

    // d loss / d e_k from the joint graph, then each stack alone against that upstream.
    let cat_grad = {
        let w = &m.store.by_name("head.triplet.w").unwrap().value;
        let y_grad = g.grad(logits).unwrap().to_vec();
        // d loss / d cat = y_grad (N x 2) * W (2 x 3E)
        let (n, o, i) = (2, 2, w.shape[1]);
        let mut out = vec![0.0; n * i];
        for r in 0..n {
            for c in 0..i {
                out[r * i + c] = (0..o).map(|k| y_grad[r * o + k] * w.data[k * i + c]).sum();
            }
        }
        out
    };
    let e = m.config.embed_dim;
    let mut total = vec![0.0; shared.len()];
    let mut any_single_nonzero = false;
    for (k, p) in groups.iter().enumerate() {
        let mut g1 = Graph::new();
        let x = input_of(&m, &mut g1, p);
        let emb = m.embed_batch(&mut g1, x, Mode::Train, &mut rng(0)).unwrap();
        let upstream: Vec<f64> = (0..2)
            .flat_map(|r| cat_grad[r * 3 * e + k * e..r * 3 * e + (k + 1) * e].to_vec())
            .collect();
        let u = g1.input(Tensor::new(vec![2 * e, 1], upstream).unwrap());
        let flat = g1.reshape(emb, &[1, 2 * e]).unwrap();
        let ut = g1.reshape(u, &[1, 2 * e]).unwrap();
        let zero = g1.input(Tensor::zeros(&[1]));
        let dot = g1.dense(flat, ut, zero).unwrap();
        let s = g1.sum(dot);
        g1.backward(s).unwrap();
        let gl = g1.grad(g1.param_leaf(m.store.id("conv1.w").unwrap()).unwrap()).unwrap();
        any_single_nonzero |= gl.iter().any(|&v| v != 0.0);
        total.iter_mut().zip(gl).for_each(|(t, v)| *t += v);
    }
    assert!(any_single_nonzero);
    for (a, b) in shared.iter().zip(&total) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn zeroed_heads_give_zero_logits_and_ln2_loss() {
    let mut m = model_with_heads(8);
    m.zero_head("triplet").unwrap();
    m.zero_head("pair").unwrap();
    let fs: Vec<Frame> = (0..3).map(|k| random_frame(m.config.input, 40 + k)).collect();
    let px: Vec<&[f32]> = fs.iter().map(|f| f.pixels.as_slice()).collect();
    assert_eq!(m.infer_head("triplet", &[px.clone()]).unwrap(), vec![vec![0.0, 0.0]]);
    assert_eq!(m.infer_head("pair", &[px[..2].to_vec()]).unwrap(), vec![vec![0.0, 0.0]]);
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[1, 2]));
    let l = g.softmax_xent(z, &[1]).unwrap();
    assert!((g.value(l).data[0] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn triplet_param_count_is_backbone_plus_head() {
    let m = model_with_heads(9);
    let head = m.param_count("head.triplet.");
    assert_eq!(head, 2 * 3 * m.config.embed_dim + 2);
    let mut only = Model::new(tiny_config(), 9).unwrap();
    only.add_head(Head::Triplet, &mut rng(0));
    assert_eq!(only.param_count(""), only.backbone_param_count() + head);
    assert_eq!(only.backbone_param_count(), m.backbone_param_count());
}

#[test]
fn heads_share_the_embedding_and_never_perturb_it() {
    let mut m = model_with_heads(10);
    let f = random_frame(m.config.input, 50);
    let before = m.embed(&f).unwrap();
    m.add_head(Head::Pose { keypoints: vec!["a".into()] }, &mut rng(3));
    m.strip_heads();
    m.add_head(Head::Classify { classes: 2 }, &mut rng(4));
    assert_eq!(m.embed(&f).unwrap(), before);
}

#[test]
fn contrastive_loss_examples() {
    let mut g = Graph::new();
    let e1 = g.input(Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.0, 0.0, 0.3, 0.0]).unwrap());
    let e2 = g.input(Tensor::new(vec![3, 2], vec![0.5, 0.5, 2.0, 0.0, 0.0, 0.0]).unwrap());
    for (loss_fn, name) in [
        (drlim_loss as fn(&mut Graph, NodeId, NodeId, &[bool], f64) -> Result<NodeId>, "drlim"),
        (tempcoh_loss, "tempcoh"),
    ] {
        let l = loss_fn(&mut g, e1, e2, &[true, false, false], 1.0).unwrap();
        // per pair: 0 (same, d = 0), 0 (hinge inactive, d = 2), 0.7 (d = 0.3)
        assert!((g.value(l).data[0] - 0.7 / 3.0).abs() < 1e-12, "{name}");
        for (same, want) in [(true, 0.0), (false, 0.0)] {
            let a = g.input(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
            let b = g.input(Tensor::new(vec![1, 2], if same { vec![0.0, 2.0] } else { vec![0.0, 0.0] }).unwrap());
            let l = loss_fn(&mut g, a, b, &[same], 1.0).unwrap();
            assert!((g.value(l).data[0] - want).abs() < 1e-12);
        }
        let a = g.input(Tensor::new(vec![1, 2], vec![0.3, 0.0]).unwrap());
        let b = g.input(Tensor::zeros(&[1, 2]));
        let l = loss_fn(&mut g, a, b, &[false], 1.0).unwrap();
        assert!((g.value(l).data[0] - 0.7).abs() < 1e-12);
        let short = g.input(Tensor::zeros(&[1, 3]));
        assert!(loss_fn(&mut g, a, short, &[false], 1.0).is_err());
    }
}

#[test]
fn euclidean_loss_examples_and_gradient() {
    let mut g = Graph::new();
    let gt = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.5, 0.5]).unwrap();
    let same = g.input(gt.clone());
    let l = euclidean_loss(&mut g, same, &gt).unwrap();
    assert_eq!(g.value(l).data[0], 0.0);
    let off = g.input(Tensor::new(vec![1, 4], vec![0.4, 0.6, 0.5, 0.5]).unwrap());
    let l = euclidean_loss(&mut g, off, &gt).unwrap();
    assert!((g.value(l).data[0] - 0.25).abs() < 1e-12);
    let wrong = Tensor::zeros(&[1, 6]);
    assert!(matches!(
        euclidean_loss(&mut g, off, &wrong),
        Err(ModelError::Keypoints { head: 2, gt: 3 })
    ));
    let pred = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng(60));
    let target = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng(61));
    let r = gradcheck::check(&[pred], 1e-3, 1e-6, |g, ids| Ok(euclidean_loss(g, ids[0], &target).map_err(|e| match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    })?))
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn keypoint_target_normalises_by_frame_size() {
    let set = KeypointSet {
        points: vec![Keypoint {
            name: "center".into(),
            x: 8.0,
            y: 4.0,
            in_frame: true,
        }],
        ref_length: 3.0,
    };
    let t = keypoint_target(&[&set], &["center".into()], FrameShape::new(16, 8, 1)).unwrap();
    assert_eq!(t.data, vec![0.5, 0.5]);
    assert!(keypoint_target(&[&set], &["center".into(), "limb".into()], FrameShape::new(16, 8, 1)).is_err());
}

/// Finite differences over every trainable parameter of the full triplet network.
#[test]
fn triplet_network_gradient_matches_finite_differences() {
    let mut cfg = tiny_config();
    cfg.dropout_p = 0.5;
    let mut m = Model::new(cfg, 11).unwrap();
    m.add_head(Head::Triplet, &mut rng(12));
    let fs: Vec<Frame> = (0..6).map(|k| random_frame(m.config.input, 70 + k)).collect();
    let labels = [1usize, 0];
    let loss_of = |m: &mut Model, backward: bool| -> (f64, Option<Graph>) {
        let mut g = Graph::new();
        let xs: Vec<NodeId> = (0..3).map(|k| input_of(m, &mut g, &[&fs[2 * k], &fs[2 * k + 1]])).collect();
        // Same dropout masks on every evaluation.
        let y = m
            .triplet_logits(&mut g, [xs[0], xs[1], xs[2]], Mode::Train, &mut rng(99))
            .unwrap();
        let l = g.softmax_xent(y, &labels).unwrap();
        let v = g.value(l).data[0];
        if backward {
            g.backward(l).unwrap();
            (v, Some(g))
        } else {
            (v, None)
        }
    };
    let (_, g) = loss_of(&mut m, true);
    let g = g.unwrap();
    g.write_param_grads(&mut m.store);
    let names: Vec<String> = m.store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let eps = 1e-3;
    let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for name in &names {
        let analytic = m.store.by_name(name).unwrap().grad.clone().unwrap();
        for i in 0..analytic.len() {
            let orig = m.store.by_name(name).unwrap().value.data[i];
            m.store.by_name_mut(name).unwrap().value.data[i] = orig + eps;
            let up = loss_of(&mut m, false).0;
            m.store.by_name_mut(name).unwrap().value.data[i] = orig - eps;
            let down = loss_of(&mut m, false).0;
            m.store.by_name_mut(name).unwrap().value.data[i] = orig;
            let num = (up - down) / (2.0 * eps);
            d2 += (analytic[i] - num).powi(2);
            a2 += analytic[i].powi(2);
            n2 += num * num;
        }
    }
    let rel = d2.sqrt() / a2.sqrt().max(n2.sqrt());
    assert!(rel < 1e-3, "relative error {rel}");
}

#[test]
fn checkpoint_round_trip_and_incompatible_load() {
    let m = model_with_heads(13);
    let opt = default_optimizer(OptimKind::Sgd, 5e-4);
    let ckpt = m.to_checkpoint(Some(&opt), serde_json::json!({"note": 1}));
    let (back, o) = Model::from_checkpoint(&ckpt).unwrap();
    assert_eq!(back, m);
    assert_eq!(o.unwrap().kind, OptimKind::Sgd);

    let mut other_cfg = tiny_config();
    other_cfg.embed_dim = 16;
    let mut other = Model::new(other_cfg, 0).unwrap();
    let err = other.load_params(&ckpt, "").unwrap_err().to_string();
    assert!(err.contains("fc.w") && err.contains("[8, 12]") && err.contains("[16, 12]"), "{err}");

    let mut tampered = ckpt.clone();
    tampered.config_hash ^= 1;
    assert!(Model::from_checkpoint(&tampered).is_err());
}
