use super::gradcheck::check;
use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut t = Tensor::uniform(shape, -1.0, 1.0, &mut r);
    for v in &mut t.data {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - v.abs() } else { gap + *v };
        }
    }
    t
}

/// Distinct values spaced by 0.05 in shuffled order, so pooling has no near ties.
fn spaced(shape: &[usize], seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    data.shuffle(&mut rng(seed));
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let n = w.numel();
    let wid = g.input(w);
    let a = g.reshape(y, &[1, n])?;
    let b = g.reshape(wid, &[1, n])?;
    // <a, w> via dense with a [1, n] weight and zero bias.
    let bias = g.input(Tensor::zeros(&[1]));
    let dot = g.dense(a, b, bias)?;
    Ok(g.sum(dot))
}

fn assert_grad(report: gradcheck::GradReport, what: &str) {
    assert!(
        report.max_rel_err < TOL,
        "{what}: max relative error {} over {} elements",
        report.max_rel_err,
        report.checked
    );
}

#[test]
fn conv2d_known_output() {
    // 1x1x3x3 input, 2x2 kernel of ones, stride 1, no padding: 2x2 window sums plus bias.
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let w = g.input(Tensor::filled(&[1, 1, 2, 2], 1.0));
    let b = g.input(Tensor::new(vec![1], vec![0.5]).unwrap());
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data, vec![12.5, 16.5, 24.5, 28.5]);
}

#[test]
fn conv2d_matches_direct_loop() {
    let (n, c, h, w, o, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
    let xt = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng(1));
    let wt = Tensor::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng(2));
    let bt = Tensor::uniform(&[o], -1.0, 1.0, &mut rng(3));
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
    let y = g.conv2d(xi, wi, bi, s, p).unwrap();
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    assert_eq!(g.shape(y), &[n, o, ho, wo]);
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bt.data[oc];
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += xt.data[((img * c + ch) * h + iy as usize) * w + ix as usize]
                                    * wt.data[((oc * c + ch) * k + ky) * k + kx];
                            }
                        }
                    }
                    let got = g.value(y).data[((img * o + oc) * ho + oy) * wo + ox];
                    assert!((got - acc).abs() < 1e-12, "({img},{oc},{oy},{ox}): {got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn conv2d_gradients() {
    let inputs = vec![
        Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng(4)),
        Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng(5)),
        Tensor::uniform(&[3], -1.0, 1.0, &mut rng(6)),
    ];
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let r = check(&inputs, EPS, FLOOR, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
            weighted_sum(g, y, 7)
        })
        .unwrap();
        assert_grad(r, &format!("conv2d stride {stride} pad {pad}"));
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.input(Tensor::zeros(&[2, 1, 3, 3]));
    let b = g.input(Tensor::zeros(&[2]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("3 channels") && msg.contains("expects 1"), "{msg}");
}

#[test]
fn maxpool_forward_and_gradients() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data, vec![4.0]);

    let inputs = vec![spaced(&[2, 2, 6, 5], 8)];
    let r = check(&inputs, EPS, FLOOR, |g, ids| {
        let y = g.maxpool2d(ids[0], 2, 2)?;
        weighted_sum(g, y, 9)
    })
    .unwrap();
    assert_grad(r, "maxpool");
}

#[test]
fn relu_dense_gradients() {
    let inputs = vec![
        away_from_zero(&[3, 5], 0.05, 10),
        Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(11)),
        Tensor::uniform(&[4], -1.0, 1.0, &mut rng(12)),
    ];
    let r = check(&inputs, EPS, FLOOR, |g, ids| {
        let a = g.relu(ids[0]);
        let y = g.dense(a, ids[1], ids[2])?;
        weighted_sum(g, y, 13)
    })
    .unwrap();
    assert_grad(r, "relu + dense");
}

#[test]
fn batchnorm_gradients_train_and_infer() {
    for shape in [vec![4, 3], vec![3, 2, 3, 3]] {
        let f = shape[1];
        let inputs = vec![
            Tensor::uniform(&shape, -1.0, 1.0, &mut rng(14)),
            Tensor::uniform(&[f], 0.5, 1.5, &mut rng(15)),
            Tensor::uniform(&[f], -0.5, 0.5, &mut rng(16)),
        ];
        for train in [true, false] {
            let r = check(&inputs, EPS, FLOOR, |g, ids| {
                let mut mean = vec![0.1; f];
                let mut var = vec![0.9; f];
                let stats = RunningStats {
                    mean: &mut mean,
                    var: &mut var,
                    momentum: 0.9,
                };
                let y = g.batchnorm(ids[0], ids[1], ids[2], stats, train)?;
                weighted_sum(g, y, 17)
            })
            .unwrap();
            assert_grad(r, &format!("batchnorm {shape:?} train={train}"));
        }
    }
}

#[test]
fn batchnorm_constant_batch_normalises_to_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(&[4, 3], 2.5));
    let gamma = g.input(Tensor::filled(&[3], 1.0));
    let beta = g.input(Tensor::zeros(&[3]));
    let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
    let y = g
        .batchnorm(
            x,
            gamma,
            beta,
            RunningStats {
                mean: &mut m,
                var: &mut v,
                momentum: 0.9,
            },
            true,
        )
        .unwrap();
    assert!(g.value(y).data.iter().all(|v| v.abs() < 1e-12));
    assert!(g.value(y).data.iter().all(|v| v.is_finite()));
    // running stats moved 10% toward the batch statistics
    assert!(m.iter().all(|&mm| (mm - 0.25).abs() < 1e-12));
    assert!(v.iter().all(|&vv| (vv - 0.9).abs() < 1e-12));
}

#[test]
fn batchnorm_single_sample_train_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3]));
    let gamma = g.input(Tensor::filled(&[3], 1.0));
    let beta = g.input(Tensor::zeros(&[3]));
    let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
    let stats = RunningStats {
        mean: &mut m,
        var: &mut v,
        momentum: 0.9,
    };
    assert!(matches!(
        g.batchnorm(x, gamma, beta, stats, true),
        Err(TensorError::Arg { op: "batchnorm", .. })
    ));
}

#[test]
fn concat_mask_add_sub_scale_gradients() {
    let inputs = vec![
        Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(18)),
        Tensor::uniform(&[2, 2], -1.0, 1.0, &mut rng(19)),
        Tensor::uniform(&[2, 5], -1.0, 1.0, &mut rng(20)),
    ];
    let r = check(&inputs, EPS, FLOOR, |g, ids| {
        let c = g.concat(&[ids[0], ids[1]])?;
        let m = g.mask(c, vec![2.0, 0.0, 1.0, 1.0, 0.5, 0.0, 2.0, 2.0, 1.0, 1.0])?;
        let s = g.add(m, ids[2])?;
        let sc = g.scale(s, -1.5);
        let diff = g.sub(sc, ids[2])?;
        weighted_sum(g, diff, 21)
    })
    .unwrap();
    assert_grad(r, "concat/mask/add/sub/scale");
}

#[test]
fn softmax_xent_value_and_gradients() {
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[2, 4]));
    let l = g.softmax_xent(z, &[0, 3]).unwrap();
    assert!((g.value(l).data[0] - 4f64.ln()).abs() < 1e-12);
    assert!(g.softmax_xent(z, &[0, 4]).is_err());

    let inputs = vec![Tensor::uniform(&[3, 5], -3.0, 3.0, &mut rng(22))];
    let r = check(&inputs, EPS, FLOOR, |g, ids| g.softmax_xent(ids[0], &[1, 4, 0])).unwrap();
    assert_grad(r, "softmax xent");
}

#[test]
fn norms_contrastive_sqerr_gradients() {
    let inputs = vec![
        away_from_zero(&[4, 3], 0.05, 23),
        Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng(24)),
    ];
    // margin chosen away from the distances so the hinge has no kink nearby
    let r = check(&inputs, EPS, FLOOR, |g, ids| {
        let d = g.row_l2(ids[0])?;
        g.contrastive(d, &[true, false, false, true], 10.0)
    })
    .unwrap();
    assert_grad(r, "row_l2 + contrastive");
    let r = check(&inputs, EPS, FLOOR, |g, ids| {
        let d = g.row_l1(ids[0])?;
        weighted_sum(g, d, 25)
    })
    .unwrap();
    assert_grad(r, "row_l1");
    let target = inputs[1].clone();
    let r = check(&inputs[..1], EPS, FLOOR, |g, ids| g.sq_err(ids[0], &target)).unwrap();
    assert_grad(r, "sq_err");
}

#[test]
fn contrastive_examples() {
    let mut g = Graph::new();
    let d = g.input(Tensor::new(vec![3], vec![0.5, 0.5, 2.0]).unwrap());
    let l = g.contrastive(d, &[true, false, false], 1.0).unwrap();
    // (0.5 + 0.5 + 0) / 3
    assert!((g.value(l).data[0] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn shared_parameter_accumulates_over_uses() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap(), true);
    store.insert("b", Tensor::zeros(&[1]), true);
    let mut g = Graph::new();
    let mut outs = Vec::new();
    for k in 0..3 {
        let w = g.param(&store, id);
        let b = g.param_by_name(&store, "b").unwrap();
        let x = g.input(Tensor::new(vec![1, 2], vec![k as f64, 1.0]).unwrap());
        outs.push(g.dense(x, w, b).unwrap());
    }
    assert_eq!(g.param_uses(id), 3);
    let first = g.param(&store, id);
    assert_eq!(Some(first), g.param_leaf(id));
    let c = g.concat(&outs).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    g.write_param_grads(&mut store);
    // d/dw sum_k (w . x_k) = sum_k x_k = (0+1+2, 3)
    assert_eq!(store.by_name("w").unwrap().grad.as_deref(), Some(&[3.0, 3.0][..]));
    assert_eq!(store.by_name("b").unwrap().grad.as_deref(), Some(&[3.0][..]));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn dropout_identity_at_inference_and_scaled_in_training() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(&[1, 1000], 1.0));
    let same = g.dropout(x, 0.5, false, &mut rng(0)).unwrap();
    assert_eq!(same, x);
    let y = g.dropout(x, 0.5, true, &mut rng(0)).unwrap();
    let v = &g.value(y).data;
    assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
    let kept = v.iter().filter(|&&a| a > 0.0).count();
    assert!((400..600).contains(&kept), "{kept}");
    assert!(g.dropout(x, 1.0, true, &mut rng(0)).is_err());
}

#[test]
fn sgd_and_adagrad_updates() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
    store.insert("buf", Tensor::zeros(&[1]), false);
    let mut opt = OptimState::new(OptimKind::Sgd, 0.9, 0.1);
    store.by_name_mut("p").unwrap().grad = Some(vec![0.5, 0.5]);
    opt.step(&mut store, 0.1).unwrap();
    // v = g + wd p = (0.6, 0.4); p = p - 0.1 v
    let p = &store.by_name("p").unwrap().value.data;
    assert!((p[0] - 0.94).abs() < 1e-12 && (p[1] + 1.04).abs() < 1e-12);
    assert!(store.by_name("p").unwrap().grad.is_none());
    store.by_name_mut("p").unwrap().grad = Some(vec![0.0, 0.0]);
    opt.step(&mut store, 0.1).unwrap();
    // v = 0.9 (0.6) + 0.1 * 0.94 = 0.634
    let p = &store.by_name("p").unwrap().value.data;
    assert!((p[0] - (0.94 - 0.0634)).abs() < 1e-12);

    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
    let mut ada = OptimState::new(OptimKind::AdaGrad, 0.0, 0.0);
    for _ in 0..2 {
        store.by_name_mut("p").unwrap().grad = Some(vec![2.0]);
        ada.step(&mut store, 0.5).unwrap();
    }
    // steps: 0.5 * 2 / 2 = 0.5, then 0.5 * 2 / sqrt(8)
    let want = 1.0 - 0.5 - 1.0 / 8f64.sqrt();
    assert!((store.by_name("p").unwrap().value.data[0] - want).abs() < 1e-9);
}

#[test]
fn optimizer_requires_gradients() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::zeros(&[1]), true);
    let mut opt = OptimState::new(OptimKind::Sgd, 0.0, 0.0);
    assert_eq!(
        opt.step(&mut store, 0.1),
        Err(TensorError::MissingGrad("p".into()))
    );
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint {
        config_hash: 0xdead_beef,
        header: serde_json::json!({"k": [1, 2, 3]}),
        tensors: vec![
            ("a".into(), Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(30))),
            ("b".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ("c".into(), Tensor::zeros(&[0])),
        ],
    };
    write_checkpoint(&path, &ckpt).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    for ((_, x), (_, y)) in back.tensors.iter().zip(&ckpt.tensors) {
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 12]).unwrap();
    match read_checkpoint(&path) {
        Err(CheckpointError::Truncated { index, last, .. }) => {
            assert_eq!(index, 1);
            assert_eq!(last, "'a'");
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(read_checkpoint(&path).unwrap_err().to_string().contains("magic"));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(z in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let p = softmax_rows(&z, 4);
        for row in p.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn conv_output_shape(h in 3usize..12, w in 3usize..12, k in 1usize..4, s in 1usize..3) {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, h, w]));
        let wt = g.input(Tensor::zeros(&[2, 1, k, k]));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.conv2d(x, wt, b, s, k / 2).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 2, (h + 2 * (k / 2) - k) / s + 1, (w + 2 * (k / 2) - k) / s + 1][..]);
    }
}
