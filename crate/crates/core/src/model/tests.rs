use super::*;

fn input(n: usize, shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut dims = vec![n];
    dims.extend_from_slice(shape);
    let mut s = RngStream::new(seed);
    crate::tensor::rng_normal(&mut s, dims, 1.0)
}

fn labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + 3) % k).collect()
}

fn loss_at(model: &Model<f64>, x: &Tensor<f64>, y: &[usize], opts: &ForwardOptions) -> f64 {
    let (logits, _) = model.forward(x, opts).unwrap();
    loss_softmax_xent(&logits, y).unwrap().0
}

/// Central differences on every coordinate against the analytic gradient.
fn check_gradient(mut model: Model<f64>, x: &Tensor<f64>, y: &[usize], opts: &ForwardOptions) {
    let analytic = model.batch_gradient(x, y, opts).unwrap().grad;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.dim() {
        let orig = model.params.flat()[i];
        model.params.flat_mut()[i] = orig + h;
        let up = loss_at(&model, x, y, opts);
        model.params.flat_mut()[i] = orig - h;
        let down = loss_at(&model, x, y, opts);
        model.params.flat_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-6, "worst relative gradient error {worst:e}");
}

#[test]
fn finite_differences_mlp() {
    let spec = ModelSpec::from_arch("mlp:6,5", [1, 3, 3], 4, 4, 0.0).unwrap();
    let model = Model::<f64>::new(spec, 11);
    check_gradient(
        model,
        &input(5, &[1, 3, 3], 1),
        &labels(5, 4),
        &ForwardOptions::eval(),
    );
}

#[test]
fn finite_differences_conv_ghost_bn_train() {
    let spec = ModelSpec::from_arch("cnn:3,2", [2, 4, 4], 3, 2, 0.0).unwrap();
    let mut model = Model::<f64>::new(spec, 5);
    // Nontrivial scale and shift so those gradients are exercised.
    for (i, v) in model.params.flat_mut().iter_mut().enumerate() {
        *v += 0.05 * ((i % 7) as f64 - 3.0);
    }
    check_gradient(
        model,
        &input(4, &[2, 4, 4], 2),
        &labels(4, 3),
        &ForwardOptions::train_deterministic(),
    );
}

#[test]
fn finite_differences_bn_eval_mode() {
    let spec = ModelSpec::from_arch("cnn:2", [1, 4, 4], 3, 2, 0.0).unwrap();
    let mut model = Model::<f64>::new(spec, 6);
    for state in model.bn.iter_mut().flatten() {
        state.mean = vec![0.3, -0.2];
        state.var = vec![1.7, 0.6];
    }
    check_gradient(
        model,
        &input(3, &[1, 4, 4], 3),
        &labels(3, 3),
        &ForwardOptions::eval(),
    );
}

#[test]
fn finite_differences_dropout() {
    let spec = ModelSpec::from_arch("mlp:8", [1, 2, 2], 3, 4, 0.4).unwrap();
    let model = Model::<f64>::new(spec, 7);
    let opts = ForwardOptions::train(RngStream::new(99).split("dropout"));
    check_gradient(model, &input(4, &[1, 2, 2], 4), &labels(4, 3), &opts);
}

#[test]
fn linear_gradient_matches_closed_form() {
    let spec = ModelSpec::from_arch("linear", [1, 2, 2], 3, 1, 0.0).unwrap();
    let model = Model::<f64>::new(spec, 8);
    let x = input(6, &[1, 2, 2], 5);
    let y = labels(6, 3);
    let g = model
        .batch_gradient(&x, &y, &ForwardOptions::eval())
        .unwrap()
        .grad;
    let w = &model.params.flat()[..12];
    let b = &model.params.flat()[12..];
    let mut expect = vec![0.0; 15];
    for (i, &label) in y.iter().enumerate() {
        let xi = x.row(i);
        let z: Vec<f64> = (0..3)
            .map(|k| b[k] + (0..4).map(|j| xi[j] * w[j * 3 + k]).sum::<f64>())
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            let r = z[k].exp() / denom - if k == label { 1.0 } else { 0.0 };
            for j in 0..4 {
                expect[j * 3 + k] += xi[j] * r / 6.0;
            }
            expect[12 + k] += r / 6.0;
        }
    }
    for (a, e) in g.iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn zero_logits_give_log_k() {
    let logits = Tensor::<f64>::zeros([4, 10]);
    let (loss, grad, _) = loss_softmax_xent(&logits, &[0, 3, 9, 5]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-15);
    assert!((grad.data()[0] - (0.1 - 1.0) / 4.0).abs() < 1e-15);
}

#[test]
fn softmax_matches_naive_oracle() {
    let logits = Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 30.0, 29.0, -5.0]).unwrap();
    let (loss, _, correct) = loss_softmax_xent(&logits, &[2, 0]).unwrap();
    let naive = |row: &[f64], label: usize| {
        -(row[label].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
    };
    let expect = (naive(&logits.data()[..3], 2) + naive(&logits.data()[3..], 0)) / 2.0;
    assert!((loss - expect).abs() < 1e-12);
    assert_eq!(correct, 1);
    assert!(loss_softmax_xent(&logits, &[3, 0]).is_err());
}

#[test]
fn ghost_bn_whole_batch_matches_plain_batch_norm() {
    let n = 6;
    let spec = ModelSpec::new(
        vec![3],
        3,
        vec![LayerSpec::GhostBatchNorm {
            features: 3,
            ghost_size: n,
        }],
    )
    .unwrap();
    let model = Model::<f64>::new(spec, 1);
    let x = input(n, &[3], 9);
    let (y, cache) = model
        .forward(&x, &ForwardOptions::train_deterministic())
        .unwrap();
    for f in 0..3 {
        let col: Vec<f64> = (0..n).map(|i| x.row(i)[f]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            let expect = (col[i] - mean) / (var + 1e-5).sqrt();
            assert!((y.row(i)[f] - expect).abs() < 1e-12);
        }
        assert!((cache.bn_stats[0].1[0].var[f] - var).abs() < 1e-12);
    }
}

#[test]
fn ghost_groups_normalize_independently() {
    let spec = ModelSpec::new(
        vec![2],
        2,
        vec![LayerSpec::GhostBatchNorm {
            features: 2,
            ghost_size: 2,
        }],
    )
    .unwrap();
    let model = Model::<f64>::new(spec, 1);
    let x = input(4, &[2], 10);
    let opts = ForwardOptions::train_deterministic();
    let (y, _) = model.forward(&x, &opts).unwrap();
    // Swapping the two groups swaps their outputs exactly.
    let swapped = x.select(&[2, 3, 0, 1]).unwrap();
    let (ys, _) = model.forward(&swapped, &opts).unwrap();
    assert_eq!(ys.data(), y.select(&[2, 3, 0, 1]).unwrap().data());
    // Each group alone gives the same result as inside the batch.
    let (y0, _) = model.forward(&x.slice_batch(0, 2).unwrap(), &opts).unwrap();
    assert_eq!(y0.data(), &y.data()[..4]);
    assert!(model.forward(&x.slice_batch(0, 3).unwrap(), &opts).is_err());
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let with = ModelSpec::from_arch("mlp:8", [1, 2, 2], 3, 4, 0.5).unwrap();
    let without = ModelSpec::from_arch("mlp:8", [1, 2, 2], 3, 4, 0.0).unwrap();
    let a = Model::<f64>::new(with, 3);
    let b = Model::with_params(
        without.clone(),
        ModelParams::from_flat(&without, a.params.flat().to_vec()).unwrap(),
    );
    let x = input(5, &[1, 2, 2], 6);
    let (ya, _) = a.forward(&x, &ForwardOptions::eval()).unwrap();
    let (yb, _) = b.forward(&x, &ForwardOptions::eval()).unwrap();
    assert_eq!(ya.data(), yb.data());
    let (ra, _) = a
        .dropout_replicas(&x, 3, &RngStream::new(1), Mode::Eval)
        .unwrap();
    assert_eq!(ra.data(), ya.data());
}

#[test]
fn dropout_replicas_draw_distinct_masks() {
    let spec = ModelSpec::from_arch("mlp:32", [1, 2, 2], 3, 4, 0.5).unwrap();
    let model = Model::<f64>::new(spec, 3);
    let x = input(2, &[1, 2, 2], 6);
    let (y, _) = model
        .dropout_replicas(&x, 3, &RngStream::new(4), Mode::Train)
        .unwrap();
    assert_eq!(y.shape(), &[6, 3]);
    assert_ne!(y.row(0), y.row(2));
    assert_ne!(y.row(2), y.row(4));
}

#[test]
fn stale_cache_is_rejected() {
    let spec = ModelSpec::from_arch("linear", [1, 2, 2], 2, 1, 0.0).unwrap();
    let mut model = Model::<f64>::new(spec, 1);
    let x = input(2, &[1, 2, 2], 1);
    let (logits, cache) = model.forward(&x, &ForwardOptions::eval()).unwrap();
    model.params.flat_mut()[0] += 1.0;
    let (_, d, _) = loss_softmax_xent(&logits, &[0, 1]).unwrap();
    assert!(matches!(
        model.backward(&cache, &d),
        Err(Error::StaleCache { .. })
    ));
}

#[test]
fn flat_view_round_trips_through_tensors() {
    let spec = ModelSpec::from_arch("cnn:3", [1, 4, 4], 2, 2, 0.0).unwrap();
    let p = ModelParams::<f64>::init(&spec, 2);
    let back = ModelParams::from_tensors(&spec, &p.tensors(&spec)).unwrap();
    assert_eq!(back.flat(), p.flat());
    let mask = p.decay_mask();
    assert_eq!(mask.iter().filter(|m| !**m).count(), 6);
}

#[test]
fn per_sample_grads_average_to_eval_batch_gradient() {
    let spec = ModelSpec::from_arch("cnn:2", [1, 4, 4], 3, 4, 0.0).unwrap();
    let model = Model::<f64>::new(spec, 4);
    let x = input(4, &[1, 4, 4], 8);
    let y = labels(4, 3);
    let per = model.per_sample_grads(&x, &y).unwrap();
    let mean = crate::scalar::mean_in_order(&per);
    let full = model
        .batch_gradient(&x, &y, &ForwardOptions::eval())
        .unwrap()
        .grad;
    for (a, b) in mean.iter().zip(&full) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let spec = ModelSpec::from_arch("cnn:2", [1, 4, 4], 3, 2, 0.0).unwrap();
    let mut model = Model::<f32>::new(spec.clone(), 4);
    model.bn[1].as_mut().unwrap().mean = vec![0.25, -1.5];
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let back: Model<f32> = read_checkpoint(&spec, buf.as_slice()).unwrap();
    assert_eq!(back.params.flat(), model.params.flat());
    assert_eq!(back.bn, model.bn);
    assert!(read_checkpoint::<f64, _>(&spec, buf.as_slice()).is_err());
    let other = ModelSpec::from_arch("cnn:3", [1, 4, 4], 3, 2, 0.0).unwrap();
    assert!(read_checkpoint::<f32, _>(&other, buf.as_slice()).is_err());
    assert!(read_checkpoint::<f32, _>(&spec, &buf[..buf.len() - 1]).is_err());
}
