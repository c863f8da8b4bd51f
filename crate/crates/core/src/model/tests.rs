use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check_gradients, random_tensor};

fn toy_config(site: AttentionSite) -> AcrnnConfig {
    AcrnnConfig {
        num_classes: 4,
        attention_site: site,
        attention_hidden: 8,
        gru_hidden: 6,
        conv_widths: [2, 3, 3, 4],
        ..AcrnnConfig::default()
    }
}

fn randomize(model: &mut Acrnn<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn shapes(trace: &[TraceEntry], stages: &[&str]) -> Vec<Vec<usize>> {
    stages
        .iter()
        .map(|s| {
            trace
                .iter()
                .find(|e| e.stage == *s)
                .unwrap_or_else(|| panic!("stage {s} missing"))
                .shape
                .clone()
        })
        .collect()
}

#[test]
fn full_size_shape_trace() {
    let cfg = AcrnnConfig::default();
    let model = Acrnn::<f32>::new(cfg).unwrap();
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[2, 128, 128, 2]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut g, &vars, x, Mode::Eval, &mut rng).unwrap();
    let got = shapes(
        &out.trace,
        &[
            "l2.pool", "l4.pool", "l6.pool", "l8.pool", "seq", "l9", "l10", "pooled", "logits",
        ],
    );
    let want: Vec<Vec<usize>> = vec![
        vec![32, 42, 32],
        vec![8, 42, 64],
        vec![8, 14, 128],
        vec![4, 7, 256],
        vec![7, 1024],
        vec![7, 512],
        vec![7, 512],
        vec![512],
        vec![50],
    ];
    assert_eq!(got, want);
    assert_eq!(g.shape(out.logits), [2, 50]);
    assert_eq!(g.shape(out.attention.unwrap()), [2, 7]);
}

#[test]
fn eval_forward_is_pure_and_checks_input_shape() {
    let mut model = Acrnn::<f64>::new(toy_config(AttentionSite::L10)).unwrap();
    randomize(&mut model, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[2, 128, 128, 2], 1.0, &mut rng);
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.logits.shape(), [2, 4]);
    let beta = a.attention.unwrap();
    for row in &beta {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let bad = Tensor::<f64>::zeros(&[1, 64, 128, 2]);
    assert!(matches!(model.infer(&bad), Err(Error::Shape(_))));
}

#[test]
fn train_forward_reports_batch_stats_and_updates_running() {
    let mut model = Acrnn::<f64>::new(toy_config(AttentionSite::None)).unwrap();
    randomize(&mut model, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[2, 128, 128, 2], 1.0, &mut rng);
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true);
    let xv = g.constant(x);
    let out = model.forward(&mut g, &vars, xv, Mode::Train, &mut rng).unwrap();
    assert_eq!(out.batch_stats.len(), NUM_CONV);
    let before = model.bn[0].mean[0];
    let batch = out.batch_stats[0].0[0];
    model.update_bn(&out.batch_stats).unwrap();
    let want = 0.99 * before + 0.01 * batch;
    assert!((model.bn[0].mean[0] - want).abs() < 1e-12);
}

#[test]
fn cnn_attention_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_tensor(&[2, 3, 4, 5], 1.0, &mut rng);
    for scaling in [Scaling::Sigmoid, Scaling::Softmax] {
        let mut g = Graph::<f64>::new();
        let mv = g.constant(m.clone());
        let w = g.constant(Tensor::zeros(&[3, 3, 5, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let (out, a) = cnn_attention(&mut g, mv, w, b, scaling).unwrap();
        let expect = if scaling == Scaling::Sigmoid { 0.5 } else { 0.25 };
        assert!(g.value(a).data().iter().all(|&v| (v - expect).abs() < 1e-15));
        for (o, x) in g.value(out).data().iter().zip(m.data()) {
            assert!((o - expect * x).abs() < 1e-15);
        }
    }
    let mut g = Graph::<f64>::new();
    let mv = g.constant(m.clone());
    let ones = g.constant(Tensor::full(&[2, 4], 1.0));
    let out = g.scale_frames(mv, ones).unwrap();
    assert_eq!(g.value(out).data(), m.data());
}

#[test]
fn sigmoid_attention_is_strictly_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let mut g = Graph::<f64>::new();
        let mv = g.constant(random_tensor(&[1, 4, 6, 3], 3.0, &mut rng));
        let w = g.constant(random_tensor(&[3, 3, 3, 1], 2.0, &mut rng));
        let b = g.constant(random_tensor(&[1], 1.0, &mut rng));
        let (_, a) = cnn_attention(&mut g, mv, w, b, Scaling::Sigmoid).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

fn run_rnn_attention(h: &Tensor<f64>, u: &Tensor<f64>, b: &Tensor<f64>, w: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let (uv, bv, wv) = (g.constant(u.clone()), g.constant(b.clone()), g.constant(w.clone()));
    let (v, beta) = rnn_attention(&mut g, hv, Some((uv, bv)), wv).unwrap();
    (g.value(v).data().to_vec(), g.value(beta).data().to_vec())
}

#[test]
fn rnn_attention_matches_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, d, ha) = (3, 4, 5);
    let h = random_tensor(&[1, t, d], 1.0, &mut rng);
    let u = random_tensor(&[d, ha], 1.0, &mut rng);
    let b = random_tensor(&[ha], 1.0, &mut rng);
    let w = random_tensor(&[ha, 1], 1.0, &mut rng);
    let (v, beta) = run_rnn_attention(&h, &u, &b, &w);
    let hd = h.data();
    let scores: Vec<f64> = (0..t)
        .map(|ti| {
            (0..ha)
                .map(|j| {
                    let pre: f64 = (0..d).map(|k| hd[ti * d + k] * u.data()[k * ha + j]).sum::<f64>() + b.data()[j];
                    w.data()[j] * pre.tanh()
                })
                .sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let want_beta: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    for k in 0..d {
        let want: f64 = (0..t).map(|ti| want_beta[ti] * hd[ti * d + k]).sum();
        assert!((v[k] - want).abs() < 1e-10);
    }
    for (a, e) in beta.iter().zip(&want_beta) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn rnn_attention_symmetries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = random_tensor(&[4, 3], 1.0, &mut rng);
    let b = random_tensor(&[3], 1.0, &mut rng);
    let w = random_tensor(&[3, 1], 1.0, &mut rng);

    let single = random_tensor(&[1, 1, 4], 1.0, &mut rng);
    let (v, beta) = run_rnn_attention(&single, &u, &b, &w);
    assert_eq!(beta, vec![1.0]);
    assert_eq!(v, single.data());

    let row = random_tensor(&[4], 1.0, &mut rng);
    let same = Tensor::new(vec![1, 5, 4], row.data().repeat(5)).unwrap();
    let (v, beta) = run_rnn_attention(&same, &u, &b, &w);
    assert!(beta.iter().all(|&x| (x - 0.2).abs() < 1e-12));
    for (a, e) in v.iter().zip(row.data()) {
        assert!((a - e).abs() < 1e-12);
    }

    let h = random_tensor(&[1, 4, 4], 1.0, &mut rng);
    let perm = [2, 0, 3, 1];
    let mut hp = Vec::new();
    for &p in &perm {
        hp.extend_from_slice(&h.data()[p * 4..p * 4 + 4]);
    }
    let (v0, b0) = run_rnn_attention(&h, &u, &b, &w);
    let (v1, b1) = run_rnn_attention(&Tensor::new(vec![1, 4, 4], hp).unwrap(), &u, &b, &w);
    for (i, &p) in perm.iter().enumerate() {
        assert!((b1[i] - b0[p]).abs() < 1e-12);
    }
    for (a, e) in v0.iter().zip(&v1) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn last_state_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h1 = random_tensor(&[2, 1, 6], 1.0, &mut rng);
    let mut g = Graph::<f64>::new();
    let hv = g.constant(h1.clone());
    let out = head_without_attention(&mut g, hv).unwrap();
    assert_eq!(g.value(out).data(), h1.data());

    let mut data = Vec::new();
    for t in 0..5 {
        data.extend_from_slice(&[1.0, 2.0, 3.0, t as f64, -(t as f64), 0.5]);
    }
    let mut g = Graph::<f64>::new();
    let hv = g.constant(Tensor::new(vec![1, 5, 6], data).unwrap());
    let out = head_without_attention(&mut g, hv).unwrap();
    assert_eq!(g.value(out).data(), [1.0, 2.0, 3.0, 0.0, 0.0, 0.5]);
}

#[test]
fn param_counts_match_allocation() {
    for base in [AcrnnConfig::default(), toy_config(AttentionSite::None)] {
        let grid = ablation_grid(&base);
        assert_eq!(grid.len(), 11);
        for (name, cfg) in &grid {
            let model = Acrnn::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(count_params(cfg), model.params.numel(), "{name}");
        }
    }
    let full = AcrnnConfig::default();
    let none = AcrnnConfig {
        attention_site: AttentionSite::None,
        ..full.clone()
    };
    let (h2, ha) = (2 * full.gru_hidden, full.attention_hidden);
    assert_eq!(count_params(&full) - count_params(&none), h2 * ha + ha + ha);
    let total = count_params(&full);
    assert!((3_500_000..4_500_000).contains(&total), "{total}");
}

/// Instrumented direct convolution that counts every multiply and add.
fn naive_conv_ops(h: usize, w: usize, k: (usize, usize), cin: usize, cout: usize) -> u64 {
    // stride 1: total padding k-1, the smaller half before
    let (pt, pl) = ((k.0 - 1) / 2, (k.1 - 1) / 2);
    let mut ops = 0u64;
    for oy in 0..h {
        for ox in 0..w {
            for _co in 0..cout {
                ops += 1; // bias
                for ky in 0..k.0 {
                    for kx in 0..k.1 {
                        let (iy, ix) = (
                            oy as isize + ky as isize - pt as isize,
                            ox as isize + kx as isize - pl as isize,
                        );
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        ops += 2 * cin as u64;
                    }
                }
            }
        }
    }
    ops
}

#[test]
fn conv_flops_match_instrumented_loop() {
    for &(h, w, k, cin, cout) in &[
        (5, 7, (3, 5), 2, 3),
        (6, 4, (3, 1), 3, 2),
        (4, 9, (1, 5), 1, 4),
        (3, 3, (3, 3), 2, 2),
        (2, 8, (3, 3), 3, 1),
    ] {
        assert_eq!(conv_flops(h, w, k, cin, cout), naive_conv_ops(h, w, k, cin, cout));
    }
}

#[test]
fn flop_report_structure() {
    let full = AcrnnConfig::default();
    let r = count_flops(&full);
    assert_eq!(r.total, r.layers.iter().map(|l| l.flops).sum::<u64>() + r.attention);
    let head = r.layers.iter().find(|l| l.name == "head").unwrap();
    assert_eq!(head.flops, 2 * 512 * 50 + 50);
    assert!(r.attention > 0);
    assert!((r.attention as f64) < 0.01 * r.total as f64);
    let none = count_flops(&AcrnnConfig {
        attention_site: AttentionSite::None,
        ..full
    });
    assert_eq!(none.attention, 0);
    assert_eq!(none.total + r.attention, r.total);
}

#[test]
fn segments_are_transposed_into_band_time_layout() {
    let data: Vec<f32> = (0..3 * 2 * 2).map(|i| i as f32).collect();
    let seg = LogGtSegment::new(3, 2, 0, data).unwrap();
    let x: Tensor<f64> = segments_to_input(&[&seg], None).unwrap();
    assert_eq!(x.shape(), [1, 2, 3, 2]);
    for t in 0..3 {
        for b in 0..2 {
            for c in 0..2 {
                assert_eq!(x.data()[(b * 3 + t) * 2 + c], seg.at(t, b, c) as f64);
            }
        }
    }
    let norm = NormStats {
        mean: [1.0, 2.0],
        std: [2.0, 4.0],
    };
    let xn: Tensor<f64> = segments_to_input(&[&seg], Some(&norm)).unwrap();
    assert_eq!(xn.data()[0], -0.5);
    assert_eq!(xn.data()[1], -0.25);
}

#[test]
fn attention_gradients_through_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![
        random_tensor(&[2, 3, 4], 1.0, &mut rng),
        random_tensor(&[4, 5], 0.5, &mut rng),
        random_tensor(&[5], 0.5, &mut rng),
        random_tensor(&[5, 1], 0.5, &mut rng),
    ];
    let rep = check_gradients(
        &inputs,
        |g, v| {
            let (out, _) = rnn_attention(g, v[0], Some((v[1], v[2])), v[3])?;
            let s = g.tanh(out)?;
            g.sum_all(s)
        },
        1e-5,
        20,
        11,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");

    let inputs = vec![
        random_tensor(&[1, 4, 5, 2], 1.0, &mut rng),
        random_tensor(&[3, 3, 2, 1], 0.5, &mut rng),
        random_tensor(&[1], 0.5, &mut rng),
    ];
    for scaling in [Scaling::Softmax, Scaling::Sigmoid] {
        let rep = check_gradients(
            &inputs,
            |g, v| {
                let (out, _) = cnn_attention(g, v[0], v[1], v[2], scaling)?;
                let s = g.tanh(out)?;
                g.sum_all(s)
            },
            1e-5,
            20,
            12,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
