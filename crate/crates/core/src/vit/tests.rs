use super::*;

fn small_cfg() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        layers: 2,
        num_classes: 3,
        mlp_ratio: 2,
        channels: 1,
    }
}

fn random_image(cfg: &ViTConfig, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(&cfg.image_shape());
    for v in t.data_mut() {
        *v = rng.uniform();
    }
    t
}

/// Larger init so finite differences see a non-trivial function.
fn lively(cfg: &ViTConfig, seed: u64) -> ViTParams {
    let mut rng = Rng::new(seed);
    let mut p = ViTParams::init(cfg, &mut rng).unwrap();
    p.scale_in_place(20.0);
    for (name, t) in p.named_tensors_mut() {
        if name.ends_with("_g") {
            *t = t.map(|v| v / 20.0);
        }
    }
    p
}

#[test]
fn default_token_count() {
    assert_eq!(ViTConfig::default().tokens(), 65);
}

#[test]
fn rejects_indivisible_heads() {
    let cfg = ViTConfig {
        embed_dim: 17,
        ..ViTConfig::default()
    };
    assert!(matches!(
        ViTParams::init(&cfg, &mut Rng::new(1)),
        Err(FvitError::Config(_))
    ));
}

#[test]
fn init_is_deterministic_and_centered() {
    let cfg = ViTConfig::default();
    let a = ViTParams::init(&cfg, &mut Rng::new(44)).unwrap();
    let b = ViTParams::init(&cfg, &mut Rng::new(44)).unwrap();
    assert_eq!(a, b);
    let (mut sum, mut count) = (0.0, 0usize);
    for (name, t) in a.named_tensors() {
        if params::is_weight(&name) {
            sum += t.sum();
            count += t.len();
        }
    }
    let mean = sum / count as f64;
    assert!(mean.abs() < 0.001, "mean {mean}");
}

#[test]
fn zero_image_gives_stochastic_attention() {
    let cfg = ViTConfig::default();
    let p = ViTParams::init(&cfg, &mut Rng::new(44)).unwrap();
    let tr = p.forward(&Tensor::zeros(&cfg.image_shape())).unwrap();
    assert!(tr.logits.is_finite());
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            let a = tr.attention(l, h);
            assert_eq!(a.shape(), &[65, 65]);
            for r in 0..65 {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn forward_is_bit_identical() {
    let cfg = small_cfg();
    let p = lively(&cfg, 3);
    let x = random_image(&cfg, &mut Rng::new(5));
    let a = p.forward(&x).unwrap();
    let b = p.forward(&x).unwrap();
    assert_eq!(a.logits, b.logits);
    for l in 0..cfg.layers {
        assert_eq!(a.layers[l].attn, b.layers[l].attn);
        assert_eq!(a.layers[l].output, b.layers[l].output);
    }
}

#[test]
fn wrong_image_shape_is_dimension_error() {
    let p = ViTParams::init(&small_cfg(), &mut Rng::new(1)).unwrap();
    let err = p.forward(&Tensor::zeros(&[1, 8, 9])).unwrap_err();
    assert!(matches!(err, FvitError::Dimension { .. }));
}

#[test]
fn class_out_of_range() {
    let cfg = small_cfg();
    let p = ViTParams::init(&cfg, &mut Rng::new(1)).unwrap();
    let mut tr = p.forward(&Tensor::zeros(&cfg.image_shape())).unwrap();
    assert!(matches!(p.backward_class(&mut tr, 3), Err(FvitError::Parameter(_))));
}

#[test]
fn dead_head_gives_zero_input_gradient() {
    let cfg = small_cfg();
    let mut p = lively(&cfg, 2);
    p.head_w = Tensor::zeros(p.head_w.shape());
    let x = random_image(&cfg, &mut Rng::new(2));
    let mut tr = p.forward(&x).unwrap();
    let g = p.backward_class(&mut tr, 1).unwrap();
    assert_eq!(g.shape(), x.shape());
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn logit_gradient_with_respect_to_itself_is_one() {
    // d logit_c / d head_b_c through an identity head.
    let cfg = small_cfg();
    let p = lively(&cfg, 9);
    let tr = p.forward(&random_image(&cfg, &mut Rng::new(9))).unwrap();
    let g = p.backward(&tr, &[0.0, 1.0, 0.0], true).unwrap();
    assert_eq!(g.params.unwrap().head_b.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let n = cfg.tokens();
    for trial in 0..4u64 {
        let p = lively(&cfg, 100 + trial);
        let mut rng = Rng::new(200 + trial);
        let x = random_image(&cfg, &mut rng);
        let class = rng.below(cfg.num_classes);
        let mut tr = p.forward(&x).unwrap();
        p.backward_class(&mut tr, class).unwrap();
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let grad = tr.attention_grad(l, h).unwrap();
                assert_eq!(grad.shape(), tr.attention(l, h).shape());
                let mut dir = Tensor::zeros(&[n, n]);
                for v in dir.data_mut() {
                    *v = rng.standard_normal();
                }
                let eps = 1e-5;
                let f = |s: f64| {
                    p.forward_with_attention_offset(&x, l, h, &dir.scale(s))
                        .unwrap()
                        .logits
                        .data()[class]
                };
                let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                let an = grad.dot(&dir).unwrap();
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
                assert!(rel < 1e-4, "layer {l} head {h}: fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn patch_permutation_leaves_logits_unchanged() {
    let cfg = small_cfg();
    let p = lively(&cfg, 11);
    let x = random_image(&cfg, &mut Rng::new(12));
    let base = p.forward(&x).unwrap();
    let (np, d) = (cfg.patches(), cfg.embed_dim);
    let perm: Vec<usize> = (0..np).rev().collect();
    let mut patches = vec![0.0; base.patches.len()];
    let pd = cfg.patch_dim();
    for (dst, &src) in perm.iter().enumerate() {
        patches[dst * pd..(dst + 1) * pd].copy_from_slice(base.patches.row(src));
    }
    let mut q = p.clone();
    let mut pos = p.pos.data().to_vec();
    for (dst, &src) in perm.iter().enumerate() {
        pos[(dst + 1) * d..(dst + 2) * d].copy_from_slice(&p.pos.data()[(src + 1) * d..(src + 2) * d]);
    }
    q.pos = Tensor::new(p.pos.shape().to_vec(), pos).unwrap();
    let permuted = q
        .forward_patches(&Tensor::new(vec![np, pd], patches).unwrap())
        .unwrap();
    for (a, b) in base.logits.data().iter().zip(permuted.logits.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = small_cfg();
    let p = ViTParams::init(&cfg, &mut Rng::new(4)).unwrap();
    let data = vec![(random_image(&cfg, &mut Rng::new(1)), 1usize)];
    let tc = TrainConfig {
        epochs: 3,
        lr: 0.0,
        batch_size: 1,
        momentum: 0.0,
        optimizer: Optimizer::Sgd,
        linear_decay: false,
    };
    let out = train(&p, &data, &[], &tc, &mut Rng::new(4)).unwrap();
    assert_eq!(out.params, p);
}

#[test]
fn empty_dataset_rejected() {
    let p = ViTParams::init(&small_cfg(), &mut Rng::new(4)).unwrap();
    let err = train(&p, &[], &[], &TrainConfig::default(), &mut Rng::new(4)).unwrap_err();
    assert!(matches!(err, FvitError::Parameter(_)));
}

#[test]
fn overfits_a_single_sample() {
    let cfg = ViTConfig::default();
    let p = ViTParams::init(&cfg, &mut Rng::new(44)).unwrap();
    let x = random_image(&cfg, &mut Rng::new(8));
    let data = vec![(x.clone(), 2usize)];
    let tc = TrainConfig {
        epochs: 200,
        lr: 0.05,
        batch_size: 1,
        momentum: 0.0,
        optimizer: Optimizer::Sgd,
        linear_decay: false,
    };
    let out = train(&p, &data, &[], &tc, &mut Rng::new(44)).unwrap();
    assert_eq!(out.params.predict(&x).unwrap(), 2);
}

#[test]
fn save_load_roundtrip() {
    let cfg = small_cfg();
    let p = ViTParams::init(&cfg, &mut Rng::new(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    p.save(&stem).unwrap();
    let q = ViTParams::load(&stem).unwrap();
    assert_eq!(q.config(), p.config());
    for ((na, a), (nb, b)) in p.named_tensors().into_iter().zip(q.named_tensors()) {
        assert_eq!(na, nb);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
}

#[test]
fn parameter_and_input_gradients_match_finite_differences() {
    let cfg = small_cfg();
    for trial in 0..3u64 {
        let p = lively(&cfg, 300 + trial);
        let mut rng = Rng::new(400 + trial);
        let x = random_image(&cfg, &mut rng);
        let dl: Vec<f64> = (0..cfg.num_classes).map(|_| rng.standard_normal()).collect();
        let objective = |q: &ViTParams, x: &Tensor| -> f64 {
            let l = q.forward(x).unwrap().logits;
            l.data().iter().zip(&dl).map(|(a, b)| a * b).sum()
        };
        let g = p.backward(&p.forward(&x).unwrap(), &dl, true).unwrap();
        let gp = g.params.unwrap();
        let eps = 1e-5;
        for ((name, gt), idx) in gp.named_tensors().into_iter().zip(0..) {
            let mut dir = p.zeros_like();
            let t = &mut dir.named_tensors_mut()[idx].1;
            for v in t.data_mut() {
                *v = rng.standard_normal();
            }
            let dt = dir.named_tensors()[idx].1.clone();
            let mut plus = p.clone();
            plus.add_scaled(&dir, eps);
            let mut minus = p.clone();
            minus.add_scaled(&dir, -eps);
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * eps);
            let an = gt.dot(&dt).unwrap();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}: fd {fd} vs {an}");
        }
        let mut dir = Tensor::zeros(x.shape());
        for v in dir.data_mut() {
            *v = rng.standard_normal();
        }
        let fd = (objective(&p, &x.add(&dir.scale(eps)).unwrap())
            - objective(&p, &x.sub(&dir.scale(eps)).unwrap()))
            / (2.0 * eps);
        let an = g.input.dot(&dir).unwrap();
        assert!((fd - an).abs() / fd.abs().max(an.abs()) < 1e-4, "input: {fd} vs {an}");
    }
}
