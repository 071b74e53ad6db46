use super::*;

fn tiny_arch(f: usize, l: usize) -> ArchSpec {
    ArchSpec {
        stem: ConvSpec {
            out: 4,
            kernel: 3,
            stride: 1,
        },
        blocks: vec![
            BlockSpec {
                out: 4,
                kernel: 3,
                downsample: false,
            },
            BlockSpec {
                out: 6,
                kernel: 3,
                downsample: true,
            },
        ],
        ..ArchSpec::standard(f, l)
    }
}

#[test]
fn zero_network_outputs_head_bias() {
    let arch = ArchSpec::standard(4, 30);
    let mut m = Model::zeros(&arch).unwrap();
    let net = Net::build(&arch);
    let x = Batch::new(2, 4, 30, (0..240).map(|i| i as f64).collect()).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(m.forward(&x, mode).unwrap(), vec![[0.0, 0.0]; 2]);
    }
    m.params[net.head_b] = 0.25;
    m.params[net.head_b + 1] = -1.5;
    assert_eq!(m.forward(&x, Mode::Eval).unwrap(), vec![[0.25, -1.5]; 2]);
}

#[test]
fn identity_stem_passes_constant_through_relu() {
    let arch = ArchSpec {
        in_channels: 1,
        length: 9,
        stem: ConvSpec {
            out: 1,
            kernel: 3,
            stride: 1,
        },
        blocks: vec![],
        norm: false,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    };
    let mut m = Model::zeros(&arch).unwrap();
    m.params[1] = 1.0;
    for c in [2.5, -0.7] {
        let x = Batch::new(1, 1, 9, vec![c; 9]).unwrap();
        assert_eq!(m.pooled(&x, Mode::Eval).unwrap(), vec![f64::max(c, 0.0)]);
    }
}

#[test]
fn standard_arch_parameter_count() {
    let arch = ArchSpec::standard(17, 30);
    let expect = 32 * 17 * 7
        + 64
        + (32 * 32 * 5 + 64) * 2
        + 64 * 32 * 5
        + 128
        + 64 * 64 * 5
        + 128
        + 64 * 32
        + 128
        + (64 * 64 * 3 + 128) * 2
        + 130;
    assert_eq!(arch.n_params(), expect);
    let m = Model::init(&arch, 1).unwrap();
    let slots = m.slots();
    assert_eq!(slots.last().unwrap().offset + 2, m.params.len());
    assert!(slots.iter().filter(|s| s.name.ends_with("gamma")).all(|s| !s.decay));
}

#[test]
fn even_kernel_rejected_and_shape_checked() {
    let mut arch = ArchSpec::standard(3, 30);
    arch.blocks[0].kernel = 4;
    assert!(Model::init(&arch, 0).is_err());
    let m = Model::init(&ArchSpec::standard(3, 30), 0).unwrap();
    let x = Batch::new(1, 4, 30, vec![0.0; 120]).unwrap();
    assert!(matches!(m.forward(&x, Mode::Eval), Err(Error::ShapeMismatch(_))));
}

/// Direct nested-loop evaluator used as an independent reference.
fn reference_logits(m: &Model, x: &Batch, mode: Mode) -> Vec<[f64; 2]> {
    let net = Net::build(&m.arch);
    let p = &m.params;
    // act[b][c][l]
    let mut act: Vec<Vec<Vec<f64>>> = (0..x.b)
        .map(|b| {
            (0..x.f)
                .map(|f| x.data[(b * x.f + f) * x.l..][..x.l].to_vec())
                .collect()
        })
        .collect();
    let conv = |a: &Vec<Vec<Vec<f64>>>, c: &ConvP| -> Vec<Vec<Vec<f64>>> {
        let l = a[0][0].len();
        let lout = (l + 2 * c.pad() - c.k) / c.stride + 1;
        a.iter()
            .map(|s| {
                (0..c.cout)
                    .map(|o| {
                        (0..lout)
                            .map(|t| {
                                let mut acc = 0.0;
                                for i in 0..c.cin {
                                    for kk in 0..c.k {
                                        let idx = (t * c.stride + kk) as isize - c.pad() as isize;
                                        if idx >= 0 && (idx as usize) < l {
                                            acc += p[c.w + (o * c.cin + i) * c.k + kk] * s[i][idx as usize];
                                        }
                                    }
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let bn = |a: Vec<Vec<Vec<f64>>>, n: &Option<BnP>| -> Vec<Vec<Vec<f64>>> {
        let Some(n) = n else { return a };
        let mut a = a;
        for c in 0..n.c {
            let (mean, var) = match mode {
                Mode::Eval => (m.running_mean[n.stat + c], m.running_var[n.stat + c]),
                Mode::Train => {
                    let vals: Vec<f64> = a.iter().flat_map(|s| s[c].iter().copied()).collect();
                    let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                    (
                        mu,
                        vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64,
                    )
                }
            };
            for s in a.iter_mut() {
                for v in s[c].iter_mut() {
                    *v = p[n.gamma + c] * (*v - mean) / (var + m.arch.bn_eps).sqrt() + p[n.beta + c];
                }
            }
        }
        a
    };
    let relu = |mut a: Vec<Vec<Vec<f64>>>| {
        a.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        a
    };
    act = relu(bn(conv(&act, &net.stem), &net.stem_bn));
    for bp in &net.blocks {
        let h = relu(bn(conv(&act, &bp.conv1), &bp.bn1));
        let mut h = bn(conv(&h, &bp.conv2), &bp.bn2);
        let s = match &bp.proj {
            Some((pc, pb)) => bn(conv(&act, pc), pb),
            None => act.clone(),
        };
        for (a, b) in h.iter_mut().flatten().flatten().zip(s.iter().flatten().flatten()) {
            *a += b;
        }
        act = relu(h);
    }
    act.iter()
        .map(|s| {
            let c = s.len();
            let pooled: Vec<f64> = s.iter().map(|ch| ch.iter().sum::<f64>() / ch.len() as f64).collect();
            let mut out = [p[net.head_b], p[net.head_b + 1]];
            for j in 0..2 {
                for ch in 0..c {
                    out[j] += p[net.head_w + j * c + ch] * pooled[ch];
                }
            }
            out
        })
        .collect()
}

fn random_model(arch: &ArchSpec, seed: u64) -> Model {
    use rand::Rng;
    let mut m = Model::init(arch, seed).unwrap();
    let mut r = rng::stream(seed, Purpose::Synth, 99);
    for v in m.params.iter_mut() {
        *v += 0.3 * r.random_range(-1.0..1.0);
    }
    for v in m.running_mean.iter_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    for v in m.running_var.iter_mut() {
        *v = r.random_range(0.5..2.0);
    }
    m
}

fn random_batch(b: usize, f: usize, l: usize, seed: u64) -> Batch {
    use rand::Rng;
    let mut r = rng::stream(seed, Purpose::Synth, 7);
    Batch::new(b, f, l, (0..b * f * l).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn matches_direct_convolution_reference() {
    let arch = ArchSpec::standard(4, 16);
    let m = random_model(&arch, 5);
    let x = random_batch(3, 4, 16, 6);
    for mode in [Mode::Train, Mode::Eval] {
        let got = m.forward(&x, mode).unwrap();
        let want = reference_logits(&m, &x, mode);
        for (g, w) in got.iter().zip(&want) {
            for j in 0..2 {
                assert!((g[j] - w[j]).abs() < 1e-6, "{mode:?}: {g:?} vs {w:?}");
            }
        }
    }
}

#[test]
fn weighted_ce_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((weighted_ce(&[[0.0, 0.0]], &[1], 3.0) - 3.0 * ln2).abs() < 1e-15);
    assert!((weighted_ce(&[[0.0, 0.0]], &[0], 3.0) - ln2).abs() < 1e-15);
    assert!((weighted_ce(&[[0.0, 0.0], [0.0, 0.0]], &[1, 0], 3.0) - 2.0 * ln2).abs() < 1e-15);
    // large logits stay finite
    assert!(weighted_ce(&[[1000.0, -1000.0]], &[1], 1.0).is_finite());
}

#[test]
fn unit_class_weight_is_plain_cross_entropy() {
    let logits: [[f64; 2]; 3] = [[0.3, -1.2], [2.0, 0.5], [-0.4, 0.9]];
    let labels = [1, 0, 1];
    let plain: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, y)| {
            let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
            -(if y == 1 { p1 } else { 1.0 - p1 }).ln()
        })
        .sum::<f64>()
        / 3.0;
    assert!((weighted_ce(&logits, &labels, 1.0) - plain).abs() < 1e-12);
}

#[test]
fn zero_network_head_bias_gradient() {
    let arch = tiny_arch(2, 8);
    let m = Model::zeros(&arch).unwrap();
    let net = Net::build(&arch);
    let x = random_batch(4, 2, 8, 1);
    let labels = [1, 0, 0, 1];
    let (_, g, _) = m.loss_and_grad(&x, &labels, 3.0).unwrap();
    // softmax(0) = 0.5; class-1 entry gets w_i/B * (0.5 - y_i)
    let expect1: f64 = labels
        .iter()
        .map(|&y| if y == 1 { 3.0 * -0.5 } else { 0.5 } / 4.0)
        .sum();
    assert!((g[net.head_b + 1] - expect1).abs() < 1e-15);
    assert!((g[net.head_b] + expect1).abs() < 1e-15);
}

#[test]
fn duplicated_sample_doubles_its_contribution() {
    let arch = ArchSpec {
        norm: false,
        ..tiny_arch(2, 8)
    };
    let m = random_model(&arch, 3);
    let s1 = random_batch(1, 2, 8, 4);
    let t1 = random_batch(1, 2, 8, 5);
    let cat = |parts: &[&Batch]| {
        let data: Vec<f64> = parts.iter().flat_map(|b| b.data.iter().copied()).collect();
        Batch::new(parts.len(), 2, 8, data).unwrap()
    };
    let (_, g_s, _) = m.loss_and_grad(&s1, &[1], 3.0).unwrap();
    let (_, g_st, _) = m.loss_and_grad(&cat(&[&s1, &t1]), &[1, 0], 3.0).unwrap();
    let (_, g_sst, _) = m.loss_and_grad(&cat(&[&s1, &s1, &t1]), &[1, 1, 0], 3.0).unwrap();
    // B * grad is the sum of per-sample contributions, so the extra copy adds exactly g_s
    for i in 0..g_s.len() {
        let extra = 3.0 * g_sst[i] - 2.0 * g_st[i];
        assert!((extra - g_s[i]).abs() < 1e-12, "{i}: {extra} vs {}", g_s[i]);
    }
}

#[test]
fn adam_examples() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = vec![0.5, -1.0];
    let mut s = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &[true, true], &mut s, &cfg);
    assert_eq!(p, vec![0.5, -1.0]);

    let mut p = vec![0.0];
    let mut s = AdamState::new(1);
    adam_step(&mut p, &[1.0], &[false], &mut s, &cfg);
    // m_hat = 1, v_hat = 1
    assert!((p[0] + cfg.lr / (1.0 + 1e-8)).abs() < 1e-15);

    let cfg = TrainConfig::default();
    let mut p = vec![2.0, 2.0];
    let mut s = AdamState::new(2);
    for _ in 0..3 {
        adam_step(&mut p, &[0.0, 0.0], &[true, false], &mut s, &cfg);
    }
    assert!((p[0] - 2.0 * (1.0 - cfg.lr * cfg.weight_decay).powi(3)).abs() < 1e-15);
    assert_eq!(p[1], 2.0);
}

#[test]
fn running_stats_follow_momentum() {
    let arch = tiny_arch(2, 8);
    let mut m = Model::init(&arch, 2).unwrap();
    let x = random_batch(4, 2, 8, 2);
    let (_, _, stats) = m.loss_and_grad(&x, &[0, 1, 0, 1], 3.0).unwrap();
    m.update_running(&stats);
    let n = stats.count[0] as f64;
    assert!((m.running_mean[0] - 0.1 * stats.mean[0]).abs() < 1e-15);
    assert!((m.running_var[0] - (0.9 + 0.1 * stats.var[0] * n / (n - 1.0))).abs() < 1e-15);
}
