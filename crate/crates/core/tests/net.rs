use vidiff_core::net::{
    appearnet_input, single_clip, spade_inject, tsr_appearnet_input, Appearance, ForwardOptions, InjectionMode,
    NetInput, ParamGroup, UNet3D, UNetConfig,
};
use vidiff_core::{Graph, Rng, Tensor};

fn small(mode: InjectionMode) -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        head_channels: 8,
        norm_groups: 4,
        cond_embed_dim: 8,
        num_frames: 5,
        resolution: 8,
        injection_mode: mode,
        ..UNetConfig::default()
    }
}

fn random_input(cfg: &UNetConfig, batch: usize, seq: bool, rng: &mut Rng) -> NetInput<f64> {
    let (n, c, r) = (cfg.num_frames, cfg.in_channels, cfg.resolution);
    let appearance = if seq {
        Appearance::Sequence(Tensor::randn(&[batch, n, c, r, r], rng))
    } else {
        Appearance::Center(Tensor::randn(&[batch, c, r, r], rng))
    };
    NetInput {
        z_t: Tensor::randn(&[batch, n, c, r, r], rng),
        t: (0..batch).map(|i| 100.0 + 313.5 * i as f64).collect(),
        cond: (0..batch).map(|i| i % (cfg.cond_vocab_size + 1)).collect(),
        appearance,
    }
}

/// The model after a few random updates, so temporal and injection weights are
/// no longer zero.
fn perturbed(cfg: UNetConfig, seed: u64) -> UNet3D<f64> {
    let mut m = UNet3D::new(cfg, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabc);
    for p in m.params_mut().iter_mut() {
        let noise = Tensor::<f64>::randn(p.value.shape(), &mut rng);
        p.value = p.value.add(&noise.scale(0.05)).unwrap();
    }
    m
}

#[test]
fn replicated_center_frame() {
    let mut rng = Rng::new(3);
    let zc = Tensor::<f64>::randn(&[4, 2, 2], &mut rng);
    let one = appearnet_input(&zc, 1).unwrap();
    assert_eq!(one.shape(), &[1, 4, 2, 2]);
    assert_eq!(one.data(), zc.data());
    let nine = appearnet_input(&zc, 9).unwrap();
    for i in 0..9 {
        assert_eq!(nine.index0(i), zc);
    }
    assert!(appearnet_input(&zc, 0).is_err());
}

#[test]
fn interpolated_sequence() {
    let a = Tensor::new(vec![1], vec![0.0f64]).unwrap();
    let b = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    let seq = tsr_appearnet_input(&a, &b, 5).unwrap();
    assert_eq!(seq.data(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    let mut rng = Rng::new(4);
    let f = Tensor::<f64>::randn(&[2, 3, 3], &mut rng);
    let l = Tensor::<f64>::randn(&[2, 3, 3], &mut rng);
    let seq = tsr_appearnet_input(&f, &l, 7).unwrap();
    assert_eq!(seq.index0(0), f);
    assert_eq!(seq.index0(6), l);
    let flat = tsr_appearnet_input(&f, &f, 4).unwrap();
    for i in 0..4 {
        assert!(flat.index0(i).max_abs_diff(&f) < 1e-15);
    }
    assert!(tsr_appearnet_input(&f, &l, 1).is_err());
}

/// Straight-line group norm over `[B, C, H, W]` with the variance floor.
fn gn_oracle(h: &Tensor<f64>, groups: usize) -> Vec<f64> {
    let s = h.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let per = c / groups * hw;
    let mut out = vec![0.0; h.numel()];
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c) * hw + g * per;
            let xs = &h.data()[off..off + per];
            let m = xs.iter().sum::<f64>() / per as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per as f64;
            for (i, x) in xs.iter().enumerate() {
                out[off + i] = (x - m) / v.max(1e-5).sqrt();
            }
        }
    }
    out
}

/// Direct 3×3 "same" convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (b, ci, h, wd) = (s[0], s[1], s[2] as isize, s[3] as isize);
    let co = w.shape()[0];
    let mut out = vec![0.0; b * co * (h * wd) as usize];
    for bi in 0..b {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias.data()[o];
                    for i in 0..ci {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h || sx >= wd {
                                    continue;
                                }
                                let xv = x.data()[((bi * ci + i) * h as usize + sy as usize) * wd as usize + sx as usize];
                                let wv = w.data()[((o * ci + i) * 3 + ky as usize) * 3 + kx as usize];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * co + o) * h as usize + y as usize) * wd as usize + xx as usize] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn spade_zero_projection_is_plain_group_norm() {
    let mut rng = Rng::new(5);
    let h = Tensor::<f64>::randn(&[2, 4, 3, 3], &mut rng);
    let fa = Tensor::<f64>::randn(&[2, 6, 3, 3], &mut rng);
    let (w0, b0) = (Tensor::zeros(&[4, 6, 3, 3]), Tensor::zeros(&[4]));
    let out = spade_inject(&h, &fa, 2, (&w0, &b0), (&w0, &b0)).unwrap();
    let g = Graph::new();
    let gn = g.constant(h.clone()).group_norm(2, 1e-5).unwrap().value();
    assert_eq!(out.data(), gn.data());
}

#[test]
fn spade_constant_h_gives_beta() {
    let mut rng = Rng::new(6);
    let h = Tensor::<f64>::full(&[1, 4, 3, 3], 2.5);
    let fa = Tensor::<f64>::randn(&[1, 2, 3, 3], &mut rng);
    let wg = Tensor::<f64>::randn(&[4, 2, 3, 3], &mut rng);
    let bg = Tensor::<f64>::randn(&[4], &mut rng);
    let wb = Tensor::<f64>::randn(&[4, 2, 3, 3], &mut rng);
    let bb = Tensor::<f64>::randn(&[4], &mut rng);
    let out = spade_inject(&h, &fa, 2, (&wg, &bg), (&wb, &bb)).unwrap();
    let beta = conv_oracle(&fa, &wb, &bb);
    for (o, b) in out.data().iter().zip(&beta) {
        assert!((o - b).abs() < 1e-12);
    }
}

#[test]
fn spade_matches_straight_line_oracle() {
    let mut rng = Rng::new(7);
    let h = Tensor::<f64>::randn(&[2, 4, 4, 4], &mut rng);
    let fa = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
    let wg = Tensor::<f64>::randn(&[4, 3, 3, 3], &mut rng);
    let bg = Tensor::<f64>::randn(&[4], &mut rng);
    let wb = Tensor::<f64>::randn(&[4, 3, 3, 3], &mut rng);
    let bb = Tensor::<f64>::randn(&[4], &mut rng);
    let out = spade_inject(&h, &fa, 2, (&wg, &bg), (&wb, &bb)).unwrap();
    let hbar = gn_oracle(&h, 2);
    let gamma = conv_oracle(&fa, &wg, &bg);
    let beta = conv_oracle(&fa, &wb, &bb);
    for i in 0..out.numel() {
        let want = (gamma[i] + 1.0) * hbar[i] + beta[i];
        assert!((out.data()[i] - want).abs() < 1e-12, "{i}");
    }
    let bad = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
    assert!(spade_inject(&h, &bad, 2, (&wg, &bg), (&wb, &bb)).is_err());
}

#[test]
fn temporal_layers_start_at_zero() {
    let m = UNet3D::<f64>::new(small(InjectionMode::AddToEncDec), 1).unwrap();
    let mut temporal = 0;
    for p in m.params().iter() {
        if p.group == ParamGroup::Temporal {
            temporal += 1;
            let zero = p.name.contains("tconv.w") || p.name.contains("tconv.b") || p.name.contains(".out.");
            if zero {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
        if p.name.contains("tattn") || p.name.contains("tconv") {
            assert_eq!(p.group, ParamGroup::Temporal, "{}", p.name);
        }
    }
    assert!(temporal > 0);
}

#[test]
fn zero_init_matches_frame_by_frame_network() {
    let mut rng = Rng::new(8);
    for mode in InjectionMode::ALL {
        let cfg = small(mode);
        let m = UNet3D::<f64>::new(cfg.clone(), 11).unwrap();
        for seq in [false, true] {
            let input = random_input(&cfg, 2, seq, &mut rng);
            let full = m.forward_batch(&input, ForwardOptions::default()).unwrap();
            let frames = m.forward_per_frame(&input).unwrap();
            let d = full.max_abs_diff(&frames);
            assert!(d <= 1e-6, "{mode}: {d}");
        }
    }
}

#[test]
fn trained_temporal_layers_mix_frames() {
    let cfg = small(InjectionMode::AddToEncDec);
    let m = perturbed(cfg.clone(), 12);
    let input = random_input(&cfg, 1, false, &mut Rng::new(9));
    let full = m.forward_batch(&input, ForwardOptions::default()).unwrap();
    let frames = m.forward_per_frame(&input).unwrap();
    assert!(full.max_abs_diff(&frames) > 1e-3);
}

#[test]
fn spade_at_init_reduces_to_plain_path() {
    let spade = UNet3D::<f64>::new(small(InjectionMode::AddToEncDecSpade), 21).unwrap();
    let add = UNet3D::<f64>::new(small(InjectionMode::AddToEncDec), 21).unwrap();
    let input = random_input(spade.config(), 2, false, &mut Rng::new(10));
    let a = spade.forward_batch(&input, ForwardOptions::default()).unwrap();
    let b = add.forward_batch(&input, ForwardOptions { temporal: true, inject: false }).unwrap();
    let c = add.forward_batch(&input, ForwardOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn shapes_for_every_mode() {
    let mut rng = Rng::new(11);
    for mode in InjectionMode::ALL {
        let cfg = UNetConfig { num_frames: 9, resolution: 16, ..small(mode) };
        let m = UNet3D::<f64>::new(cfg, 3).unwrap();
        let z = Tensor::<f64>::randn(&[9, 4, 16, 16], &mut rng);
        let zc = Tensor::<f64>::randn(&[4, 16, 16], &mut rng);
        let out = m.forward(&z, 500.0, &zc, 2).unwrap();
        assert_eq!(out.shape(), &[9, 4, 16, 16], "{mode}");
        assert!(out.all_finite());
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = UNet3D::<f64>::new(small(InjectionMode::AddToDec), 3).unwrap();
    let z = Tensor::<f64>::zeros(&[5, 3, 8, 8]);
    let zc = Tensor::<f64>::zeros(&[3, 8, 8]);
    assert!(m.forward(&z, 10.0, &zc, 0).is_err());
    let z = Tensor::<f64>::zeros(&[5, 4, 8, 8]);
    let zc = Tensor::<f64>::zeros(&[4, 8, 8]);
    assert!(m.forward(&z, 10.0, &zc, 7).is_err());
    assert!(m.forward(&z, 10.0, &zc, 6).is_ok());
    let bad = UNetConfig { attention_levels: vec![5], ..small(InjectionMode::Concat) };
    assert!(UNet3D::<f64>::new(bad, 0).is_err());
}

#[test]
fn concat_mode_never_runs_appearnet() {
    let mut rng = Rng::new(12);
    for mode in InjectionMode::ALL {
        let cfg = small(mode);
        let m = UNet3D::<f64>::new(cfg.clone(), 4).unwrap();
        let input = random_input(&cfg, 1, false, &mut rng);
        for _ in 0..3 {
            m.forward_batch(&input, ForwardOptions::default()).unwrap();
        }
        let expected = if mode == InjectionMode::Concat { 0 } else { 3 };
        assert_eq!(m.appearnet_calls(), expected, "{mode}");
        if mode == InjectionMode::Concat {
            assert!(m.params().iter().all(|p| !UNet3D::<f64>::is_appearnet_param(&p.name)));
        }
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let mut rng = Rng::new(13);
    for mode in [InjectionMode::Concat, InjectionMode::AddToEncDecSpade] {
        let cfg = small(mode);
        let m = perturbed(cfg.clone(), 5);
        let input = random_input(&cfg, 3, false, &mut rng);
        let out = m.forward_batch(&input, ForwardOptions::default()).unwrap();
        let perm = [2usize, 0, 1];
        let pick = |t: &Tensor<f64>| Tensor::stack(&perm.map(|i| t.index0(i))).unwrap();
        let Appearance::Center(a) = &input.appearance else { unreachable!() };
        let permuted = NetInput {
            z_t: pick(&input.z_t),
            t: perm.iter().map(|&i| input.t[i]).collect(),
            cond: perm.iter().map(|&i| input.cond[i]).collect(),
            appearance: Appearance::Center(pick(a)),
        };
        let out_p = m.forward_batch(&permuted, ForwardOptions::default()).unwrap();
        assert!(out_p.max_abs_diff(&pick(&out)) < 1e-12, "{mode}");
    }
}

fn appearnet_grad_norm(m: &UNet3D<f64>, input: &NetInput<f64>, deep_only: bool) -> f64 {
    let g = Graph::new();
    let params = m.params().bind(&g, true);
    let out = m.forward_on(&g, &params, input, ForwardOptions::default()).unwrap();
    let loss = out.mul(out).unwrap().mean();
    let grads = g.backward(loss).unwrap();
    let mut total = 0.0;
    for (p, v) in m.params().iter().zip(&params) {
        let wanted = if deep_only { p.name.starts_with("appearnet.") } else { UNet3D::<f64>::is_appearnet_param(&p.name) };
        if wanted {
            total += grads.get(*v).map_or(0.0, |g| g.data().iter().map(|x| x * x).sum());
        }
    }
    total.sqrt()
}

#[test]
fn gradient_reaches_appearnet() {
    let mut rng = Rng::new(14);
    for mode in [InjectionMode::AddToDec, InjectionMode::AddToEncDec, InjectionMode::AddToEncDecSpade] {
        let cfg = small(mode);
        let mut m = UNet3D::<f64>::new(cfg.clone(), 6).unwrap();
        let input = random_input(&cfg, 1, false, &mut rng);
        assert!(appearnet_grad_norm(&m, &input, false) > 0.0, "{mode}");

        // One gradient step opens the zero-initialized projections, after
        // which the copied encoder receives gradient too.
        let g = Graph::new();
        let params = m.params().bind(&g, true);
        let out = m.forward_on(&g, &params, &input, ForwardOptions::default()).unwrap();
        let grads = g.backward(out.mul(out).unwrap().mean()).unwrap();
        let updates: Vec<_> = params.iter().map(|v| grads.get(*v).cloned()).collect();
        for (p, u) in m.params_mut().iter_mut().zip(updates) {
            if let Some(u) = u {
                p.value = p.value.sub(&u.scale(0.1)).unwrap();
            }
        }
        assert!(appearnet_grad_norm(&m, &input, true) > 0.0, "{mode}");
    }
}

#[test]
fn appearnet_is_an_independent_copy() {
    let mut m = UNet3D::<f64>::new(small(InjectionMode::AddToEncDec), 7).unwrap();
    let main = m.params().find("down0.res.conv1.w").unwrap().value.clone();
    let copy = m.params().find("appearnet.down0.res.conv1.w").unwrap().value.clone();
    assert_eq!(main, copy);
    for p in m.params_mut().iter_mut() {
        if p.name == "down0.res.conv1.w" {
            p.value = p.value.map(|v| v + 1.0);
        }
    }
    assert_eq!(m.params().find("appearnet.down0.res.conv1.w").unwrap().value, copy);
    assert!(m.params().find("appearnet.down0.tconv.w").is_none());
}

#[test]
fn single_clip_forward_matches_batch() {
    let cfg = small(InjectionMode::AddToDec);
    let m = perturbed(cfg.clone(), 8);
    let mut rng = Rng::new(15);
    let z = Tensor::<f64>::randn(&[5, 4, 8, 8], &mut rng);
    let zc = Tensor::<f64>::randn(&[4, 8, 8], &mut rng);
    let one = m.forward(&z, 250.0, &zc, 1).unwrap();
    let rep = appearnet_input(&zc, 5).unwrap();
    let seq = single_clip(&z, 250.0, 1, Appearance::Sequence(rep.reshape(&[1, 5, 4, 8, 8]).unwrap())).unwrap();
    let via_seq = m.forward_batch(&seq, ForwardOptions::default()).unwrap().index0(0);
    assert!(one.max_abs_diff(&via_seq) < 1e-12);
}

#[test]
fn f32_model_runs() {
    let cfg = small(InjectionMode::AddToEncDecSpade);
    let m = UNet3D::<f32>::new(cfg, 9).unwrap();
    let mut rng = Rng::new(16);
    let z = Tensor::<f32>::randn(&[5, 4, 8, 8], &mut rng);
    let zc = Tensor::<f32>::randn(&[4, 8, 8], &mut rng);
    assert!(m.forward(&z, 999.0, &zc, 0).unwrap().all_finite());
}
