use cfpn::backbone::{FeatureMap, FeaturePyramid, LEVEL_CHANNELS, LEVEL_STRIDES};
use cfpn::cfa::{self, CfaVariant, FusionWeights, DESCRIPTOR_LEN};
use cfpn::cfd::{self, CfdConfig};
use cfpn::decoder;
use cfpn::{Ctx, Mode, ModelConfig, ModelParams, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 64;

fn random_levels(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5)
        .map(|n| {
            let side = SIZE / LEVEL_STRIDES[n];
            Tensor::from_fn(&[LEVEL_CHANNELS[n], side, side], |_| {
                rng.gen_range(0.0..1.0)
            })
        })
        .collect()
}

fn pyramid(tape: &mut Tape, levels: &[Tensor]) -> FeaturePyramid {
    FeaturePyramid {
        levels: levels
            .iter()
            .enumerate()
            .map(|(n, t)| FeatureMap {
                level: n,
                stride: LEVEL_STRIDES[n],
                features: tape.leaf(t.clone()),
            })
            .collect(),
        image_size: (SIZE, SIZE),
    }
}

fn params_for(variant: CfaVariant, cfd: Option<CfdConfig>, seed: u64) -> ModelParams {
    ModelConfig {
        cfa_variant: variant,
        cfd,
        ..ModelConfig::default()
    }
    .init_params(seed)
}

fn aggregated(params: &ModelParams, variant: CfaVariant, levels: &[Tensor]) -> Tensor {
    let mut ctx = Ctx::new(params, Mode::Eval);
    let p = pyramid(&mut ctx.tape, levels);
    let out = cfa::run_cfa(&mut ctx, &p, variant).unwrap();
    ctx.tape.value(out.f).clone()
}

#[test]
fn descriptor_is_per_level_channel_means_in_order() {
    let levels = random_levels(1);
    let mut tape = Tape::new();
    let p = pyramid(&mut tape, &levels);
    let d = cfa::squeeze_global(&mut tape, &p).unwrap();
    let z = tape.value(d.z);
    assert_eq!(z.shape(), &[DESCRIPTOR_LEN]);
    assert_eq!(d.offsets, [0, 64, 192, 448, 704, 960]);
    for (n, level) in levels.iter().enumerate() {
        let (c, h, w) = level.dims3().unwrap();
        for ch in 0..c {
            let plane = &level.data()[ch * h * w..(ch + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / (h * w) as f64;
            assert!((z.data()[d.offsets[n] + ch] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn descriptor_is_linear_in_features() {
    let levels = random_levels(2);
    let scaled: Vec<Tensor> = levels.iter().map(|t| t.map(|v| -2.5 * v)).collect();
    let mut tape = Tape::new();
    let (a, b) = (pyramid(&mut tape, &levels), pyramid(&mut tape, &scaled));
    let za = cfa::squeeze_global(&mut tape, &a).unwrap().z;
    let zb = cfa::squeeze_global(&mut tape, &b).unwrap().z;
    let expected = tape.value(za).map(|v| -2.5 * v);
    assert!(tape.value(zb).max_abs_diff(&expected).unwrap() < 1e-12);
}

#[test]
fn variant_a_equals_unit_weights() {
    let levels = random_levels(3);
    let params = params_for(CfaVariant::NoReweighting, Some(CfdConfig::all()), 0);
    let a = aggregated(&params, CfaVariant::NoReweighting, &levels);
    let mut tape = Tape::new();
    let p = pyramid(&mut tape, &levels);
    let psi = tape.constant(Tensor::ones(&[5]));
    let r = cfa::reweight(&mut tape, &p, FusionWeights { psi }).unwrap();
    let f = cfa::aggregate(&mut tape, &r).unwrap();
    assert!(a.max_abs_diff(tape.value(f)).unwrap() <= 1e-12);
    assert_eq!(a.shape(), &[960, 16, 16]);
}

#[test]
fn stride_four_levels_pass_through_scaled() {
    let levels = random_levels(4);
    let mut tape = Tape::new();
    let p = pyramid(&mut tape, &levels);
    let psi = tape.constant(Tensor::from_vec(vec![0.5, -2.0, 1.0, 1.0, 1.0]));
    let r = cfa::reweight(&mut tape, &p, FusionWeights { psi }).unwrap();
    let fv = cfa::aggregate(&mut tape, &r).unwrap();
    let f = tape.value(fv).clone();
    let l0 = f.channel_slice(0, 64).unwrap();
    let l1 = f.channel_slice(64, 192).unwrap();
    assert!(l0.max_abs_diff(&levels[0].map(|v| 0.5 * v)).unwrap() < 1e-12);
    assert!(l1.max_abs_diff(&levels[1].map(|v| -2.0 * v)).unwrap() < 1e-12);
}

#[test]
fn upsampling_preserves_constant_levels() {
    let levels: Vec<Tensor> = (0..5)
        .map(|n| {
            let side = SIZE / LEVEL_STRIDES[n];
            Tensor::full(&[LEVEL_CHANNELS[n], side, side], n as f64 + 1.0)
        })
        .collect();
    let params = params_for(CfaVariant::NoReweighting, None, 0);
    let f = aggregated(&params, CfaVariant::NoReweighting, &levels);
    let offsets = cfa::descriptor_offsets();
    for n in 0..5 {
        let slice = f.channel_slice(offsets[n], offsets[n + 1]).unwrap();
        assert!(slice
            .data()
            .iter()
            .all(|&v| (v - (n as f64 + 1.0)).abs() < 1e-12));
    }
}

#[test]
fn zero_features_aggregate_to_zero_for_every_variant() {
    let levels: Vec<Tensor> = random_levels(0)
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for variant in CfaVariant::ALL {
        let params = params_for(variant, None, 5);
        let f = aggregated(&params, variant, &levels);
        assert!(f.data().iter().all(|&v| v == 0.0), "{variant}");
    }
}

#[test]
fn collaborative_weights_couple_levels_but_independent_ones_do_not() {
    let levels = random_levels(6);
    let mut perturbed = levels.clone();
    perturbed[4] = perturbed[4].map(|v| v * 3.0 + 0.5);
    for (variant, coupled) in [
        (CfaVariant::Collaborative, true),
        (CfaVariant::Independent, false),
    ] {
        let params = params_for(variant, None, 7);
        let a = aggregated(&params, variant, &levels);
        let b = aggregated(&params, variant, &perturbed);
        let diff = a
            .channel_slice(0, 64)
            .unwrap()
            .max_abs_diff(&b.channel_slice(0, 64).unwrap())
            .unwrap();
        if coupled {
            assert!(diff > 1e-9, "{variant}: level 0 ignores level 4");
        } else {
            assert_eq!(diff, 0.0, "{variant}: level 0 depends on level 4");
        }
    }
}

#[test]
fn gap_variant_scales_by_mean_activation() {
    let levels = random_levels(8);
    let params = params_for(CfaVariant::GapReweighting, None, 0);
    let f = aggregated(&params, CfaVariant::GapReweighting, &levels);
    let m1 = levels[1].mean();
    let l1 = f.channel_slice(64, 192).unwrap();
    assert!(l1.max_abs_diff(&levels[1].map(|v| m1 * v)).unwrap() < 1e-12);
}

#[test]
fn gate_receives_gradient() {
    let levels = random_levels(9);
    let params = params_for(CfaVariant::Collaborative, None, 3);
    let mut ctx = Ctx::new(&params, Mode::Train);
    let p = pyramid(&mut ctx.tape, &levels);
    let out = cfa::run_cfa(&mut ctx, &p, CfaVariant::Collaborative).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = ctx.tape.constant(Tensor::from_fn(&[960, 16, 16], |_| {
        rng.gen_range(-1.0..1.0)
    }));
    let prod = ctx.tape.mul(out.f, r).unwrap();
    let loss = ctx.tape.sum(prod);
    let mut g = ctx.tape.backward(loss).unwrap();
    let grads = ctx.param_grads(&mut g);
    for name in [
        "cfa.gate.fc1.weight",
        "cfa.gate.fc2.weight",
        "cfa.gate.fc2.bias",
    ] {
        let t = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
    }
}

fn distributed(config: &CfdConfig, seed: u64) -> (ModelParams, Tensor) {
    let params = params_for(CfaVariant::Collaborative, Some(config.clone()), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::from_fn(&[960, 16, 16], |_| rng.gen_range(0.0..1.0));
    (params, f)
}

#[test]
fn distribution_matches_level_contract() {
    for config in CfdConfig::ablation_rows() {
        let (params, f) = distributed(&config, 1);
        let mut ctx = Ctx::new(&params, Mode::Eval);
        let fv: Var = ctx.tape.constant(f);
        let out = cfd::distribute(&mut ctx, fv, &config).unwrap();
        assert_eq!(
            out.keys().copied().collect::<Vec<_>>(),
            config.active_levels()
        );
        for (&n, level) in &out {
            let side = SIZE / LEVEL_STRIDES[n];
            assert_eq!(
                ctx.tape.shape(level.features),
                &[LEVEL_CHANNELS[n], side, side]
            );
            assert!(ctx
                .tape
                .value(level.features)
                .data()
                .iter()
                .all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn topdown_merge_counts() {
    for (levels, merges, upsamples) in [
        (vec![0], 0, 0),
        (vec![0, 1], 1, 0),
        (vec![0, 1, 2], 2, 1),
        (vec![0, 1, 2, 3, 4], 4, 3),
        (vec![3], 1, 1),
    ] {
        let config = CfdConfig::new(levels.clone()).unwrap();
        let (params, f) = distributed(&config, 2);
        let mut ctx = Ctx::new(&params, Mode::Eval);
        let fv = ctx.tape.constant(f);
        let maps = cfd::distribute(&mut ctx, fv, &config).unwrap();
        let td = decoder::fuse_topdown(&mut ctx, &maps, (SIZE, SIZE)).unwrap();
        assert_eq!((td.merges, td.upsamples), (merges, upsamples), "{levels:?}");
        assert_eq!(ctx.tape.shape(td.l), &[64, 16, 16], "{levels:?}");
        let s = decoder::predict_local(&mut ctx, td.l, (SIZE, SIZE)).unwrap();
        let s = ctx.tape.value(s);
        assert_eq!(s.shape(), &[1, SIZE, SIZE]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
