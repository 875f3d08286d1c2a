use corrnet::features::InputMode;
use corrnet::model::{
    blocks, BlockCfg, Bound, HeadMode, ModelConfig, OutputMode, ParamInit, Params, TfCorrNet,
};
use corrnet::stft::{stft, StftConfig, Waveform};
use corrnet::tensor::gradcheck::check_gradients;
use corrnet::tensor::{Graph, Tensor, Var};
use corrnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Replace every parameter (including zero-initialised projections) with random values.
fn randomize(params: &mut Params<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..params.len() {
        let shape = params.tensors()[i].shape().to_vec();
        params.set(i, rand_tensor(&mut rng, &shape, 0.5)).unwrap();
    }
}

fn micro_cfg() -> ModelConfig {
    ModelConfig {
        channels: 8,
        spec_channels: 2,
        spec_dim: 4,
        stages: 1,
        heads: 2,
        dconv_kernel: 3,
        downsample: 2,
        efn_expansion: 2,
        ..ModelConfig::desk(2, 5)
    }
}

fn block_params(kind: &str, c: &BlockCfg, seed: u64) -> Params<f64> {
    let mut init = ParamInit::new(ChaCha8Rng::seed_from_u64(seed));
    match kind {
        "ega" => blocks::init_ega(&mut init, "b", c).unwrap(),
        "efn" => blocks::init_efn(&mut init, "b", c).unwrap(),
        "cla" => blocks::init_cla(&mut init, "b", c).unwrap(),
        _ => blocks::init_gl_block(&mut init, "b", c).unwrap(),
    }
    init.params
}

fn run_block(kind: &str, g: &mut Graph<f64>, p: &Bound<f64>, x: Var, c: &BlockCfg) -> Result<Var> {
    match kind {
        "ega" => blocks::ega(g, p, "b", x, c),
        "efn" => blocks::efn(g, p, "b", x, c),
        "cla" => blocks::cla(g, p, "b", x),
        _ => blocks::gl_block(g, p, "b", x, c),
    }
}

/// Scalar `Σ out ⊙ r` for a fixed random `r`.
fn weighted_sum(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = g.shape(out).to_vec();
    let r = g.constant(rand_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(out, r)?;
    g.sum_all(p)
}

fn forward_block(kind: &str, params: &Params<f64>, x: &Tensor<f64>, c: &BlockCfg) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = run_block(kind, &mut g, &p, xv, c).unwrap();
    g.value(y).clone()
}

const CFG: BlockCfg = BlockCfg {
    width: 4,
    heads: 2,
    kernel: 3,
    factor: 2,
    expansion: 2,
};

#[test]
fn blocks_are_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 7, 4], 1.0);
    for kind in ["ega", "efn", "cla", "gl"] {
        let p = block_params(kind, &CFG, 5);
        assert_eq!(forward_block(kind, &p, &x, &CFG), x, "{kind}");
    }
}

#[test]
fn blocks_preserve_shape_for_ragged_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in [1, 2, 5, 7, 8] {
        let x = rand_tensor(&mut rng, &[2, len, 4], 1.0);
        let c = BlockCfg { factor: 3, ..CFG };
        let mut p = block_params("gl", &c, 3);
        randomize(&mut p, 4);
        assert_eq!(forward_block("gl", &p, &x, &c).shape(), &[2, len, 4]);
    }
}

#[test]
fn ega_rejects_indivisible_heads() {
    let c = BlockCfg { heads: 3, ..CFG };
    let mut init = ParamInit::<f64>::new(ChaCha8Rng::seed_from_u64(0));
    assert!(blocks::init_ega(&mut init, "b", &c).is_err());
}

#[test]
fn ega_is_permutation_equivariant_without_pooling() {
    let c = BlockCfg { factor: 1, ..CFG };
    let mut p = block_params("ega", &c, 1);
    randomize(&mut p, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 5, 4], 1.0);
    let perm = [3, 0, 4, 1, 2];
    let xp: Vec<f64> = perm
        .iter()
        .flat_map(|&i| x.data()[i * 4..(i + 1) * 4].to_vec())
        .collect();
    let y = forward_block("ega", &p, &x, &c);
    let yp = forward_block("ega", &p, &Tensor::new(&[1, 5, 4], xp).unwrap(), &c);
    for (j, &i) in perm.iter().enumerate() {
        for ch in 0..4 {
            assert!((yp.data()[j * 4 + ch] - y.data()[i * 4 + ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn cla_receptive_field_equals_kernel() {
    let c = BlockCfg { kernel: 5, ..CFG };
    let mut p = block_params("cla", &c, 1);
    randomize(&mut p, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 11, 4], 1.0);
    let y = forward_block("cla", &p, &x, &c);
    let mut bumped = x.data().to_vec();
    bumped[5 * 4 + 1] += 1.0;
    let y2 = forward_block("cla", &p, &Tensor::new(&[1, 11, 4], bumped).unwrap(), &c);
    let changed: Vec<usize> = (0..11)
        .filter(|&l| (0..4).any(|ch| (y.data()[l * 4 + ch] - y2.data()[l * 4 + ch]).abs() > 1e-12))
        .collect();
    assert_eq!(changed, vec![3, 4, 5, 6, 7]);
}

#[test]
fn block_gradients() {
    for kind in ["ega", "efn", "cla", "gl"] {
        let mut p = block_params(kind, &CFG, 1);
        randomize(&mut p, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut inputs = vec![rand_tensor(&mut rng, &[2, 5, 4], 1.0)];
        inputs.extend(p.tensors().iter().cloned());
        let rep = check_gradients(
            &inputs,
            |g, v| {
                let bound = Bound::from_vars(&p, v[1..].to_vec())?;
                let y = run_block(kind, g, &bound, v[0], &CFG)?;
                weighted_sum(g, y)
            },
            1e-5,
            6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{kind}: {rep:?}");
    }
}

fn micro_input(
    cfg: &ModelConfig,
    seed: u64,
) -> (corrnet::stft::ComplexSpectrogram<f64>, StftConfig) {
    let stft_cfg = StftConfig::half_overlap(2 * (cfg.bins - 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 6 frames
    let n = 5 * stft_cfg.hop();
    let data = (0..cfg.mics * n)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = Waveform::new(cfg.mics, 8000, data).unwrap();
    (stft(&w, stft_cfg).unwrap(), stft_cfg)
}

type ModuleFn = fn(&TfCorrNet<f64>, &mut Graph<f64>, &Bound<f64>, Var) -> Result<Var>;

#[test]
fn module_gradients_and_independence() {
    let cfg = micro_cfg();
    let mut net = TfCorrNet::<f64>::new(cfg.clone(), 3).unwrap();
    randomize(net.params_mut(), 21);
    let modules: [(&str, ModuleFn); 4] = [
        ("temporal", |n, g, p, h| n.temporal(g, p, 0, h)),
        ("frequency", |n, g, p, h| n.frequency(g, p, 0, h)),
        ("spectral", |n, g, p, h| n.spectral(g, p, 0, h)),
        ("stage", |n, g, p, h| n.stage(g, p, 0, h)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h0 = rand_tensor(&mut rng, &[6, 5, 8], 1.0);
    for (name, f) in modules {
        let params = net.params().clone();
        let mut inputs = vec![h0.clone()];
        inputs.extend(params.tensors().iter().cloned());
        let rep = check_gradients(
            &inputs,
            |g, v| {
                let bound = Bound::from_vars(&params, v[1..].to_vec())?;
                let y = f(&net, g, &bound, v[0])?;
                weighted_sum(g, y)
            },
            1e-5,
            4,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: {rep:?}");

        let eval = |h: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, false);
            let hv = g.constant(h.clone());
            let y = f(&net, &mut g, &p, hv).unwrap();
            assert_eq!(g.shape(y), h.shape());
            g.value(y).clone()
        };
        // perturb frame 2, bin 3
        let mut bumped = h0.data().to_vec();
        bumped[(2 * 5 + 3) * 8] += 0.5;
        let (a, b) = (eval(&h0), eval(&Tensor::new(&[6, 5, 8], bumped).unwrap()));
        for t in 0..6 {
            for f in 0..5 {
                let moved = (0..8).any(|c| {
                    (a.data()[(t * 5 + f) * 8 + c] - b.data()[(t * 5 + f) * 8 + c]).abs() > 1e-12
                });
                match name {
                    "temporal" if f != 3 => assert!(!moved, "temporal leaked to bin {f}"),
                    "frequency" if t != 2 => assert!(!moved, "frequency leaked to frame {t}"),
                    _ => {}
                }
            }
        }
    }
}

#[test]
fn encoder_gradient_and_constant_field() {
    let cfg = micro_cfg();
    let mut net = TfCorrNet::<f64>::new(cfg.clone(), 3).unwrap();
    randomize(net.params_mut(), 8);
    let params = net.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut inputs = vec![rand_tensor(&mut rng, &[4, 5, cfg.input_channels()], 1.0)];
    inputs.extend(params.tensors().iter().cloned());
    let rep = check_gradients(
        &inputs,
        |g, v| {
            let bound = Bound::from_vars(&params, v[1..].to_vec())?;
            let y = net.encoder(g, &bound, v[0])?;
            weighted_sum(g, y)
        },
        1e-5,
        6,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");

    let mut g = Graph::new();
    let p = net.params().bind(&mut g, false);
    let z = g.constant(Tensor::zeros(&[4, 5, cfg.input_channels()]));
    let y = net.encoder(&mut g, &p, z).unwrap();
    let d = g.value(y).data();
    for cell in d.chunks(8) {
        assert_eq!(cell, &d[..8]);
    }
    let bad = g.constant(Tensor::zeros(&[4, 5, 3]));
    assert!(net.encoder(&mut g, &p, bad).is_err());
}

#[test]
fn end_to_end_gradient_micro_config() {
    for (input_mode, output_mode) in [
        (InputMode::Correlation, OutputMode::Filtering),
        (InputMode::Raw, OutputMode::Mapping),
    ] {
        let cfg = ModelConfig {
            input_mode,
            output_mode,
            ..micro_cfg()
        };
        let mut net = TfCorrNet::<f64>::new(cfg.clone(), 3).unwrap();
        randomize(net.params_mut(), 31);
        let (x, _) = micro_input(&cfg, 4);
        assert_eq!(x.frames(), 6);
        let input = net.prepare(&x).unwrap();
        let params = net.params().clone();
        let rep = check_gradients(
            params.tensors(),
            |g, v| {
                let bound = Bound::from_vars(&params, v.to_vec())?;
                let y = net.forward(g, &bound, &input)?;
                weighted_sum(g, y)
            },
            1e-5,
            3,
        )
        .unwrap();
        assert!(
            rep.max_rel_err < 1e-4,
            "{input_mode:?}/{output_mode:?}: {rep:?}"
        );
    }
}

#[test]
fn desk_forward_shapes() {
    let cfg = ModelConfig::desk(2, 65);
    let net = TfCorrNet::<f32>::new(cfg.clone(), 0).unwrap();
    let w = Waveform::new(
        2,
        8000,
        (0..2 * 1600)
            .map(|i| ((i % 37) as f32 - 18.0) / 20.0)
            .collect(),
    )
    .unwrap();
    let x = stft(&w, StftConfig::half_overlap(128).unwrap()).unwrap();
    let ys = net.separate(&x).unwrap();
    assert_eq!(ys.len(), 2);
    for y in &ys {
        assert_eq!((y.channels(), y.frames(), y.bins()), (2, x.frames(), 65));
        assert!(y.re.iter().chain(&y.im).all(|v| v.is_finite()));
    }
    let w = net.estimate_filters(&x).unwrap();
    assert_eq!((w.sources, w.outputs, w.taps), (2, 2, 6));
    assert!(w.all_finite());

    let miso = ModelConfig {
        head_mode: HeadMode::Miso,
        ..cfg.clone()
    };
    assert_eq!(miso.taps(), 6);
    assert_eq!(
        TfCorrNet::<f32>::new(miso, 0)
            .unwrap()
            .separate(&x)
            .unwrap()[0]
            .channels(),
        1
    );
    let mimo7 = ModelConfig::desk(7, 65);
    assert_eq!((mimo7.outputs(), mimo7.taps()), (7, 21));
}

#[test]
fn deterministic_init_and_forward() {
    let cfg = ModelConfig::desk(2, 65);
    let a = TfCorrNet::<f32>::new(cfg.clone(), 9).unwrap();
    let b = TfCorrNet::<f32>::new(cfg.clone(), 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, TfCorrNet::<f32>::new(cfg, 10).unwrap());
}

#[test]
fn parameter_count_is_affine_in_stages() {
    let count = |r| {
        TfCorrNet::<f32>::new(
            ModelConfig {
                stages: r,
                ..ModelConfig::desk(2, 65)
            },
            0,
        )
        .unwrap()
        .num_params()
    };
    let (c1, c2, c3) = (count(1), count(2), count(3));
    assert!(c2 > c1);
    assert_eq!(c3 - c2, c2 - c1);
}

#[test]
fn spectral_frequency_projection_count() {
    let cfg = ModelConfig::desk(2, 65);
    let net = TfCorrNet::<f32>::new(cfg.clone(), 0).unwrap();
    let (f, fp) = (cfg.bins, cfg.spec_dim);
    let proj: usize = net
        .params()
        .names()
        .iter()
        .zip(net.params().tensors())
        .filter(|(n, _)| {
            n.starts_with("stage0.spectral.branch") && (n.contains(".fin.") || n.contains(".fout."))
        })
        .map(|(_, t)| t.len())
        .sum();
    assert_eq!(proj, 2 * (f * fp + fp) + 2 * (fp * f + f));
}

#[test]
fn published_config_parameter_count() {
    let net = TfCorrNet::<f32>::new(ModelConfig::published(7, 257), 0).unwrap();
    let n = net.num_params() as f64;
    assert!((n / 5.1e6 - 1.0).abs() < 0.15, "{n}");
}

#[test]
fn config_round_trips_through_kv() {
    let mut cfg = ModelConfig::published(7, 257);
    cfg.output_mode = OutputMode::Mapping;
    cfg.input_mode = InputMode::MagIpd;
    let mut kv = corrnet::config::KvConfig::new();
    cfg.write_kv(&mut kv);
    assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
    kv.set("dconv_kernel", 4);
    assert!(ModelConfig::from_kv(&kv).is_err());
}
