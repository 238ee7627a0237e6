use hybridna::model::{
    desk_config, Checkpoint, Interleave, LayerKind, Model, ModelConfig, ModelError,
};
use hybridna::numerics::gradcheck::check_gradients;
use hybridna::numerics::{Rng, Tensor};

fn micro() -> ModelConfig {
    let mut cfg = desk_config();
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.intermediate_size = 12;
    cfg.ssd.n_heads = 2;
    cfg.ssd.head_dim = 8;
    cfg.ssd.state = 4;
    cfg.ssd.chunk = 4;
    cfg.attn.n_heads = 2;
    cfg.interleave = Interleave::Explicit(vec![LayerKind::Mamba, LayerKind::Attention]);
    cfg
}

/// Scales up the residual-branch weights so every path carries signal.
fn energize(model: &mut Model, rng: &mut Rng) {
    for (name, p) in model.named_parameters_mut() {
        if name.ends_with("a_log") || name.ends_with("dt_bias") || name.contains("norm") {
            continue;
        }
        let data = rng.normal_vec(p.len(), 0.3);
        *p = Tensor::param(p.shape().to_vec(), data).unwrap();
    }
}

fn random_ids(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

#[test]
fn interleave_and_no_positional_parameters() {
    for n_layers in [8, 16, 24, 32] {
        let mut cfg = desk_config();
        cfg.n_layers = n_layers;
        cfg.d_model = 16;
        cfg.intermediate_size = 16;
        cfg.ssd.head_dim = 8;
        cfg.ssd.state = 4;
        let model = Model::build(&cfg, &mut Rng::new(n_layers as u64)).unwrap();
        assert!(!model.is_attention(0));
        for i in 0..n_layers {
            assert_eq!(model.is_attention(i), i % 8 == 3, "layer {i}");
        }
        for (name, _) in model.named_parameters() {
            let lower = name.to_lowercase();
            assert!(
                !lower.contains("pos") && !lower.contains("rope") && !lower.contains("rotary"),
                "{name}"
            );
        }
        assert_eq!(model.parameter_count(), cfg.parameter_count().unwrap());
    }
}

#[test]
fn desk_parameter_count_near_target() {
    let cfg = desk_config();
    let model = Model::build(&cfg, &mut Rng::new(0)).unwrap();
    let count = model.parameter_count() as f64;
    assert_eq!(count as usize, cfg.parameter_count().unwrap());
    assert!((count - 1.1e6).abs() <= 0.2 * 1.1e6, "{count}");
}

#[test]
fn logits_shape_and_context_limit() {
    let mut cfg = micro();
    cfg.max_context = 10;
    let model = Model::build(&cfg, &mut Rng::new(1)).unwrap();
    let logits = model.forward(&[4, 0, 1, 2]).unwrap();
    assert_eq!(logits.shape(), &[4, 8]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
    assert_eq!(
        model.forward(&[0; 11]).unwrap_err(),
        ModelError::ContextOverflow { len: 11, max: 10 }
    );
    assert!(matches!(
        model.forward(&[0, 99]),
        Err(ModelError::TokenOutOfRange { id: 99, .. })
    ));
}

#[test]
fn model_is_causal() {
    let mut rng = Rng::new(2);
    let mut model = Model::build(&micro(), &mut rng).unwrap();
    energize(&mut model, &mut rng);
    let ids = random_ids(&mut rng, 16, 8);
    let base = model.forward(&ids).unwrap();
    for t in 1..16 {
        let mut changed = ids.clone();
        for id in &mut changed[t..] {
            *id = (*id + 1 + rng.below(7) as u32) % 8;
        }
        let other = model.forward(&changed).unwrap();
        assert_eq!(&base.data()[..t * 8], &other.data()[..t * 8]);
    }
}

#[test]
fn stateful_decoding_matches_full_forward() {
    let mut rng = Rng::new(3);
    let mut model = Model::build(&desk_config(), &mut rng).unwrap();
    energize(&mut model, &mut rng);
    let ids = random_ids(&mut rng, 256, 8);
    let full = model.forward(&ids).unwrap();
    let mut state = model.decode_state();
    let mut steps = model
        .forward_stateful(&ids[..5], &mut state)
        .unwrap()
        .to_vec();
    for &id in &ids[5..] {
        steps.extend(model.forward_stateful(&[id], &mut state).unwrap().to_vec());
    }
    assert_eq!(state.position, 256);
    let diff = full
        .data()
        .iter()
        .zip(&steps)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    let mut rng = Rng::new(4);
    let mut model = Model::build(&micro(), &mut rng).unwrap();
    energize(&mut model, &mut rng);
    let ids = random_ids(&mut rng, 7, 8);
    let targets: Vec<Option<u32>> = ids[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let inputs: Vec<Tensor> = model
        .named_parameters()
        .into_iter()
        .map(|(_, t)| t.detach())
        .collect();
    let report = check_gradients(
        |params: &[Tensor]| {
            let mut m = model.clone();
            for ((_, p), v) in m.named_parameters_mut().into_iter().zip(params) {
                *p = v.clone();
            }
            let logits = m.forward(&ids).map_err(|e| match e {
                ModelError::Numerics(e) => e,
                other => panic!("{other}"),
            })?;
            Tensor::cross_entropy(&logits, &targets)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hydn");
    let mut rng = Rng::new(5);
    let model = Model::build(&micro(), &mut rng).unwrap();
    Checkpoint::from_model(&model, 3, Some(rng))
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path, Some(&micro()))
        .unwrap()
        .restore_model()
        .unwrap();
    let ids = [4, 1, 2, 3, 0];
    let a = model.forward(&ids).unwrap();
    let b = loaded.forward(&ids).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        Checkpoint::load(&path, None),
        Err(ModelError::CorruptCheckpoint(_))
    ));
}
