use hybridna::generate::{
    beam_search, candidate_log_probs, candidates, generate, rescore, GenRequest, GenerateError,
    Stop, Strategy,
};
use hybridna::model::{desk_config, Interleave, LayerKind, Model, ModelConfig};
use hybridna::numerics::Rng;
use hybridna::tokenizer::{BOS, EOS};

fn micro() -> ModelConfig {
    let mut cfg = desk_config();
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.intermediate_size = 32;
    cfg.ssd.head_dim = 8;
    cfg.ssd.state = 4;
    cfg.ssd.chunk = 4;
    cfg.interleave = Interleave::Explicit(vec![LayerKind::Mamba, LayerKind::Attention]);
    cfg
}

/// A model with sharpened weights so its next-token distributions are far
/// from uniform.
fn peaked_model(seed: u64) -> Model {
    let mut model = Model::build(&micro(), &mut Rng::new(seed)).unwrap();
    for (_, p) in model.named_parameters_mut() {
        if p.ndim() == 2 {
            *p = p.scale(40.0).unwrap().detach_param();
        }
    }
    model
}

fn request(prompt: &[u32], n: usize, strategy: Strategy) -> GenRequest {
    GenRequest {
        prompt: prompt.to_vec(),
        max_new_tokens: n,
        strategy,
        seed: 7,
        stop: Stop::Length,
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..5 {
        let model = peaked_model(seed);
        let greedy = generate(&model, &request(&[BOS], 24, Strategy::Greedy)).unwrap();
        let beam = beam_search(&model, &[BOS], 1, 24).unwrap();
        assert_eq!(greedy[0].ids, beam[0].ids);
        assert_eq!(greedy[0].log_probs, beam[0].log_probs);
    }
}

#[test]
fn cold_sampling_is_greedy() {
    let model = peaked_model(1);
    let greedy = generate(&model, &request(&[BOS, 0, 1], 20, Strategy::Greedy)).unwrap();
    let cold = generate(
        &model,
        &request(
            &[BOS, 0, 1],
            20,
            Strategy::Sample {
                temperature: 1e-6,
                top_k: None,
            },
        ),
    )
    .unwrap();
    assert_eq!(greedy[0].ids, cold[0].ids);
    let top1 = generate(
        &model,
        &request(
            &[BOS, 0, 1],
            20,
            Strategy::Sample {
                temperature: 5.0,
                top_k: Some(1),
            },
        ),
    )
    .unwrap();
    assert_eq!(greedy[0].ids, top1[0].ids);
}

#[test]
fn sampling_is_seeded() {
    let model = peaked_model(2);
    let hot = Strategy::Sample {
        temperature: 2.0,
        top_k: None,
    };
    let a = generate(&model, &request(&[BOS], 40, hot.clone())).unwrap();
    let b = generate(&model, &request(&[BOS], 40, hot.clone())).unwrap();
    assert_eq!(a, b);
    let mut other = request(&[BOS], 40, hot);
    other.seed = 8;
    assert_ne!(generate(&model, &other).unwrap()[0].ids, a[0].ids);
}

#[test]
fn stateful_log_probs_match_full_rescoring() {
    let model = peaked_model(3);
    let strategies = [
        Strategy::Greedy,
        Strategy::Sample {
            temperature: 1.0,
            top_k: Some(3),
        },
        Strategy::Beam { width: 5 },
    ];
    for strategy in strategies {
        for stop in [Stop::Length, Stop::Eos] {
            let mut req = request(&[BOS, 2, 2], 48, strategy.clone());
            req.stop = stop;
            for r in generate(&model, &req).unwrap() {
                assert!(r.ids.iter().all(|&t| t < 4 || t == EOS));
                let again = rescore(&model, &req.prompt, &r.ids, stop).unwrap();
                for (a, b) in r.log_probs.iter().zip(&again) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
                let total: f64 = r.log_probs.iter().sum();
                assert!((total - r.total_log_prob).abs() < 1e-9);
            }
        }
    }
}

fn brute_force(model: &Model, prompt: &[u32], len: usize) -> Vec<(Vec<u32>, f64)> {
    let frozen = model.frozen();
    let cands = candidates(Stop::Length);
    let mut all = Vec::new();
    for code in 0..4usize.pow(len as u32) {
        let seq: Vec<u32> = (0..len)
            .map(|i| ((code / 4usize.pow((len - 1 - i) as u32)) % 4) as u32)
            .collect();
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&seq[..len - 1]);
        let logits = frozen.forward(&ids).unwrap();
        let v = logits.shape()[1];
        let total: f64 = seq
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &logits.data()[(prompt.len() - 1 + i) * v..(prompt.len() + i) * v];
                candidate_log_probs(row, &cands)[t as usize]
            })
            .sum();
        all.push((seq, total));
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all
}

#[test]
fn exhaustive_beam_matches_enumeration() {
    for (seed, len) in [(4u64, 3usize), (5, 6)] {
        let model = peaked_model(seed);
        let prompt = [BOS, 3];
        let width = 4usize.pow(len as u32);
        let beams = beam_search(&model, &prompt, width, len).unwrap();
        let truth = brute_force(&model, &prompt, len);
        assert_eq!(beams.len(), width);
        for (b, (ids, total)) in beams.iter().zip(&truth) {
            assert_eq!(&b.ids, ids);
            assert!((b.total_log_prob - total).abs() < 1e-8);
        }
        assert!(beams
            .windows(2)
            .all(|w| w[0].total_log_prob >= w[1].total_log_prob));
        let narrow = beam_search(&model, &prompt, 8, len).unwrap();
        assert_eq!(narrow, beam_search(&model, &prompt, 8, len).unwrap());
        assert!(narrow[0].total_log_prob <= truth[0].1 + 1e-8);
    }
}

#[test]
fn request_validation() {
    let model = peaked_model(6);
    let overflow = request(&[BOS], model.config.max_context, Strategy::Greedy);
    assert!(matches!(
        generate(&model, &overflow),
        Err(GenerateError::ContextOverflow { .. })
    ));
    assert!(matches!(
        generate(&model, &request(&[], 4, Strategy::Greedy)),
        Err(GenerateError::EmptyPrompt)
    ));
    assert!(matches!(
        generate(&model, &request(&[BOS], 4, Strategy::Beam { width: 0 })),
        Err(GenerateError::InvalidRequest(_))
    ));
}
