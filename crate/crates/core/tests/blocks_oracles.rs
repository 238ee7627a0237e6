use hybridna::blocks::{AttentionBlock, AttentionConfig, InitScale, Mamba2Block, SsdConfig};
use hybridna::numerics::gradcheck::check_gradients;
use hybridna::numerics::{Rng, Tensor};

fn ssd_cfg(chunk: usize) -> SsdConfig {
    SsdConfig {
        n_heads: 4,
        head_dim: 4,
        state: 3,
        expansion: 2,
        conv_width: 4,
        groups: 2,
        chunk,
    }
}

/// Random weights of a realistic magnitude (the default init makes the
/// residual branches tiny, which would hide errors).
fn randomize(params: Vec<(&'static str, &mut Tensor)>, rng: &mut Rng) {
    for (name, p) in params {
        let data = match name {
            "a_log" => (0..p.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            "dt_bias" => (0..p.len()).map(|_| rng.uniform_range(-1.0, 0.5)).collect(),
            n if n.contains("norm") => (0..p.len()).map(|_| rng.uniform_range(0.5, 1.5)).collect(),
            _ => rng.normal_vec(p.len(), 0.4),
        };
        *p = Tensor::param(p.shape().to_vec(), data).unwrap();
    }
}

fn mamba(rng: &mut Rng, chunk: usize) -> Mamba2Block {
    let mut b = Mamba2Block::new(8, &ssd_cfg(chunk), InitScale::for_depth(2), rng).unwrap();
    randomize(b.params_mut(), rng);
    b
}

fn attention(rng: &mut Rng) -> AttentionBlock {
    let mut b = AttentionBlock::new(
        8,
        12,
        &AttentionConfig { n_heads: 2 },
        InitScale::for_depth(2),
        rng,
    )
    .unwrap();
    randomize(b.params_mut(), rng);
    b
}

fn input(rng: &mut Rng, l: usize) -> Tensor {
    Tensor::new([l, 8], rng.normal_vec(l * 8, 1.0)).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn rmsnorm_examples() {
    let one = Tensor::new([2], vec![1.0, 1.0]).unwrap();
    let y = Tensor::new([1, 2], vec![3.0, 4.0])
        .unwrap()
        .rms_norm(&one, 0.0)
        .unwrap();
    assert!((y.data()[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-15);
    assert!((y.data()[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-15);
    let z = Tensor::zeros([1, 2]).rms_norm(&one, 1e-6).unwrap();
    assert_eq!(z.data(), &[0.0, 0.0]);
    let mut rng = Rng::new(0);
    let x = input(&mut rng, 3);
    let g = Tensor::new([8], rng.normal_vec(8, 1.0)).unwrap();
    let a = x.rms_norm(&g, 0.0).unwrap();
    let b = x.scale(7.5).unwrap().rms_norm(&g, 0.0).unwrap();
    assert!(max_diff(a.data(), b.data()) < 1e-14);
}

#[test]
fn uniform_scores_average_causally() {
    let mut rng = Rng::new(4);
    let mut block = attention(&mut rng);
    block.wq = Tensor::zeros([8, 8]);
    block.wk = Tensor::zeros([8, 8]);
    block.down = Tensor::zeros([12, 8]);
    let x = input(&mut rng, 5);
    let y = block.forward(&x, None).unwrap();
    let v = x
        .rms_norm(&block.norm1, 1e-6)
        .unwrap()
        .matmul(&block.wv)
        .unwrap();
    for t in 0..5 {
        let mut mean = [0.0; 8];
        for s in 0..=t {
            for j in 0..8 {
                mean[j] += v.data()[s * 8 + j] / (t + 1) as f64;
            }
        }
        let m = Tensor::new([1, 8], mean.to_vec())
            .unwrap()
            .matmul(&block.wo)
            .unwrap();
        for j in 0..8 {
            assert!((y.data()[t * 8 + j] - x.data()[t * 8 + j] - m.data()[j]).abs() < 1e-13);
        }
    }
}

#[test]
fn kv_cache_decode_matches_full_forward() {
    let mut rng = Rng::new(5);
    let block = attention(&mut rng);
    let x = input(&mut rng, 256);
    let full = block.forward(&x, None).unwrap();
    let mut cache = block.empty_cache();
    let mut steps = Vec::new();
    let prefix = block
        .forward(&x.slice(0, 0, 100).unwrap(), Some(&mut cache))
        .unwrap();
    steps.extend_from_slice(prefix.data());
    for t in 100..256 {
        steps.extend_from_slice(
            block
                .forward(&x.slice(0, t, t + 1).unwrap(), Some(&mut cache))
                .unwrap()
                .data(),
        );
    }
    assert_eq!(cache.len, 256);
    assert!(max_diff(full.data(), &steps) < 1e-10);
}

#[test]
fn mamba_state_decode_matches_full_forward() {
    let mut rng = Rng::new(6);
    let block = mamba(&mut rng, 16);
    let x = input(&mut rng, 256);
    let full = block.forward(&x, None).unwrap();
    let mut state = block.empty_state();
    let mut steps = Vec::new();
    let prefix = block
        .forward(&x.slice(0, 0, 37).unwrap(), Some(&mut state))
        .unwrap();
    steps.extend_from_slice(prefix.data());
    for t in 37..256 {
        steps.extend_from_slice(
            block
                .forward(&x.slice(0, t, t + 1).unwrap(), Some(&mut state))
                .unwrap()
                .data(),
        );
    }
    assert_eq!(state.ssd.position, 256);
    assert!(
        max_diff(full.data(), &steps) < 1e-9,
        "{}",
        max_diff(full.data(), &steps)
    );
}

#[test]
fn both_blocks_are_causal() {
    let mut rng = Rng::new(7);
    let m = mamba(&mut rng, 4);
    let a = attention(&mut rng);
    let x = input(&mut rng, 12);
    for t in 0..12 {
        let mut data = x.to_vec();
        for j in 0..8 {
            data[t * 8 + j] += rng.normal();
        }
        let xp = Tensor::new([12, 8], data).unwrap();
        for (y0, y1) in [
            (m.forward(&x, None).unwrap(), m.forward(&xp, None).unwrap()),
            (a.forward(&x, None).unwrap(), a.forward(&xp, None).unwrap()),
        ] {
            assert_eq!(&y0.data()[..t * 8], &y1.data()[..t * 8]);
            assert_ne!(&y0.data()[t * 8..], &y1.data()[t * 8..]);
        }
    }
}

fn weights(seed: u64, l: usize) -> Tensor {
    Tensor::new([l, 8], Rng::new(seed).normal_vec(l * 8, 1.0)).unwrap()
}

#[test]
fn mamba_gradients_match_finite_differences() {
    let mut rng = Rng::new(8);
    let block = mamba(&mut rng, 4);
    let x = input(&mut rng, 6);
    let mut inputs: Vec<Tensor> = vec![x];
    inputs.extend(block.params().into_iter().map(|(_, p)| p.detach()));
    let w = weights(1, 6);
    let report = check_gradients(
        |t: &[Tensor]| {
            let mut b = block.clone();
            for ((_, p), v) in b.params_mut().into_iter().zip(&t[1..]) {
                *p = v.clone();
            }
            b.forward(&t[0], None)
                .map_err(|e| match e {
                    hybridna::blocks::BlockError::Numerics(e) => e,
                    other => panic!("{other}"),
                })?
                .mul(&w)?
                .sum()
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = Rng::new(9);
    let block = attention(&mut rng);
    let x = input(&mut rng, 6);
    let mut inputs: Vec<Tensor> = vec![x];
    inputs.extend(block.params().into_iter().map(|(_, p)| p.detach()));
    let w = weights(2, 6);
    let report = check_gradients(
        |t: &[Tensor]| {
            let mut b = block.clone();
            for ((_, p), v) in b.params_mut().into_iter().zip(&t[1..]) {
                *p = v.clone();
            }
            b.forward(&t[0], None)
                .map_err(|e| match e {
                    hybridna::blocks::BlockError::Numerics(e) => e,
                    other => panic!("{other}"),
                })?
                .mul(&w)?
                .sum()
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn attention_cost_is_quadratic_mamba_linear() {
    use hybridna::numerics::counters;
    let mut rng = Rng::new(10);
    let a = AttentionBlock::new(
        32,
        64,
        &AttentionConfig { n_heads: 2 },
        InitScale::for_depth(1),
        &mut rng,
    )
    .unwrap();
    let cfg = SsdConfig {
        n_heads: 4,
        head_dim: 16,
        state: 16,
        expansion: 2,
        conv_width: 4,
        groups: 1,
        chunk: 64,
    };
    let m = Mamba2Block::new(32, &cfg, InitScale::for_depth(1), &mut rng).unwrap();
    let lens = [1024usize, 2048, 4096, 8192];
    let mut at = Vec::new();
    let mut mt = Vec::new();
    for &l in &lens {
        let x = Tensor::new([l, 32], rng.normal_vec(l * 32, 1.0)).unwrap();
        counters::reset_madds();
        a.forward(&x, None).unwrap();
        at.push(counters::madds() as f64);
        counters::reset_madds();
        m.forward(&x, None).unwrap();
        mt.push(counters::madds() as f64);
    }
    let slope = |ys: &[f64]| (ys[3] / ys[0]).ln() / 8f64.ln();
    assert!(slope(&at) >= 1.8, "attention slope {}", slope(&at));
    assert!(slope(&mt) <= 1.05, "mamba slope {}", slope(&mt));
}
