use serde::{Deserialize, Serialize};

use crate::numerics::{Rng, Tensor};

use super::{const_param, normal_param, BlockError, InitScale, Result, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_heads: usize,
}

/// Keys and values of every position seen so far, per head.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub heads: usize,
    pub head_dim: usize,
    pub len: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        KvCache {
            heads,
            head_dim,
            len: 0,
            k: vec![Vec::new(); heads],
            v: vec![Vec::new(); heads],
        }
    }

    pub fn bytes(&self) -> usize {
        2 * self.len * self.heads * self.head_dim * std::mem::size_of::<f64>()
    }

    fn append(&mut self, k: &[f64], v: &[f64], rows: usize) {
        let d = self.head_dim;
        for h in 0..self.heads {
            self.k[h].extend_from_slice(&k[h * rows * d..(h + 1) * rows * d]);
            self.v[h].extend_from_slice(&v[h * rows * d..(h + 1) * rows * d]);
        }
        self.len += rows;
    }

    fn stacked(&self, which: &[Vec<f64>]) -> Result<Tensor> {
        let data = which.iter().flat_map(|rows| rows.iter().copied()).collect();
        Ok(Tensor::new([self.heads, self.len, self.head_dim], data)?)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub d_model: usize,
    pub n_heads: usize,
    pub norm1: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm2: Tensor,
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

impl AttentionBlock {
    pub fn new(
        d_model: usize,
        intermediate: usize,
        cfg: &AttentionConfig,
        init: InitScale,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.n_heads == 0 || d_model % cfg.n_heads != 0 {
            return Err(BlockError::InvalidConfig(format!(
                "{} heads do not divide d_model {d_model}",
                cfg.n_heads
            )));
        }
        if intermediate == 0 {
            return Err(BlockError::InvalidConfig(
                "intermediate size must be positive".into(),
            ));
        }
        let d = d_model;
        Ok(AttentionBlock {
            d_model,
            n_heads: cfg.n_heads,
            norm1: const_param(&[d], 1.0),
            wq: normal_param(rng, &[d, d], init.std),
            wk: normal_param(rng, &[d, d], init.std),
            wv: normal_param(rng, &[d, d], init.std),
            wo: normal_param(rng, &[d, d], init.out_std),
            norm2: const_param(&[d], 1.0),
            gate: normal_param(rng, &[d, intermediate], init.std),
            up: normal_param(rng, &[d, intermediate], init.std),
            down: normal_param(rng, &[intermediate, d], init.out_std),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm1.weight", &self.norm1),
            ("q_proj.weight", &self.wq),
            ("k_proj.weight", &self.wk),
            ("v_proj.weight", &self.wv),
            ("o_proj.weight", &self.wo),
            ("norm2.weight", &self.norm2),
            ("mlp.gate.weight", &self.gate),
            ("mlp.up.weight", &self.up),
            ("mlp.down.weight", &self.down),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("norm1.weight", &mut self.norm1),
            ("q_proj.weight", &mut self.wq),
            ("k_proj.weight", &mut self.wk),
            ("v_proj.weight", &mut self.wv),
            ("o_proj.weight", &mut self.wo),
            ("norm2.weight", &mut self.norm2),
            ("mlp.gate.weight", &mut self.gate),
            ("mlp.up.weight", &mut self.up),
            ("mlp.down.weight", &mut self.down),
        ]
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.n_heads, self.head_dim())
    }

    fn heads_first(&self, t: &Tensor, l: usize) -> Result<Tensor> {
        Ok(t.reshape([l, self.n_heads, self.head_dim()])?
            .permute(&[1, 0, 2])?)
    }

    /// `x: [L, d]`. With a cache, `x` continues the cached prefix and its
    /// keys and values are appended.
    pub fn forward(&self, x: &Tensor, cache: Option<&mut KvCache>) -> Result<Tensor> {
        let (l, d) = (x.shape()[0], self.d_model);
        let u = x.rms_norm(&self.norm1, NORM_EPS)?;
        let q = self.heads_first(&u.matmul(&self.wq)?, l)?;
        let k = self.heads_first(&u.matmul(&self.wk)?, l)?;
        let v = self.heads_first(&u.matmul(&self.wv)?, l)?;
        let attended = match cache {
            Some(cache) => {
                if cache.heads != self.n_heads || cache.head_dim != self.head_dim() {
                    return Err(BlockError::CacheLengthMismatch {
                        heads: self.n_heads,
                        head_dim: self.head_dim(),
                        got: cache.heads,
                        width: cache.head_dim,
                    });
                }
                cache.append(k.data(), v.data(), l);
                if cache.len == l {
                    Tensor::causal_attention(&q, &k, &v)?
                } else {
                    Tensor::causal_attention(
                        &q,
                        &cache.stacked(&cache.k)?,
                        &cache.stacked(&cache.v)?,
                    )?
                }
            }
            None => Tensor::causal_attention(&q, &k, &v)?,
        };
        let attended = attended.permute(&[1, 0, 2])?.reshape([l, d])?;
        let h = x.add(&attended.matmul(&self.wo)?)?;
        let m = h.rms_norm(&self.norm2, NORM_EPS)?;
        let mlp = m
            .matmul(&self.gate)?
            .silu()?
            .mul(&m.matmul(&self.up)?)?
            .matmul(&self.down)?;
        Ok(h.add(&mlp)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_passes_value_through() {
        let mut rng = Rng::new(3);
        let mut block = AttentionBlock::new(
            4,
            6,
            &AttentionConfig { n_heads: 2 },
            InitScale::for_depth(1),
            &mut rng,
        )
        .unwrap();
        for (name, p) in block.params_mut() {
            if name.starts_with("mlp") {
                *p = Tensor::zeros(p.shape().to_vec());
            }
        }
        let x = Tensor::new([1, 4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let u = x.rms_norm(&block.norm1, NORM_EPS).unwrap();
        let expected = x
            .add(&u.matmul(&block.wv).unwrap().matmul(&block.wo).unwrap())
            .unwrap();
        let y = block.forward(&x, None).unwrap();
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_foreign_cache() {
        let mut rng = Rng::new(3);
        let block = AttentionBlock::new(
            4,
            6,
            &AttentionConfig { n_heads: 2 },
            InitScale::for_depth(1),
            &mut rng,
        )
        .unwrap();
        let mut cache = KvCache::new(4, 1);
        let x = Tensor::zeros([1, 4]);
        assert!(matches!(
            block.forward(&x, Some(&mut cache)),
            Err(BlockError::CacheLengthMismatch { .. })
        ));
    }
}
