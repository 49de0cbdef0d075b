//! Seeded toy decoder-only transformer: token and position embeddings,
//! pre-norm attention and FFN blocks with residuals, final norm and an
//! output projection. Row-vector convention: `y = x · W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, SeededRng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    /// Longest sequence (prompt plus generated tokens) the model accepts.
    pub context: usize,
    /// FFN width as a multiple of the hidden size.
    pub ffn_mult: usize,
}

impl ModelShape {
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("model.head_dim", self.head_dim),
            ("model.vocab", self.vocab),
            ("model.context", self.context),
            ("model.ffn_mult", self.ffn_mult),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::Config("model.vocab too large".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub ln_attn: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub q_bias: Vec<f64>,
    pub ln_ffn: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub shape: ModelShape,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<Layer>,
    pub ln_final: LayerNorm,
    pub unembedding: Matrix,
}

/// `x · W` for a row vector `x`.
pub fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn to_heads(flat: Vec<f64>, heads: usize, head_dim: usize) -> Matrix {
    Matrix::from_vec(heads, head_dim, flat).expect("projection width is heads * head_dim")
}

fn unit_vector(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

impl ToyModel {
    /// Gaussian-initialized weights, fully determined by `(shape, seed)`.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        Self::with_skew(shape, seed, 0.0)
    }

    /// Like [`ToyModel::new`], plus a per-head salience direction that makes
    /// attention heavy-tailed: every key gets a component along a unit
    /// direction `u` proportional to its projection on a random hidden
    /// direction `w`, and every query a bias along `u`. The added logit of a
    /// key is then `skew · (LN(x)·w)`, a per-token importance that does not
    /// depend on the query. `skew = 0` disables it.
    pub fn with_skew(shape: ModelShape, seed: u64, skew: f64) -> Result<Self> {
        shape.validate()?;
        if !(skew >= 0.0 && skew.is_finite()) {
            return Err(Error::Config(format!(
                "model.skew must be finite and >= 0, got {skew}"
            )));
        }
        let mut rng = SeededRng::new(seed);
        let h = shape.hidden();
        let f = shape.ffn_dim();
        let proj = 1.0 / (h as f64).sqrt();
        let token_embedding = rng.normal_matrix(shape.vocab, h, 1.0);
        let position_embedding = rng.normal_matrix(shape.context, h, 1.0);
        let mut layers = Vec::with_capacity(shape.layers);
        for _ in 0..shape.layers {
            let mut layer = Layer {
                ln_attn: LayerNorm::new(h),
                wq: rng.normal_matrix(h, h, proj),
                wk: rng.normal_matrix(h, h, proj),
                wv: rng.normal_matrix(h, h, proj),
                wo: rng.normal_matrix(h, h, proj),
                q_bias: vec![0.0; h],
                ln_ffn: LayerNorm::new(h),
                w1: rng.normal_matrix(h, f, proj),
                b1: vec![0.0; f],
                w2: rng.normal_matrix(f, h, 1.0 / (f as f64).sqrt()),
                b2: vec![0.0; h],
            };
            if skew > 0.0 {
                let gain = (skew * (shape.head_dim as f64).sqrt()).sqrt();
                for head in 0..shape.heads {
                    let u = unit_vector(&mut rng, shape.head_dim);
                    let w = unit_vector(&mut rng, h);
                    for (c, &uc) in u.iter().enumerate() {
                        let col = head * shape.head_dim + c;
                        layer.q_bias[col] = gain * uc;
                        for (i, &wi) in w.iter().enumerate() {
                            let cur = layer.wk.get(i, col);
                            layer.wk.set(i, col, cur + gain * wi * uc);
                        }
                    }
                }
            }
            layers.push(layer);
        }
        Ok(ToyModel {
            shape,
            token_embedding,
            position_embedding,
            layers,
            ln_final: LayerNorm::new(h),
            unembedding: rng.normal_matrix(h, shape.vocab, proj),
        })
    }

    pub fn embed(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        if token >= self.shape.vocab {
            return Err(Error::contract(format!(
                "token {token} outside vocabulary of {}",
                self.shape.vocab
            )));
        }
        if position >= self.shape.context {
            return Err(Error::ContextOverflow {
                len: position + 1,
                context: self.shape.context,
            });
        }
        Ok(self
            .token_embedding
            .row(token)
            .iter()
            .zip(self.position_embedding.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Query, key and value of one token at `layer`, each `heads × head_dim`,
    /// from the layer's residual input `x`.
    pub fn qkv(&self, layer: usize, x: &[f64]) -> (Matrix, Matrix, Matrix) {
        let l = &self.layers[layer];
        let a = l.ln_attn.apply(x);
        let mut q = vec_mat(&a, &l.wq);
        for (qi, b) in q.iter_mut().zip(&l.q_bias) {
            *qi += b;
        }
        let (hs, d) = (self.shape.heads, self.shape.head_dim);
        (
            to_heads(q, hs, d),
            to_heads(vec_mat(&a, &l.wk), hs, d),
            to_heads(vec_mat(&a, &l.wv), hs, d),
        )
    }

    /// Key and value only; what recomputation of a dropped entry needs.
    pub fn kv(&self, layer: usize, x: &[f64]) -> (Matrix, Matrix) {
        let l = &self.layers[layer];
        let a = l.ln_attn.apply(x);
        let (hs, d) = (self.shape.heads, self.shape.head_dim);
        (
            to_heads(vec_mat(&a, &l.wk), hs, d),
            to_heads(vec_mat(&a, &l.wv), hs, d),
        )
    }

    /// Residual update after attention: `x + concat(heads) · Wo`.
    pub fn attention_residual(&self, layer: usize, x: &[f64], attn: &Matrix) -> Vec<f64> {
        let out = vec_mat(attn.data(), &self.layers[layer].wo);
        x.iter().zip(&out).map(|(a, b)| a + b).collect()
    }

    /// Residual update through the FFN block.
    pub fn ffn_residual(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let l = &self.layers[layer];
        let a = l.ln_ffn.apply(x);
        let hidden: Vec<f64> = vec_mat(&a, &l.w1)
            .iter()
            .zip(&l.b1)
            .map(|(v, b)| gelu(v + b))
            .collect();
        let out = vec_mat(&hidden, &l.w2);
        x.iter()
            .zip(out.iter().zip(&l.b2))
            .map(|(v, (o, b))| v + o + b)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        vec_mat(&self.ln_final.apply(x), &self.unembedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ModelShape {
        ModelShape {
            layers: 2,
            heads: 2,
            head_dim: 4,
            vocab: 16,
            context: 32,
            ffn_mult: 2,
        }
    }

    #[test]
    fn deterministic_from_seed() {
        let a = ToyModel::new(shape(), 3).unwrap();
        let b = ToyModel::new(shape(), 3).unwrap();
        let c = ToyModel::new(shape(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn layer_norm_standardizes() {
        let ln = LayerNorm::new(4);
        let y = ln.apply(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn skew_adds_query_independent_key_salience() {
        let plain = ToyModel::new(shape(), 9).unwrap();
        let skewed = ToyModel::with_skew(shape(), 9, 3.0).unwrap();
        assert_eq!(plain.token_embedding, skewed.token_embedding);
        assert_ne!(plain.layers[0].wk, skewed.layers[0].wk);
        assert!(skewed.layers[0].q_bias.iter().any(|&b| b != 0.0));
        let x = skewed.embed(1, 0).unwrap();
        let (q, k, v) = skewed.qkv(0, &x);
        assert!(q.is_finite() && k.is_finite() && v.is_finite());
    }

    #[test]
    fn out_of_range_inputs() {
        let m = ToyModel::new(shape(), 1).unwrap();
        assert!(matches!(m.embed(16, 0), Err(Error::Contract(_))));
        assert!(matches!(m.embed(0, 32), Err(Error::ContextOverflow { .. })));
    }
}
