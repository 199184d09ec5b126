//! Dense building blocks over the tape.

use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{AttnGroups, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[d_out], d_in, rng);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add_values(&format!("{name}.g"), &[d], vec![1.0; d]);
        let bias = store.add_zeros(&format!("{name}.b"), &[d]);
        Self { gain, bias }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.layer_norm(x, LN_EPS);
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ctx: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d_ctx, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d_ctx, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Attention of `x` over `ctx` restricted to `groups`.
    pub fn forward_grouped(&self, t: &mut Tape, x: Var, ctx: Var, groups: Rc<AttnGroups>) -> Var {
        let q = self.q.forward(t, x);
        let k = self.k.forward(t, ctx);
        let v = self.v.forward(t, ctx);
        let a = t.attention(q, k, v, self.heads, groups);
        self.o.forward(t, a)
    }

    /// Every query row attends to every context row.
    pub fn forward(&self, t: &mut Tape, x: Var, ctx: Var) -> Var {
        let nq = t.dims(x).0;
        let nk = t.dims(ctx).0;
        self.forward_grouped(t, x, ctx, Rc::new(AttnGroups::full(nq, nk)))
    }
}

/// Cross-attention of `queries` over `context`.
pub fn cross_attention(t: &mut Tape, attn: &MultiHeadAttention, queries: Var, context: Var) -> Var {
    attn.forward(t, queries, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_passes_input() {
        let mut s = ParamStore::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = s.add_values("w", &[3, 3], eye);
        let b = s.add_zeros("b", &[3]);
        let lin = Linear { w, b, d_in: 3, d_out: 3 };
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1.0, -2.0, 3.5, 0.0, 4.0, 5.0], &[2, 3]);
        let y = lin.forward(&mut t, x);
        assert_eq!(t.value(y), &[1.0, -2.0, 3.5, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![2.5; 6], &[1, 6]);
        let y = t.layer_norm(x, LN_EPS);
        assert!(t.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_context_token_broadcasts_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut s, "x", 8, 6, 2, &mut rng);
        let mut t = Tape::new(&s);
        let q = t.constant((0..32).map(|i| (i as f64 * 0.37).sin()).collect(), &[4, 8]);
        let c = t.constant((0..6).map(|i| i as f64 * 0.1 - 0.2).collect(), &[1, 6]);
        let y = cross_attention(&mut t, &attn, q, c);
        let v = attn.v.forward(&mut t, c);
        let o = attn.o.forward(&mut t, v);
        let want = t.value(o).to_vec();
        for r in 0..4 {
            for (a, b) in t.value(y)[r * 8..(r + 1) * 8].iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut s, "x", 4, 4, 1, &mut rng);
        for id in [attn.v.w, attn.v.b, attn.o.b] {
            s.get_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new(&s);
        let q = t.constant(vec![0.3; 12], &[3, 4]);
        let c = t.constant((0..8).map(|i| i as f64).collect(), &[2, 4]);
        let y = cross_attention(&mut t, &attn, q, c);
        assert!(t.value(y).iter().all(|v| *v == 0.0));
    }
}
