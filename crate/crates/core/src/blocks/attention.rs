use super::LN_EPS;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Pre-norm transformer block: multi-head scaled dot-product self-attention
/// with residual, then a 4× ReLU MLP with residual. No positional encoding
/// is added inside the block.
pub struct AttentionBlock {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// `[n_heads·d_head × d]`, head `h` owns rows `h·d_head..(h+1)·d_head`
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub d: usize,
    pub n_heads: usize,
}

pub struct AttentionTrace<'t, T: Real> {
    /// One `[N × N]` row-stochastic matrix per head.
    pub weights: Vec<Var<'t, T>>,
    pub output: Var<'t, T>,
}

pub const MLP_EXPANSION: usize = 4;

impl AttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        n_heads: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible into {n_heads} heads"
            )));
        }
        let hidden = MLP_EXPANSION * d;
        Ok(Self {
            ln1_gamma: store.add(format!("{prefix}.ln1.gamma"), Tensor::full(&[d], T::one())),
            ln1_beta: store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[d])),
            w_q: store.add(format!("{prefix}.w_q"), init.linear(d, d)),
            w_k: store.add(format!("{prefix}.w_k"), init.linear(d, d)),
            w_v: store.add(format!("{prefix}.w_v"), init.linear(d, d)),
            w_o: store.add(format!("{prefix}.w_o"), init.linear(d, d)),
            ln2_gamma: store.add(format!("{prefix}.ln2.gamma"), Tensor::full(&[d], T::one())),
            ln2_beta: store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[d])),
            mlp_w1: store.add(format!("{prefix}.mlp.w1"), init.linear(hidden, d)),
            mlp_b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden])),
            mlp_w2: store.add(format!("{prefix}.mlp.w2"), init.linear(d, hidden)),
            mlp_b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d])),
            d,
            n_heads,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace(p, tokens)?.output)
    }

    pub fn trace<'t, T: Real>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<AttentionTrace<'t, T>> {
        let h = tokens.layernorm(p.get(self.ln1_gamma), p.get(self.ln1_beta), LN_EPS)?;
        let q = h.linear(p.get(self.w_q), None)?;
        let k = h.linear(p.get(self.w_k), None)?;
        let v = h.linear(p.get(self.w_v), None)?;
        let dh = self.d_head();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let mut weights = Vec::with_capacity(self.n_heads);
        let mut heads: Option<Var<'t, T>> = None;
        for head in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    q.slice_last(head * dh, dh)?,
                    k.slice_last(head * dh, dh)?,
                    v.slice_last(head * dh, dh)?,
                )
            };
            let attn = qh.matmul_t(kh)?.scale(scale).softmax()?;
            let o = attn.matmul(vh)?;
            weights.push(attn);
            heads = Some(match heads {
                None => o,
                Some(acc) => acc.concat(o)?,
            });
        }
        let attended = heads
            .expect("at least one head")
            .linear(p.get(self.w_o), None)?;
        let x = tokens.add(attended)?;

        let h2 = x.layernorm(p.get(self.ln2_gamma), p.get(self.ln2_beta), LN_EPS)?;
        let m = h2
            .linear(p.get(self.mlp_w1), Some(p.get(self.mlp_b1)))?
            .relu()
            .linear(p.get(self.mlp_w2), Some(p.get(self.mlp_b2)))?;
        let output = x.add(m)?;
        Ok(AttentionTrace { weights, output })
    }

    pub fn param_count(d: usize) -> usize {
        let hidden = MLP_EXPANSION * d;
        4 * d + 4 * d * d + hidden * d + hidden + d * hidden + d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{grad_check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, AttentionBlock, Init) {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let block = AttentionBlock::new(&mut store, "attn", d, heads, &mut init).unwrap();
        (store, block, init)
    }

    fn zero(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
        assert!(AttentionBlock::new(&mut store, "a", 6, 4, &mut init).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, block, mut init) = setup(4, 2, 1);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(init.uniform(&[1, 4], 1.0));
        let trace = block.trace(&p, x).unwrap();
        for w in &trace.weights {
            assert_eq!(w.value().data(), &[1.0]);
        }
    }

    #[test]
    fn zero_value_and_mlp_is_pure_residual() {
        let (mut store, block, mut init) = setup(4, 2, 2);
        for id in [block.w_v, block.mlp_w1, block.mlp_w2] {
            zero(&mut store, id);
        }
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let x = init.uniform(&[3, 4], 1.0);
        let out = block.forward(&p, tape.constant(x.clone())).unwrap().value();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, block, mut init) = setup(8, 4, 3);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let trace = block.trace(&p, tape.constant(init.uniform(&[6, 8], 2.0))).unwrap();
        assert_eq!(trace.weights.len(), 4);
        for w in &trace.weights {
            for row in w.value().data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let (store, block, mut init) = setup(8, 2, 4);
        let x = init.uniform::<f64>(&[5, 8], 1.5);
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&r| x.data()[r * 8..(r + 1) * 8].to_vec())
            .collect();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let a = block.forward(&p, tape.constant(x.clone())).unwrap().value();
        let b = block
            .forward(&p, tape.constant(Tensor::from_f64(&[5, 8], &permuted).unwrap()))
            .unwrap()
            .value();
        for (i, &r) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((b.at2(i, j) - a.at2(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, block, mut init) = setup(4, 2, 5);
        let x = init.uniform::<f64>(&[3, 4], 2.0);
        let w = init.uniform::<f64>(&[3, 4], 1.0);
        let report = grad_check_params(&store, &[x], &GradCheckOptions::default(), |p, v| {
            let out = block.forward(p, v[0])?;
            Ok(out.mul(p.tape().constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(store.scalar_count(), AttentionBlock::param_count(4));
    }
}
