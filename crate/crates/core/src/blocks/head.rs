use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NUM_CLASSES: usize = 2;

/// Two-layer classifier: `logits = W₂·relu(W₁·z + b₁) + b₂`.
pub struct MlpHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl MlpHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_hidden: usize, init: &mut Init) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init.linear(d_hidden, d_in)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden])),
            w2: store.add(format!("{prefix}.w2"), init.linear(NUM_CLASSES, d_hidden)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[NUM_CLASSES])),
            d_in,
            d_hidden,
        }
    }

    /// `[d_in] → [2]`
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        z.linear(p.get(self.w1), Some(p.get(self.b1)))?
            .relu()
            .linear(p.get(self.w2), Some(p.get(self.b2)))
    }

    pub fn param_count(d_in: usize, d_hidden: usize) -> usize {
        d_hidden * d_in + d_hidden + NUM_CLASSES * d_hidden + NUM_CLASSES
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{grad_check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(d_in: usize, hidden: usize) -> (ParamStore<f64>, MlpHead) {
        let mut store = ParamStore::new();
        let h = MlpHead::new(&mut store, "head", d_in, hidden, &mut Init::new(ChaCha8Rng::seed_from_u64(0)));
        (store, h)
    }

    fn logits(store: &ParamStore<f64>, h: &MlpHead, z: &[f64]) -> Vec<f64> {
        let tape = Tape::inference();
        let p = Bound::new(&tape, store);
        h.forward(&p, tape.constant(Tensor::from_f64(&[z.len()], z).unwrap()))
            .unwrap()
            .value()
            .to_vec()
    }

    #[test]
    fn zero_weights_leave_output_bias() {
        let (mut store, h) = head(3, 4);
        store.set(h.w1, Tensor::zeros(&[4, 3])).unwrap();
        store.set(h.w2, Tensor::zeros(&[2, 4])).unwrap();
        store.set(h.b2, Tensor::from_f64(&[2], &[0.3, -0.3]).unwrap()).unwrap();
        assert_eq!(logits(&store, &h, &[1., -2., 5.]), vec![0.3, -0.3]);
    }

    #[test]
    fn identity_weights_pass_nonnegative_input() {
        let (mut store, h) = head(2, 2);
        store.set(h.w1, Tensor::eye(2)).unwrap();
        store.set(h.w2, Tensor::eye(2)).unwrap();
        assert_eq!(logits(&store, &h, &[0.7, 2.5]), vec![0.7, 2.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, h) = head(5, 6);
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(4));
        store.set(h.b1, init.uniform(&[6], 0.5)).unwrap();
        let z = init.uniform::<f64>(&[5], 2.0);
        let r = grad_check_params(&store, &[z], &GradCheckOptions::default(), |p, v| {
            let out = h.forward(p, v[0])?;
            let w = p.tape().constant(Tensor::from_f64(&[2], &[1.0, -0.7])?);
            Ok(out.mul(w)?.sum())
        })
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(store.scalar_count(), MlpHead::param_count(5, 6));
    }
}
