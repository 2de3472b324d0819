use std::f64::consts::PI;

use crate::autograd::Var;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if epoch > total {
        return Err(Error::Schedule { epoch, total });
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let t = epoch as f64 / total as f64;
    Ok(lr_max - 0.5 * (lr_max - lr_min) * (1.0 - (PI * t).cos()))
}

/// Mean cross-entropy against targets `(1 − ε)·onehot + ε/2`, for logits
/// stacked as `[B × 2]`.
pub fn label_smoothed_ce<'t, T: Real>(logits: Var<'t, T>, labels: &[usize], eps: f64) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let shape = logits.shape();
    if shape != [labels.len(), 2] {
        return Err(Error::dim("label_smoothed_ce", &shape, &[labels.len(), 2]));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput { op: "label_smoothed_ce" });
    }
    let mut targets = Vec::with_capacity(2 * labels.len());
    for &y in labels {
        Label::from_index(y)?;
        for class in 0..2 {
            let hit = if class == y { 1.0 - eps } else { 0.0 };
            targets.push(T::of(hit + eps / 2.0));
        }
    }
    let t = logits.tape().constant(Tensor::from_parts(shape, targets));
    let total = logits.log_softmax()?.mul(t)?.sum();
    Ok(total.scale(T::of(-1.0 / labels.len() as f64)))
}

/// Global L2 norm over all present gradients.
pub fn grad_norm<T: Real>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns `(norm before clipping, scale applied)`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> Result<(f64, f64)> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!("clip norm {max_norm} must be positive")));
    }
    let norm = grad_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient(norm));
    }
    if norm <= max_norm {
        return Ok((norm, 1.0));
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v = T::of(v.as_f64() * scale));
    }
    Ok((norm, scale))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every non-frozen parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("adamw", &[store.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.get(id).frozen {
                continue;
            }
            let value = store.value(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut out = Vec::with_capacity(value.len());
            for (j, &p) in value.data().iter().enumerate() {
                let g = grads[k].as_ref().map_or(0.0, |g| g[j].as_f64());
                let mut p = p.as_f64();
                p -= lr * self.weight_decay * p;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                out.push(T::of(p));
            }
            let shape = value.shape().to_vec();
            store.set(id, Tensor::new(&shape, out)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::grad_check;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 1.0, 0.0).unwrap(), 1.0);
        assert!(cosine_lr(10, 10, 1.0, 0.2).unwrap() - 0.2 < 1e-15);
        assert!((cosine_lr(5, 10, 1.0, 0.2).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(cosine_lr(11, 10, 1.0, 0.0), Err(Error::Schedule { .. })));
    }

    fn loss(logits: &[f64], labels: &[usize], eps: f64) -> f64 {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_f64(&[labels.len(), 2], logits).unwrap());
        label_smoothed_ce(x, labels, eps).unwrap().value().item()
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((loss(&[0.0, 0.0], &[0], 0.0) - ln2).abs() < 1e-15);
        assert!(loss(&[40.0, -40.0], &[0], 0.0) < 1e-30);
        assert!((loss(&[0.0, 0.0], &[1], 0.2) - ln2).abs() < 1e-15);
        // −(0.95·log σ + 0.05·log(1−σ)) for a single sample
        let (a, b) = (1.3f64, -0.4f64);
        let lse = (a.exp() + b.exp()).ln();
        let want = -(0.05 * (a - lse) + 0.95 * (b - lse));
        assert!((loss(&[a, b], &[1], 0.1) - want).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(label_smoothed_ce(x, &[2], 0.1), Err(Error::Label(2))));
        assert!(label_smoothed_ce(x, &[0], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = Tensor::from_f64(&[3, 2], &[0.3, -1.2, 2.0, 0.5, -0.7, -0.1]).unwrap();
        let r = grad_check(|v| label_smoothed_ce(v, &[0, 1, 1], 0.1), &x, 1e-6, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Some(vec![2.0f64]), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), (2.0, 0.5));
        assert_eq!(grad_norm(&g), 1.0);

        let mut g = vec![Some(vec![0.3f64])];
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), (0.3, 1.0));
        assert_eq!(g[0].as_deref(), Some(&[0.3][..]));

        let mut g = vec![Some(vec![3.0f64, 0.0]), Some(vec![0.0, 4.0])];
        let (norm, scale) = clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((scale - 0.2).abs() < 1e-16);

        let mut g = vec![Some(vec![f64::NAN])];
        assert!(matches!(clip_grad_norm(&mut g, 1.0), Err(Error::NonFiniteGradient(_))));
    }

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(&[1.0, -2.0]);
        AdamW::new(0.0).step(&mut s, &[Some(vec![0.0, 0.0])], 0.1).unwrap();
        assert_eq!(s.value(s.ids().next().unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = store(&[1.0, -2.0]);
        AdamW::new(0.5).step(&mut s, &[None], 0.1).unwrap();
        assert_eq!(s.value(s.ids().next().unwrap()).data(), &[0.95, -1.9]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update lr·g/(|g| + eps)
        let mut s = store(&[0.0, 0.0]);
        let g = [0.5, -3.0];
        AdamW::new(0.0).step(&mut s, &[Some(g.to_vec())], 0.01).unwrap();
        let got = s.value(s.ids().next().unwrap()).to_vec();
        for (p, g) in got.iter().zip(g) {
            assert!((p + 0.01 * g / (g.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = store(&[1.0]);
        s.set_frozen_prefix("w", true);
        AdamW::new(0.5).step(&mut s, &[Some(vec![1.0])], 0.1).unwrap();
        assert_eq!(s.value(s.ids().next().unwrap()).data(), &[1.0]);
    }
}
