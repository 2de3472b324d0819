//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked entries of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub pass: bool,
    /// (input index, flat entry) of the worst entry
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many entries per input, chosen at random.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

/// Gradient check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(
        |vars| f(vars[0]),
        std::slice::from_ref(x),
        &GradCheckOptions {
            h,
            tol,
            ..Default::default()
        },
    )
}

/// Gradient check of a scalar function of several tensors, differentiating
/// with respect to all of them.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-7..=1e-4).contains(&opts.h) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            opts.h
        )));
    }

    let tape = Tape::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&vars)?;
    tape.check_finite()?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; x.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::inference();
        let vars: Vec<Var<'_, f64>> = perturbed.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&vars)?;
        tape.check_finite()?;
        Ok(out.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < x.len() => {
                let mut e = sample(&mut rng, x.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..x.len()).collect(),
        };
        for j in entries {
            let mut plus = x.to_vec();
            plus[j] += opts.h;
            work[which] = Tensor::new(x.shape(), plus)?;
            let fp = eval(&work)?;
            let mut minus = x.to_vec();
            minus[j] -= opts.h;
            work[which] = Tensor::new(x.shape(), minus)?;
            let fm = eval(&work)?;
            work[which] = x.clone();

            let numeric = (fp - fm) / (2.0 * opts.h);
            let err = (analytic[which][j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((which, j));
            }
        }
    }
    report.pass = report.max_rel_err <= opts.tol;
    Ok(report)
}

/// Gradient check with respect to every parameter of `store` and every
/// tensor in `inputs`.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let n = store.len();
    let mut all: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    all.extend_from_slice(inputs);
    grad_check_many(
        |vars| {
            let bound = Bound::from_vars(vars[0].tape(), vars[..n].to_vec());
            f(&bound, &vars[n..])
        },
        &all,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gemm;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sum_passes_trivially() {
        let r = grad_check(|x| Ok(x.sum()), &input(&[3, 4], 1), 1e-6, 1e-5).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(grad_check(|x| Ok(x.sum()), &input(&[2], 1), 1e-2, 1e-5).is_err());
    }

    #[test]
    fn corrupted_matmul_gradient_fails() {
        let b = input(&[3, 2], 2);
        let report = grad_check(
            move |a| {
                let tape = a.tape();
                let bv = tape.constant(b.clone());
                // matmul whose backward drops the transpose on b and doubles
                let av = a.value();
                let mut out = vec![0.0; 2 * 2];
                gemm(2, 3, 2, av.data(), false, b.data(), false, &mut out, false);
                let bb = b.clone();
                let y = tape.custom(
                    "corrupt_matmul",
                    &[a, bv],
                    Tensor::new(&[2, 2], out).unwrap(),
                    Box::new(move |g, _, _| {
                        let mut da = vec![0.0; 6];
                        gemm(2, 2, 3, g, false, bb.data(), true, &mut da, false);
                        da.iter_mut().for_each(|v| *v *= 2.0);
                        vec![Some(da), None]
                    }),
                );
                Ok(y.sum())
            },
            &input(&[2, 3], 3),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(!report.pass, "{report:?}");
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let x = Tensor::from_f64(&[1], &[1e200]).unwrap();
        let err = grad_check(|x| Ok(x.mul(x)?.sum()), &x, 1e-6, 1e-5).unwrap_err();
        assert!(err.to_string().contains("mul"), "{err}");
    }
}
