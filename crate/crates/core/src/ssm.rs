//! Depthwise discrete linear state-space model.
//!
//! Every one of the `d_ie` channels owns a `d_hs`-dimensional state driven by
//! a shared diagonal transition:
//!
//! ```text
//! h_k[c] = a ⊙ h_{k−1}[c] + B[:, c] · x_k[c],   h_0 = 0
//! y_k[c] = C[c, :] · h_k[c]
//! ```
//!
//! The same map is a causal depthwise convolution with taps
//! `K[m, c] = Σ_s C[c, s] · a_s^m · B[s, c]`. Both routes are differentiable
//! and agree to rounding error.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which evaluation route the SSM uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsmRoute {
    /// Sequential recurrence, O(N·d_ie·d_hs).
    #[default]
    Scan,
    /// Materialized kernel plus direct causal convolution, O(N²·d_ie).
    Convolution,
}

/// Learnable SSM parameters. The diagonal of `A` is stored unconstrained and
/// mapped through `tanh`, which keeps every entry inside (−1, 1).
#[derive(Debug, Clone)]
pub struct SsmParams<T> {
    /// `[d_hs]`
    pub a_raw: Tensor<T>,
    /// `[d_hs × d_ie]`
    pub b: Tensor<T>,
    /// `[d_ie × d_hs]`
    pub c: Tensor<T>,
}

impl<T: Real> SsmParams<T> {
    /// Builds parameters from explicit diagonal values `a` (each in (−1, 1)).
    pub fn from_diag(a: &[f64], b: Tensor<T>, c: Tensor<T>) -> Result<Self> {
        if let Some(bad) = a.iter().find(|v| v.abs() >= 1.0 || !v.is_finite()) {
            return Err(Error::Config(format!("state transition entry {bad} outside (-1, 1)")));
        }
        let raw = a.iter().map(|&v| T::of(v.atanh())).collect();
        let p = Self {
            a_raw: Tensor::vector(raw),
            b,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    /// Raw diagonal uniform in [−2, 2]; `B`, `C` uniform with unit-variance
    /// scaling in the state dimension.
    pub fn random(d_ie: usize, d_hs: usize, rng: &mut impl Rng) -> Self {
        let a_raw = (0..d_hs).map(|_| T::of(rng.gen_range(-2.0..=2.0))).collect();
        let bound = (1.0 / d_hs as f64).sqrt();
        let mut mat = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect() };
        let b = mat(d_hs * d_ie);
        let c = mat(d_ie * d_hs);
        Self {
            a_raw: Tensor::vector(a_raw),
            b: Tensor::from_parts(vec![d_hs, d_ie], b),
            c: Tensor::from_parts(vec![d_ie, d_hs], c),
        }
    }

    pub fn d_hs(&self) -> usize {
        self.a_raw.len()
    }

    pub fn d_ie(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn a_diag(&self) -> Tensor<T> {
        self.a_raw.map(|v| v.tanh())
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.d_hs();
        if self.b.rank() != 2 || self.c.rank() != 2 {
            return Err(Error::dim("ssm params", self.b.shape(), self.c.shape()));
        }
        let d = self.c.shape()[0];
        if self.b.shape() != [s, d] || self.c.shape() != [d, s] {
            return Err(Error::dim("ssm params", self.b.shape(), self.c.shape()));
        }
        if !(self.a_raw.all_finite() && self.b.all_finite() && self.c.all_finite()) {
            return Err(Error::Config("non-finite SSM parameter".into()));
        }
        Ok(())
    }
}

/// SSM parameters recorded on a tape, with the diagonal already constrained.
#[derive(Clone, Copy)]
pub struct SsmVars<'t, T: Real> {
    /// constrained diagonal, `[d_hs]`
    pub a: Var<'t, T>,
    pub b: Var<'t, T>,
    pub c: Var<'t, T>,
}

impl<'t, T: Real> SsmVars<'t, T> {
    pub fn from_raw(a_raw: Var<'t, T>, b: Var<'t, T>, c: Var<'t, T>) -> Self {
        Self { a: a_raw.tanh(), b, c }
    }

    pub fn bind(tape: &'t Tape<T>, params: &SsmParams<T>) -> Self {
        Self::from_raw(
            tape.leaf(params.a_raw.clone()),
            tape.leaf(params.b.clone()),
            tape.leaf(params.c.clone()),
        )
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let (a, b, c) = (self.a.shape(), self.b.shape(), self.c.shape());
        let [s] = a[..] else {
            return Err(Error::dim("ssm", &a, &b));
        };
        if b.len() != 2 || b[0] != s || c.len() != 2 || c[1] != s || c[0] != b[1] {
            return Err(Error::dim("ssm", &b, &c));
        }
        Ok((s, b[1]))
    }

    pub fn forward(&self, x: Var<'t, T>, route: SsmRoute) -> Result<Var<'t, T>> {
        match route {
            SsmRoute::Scan => scan_ssm(*self, x),
            SsmRoute::Convolution => {
                let n = x.shape().first().copied().unwrap_or(0);
                let kernel = materialize_kernel(*self, n)?;
                conv_ssm(&kernel, x)
            }
        }
    }
}

fn check_input<T: Real>(x: &Tensor<T>, d: usize) -> Result<usize> {
    match x.shape() {
        &[n, dx] if dx == d && n >= 1 => Ok(n),
        &[0, _] => Err(Error::EmptyInput { op: "ssm" }),
        other => Err(Error::dim("ssm input", other, &[d])),
    }
}

/// Sequential recurrence over the rows of `x: [N × d_ie]`.
pub fn scan_ssm<'t, T: Real>(p: SsmVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (s, d) = p.dims()?;
    let xv = x.value();
    let n = check_input(&xv, d)?;
    let (av, bv, cv) = (p.a.value(), p.b.value(), p.c.value());
    let (a, b, c) = (av.data(), bv.data(), cv.data());

    let tape = x.tape();
    let keep = tape.grad_enabled() && (x.requires_grad() || p.a.requires_grad() || p.b.requires_grad() || p.c.requires_grad());

    // state laid out [channel][state]
    let mut h = vec![T::zero(); d * s];
    let mut states = if keep { Vec::with_capacity(n * d * s) } else { Vec::new() };
    let mut y = vec![T::zero(); n * d];
    for k in 0..n {
        let xk = &xv.data()[k * d..(k + 1) * d];
        for ch in 0..d {
            let hc = &mut h[ch * s..(ch + 1) * s];
            let crow = &c[ch * s..(ch + 1) * s];
            let mut acc = T::zero();
            for j in 0..s {
                hc[j] = a[j] * hc[j] + b[j * d + ch] * xk[ch];
                acc = acc + crow[j] * hc[j];
            }
            y[k * d + ch] = acc;
        }
        if keep {
            states.extend_from_slice(&h);
        }
    }
    let out = Tensor::from_parts(vec![n, d], y);
    if !keep {
        return Ok(tape.constant(out));
    }

    Ok(tape.custom(
        "ssm_scan",
        &[p.a, p.b, p.c, x],
        out,
        Box::new(move |g, inputs, _| {
            let (a, b, c, x) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
            let mut da = vec![T::zero(); s];
            let mut db = vec![T::zero(); s * d];
            let mut dc = vec![T::zero(); d * s];
            let mut dx = vec![T::zero(); n * d];
            // adjoint of the state, same layout as h
            let mut lam = vec![T::zero(); d * s];
            for k in (0..n).rev() {
                let hk = &states[k * d * s..(k + 1) * d * s];
                for ch in 0..d {
                    let gy = g[k * d + ch];
                    let xk = x[k * d + ch];
                    let mut dxk = T::zero();
                    for j in 0..s {
                        let idx = ch * s + j;
                        dc[idx] = dc[idx] + gy * hk[idx];
                        // λ_k = Cᵀ g_k + a ⊙ λ_{k+1}
                        lam[idx] = gy * c[idx] + a[j] * lam[idx];
                        dxk = dxk + lam[idx] * b[j * d + ch];
                        db[j * d + ch] = db[j * d + ch] + lam[idx] * xk;
                        if k > 0 {
                            da[j] = da[j] + lam[idx] * states[(k - 1) * d * s + idx];
                        }
                    }
                    dx[k * d + ch] = dxk;
                }
            }
            vec![Some(da), Some(db), Some(dc), Some(dx)]
        }),
    ))
}

/// Convolution taps materialized for a fixed sequence length.
pub struct SsmKernel<'t, T: Real> {
    /// `[N × d_ie]`; row `m` holds the channel-wise taps `diag(C·Aᵐ·B)`.
    pub taps: Var<'t, T>,
    pub len: usize,
}

/// Taps `K[m] = diag(C · Aᵐ · B)` for `m = 0..len`.
pub fn materialize_kernel<'t, T: Real>(p: SsmVars<'t, T>, len: usize) -> Result<SsmKernel<'t, T>> {
    if len == 0 {
        return Err(Error::EmptyInput { op: "materialize_kernel" });
    }
    let (s, d) = p.dims()?;
    let (av, bv, cv) = (p.a.value(), p.b.value(), p.c.value());
    let (a, b, c) = (av.data(), bv.data(), cv.data());
    let mut taps = vec![T::zero(); len * d];
    // pw[j] = a_j^m
    let mut pw = vec![T::one(); s];
    for m in 0..len {
        for ch in 0..d {
            let mut acc = T::zero();
            for j in 0..s {
                acc = acc + c[ch * s + j] * pw[j] * b[j * d + ch];
            }
            taps[m * d + ch] = acc;
        }
        for j in 0..s {
            pw[j] = pw[j] * a[j];
        }
    }
    let tape = p.a.tape();
    let out = Tensor::from_parts(vec![len, d], taps);
    let taps = tape.custom(
        "ssm_kernel",
        &[p.a, p.b, p.c],
        out,
        Box::new(move |g, inputs, _| {
            let (a, b, c) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
            let mut da = vec![T::zero(); s];
            let mut db = vec![T::zero(); s * d];
            let mut dc = vec![T::zero(); d * s];
            let mut pw = vec![T::one(); s];
            // dpw[j] = m · a_j^(m−1)
            let mut dpw = vec![T::zero(); s];
            for m in 0..len {
                for ch in 0..d {
                    let gk = g[m * d + ch];
                    for j in 0..s {
                        let cb = c[ch * s + j] * b[j * d + ch];
                        dc[ch * s + j] = dc[ch * s + j] + gk * pw[j] * b[j * d + ch];
                        db[j * d + ch] = db[j * d + ch] + gk * c[ch * s + j] * pw[j];
                        da[j] = da[j] + gk * cb * dpw[j];
                    }
                }
                for j in 0..s {
                    dpw[j] = T::of((m + 1) as f64) * pw[j];
                    pw[j] = pw[j] * a[j];
                }
            }
            vec![Some(da), Some(db), Some(dc)]
        }),
    );
    Ok(SsmKernel { taps, len })
}

/// Causal depthwise convolution `y_k = Σ_{m=0}^{k} K[m] ⊙ x_{k−m}`.
pub fn conv_ssm<'t, T: Real>(kernel: &SsmKernel<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let kv = kernel.taps.value();
    let d = kv.shape()[1];
    let xv = x.value();
    let n = check_input(&xv, d)?;
    if n != kernel.len {
        return Err(Error::KernelLength {
            kernel: kernel.len,
            input: n,
        });
    }
    let (k, xs) = (kv.data(), xv.data());
    let mut y = vec![T::zero(); n * d];
    for t in 0..n {
        let yrow = &mut y[t * d..(t + 1) * d];
        for m in 0..=t {
            let krow = &k[m * d..(m + 1) * d];
            let xrow = &xs[(t - m) * d..(t - m + 1) * d];
            for ch in 0..d {
                yrow[ch] = yrow[ch] + krow[ch] * xrow[ch];
            }
        }
    }
    let tape = x.tape();
    Ok(tape.custom(
        "ssm_conv",
        &[kernel.taps, x],
        Tensor::from_parts(vec![n, d], y),
        Box::new(move |g, inputs, _| {
            let (k, xs) = (inputs[0].data(), inputs[1].data());
            let mut dk = vec![T::zero(); n * d];
            let mut dx = vec![T::zero(); n * d];
            for t in 0..n {
                let grow = &g[t * d..(t + 1) * d];
                for m in 0..=t {
                    let j = t - m;
                    for ch in 0..d {
                        dk[m * d + ch] = dk[m * d + ch] + grow[ch] * xs[j * d + ch];
                        dx[j * d + ch] = dx[j * d + ch] + grow[ch] * k[m * d + ch];
                    }
                }
            }
            vec![Some(dk), Some(dx)]
        }),
    ))
}

/// Tape-free evaluation helpers for callers holding plain tensors.
pub fn scan<T: Real>(params: &SsmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let p = SsmVars::bind(&tape, params);
    Ok(scan_ssm(p, tape.constant(x.clone()))?.value())
}

pub fn kernel<T: Real>(params: &SsmParams<T>, len: usize) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let p = SsmVars::bind(&tape, params);
    Ok(materialize_kernel(p, len)?.taps.value())
}

pub fn convolve<T: Real>(params: &SsmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let p = SsmVars::bind(&tape, params);
    Ok(p.forward(tape.constant(x.clone()), SsmRoute::Convolution)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(a: f64, b: f64, c: f64) -> SsmParams<f64> {
        SsmParams::from_diag(
            &[a],
            Tensor::from_f64(&[1, 1], &[b]).unwrap(),
            Tensor::from_f64(&[1, 1], &[c]).unwrap(),
        )
        .unwrap()
    }

    fn seq(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len(), 1], v).unwrap()
    }

    fn close(got: &Tensor<f64>, want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() <= tol, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn scan_impulse_response_decays_geometrically() {
        let y = scan(&scalar_params(0.5, 1.0, 1.0), &seq(&[1., 0., 0., 0.])).unwrap();
        close(&y, &[1.0, 0.5, 0.25, 0.125], 1e-12);
    }

    #[test]
    fn memoryless_scan_is_pointwise() {
        let y = scan(&scalar_params(0.0, 1.0, 2.0), &seq(&[3., 4.])).unwrap();
        close(&y, &[6., 8.], 1e-12);
        let y = scan(&scalar_params(0.7, 0.0, 2.0), &seq(&[3., -4., 1.])).unwrap();
        close(&y, &[0., 0., 0.], 0.0);
    }

    #[test]
    fn kernel_examples() {
        close(&kernel(&scalar_params(0.0, 1.0, 1.0), 4).unwrap(), &[1., 0., 0., 0.], 0.0);
        close(&kernel(&scalar_params(0.5, 1.0, 2.0), 3).unwrap(), &[2., 1., 0.5], 1e-12);
        let k = kernel(&scalar_params(1.0 - 1e-9, 1.5, 2.0), 4).unwrap();
        close(&k, &[3.0; 4], 1e-6);
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::<f64>::inference();
        let delta = SsmKernel {
            taps: tape.constant(seq(&[1., 0., 0., 0.])),
            len: 4,
        };
        let y = conv_ssm(&delta, tape.constant(seq(&[3., 4., 5., 6.]))).unwrap();
        close(&y.value(), &[3., 4., 5., 6.], 0.0);

        let k = SsmKernel {
            taps: tape.constant(seq(&[2., 1., 0.5])),
            len: 3,
        };
        let y = conv_ssm(&k, tape.constant(seq(&[1., 0., 0.]))).unwrap();
        close(&y.value(), &[2., 1., 0.5], 0.0);

        let short = conv_ssm(&k, tape.constant(seq(&[1., 0.])));
        assert!(matches!(short, Err(Error::KernelLength { kernel: 3, input: 2 })));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SsmParams::<f64>::random(3, 2, &mut rng);
        assert!(scan(&p, &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn unstable_diagonal_rejected() {
        let one = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        assert!(SsmParams::from_diag(&[1.0], one.clone(), one).is_err());
    }

    #[test]
    fn both_routes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SsmParams::<f64>::random(3, 2, &mut rng);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_f64(&[5, 3], &x).unwrap();
        let w: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::from_f64(&[5, 3], &w).unwrap();
        for route in [SsmRoute::Scan, SsmRoute::Convolution] {
            let w = w.clone();
            let r = grad_check_many(
                move |v| {
                    let p = SsmVars::from_raw(v[0], v[1], v[2]);
                    let y = p.forward(v[3], route)?;
                    let w = v[3].tape().constant(w.clone());
                    Ok(y.mul(w)?.sum())
                },
                &[p.a_raw.clone(), p.b.clone(), p.c.clone(), x.clone()],
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.pass, "{route:?}: {r:?}");
        }
    }
}
