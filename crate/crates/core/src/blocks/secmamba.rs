use super::LN_EPS;
use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::ssm::{SsmParams, SsmRoute, SsmVars};
use crate::tensor::{Real, Tensor};

/// State-space expert block.
///
/// ```text
/// X    = T·W_inᵀ + b_in                 (project to d_ie)
/// Y    = SSM(X)
/// G    = σ(X·W_gᵀ + b_g)                (selective gate)
/// Y_sm = (G ⊙ Y)·W_outᵀ + b_out         (back to d_pe)
/// out  = LayerNorm(T + Y_sm)
/// ```
///
/// The residual adds the block input `T`, which lives in `d_pe`; with the
/// default `d_ie = d_pe` this coincides with adding the projected input.
pub struct SecMambaBlock {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub a_raw: ParamId,
    pub ssm_b: ParamId,
    pub ssm_c: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub d_pe: usize,
    pub d_ie: usize,
    pub d_hs: usize,
}

/// Intermediate values of one SecMamba forward pass.
pub struct SecMambaTrace<'t, T: Real> {
    pub projected: Var<'t, T>,
    pub ssm_out: Var<'t, T>,
    pub gate: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl SecMambaBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_pe: usize,
        d_ie: usize,
        d_hs: usize,
        init: &mut Init,
    ) -> Self {
        let ssm = SsmParams::<T>::random(d_ie, d_hs, init.rng());
        Self {
            w_in: store.add(format!("{prefix}.w_in"), init.linear(d_ie, d_pe)),
            b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros(&[d_ie])),
            a_raw: store.add(format!("{prefix}.ssm.a_raw"), ssm.a_raw),
            ssm_b: store.add(format!("{prefix}.ssm.b"), ssm.b),
            ssm_c: store.add(format!("{prefix}.ssm.c"), ssm.c),
            w_g: store.add(format!("{prefix}.w_g"), init.linear(d_ie, d_ie)),
            b_g: store.add(format!("{prefix}.b_g"), Tensor::zeros(&[d_ie])),
            w_out: store.add(format!("{prefix}.w_out"), init.linear(d_pe, d_ie)),
            b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros(&[d_pe])),
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::full(&[d_pe], T::one())),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d_pe])),
            d_pe,
            d_ie,
            d_hs,
        }
    }

    pub fn ssm_params<T: Real>(&self, store: &ParamStore<T>) -> SsmParams<T> {
        SsmParams {
            a_raw: store.value(self.a_raw).clone(),
            b: store.value(self.ssm_b).clone(),
            c: store.value(self.ssm_c).clone(),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
        route: SsmRoute,
    ) -> Result<Var<'t, T>> {
        Ok(self.trace(p, tokens, route)?.output)
    }

    pub fn trace<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
        route: SsmRoute,
    ) -> Result<SecMambaTrace<'t, T>> {
        let x = tokens.linear(p.get(self.w_in), Some(p.get(self.b_in)))?;
        let ssm = SsmVars::from_raw(p.get(self.a_raw), p.get(self.ssm_b), p.get(self.ssm_c));
        let y = ssm.forward(x, route)?;
        let gate = x.linear(p.get(self.w_g), Some(p.get(self.b_g)))?.sigmoid();
        let modulated = gate.mul(y)?;
        let y_sm = modulated.linear(p.get(self.w_out), Some(p.get(self.b_out)))?;
        let output = tokens
            .add(y_sm)?
            .layernorm(p.get(self.ln_gamma), p.get(self.ln_beta), LN_EPS)?;
        Ok(SecMambaTrace {
            projected: x,
            ssm_out: y,
            gate,
            output,
        })
    }

    pub fn param_count(d_pe: usize, d_ie: usize, d_hs: usize) -> usize {
        let w_in = d_ie * d_pe + d_ie;
        let ssm = d_hs + 2 * d_hs * d_ie;
        let gate = d_ie * d_ie + d_ie;
        let w_out = d_pe * d_ie + d_pe;
        w_in + ssm + gate + w_out + 2 * d_pe
    }
}
