//! Sequential mixture of experts: depth-wise pairwise mixing of each expert's
//! output with the running representation, weighted by a gate shared by all
//! experts of a stage.
//!
//! For a stage with experts `E_1..E_L` and input `X`:
//!
//! ```text
//! R_0 = X
//! G_l = softmax(W_out · relu(W_in · [μ(E_l(R_{l−1})), μ(R_{l−1})]))[0]
//! R_l = G_l · E_l(R_{l−1}) + (1 − G_l) · R_{l−1}
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{AttentionBlock, SecMambaBlock};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::ssm::SsmRoute;
use crate::tensor::{Real, Tensor};

/// Two-logit softmax gate over mean-pooled features.
pub struct Gate {
    /// `[d_g × 2·d]`
    pub w_in: ParamId,
    /// `[2 × d_g]`, zero-initialized so every gate starts at exactly 0.5
    pub w_out: ParamId,
    pub d: usize,
    pub d_g: usize,
    /// Name of the stage (or fusion point) owning this gate.
    pub scope: String,
}

impl Gate {
    pub fn new<T: Real>(store: &mut ParamStore<T>, scope: &str, d: usize, d_g: usize, init: &mut Init) -> Self {
        Self {
            w_in: store.add(format!("{scope}.gate.w_in"), init.linear(d_g, 2 * d)),
            w_out: store.add(format!("{scope}.gate.w_out"), Tensor::zeros(&[2, d_g])),
            d,
            d_g,
            scope: scope.to_string(),
        }
    }

    /// Weight `G ∈ (0, 1)` of `current` against `previous`, as a scalar.
    ///
    /// Rank-2 inputs `[N × d]` are mean-pooled over rows; rank-1 inputs are
    /// used as they are (a single-token sequence).
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        current: Var<'t, T>,
        previous: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.probabilities(p, current, previous)?.select(0)?)
    }

    /// Both softmax components `[G, 1 − G]`.
    pub fn probabilities<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        current: Var<'t, T>,
        previous: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (cs, ps) = (current.shape(), previous.shape());
        if cs != ps {
            return Err(Error::dim("gate", &cs, &ps));
        }
        if cs.last() != Some(&self.d) {
            return Err(Error::dim("gate", &cs, &[self.d]));
        }
        let pooled = pool(current)?.concat(pool(previous)?)?;
        pooled
            .linear(p.get(self.w_in), None)?
            .relu()
            .linear(p.get(self.w_out), None)?
            .softmax()
    }

    pub fn param_count(d: usize, d_g: usize) -> usize {
        d_g * 2 * d + 2 * d_g
    }
}

fn pool<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    match x.shape().len() {
        1 => Ok(x),
        2 => x.mean_pool(),
        _ => Err(Error::Rank {
            op: "gate",
            expected: "rank 1 or 2",
            shape: x.shape(),
        }),
    }
}

/// `G · current + (1 − G) · previous` with scalar `G`.
pub fn gated_interpolate<'t, T: Real>(
    current: Var<'t, T>,
    previous: Var<'t, T>,
    g: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if current.shape() != previous.shape() {
        return Err(Error::dim("gated_interpolate", &current.shape(), &previous.shape()));
    }
    if g.value().len() != 1 {
        return Err(Error::dim("gated_interpolate", &g.shape(), &[1]));
    }
    g.mul(current)?.add(g.one_minus().mul(previous)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    SecMamba,
    Attention,
}

impl ExpertKind {
    pub fn label(self) -> &'static str {
        match self {
            ExpertKind::SecMamba => "secmamba",
            ExpertKind::Attention => "attention",
        }
    }
}

pub enum Expert {
    SecMamba(SecMambaBlock),
    Attention(AttentionBlock),
}

impl Expert {
    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::SecMamba(_) => ExpertKind::SecMamba,
            Expert::Attention(_) => ExpertKind::Attention,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, route: SsmRoute) -> Result<Var<'t, T>> {
        match self {
            Expert::SecMamba(b) => b.forward(p, x, route),
            Expert::Attention(b) => b.forward(p, x),
        }
    }
}

/// Ordered expert layout of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub experts: Vec<ExpertKind>,
    /// Whether the stage mixes experts through a gate; without one the
    /// experts compose plainly, `R_l = E_l(R_{l−1})`.
    pub gated: bool,
}

impl StageConfig {
    /// `n_mamba` SecMamba experts followed by `n_attention` attention experts.
    pub fn runs(n_mamba: usize, n_attention: usize, gated: bool) -> Self {
        let mut experts = vec![ExpertKind::SecMamba; n_mamba];
        experts.extend(std::iter::repeat(ExpertKind::Attention).take(n_attention));
        Self { experts, gated }
    }

    pub fn count(&self, kind: ExpertKind) -> usize {
        self.experts.iter().filter(|&&k| k == kind).count()
    }
}

/// Width settings shared by every expert of a stage.
#[derive(Debug, Clone, Copy)]
pub struct StageDims {
    pub d: usize,
    pub d_ie: usize,
    pub d_hs: usize,
    pub n_heads: usize,
    pub d_g: usize,
}

/// Per-call overrides for stage evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageOptions {
    pub route: SsmRoute,
    /// Replace every gate output by this constant.
    pub force_gate: Option<f64>,
}

pub struct Stage {
    pub experts: Vec<Expert>,
    pub gate: Option<Gate>,
    pub dims: StageDims,
}

/// One step of the gated recursion.
pub struct StageStep<'t, T: Real> {
    pub expert_out: Var<'t, T>,
    pub previous: Var<'t, T>,
    pub gate: Option<Var<'t, T>>,
    pub mixed: Var<'t, T>,
}

impl Stage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &StageConfig,
        dims: StageDims,
        init: &mut Init,
    ) -> Result<Self> {
        if config.experts.is_empty() {
            return Err(Error::Config(format!("stage {prefix} has no experts")));
        }
        let mut experts = Vec::with_capacity(config.experts.len());
        for (i, kind) in config.experts.iter().enumerate() {
            let name = format!("{prefix}.expert{i}.{}", kind.label());
            experts.push(match kind {
                ExpertKind::SecMamba => {
                    Expert::SecMamba(SecMambaBlock::new(store, &name, dims.d, dims.d_ie, dims.d_hs, init))
                }
                ExpertKind::Attention => {
                    Expert::Attention(AttentionBlock::new(store, &name, dims.d, dims.n_heads, init)?)
                }
            });
        }
        let gate = config
            .gated
            .then(|| Gate::new(store, prefix, dims.d, dims.d_g, init));
        Ok(Self { experts, gate, dims })
    }

    pub fn config(&self) -> StageConfig {
        StageConfig {
            experts: self.experts.iter().map(Expert::kind).collect(),
            gated: self.gate.is_some(),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, opts: StageOptions) -> Result<Var<'t, T>> {
        let steps = self.trace(p, x, opts)?;
        Ok(steps.last().map(|s| s.mixed).unwrap_or(x))
    }

    pub fn trace<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        opts: StageOptions,
    ) -> Result<Vec<StageStep<'t, T>>> {
        let mut running = x;
        let mut steps = Vec::with_capacity(self.experts.len());
        for expert in &self.experts {
            let out = expert.forward(p, running, opts.route)?;
            let gate = match (opts.force_gate, &self.gate) {
                (Some(g), _) => Some(p.tape().constant(Tensor::scalar(T::of(g)))),
                (None, Some(gate)) => Some(gate.forward(p, out, running)?),
                (None, None) => None,
            };
            let mixed = match gate {
                Some(g) => gated_interpolate(out, running, g)?,
                None => out,
            };
            steps.push(StageStep {
                expert_out: out,
                previous: running,
                gate,
                mixed,
            });
            running = mixed;
        }
        Ok(steps)
    }

    pub fn param_count(config: &StageConfig, dims: StageDims) -> usize {
        let experts: usize = config
            .experts
            .iter()
            .map(|k| match k {
                ExpertKind::SecMamba => SecMambaBlock::param_count(dims.d, dims.d_ie, dims.d_hs),
                ExpertKind::Attention => AttentionBlock::param_count(dims.d),
            })
            .sum();
        let gate = if config.gated { Gate::param_count(dims.d, dims.d_g) } else { 0 };
        experts + gate
    }
}
