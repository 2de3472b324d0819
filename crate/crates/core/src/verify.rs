//! Self-checks exposed on the command line: finite-difference gradient
//! checks of every trainable block and the scan/convolution agreement of the
//! SSM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::blocks::{AttentionBlock, ConvStem, Downsample, MlpHead, PatchEmbed, SecMambaBlock};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_many, grad_check_params, GradCheckOptions, GradCheckReport};
use crate::model::fuse_streams;
use crate::params::{Init, ParamStore};
use crate::seqmoe::{Gate, Stage, StageConfig, StageDims, StageOptions};
use crate::ssm::{self, SsmParams, SsmRoute, SsmVars};
use crate::tensor::Tensor;
use crate::train::label_smoothed_ce;

/// Names accepted by [`check_module`].
pub const MODULES: [&str; 11] = [
    "ssm_scan",
    "ssm_convolution",
    "conv_stem",
    "patch_embed",
    "secmamba",
    "attention",
    "downsample",
    "seqmoe_stage",
    "fusion_gate",
    "mlp_head",
    "loss",
];

/// Replaces every parameter by uniform noise so that no gradient path is
/// trivially zero (zero-initialized gates, unit layer-norm scales).
fn randomize(store: &mut ParamStore<f64>, init: &mut Init) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set(id, init.uniform(&shape, 0.8)).expect("same shape");
    }
}

/// Contracts an output with fixed random weights into a scalar.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = Init::scoped(seed, "probe").uniform(&y.shape(), 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

/// Gradient check of one named module at widths ≤ 8, 64-bit, tolerance 1e-5.
pub fn check_module(name: &str, seed: u64) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let mut init = Init::scoped(seed, name);
    let mut store = ParamStore::<f64>::new();
    let report = match name {
        "ssm_scan" | "ssm_convolution" => {
            let route = if name == "ssm_scan" {
                SsmRoute::Scan
            } else {
                SsmRoute::Convolution
            };
            let p = SsmParams::<f64>::random(3, 4, init.rng());
            let x = init.uniform(&[6, 3], 2.0);
            return grad_check_many(
                |v| probe(SsmVars::from_raw(v[0], v[1], v[2]).forward(v[3], route)?, seed),
                &[p.a_raw, p.b, p.c, x],
                &opts,
            );
        }
        "conv_stem" => {
            let stem = ConvStem::new(&mut store, "stem", 1, 2, &mut init);
            randomize(&mut store, &mut init);
            let x = init.uniform(&[8, 8, 1], 1.0);
            grad_check_params(&store, &[x], &opts, |p, v| probe(stem.forward(p, v[0])?, seed))
        }
        "patch_embed" => {
            let embed = PatchEmbed::new(&mut store, "embed", 2, 3, 5, &mut init);
            randomize(&mut store, &mut init);
            let x = init.uniform(&[4, 6, 3], 1.0);
            grad_check_params(&store, &[x], &opts, |p, v| probe(embed.forward(p, v[0])?, seed))
        }
        "secmamba" => {
            let block = SecMambaBlock::new(&mut store, "secmamba", 6, 4, 3, &mut init);
            randomize(&mut store, &mut init);
            let x = init.uniform(&[5, 6], 1.5);
            grad_check_params(&store, &[x], &opts, |p, v| {
                probe(block.forward(p, v[0], SsmRoute::Scan)?, seed)
            })
        }
        "attention" => {
            let block = AttentionBlock::new(&mut store, "attention", 4, 2, &mut init)?;
            randomize(&mut store, &mut init);
            let x = init.uniform(&[5, 4], 1.5);
            grad_check_params(&store, &[x], &opts, |p, v| probe(block.forward(p, v[0])?, seed))
        }
        "downsample" => {
            let down = Downsample::new(&mut store, "down", 3, 2, &mut init);
            randomize(&mut store, &mut init);
            let x = init.uniform(&[16, 3], 1.0);
            grad_check_params(&store, &[x], &opts, |p, v| probe(down.forward(p, v[0])?, seed))
        }
        "seqmoe_stage" => {
            let dims = StageDims {
                d: 4,
                d_ie: 4,
                d_hs: 3,
                n_heads: 2,
                d_g: 3,
            };
            let stage = Stage::new(&mut store, "stage", &StageConfig::runs(1, 1, true), dims, &mut init)?;
            randomize(&mut store, &mut init);
            let x = init.uniform(&[4, 4], 1.5);
            grad_check_params(&store, &[x], &opts, |p, v| {
                probe(stage.forward(p, v[0], StageOptions::default())?, seed)
            })
        }
        "fusion_gate" => {
            let gate = Gate::new(&mut store, "fusion", 6, 4, &mut init);
            randomize(&mut store, &mut init);
            let crop = init.uniform(&[6], 1.5);
            let whole = init.uniform(&[6], 1.5);
            grad_check_params(&store, &[crop, whole], &opts, |p, v| {
                let (_, fused) = fuse_streams(p, &gate, v[0], v[1], None)?;
                probe(fused, seed)
            })
        }
        "mlp_head" => {
            let head = MlpHead::new(&mut store, "head", 6, 5, &mut init);
            randomize(&mut store, &mut init);
            let z = init.uniform(&[6], 1.5);
            grad_check_params(&store, &[z], &opts, |p, v| probe(head.forward(p, v[0])?, seed))
        }
        "loss" => {
            let logits = init.uniform(&[4, 2], 2.0);
            return grad_check_many(|v| label_smoothed_ce(v[0], &[0, 1, 1, 0], 0.1), &[logits], &opts);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown module {other}; expected one of {}",
                MODULES.join(", ")
            )))
        }
    };
    report
}

/// Gradient checks of `module`, or of every module in [`MODULES`].
pub fn check_modules(module: Option<&str>, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let names: Vec<&str> = match module {
        Some(m) => vec![m],
        None => MODULES.to_vec(),
    };
    names
        .into_iter()
        .map(|n| Ok((n.to_string(), check_module(n, seed)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    /// `(N, d_ie, d_hs)` of the case with the largest difference.
    pub worst: (usize, usize, usize),
}

pub const EQUIVALENCE_LENGTHS: [usize; 6] = [1, 2, 3, 8, 32, 64];

/// Runs both SSM routes on random 64-bit cases with `N` drawn from
/// [`EQUIVALENCE_LENGTHS`], `d_ie ≤ 8`, `d_hs ≤ 16`, and reports the largest
/// elementwise difference.
pub fn scan_conv_equivalence(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport {
        trials,
        max_abs_diff: 0.0,
        worst: (0, 0, 0),
    };
    for t in 0..trials {
        let n = EQUIVALENCE_LENGTHS[t % EQUIVALENCE_LENGTHS.len()];
        let d_ie = rng.gen_range(1..=8);
        let d_hs = rng.gen_range(1..=16);
        let params = SsmParams::<f64>::random(d_ie, d_hs, &mut rng);
        let x: Vec<f64> = (0..n * d_ie).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let x = Tensor::from_f64(&[n, d_ie], &x)?;
        let scanned = ssm::scan(&params, &x)?;
        let convolved = ssm::convolve(&params, &x)?;
        let diff = scanned
            .data()
            .iter()
            .zip(convolved.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !diff.is_finite() {
            return Err(Error::Input(format!("non-finite SSM output at N = {n}")));
        }
        if diff > report.max_abs_diff {
            report.max_abs_diff = diff;
            report.worst = (n, d_ie, d_hs);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(check_module("nope", 0).is_err());
    }

    #[test]
    fn fusion_gate_and_loss_pass() {
        for name in ["fusion_gate", "loss"] {
            let r = check_module(name, 3).unwrap();
            assert!(r.pass, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn equivalence_covers_all_lengths() {
        let r = scan_conv_equivalence(12, 1).unwrap();
        assert_eq!(r.trials, 12);
        assert!(r.max_abs_diff < 1e-10);
    }
}
