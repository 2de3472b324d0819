use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Seeded ordering key for a breast, independent of sample order.
fn group_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Partitions samples so that all samples of one breast land on the same
/// side. Breasts are visited in seeded hash order and added to the training
/// side while that brings its size closer to `round(fraction · n)`.
///
/// Returns sample indices; both sides keep the input order.
pub fn split_by_breast(samples: &[Sample], spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "split_by_breast" });
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.breast_id.as_str()).or_default().push(i);
    }
    let mut train_ids = std::collections::HashSet::new();
    if groups.len() == 1 && spec.train_fraction > 0.0 && spec.train_fraction < 1.0 {
        log::warn!("all samples share one breast id; the whole set goes to training");
        train_ids.extend(groups.keys().copied());
    } else {
        let mut order: Vec<(&str, usize)> = groups.iter().map(|(id, v)| (*id, v.len())).collect();
        order.sort_by_cached_key(|(id, _)| (group_key(spec.seed, id), id.to_string()));
        let target = (spec.train_fraction * samples.len() as f64).round() as usize;
        let mut count = 0usize;
        for (id, n) in order {
            if count.abs_diff(target) > (count + n).abs_diff(target) {
                count += n;
                train_ids.insert(id);
            }
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| train_ids.contains(samples[i].breast_id.as_str()));
    Ok((train, test))
}
