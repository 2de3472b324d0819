use std::sync::Arc;

use super::conv::im2col_index;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Non-overlapping `P×P` patches, flattened and linearly projected to
/// `d_pe`. Patches are ordered row-major; each is flattened
/// `(row, column, channel)`.
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch: usize,
    pub channels: usize,
    pub d_pe: usize,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        patch: usize,
        channels: usize,
        d_pe: usize,
        init: &mut Init,
    ) -> Self {
        let fan_in = patch * patch * channels;
        Self {
            weight: store.add(format!("{prefix}.weight"), init.linear(d_pe, fan_in)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_pe])),
            patch,
            channels,
            d_pe,
        }
    }

    /// Number of patches an `h × w` input yields.
    pub fn num_patches(&self, h: usize, w: usize) -> Result<usize> {
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 {
            return Err(Error::Patching {
                height: h,
                width: w,
                patch: self.patch,
            });
        }
        Ok((h / self.patch) * (w / self.patch))
    }

    /// `[h × w × c] → [N_P × d_pe]`
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = image.shape();
        let [h, w, c] = shape[..] else {
            return Err(Error::Rank {
                op: "patch_embed",
                expected: "[height × width × channels]",
                shape,
            });
        };
        if c != self.channels {
            return Err(Error::dim("patch_embed", &shape, &[self.channels]));
        }
        let n = self.num_patches(h, w)?;
        let (index, _, _) = im2col_index(h, w, c, self.patch, self.patch, 0);
        let patches = image.gather(Arc::new(index), &[n, self.patch * self.patch * c])?;
        patches.linear(p.get(self.weight), Some(p.get(self.bias)))
    }

    pub fn param_count(patch: usize, channels: usize, d_pe: usize) -> usize {
        d_pe * patch * patch * channels + d_pe
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn embed(store: &mut ParamStore<f64>, patch: usize, d: usize) -> PatchEmbed {
        PatchEmbed::new(store, "pe", patch, 1, d, &mut Init::new(ChaCha8Rng::seed_from_u64(0)))
    }

    #[test]
    fn patch_counts() {
        let mut store = ParamStore::new();
        let pe = embed(&mut store, 2, 3);
        assert_eq!(pe.num_patches(4, 4).unwrap(), 4);
        let pe = embed(&mut ParamStore::new(), 16, 3);
        assert_eq!(pe.num_patches(224, 224).unwrap(), 196);
        assert!(matches!(
            pe.num_patches(100, 224),
            Err(Error::Patching { height: 100, width: 224, patch: 16 })
        ));
    }

    #[test]
    fn zero_projection_yields_bias_rows() {
        let mut store = ParamStore::new();
        let pe = embed(&mut store, 2, 3);
        store.set(pe.weight, Tensor::zeros(&[3, 4])).unwrap();
        store.set(pe.bias, Tensor::from_f64(&[3], &[1., -2., 0.5]).unwrap()).unwrap();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let img = tape.constant(Tensor::full(&[4, 6, 1], 0.3));
        let out = pe.forward(&p, img).unwrap().value();
        assert_eq!(out.shape(), &[6, 3]);
        for row in out.data().chunks(3) {
            assert_eq!(row, &[1., -2., 0.5]);
        }
    }

    #[test]
    fn patches_are_row_major_and_flattened_row_first() {
        let mut store = ParamStore::new();
        let pe = embed(&mut store, 2, 4);
        store.set(pe.weight, Tensor::eye(4)).unwrap();
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let out = pe
            .forward(&p, tape.constant(Tensor::from_f64(&[4, 4, 1], &img).unwrap()))
            .unwrap()
            .value();
        assert_eq!(&out.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&out.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&out.data()[8..12], &[8., 9., 12., 13.]);
    }
}
