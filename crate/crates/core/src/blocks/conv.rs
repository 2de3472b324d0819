use std::sync::Arc;

use crate::autograd::{Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Output extent of a strided window scan.
fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Gather index turning an `[h × w × c]` image into `[rows × k·k·c]` windows.
///
/// Windows are visited row-major; each window is flattened as
/// `(dy, dx, channel)`. Padded positions read as zero.
pub fn im2col_index(
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, usize, usize) {
    let ho = out_extent(h, k, stride, pad);
    let wo = out_extent(w, k, stride, pad);
    let mut index = Vec::with_capacity(ho * wo * k * k * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..k {
                for dx in 0..k {
                    let y = (oy * stride + dy) as isize - pad as isize;
                    let x = (ox * stride + dx) as isize - pad as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        index.push(if inside {
                            (y as usize * w + x as usize) * c + ch
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (index, ho, wo)
}

fn hwc<T: Real>(x: &Var<'_, T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        ref other => Err(Error::Rank {
            op,
            expected: "[height × width × channels]",
            shape: other.to_vec(),
        }),
    }
}

/// 2-D convolution on an `[h × w × c_in]` image with weight
/// `[c_out × k·k·c_in]`, returning `[h' × w' × c_out]`.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    let (h, w, c) = hwc(&x, "conv2d")?;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Input(format!("{h}x{w} image smaller than {k}x{k} kernel")));
    }
    let (index, ho, wo) = im2col_index(h, w, c, k, stride, pad);
    let cols = x.gather(Arc::new(index), &[ho * wo, k * k * c])?;
    let out = cols.linear(weight, Some(bias))?;
    let c_out = weight.shape()[0];
    out.reshape(&[ho, wo, c_out])
}

/// Strided nearest sampling `x[s·i, s·j, ch mod c_in]` with channels tiled to
/// `c_out`; the identity path of a strided residual block.
fn strided_skip<'t, T: Real>(x: Var<'t, T>, stride: usize, c_out: usize) -> Result<Var<'t, T>> {
    let (h, w, c) = hwc(&x, "strided_skip")?;
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut index = Vec::with_capacity(ho * wo * c_out);
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c_out {
                index.push(((i * stride) * w + j * stride) * c + ch % c);
            }
        }
    }
    x.gather(Arc::new(index), &[ho, wo, c_out])
}

struct ResidualConv {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    c_out: usize,
}

impl ResidualConv {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, init: &mut Init) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init.linear(c_out, 9 * c_in)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[c_out])),
            w2: store.add(format!("{prefix}.w2"), init.linear(c_out, 9 * c_out)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[c_out])),
            c_out,
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = conv2d(x, p.get(self.w1), p.get(self.b1), 3, 2, 1)?.relu();
        let y = conv2d(y, p.get(self.w2), p.get(self.b2), 3, 1, 1)?;
        strided_skip(x, 2, self.c_out)?.add(y)
    }
}

/// Two residual 3×3 convolution blocks, each halving the spatial extent.
/// Stand-in for the early convolutional stages of the backbone.
pub struct ConvStem {
    blocks: [ResidualConv; 2],
    pub channels: usize,
    prefix: String,
}

impl ConvStem {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, channels: usize, init: &mut Init) -> Self {
        Self {
            blocks: [
                ResidualConv::new(store, &format!("{prefix}.0"), c_in, channels, init),
                ResidualConv::new(store, &format!("{prefix}.1"), channels, channels, init),
            ],
            channels,
            prefix: prefix.to_string(),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.blocks[0].forward(p, image)?;
        self.blocks[1].forward(p, x)
    }

    /// Excludes (or re-includes) the stem parameters from optimization.
    pub fn set_frozen<T: Real>(&self, store: &mut ParamStore<T>, frozen: bool) {
        store.set_frozen_prefix(&format!("{}.", self.prefix), frozen);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.w1, b.b1, b.w2, b.b2])
            .collect()
    }

    pub fn param_count(c_in: usize, channels: usize) -> usize {
        let block = |ci: usize, co: usize| co * 9 * ci + co + co * 9 * co + co;
        block(c_in, channels) + block(channels, channels)
    }
}

/// Strided `factor × factor` convolution over the token grid that doubles
/// the channel width: `[g² × d] → [(g/f)² × 2d]`.
pub struct Downsample {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Downsample {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, factor: usize, init: &mut Init) -> Self {
        let d_out = 2 * d_in;
        Self {
            weight: store.add(format!("{prefix}.weight"), init.linear(d_out, factor * factor * d_in)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out])),
            factor,
            d_in,
            d_out,
        }
    }

    /// Weight selecting the top-left tap of every window, output channel `o`
    /// copying input channel `o mod d_in`.
    pub fn identity_weight<T: Real>(&self) -> Tensor<T> {
        let cols = self.factor * self.factor * self.d_in;
        let mut w = vec![T::zero(); self.d_out * cols];
        for o in 0..self.d_out {
            w[o * cols + o % self.d_in] = T::one();
        }
        Tensor::from_parts(vec![self.d_out, cols], w)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = tokens.shape();
        let [n, d] = shape[..] else {
            return Err(Error::Rank {
                op: "downsample",
                expected: "[tokens × width]",
                shape,
            });
        };
        if d != self.d_in {
            return Err(Error::dim("downsample", &shape, &[self.d_in]));
        }
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || side == 0 || side % self.factor != 0 {
            return Err(Error::Grid {
                tokens: n,
                factor: self.factor,
            });
        }
        let grid = tokens.reshape(&[side, side, d])?;
        let out = conv2d(grid, p.get(self.weight), p.get(self.bias), self.factor, self.factor, 0)?;
        let m = side / self.factor;
        out.reshape(&[m * m, self.d_out])
    }

    pub fn param_count(d_in: usize, factor: usize) -> usize {
        2 * d_in * factor * factor * d_in + 2 * d_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn init() -> Init {
        Init::new(ChaCha8Rng::seed_from_u64(5))
    }

    #[test]
    fn downsample_divides_tokens_by_four() {
        let mut store = ParamStore::<f64>::new();
        let ds = Downsample::new(&mut store, "ds", 3, 2, &mut init());
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(Tensor::zeros(&[16, 3]));
        assert_eq!(ds.forward(&p, x).unwrap().shape(), vec![4, 6]);
        let x = tape.constant(Tensor::zeros(&[9, 3]));
        assert!(matches!(ds.forward(&p, x), Err(Error::Grid { tokens: 9, factor: 2 })));
        let x = tape.constant(Tensor::zeros(&[8, 3]));
        assert!(matches!(ds.forward(&p, x), Err(Error::Grid { .. })));
    }

    #[test]
    fn identity_downsample_samples_top_left() {
        let mut store = ParamStore::<f64>::new();
        let ds = Downsample::new(&mut store, "ds", 2, 2, &mut init());
        store.set(ds.weight, ds.identity_weight()).unwrap();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        // token t of the 4x4 grid carries channels (t, 100 + t)
        let data: Vec<f64> = (0..16).flat_map(|t| [t as f64, 100.0 + t as f64]).collect();
        let x = tape.constant(Tensor::from_f64(&[16, 2], &data).unwrap());
        let out = ds.forward(&p, x).unwrap().value();
        // index oracle: output (i, j) reads grid (2i, 2j)
        let mut want = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let t = (2 * i * 4 + 2 * j) as f64;
                want.extend([t, 100.0 + t, t, 100.0 + t]);
            }
        }
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn zero_weight_stem_is_a_strided_copy() {
        let mut store = ParamStore::<f64>::new();
        let stem = ConvStem::new(&mut store, "stem", 1, 3, &mut init());
        for id in stem.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let (h, w) = (10, 7);
        let img: Vec<f64> = (0..h * w).map(|i| i as f64 * 0.01).collect();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let out = stem
            .forward(&p, tape.constant(Tensor::from_f64(&[h, w, 1], &img).unwrap()))
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[h.div_ceil(4), w.div_ceil(4), 3]);
        for i in 0..h.div_ceil(4) {
            for j in 0..w.div_ceil(4) {
                for c in 0..3 {
                    assert_eq!(out.data()[(i * w.div_ceil(4) + j) * 3 + c], img[(4 * i) * w + 4 * j]);
                }
            }
        }
    }

    #[test]
    fn stem_output_extent_is_ceil_quarter() {
        let mut store = ParamStore::<f64>::new();
        let stem = ConvStem::new(&mut store, "stem", 1, 2, &mut init());
        assert_eq!(store.scalar_count(), ConvStem::param_count(1, 2));
        for (h, w) in [(16, 16), (13, 9), (5, 4)] {
            let tape = Tape::inference();
            let p = Bound::new(&tape, &store);
            let out = stem.forward(&p, tape.constant(Tensor::zeros(&[h, w, 1]))).unwrap();
            assert_eq!(out.shape(), vec![h.div_ceil(4), w.div_ceil(4), 2]);
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut ini = Init::new(ChaCha8Rng::seed_from_u64(2));
        let (h, w, ci, co) = (5, 4, 2, 3);
        let x: Tensor<f64> = ini.uniform(&[h, w, ci], 1.0);
        let wt: Tensor<f64> = ini.uniform(&[co, 9 * ci], 1.0);
        let b: Tensor<f64> = ini.uniform(&[co], 1.0);
        let tape = Tape::inference();
        let out = conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()), 3, 2, 1)
            .unwrap()
            .value();
        let (ho, wo) = (3, 2);
        assert_eq!(out.shape(), &[ho, wo, co]);
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut acc = b.data()[o];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let y = (oy * 2 + dy) as isize - 1;
                            let xx = (ox * 2 + dx) as isize - 1;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += wt.data()[o * 9 * ci + (dy * 3 + dx) * ci + c]
                                    * x.data()[(y as usize * w + xx as usize) * ci + c];
                            }
                        }
                    }
                    assert!((out.data()[(oy * wo + ox) * co + o] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
