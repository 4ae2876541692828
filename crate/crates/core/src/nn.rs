//! Building blocks for the denoiser networks: 3x3 convolutions, SiLU,
//! nearest-neighbour upsampling, sinusoidal time embeddings and the learned
//! per-channel time bias. Forward and backward rules are hand-derived; the
//! finite-difference suites are the arbiter of their correctness.
//!
//! Parameters live in a flat [`ParamSet`] so the optimizer and checkpoint
//! code can treat every network uniformly. Parameter values are kept on the
//! f32 lattice (stored in f64, rounded after init and after every optimizer
//! step) because the checkpoint payload is little-endian f32 and round trips
//! must be bit-exact.

use crate::rng::SeedStream;
use crate::tensor::Image;

/// Rounds through f32 so the value survives a checkpoint round trip exactly.
#[inline]
pub fn to_f32_lattice(x: f64) -> f64 {
    x as f32 as f64
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// Flat collection of parameters; layers hold indices into it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> usize {
        let dims_len: usize = dims.iter().product();
        assert_eq!(dims_len, data.len(), "param dims/data mismatch");
        self.params.push(Param {
            name: name.into(),
            dims,
            data,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Per-parameter gradients, aligned with the owning [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GradSet {
    pub grads: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(ps: &ParamSet) -> Self {
        GradSet {
            grads: ps.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradSet, s: f64) {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Sinusoidal embedding of the normalized step t/T.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 4 && dim % 2 == 0, "time_embed_dim must be even, >= 4");
    let half = dim / 2;
    let pos = 1000.0 * t as f64 / t_max as f64;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        e[i] = (pos * freq).sin();
        e[half + i] = (pos * freq).cos();
    }
    e
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x), elementwise.
pub fn silu(x: &Image) -> Image {
    x.map(|v| v * sigmoid(v))
}

/// Backward of SiLU given its input and the output gradient.
pub fn silu_backward(x: &Image, gy: &Image) -> Image {
    x.zip_map(gy, |v, g| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
    .expect("silu_backward shape")
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub w_idx: usize,
    pub b_idx: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut SeedStream,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let fan_in = in_ch * 9;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..out_ch * in_ch * 9)
            .map(|_| {
                if zero_init {
                    0.0
                } else {
                    to_f32_lattice(std * rng.standard_normal())
                }
            })
            .collect();
        let b = vec![0.0; out_ch];
        let w_idx = ps.push(format!("{name}.w"), vec![out_ch, in_ch, 3, 3], w);
        let b_idx = ps.push(format!("{name}.b"), vec![out_ch], b);
        Conv2d {
            in_ch,
            out_ch,
            stride,
            w_idx,
            b_idx,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        // pad 1, kernel 3: stride 1 preserves size, stride 2 halves even sizes.
        (n + 2 - 3) / self.stride + 1
    }

    #[inline]
    fn ox_bounds(&self, kx: isize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = ((1 - kx + s - 1).max(0)) / s;
        let hi = ((w as isize - kx).div_euclid(s) + 1).min(ow as isize);
        (lo as usize, hi.max(0) as usize)
    }

    #[inline]
    fn oy_bounds(&self, ky: isize, h: usize, oh: usize) -> (usize, usize) {
        self.ox_bounds(ky, h, oh)
    }

    pub fn forward(&self, ps: &ParamSet, x: &Image) -> Image {
        assert_eq!(x.channels(), self.in_ch, "conv in_ch");
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let weight = &ps.get(self.w_idx).data;
        let bias = &ps.get(self.b_idx).data;
        let mut out = Image::zeros(self.out_ch, oh, ow);
        let s = self.stride;
        for oc in 0..self.out_ch {
            let oplane = out.channel_mut(oc);
            oplane.fill(bias[oc]);
            for ic in 0..self.in_ch {
                let xplane = x.channel(ic);
                for ky in 0..3isize {
                    let (oy_lo, oy_hi) = self.oy_bounds(ky, h, oh);
                    for kx in 0..3isize {
                        let coef = weight[((oc * self.in_ch + ic) * 3 + ky as usize) * 3 + kx as usize];
                        if coef == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = self.ox_bounds(kx, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky as usize - 1; // ky-1 >= -1; oy*s >= 1 when ky = 0
                            let row_in = iy * w + (ox_lo * s + kx as usize).wrapping_sub(1);
                            let row_out = oy * ow + ox_lo;
                            let n = ox_hi - ox_lo;
                            if s == 1 {
                                let src = &xplane[row_in..row_in + n];
                                let dst = &mut oplane[row_out..row_out + n];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += coef * v;
                                }
                            } else {
                                let dst = &mut oplane[row_out..row_out + n];
                                for (i, d) in dst.iter_mut().enumerate() {
                                    *d += coef * xplane[row_in + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (grad wrt input, grad wrt weight, grad wrt bias).
    pub fn backward(&self, ps: &ParamSet, x: &Image, gy: &Image) -> (Image, Vec<f64>, Vec<f64>) {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (gy.height(), gy.width());
        debug_assert_eq!(oh, self.out_size(h));
        let weight = &ps.get(self.w_idx).data;
        let mut gx = Image::zeros(self.in_ch, h, w);
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; self.out_ch];
        let s = self.stride;
        for oc in 0..self.out_ch {
            let gplane = gy.channel(oc);
            gb[oc] += gplane.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let xplane = x.channel(ic);
                let gxp = gx.channel_mut(ic);
                for ky in 0..3isize {
                    let (oy_lo, oy_hi) = self.oy_bounds(ky, h, oh);
                    for kx in 0..3isize {
                        let widx = ((oc * self.in_ch + ic) * 3 + ky as usize) * 3 + kx as usize;
                        let coef = weight[widx];
                        let (ox_lo, ox_hi) = self.ox_bounds(kx, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky as usize - 1;
                            let row_in = iy * w + (ox_lo * s + kx as usize).wrapping_sub(1);
                            let row_out = oy * ow + ox_lo;
                            let n = ox_hi - ox_lo;
                            let grow = &gplane[row_out..row_out + n];
                            if s == 1 {
                                let xrow = &xplane[row_in..row_in + n];
                                let gxrow = &mut gxp[row_in..row_in + n];
                                let mut dot = 0.0;
                                for ((&g, &xv), gx_el) in
                                    grow.iter().zip(xrow).zip(gxrow.iter_mut())
                                {
                                    dot += g * xv;
                                    *gx_el += coef * g;
                                }
                                acc += dot;
                            } else {
                                for (i, &g) in grow.iter().enumerate() {
                                    let ix = row_in + i * s;
                                    acc += g * xplane[ix];
                                    gxp[ix] += coef * g;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Learned affine map from the time embedding to a per-channel additive bias.
#[derive(Clone, Debug)]
pub struct TimeBias {
    pub channels: usize,
    pub embed_dim: usize,
    pub w_idx: usize,
    pub b_idx: usize,
}

impl TimeBias {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut SeedStream,
        name: &str,
        channels: usize,
        embed_dim: usize,
    ) -> Self {
        let std = 1.0 / (embed_dim as f64).sqrt();
        let w: Vec<f64> = (0..channels * embed_dim)
            .map(|_| to_f32_lattice(std * rng.standard_normal()))
            .collect();
        let b = vec![0.0; channels];
        let w_idx = ps.push(format!("{name}.tw"), vec![channels, embed_dim], w);
        let b_idx = ps.push(format!("{name}.tb"), vec![channels], b);
        TimeBias {
            channels,
            embed_dim,
            w_idx,
            b_idx,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Image, emb: &[f64]) -> Image {
        let weight = &ps.get(self.w_idx).data;
        let bias = &ps.get(self.b_idx).data;
        let mut out = x.clone();
        for c in 0..self.channels {
            let mut v = bias[c];
            for j in 0..self.embed_dim {
                v += weight[c * self.embed_dim + j] * emb[j];
            }
            for p in out.channel_mut(c) {
                *p += v;
            }
        }
        out
    }

    /// Input gradient is `gy` itself; returns (grad weight, grad bias).
    pub fn grads(&self, gy: &Image, emb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.channels * self.embed_dim];
        let mut gb = vec![0.0; self.channels];
        for c in 0..self.channels {
            let gsum: f64 = gy.channel(c).iter().sum();
            gb[c] = gsum;
            for j in 0..self.embed_dim {
                gw[c * self.embed_dim + j] = gsum * emb[j];
            }
        }
        (gw, gb)
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Image) -> Image {
    let (c, h, w) = x.shape();
    let mut out = Image::zeros(c, h * 2, w * 2);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x.at(ch, y, xx);
                *out.at_mut(ch, 2 * y, 2 * xx) = v;
                *out.at_mut(ch, 2 * y, 2 * xx + 1) = v;
                *out.at_mut(ch, 2 * y + 1, 2 * xx) = v;
                *out.at_mut(ch, 2 * y + 1, 2 * xx + 1) = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward(gy: &Image) -> Image {
    let (c, oh, ow) = gy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                *gx.at_mut(ch, y, xx) = gy.at(ch, 2 * y, 2 * xx)
                    + gy.at(ch, 2 * y, 2 * xx + 1)
                    + gy.at(ch, 2 * y + 1, 2 * xx)
                    + gy.at(ch, 2 * y + 1, 2 * xx + 1);
            }
        }
    }
    gx
}
