//! Small encoder-decoder denoiser with sinusoidal time conditioning.
//!
//! Fixed recipe per stage: strided 3x3 convolutions down, nearest-neighbour
//! upsampling with channel-concatenated skips back up, SiLU activations, no
//! normalization. The final convolution is zero-initialized so a fresh
//! network outputs zeros. The same block library backs both the score
//! network and the landmark heatmap network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_backward, time_embedding, upsample2x, upsample2x_backward, Conv2d, GradSet,
    ParamSet, TimeBias,
};
use crate::rng::SeedStream;
use crate::tensor::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.image_size == 0
            || self.base_channels == 0
            || self.depth == 0
        {
            return Err(Error::InvalidConfig(
                "network dimensions must be positive".into(),
            ));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "time_embed_dim must be even and >= 4".into(),
            ));
        }
        if self.image_size % (1 << self.depth) != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^depth = {}",
                self.image_size,
                1 << self.depth
            )));
        }
        Ok(())
    }

    /// Spatial size at each encoder level, full resolution first.
    pub fn stage_sizes(&self) -> Vec<usize> {
        (0..=self.depth).map(|k| self.image_size >> k).collect()
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

struct EncStage {
    down: Conv2d,
    time: TimeBias,
    conv: Conv2d,
}

struct DecStage {
    conv: Conv2d,
    time: TimeBias,
}

/// Encoder-decoder network over a flat [`ParamSet`].
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamSet,
    stem: Conv2d,
    stem_time: TimeBias,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    head: Conv2d,
}

/// Cached activations of one forward pass, consumed by `backward`.
pub struct Tape {
    emb: Vec<f64>,
    stack: Vec<Image>,
    skips: Vec<Image>,
}

impl Tape {
    fn push(&mut self, im: Image) {
        self.stack.push(im);
    }
    fn pop(&mut self) -> Image {
        self.stack.pop().expect("tape underflow")
    }
}

impl UNet {
    /// Deterministic construction from (config, seed). Hidden conv weights
    /// are fan-in-scaled normals; the head convolution is zero-initialized.
    pub fn build(config: UNetConfig, seed: u64) -> Result<UNet> {
        config.validate()?;
        let mut ps = ParamSet::default();
        let mut rng = SeedStream::new(seed);
        let temb = config.time_embed_dim;

        let stem = Conv2d::new(
            &mut ps,
            &mut rng,
            "stem",
            config.in_channels,
            config.width(0),
            1,
            false,
        );
        let stem_time = TimeBias::new(&mut ps, &mut rng, "stem", config.width(0), temb);

        let mut enc = Vec::new();
        for k in 1..=config.depth {
            let name_a = format!("enc{k}.down");
            let name_b = format!("enc{k}.conv");
            let down = Conv2d::new(
                &mut ps,
                &mut rng,
                &name_a,
                config.width(k - 1),
                config.width(k),
                2,
                false,
            );
            let time = TimeBias::new(&mut ps, &mut rng, &format!("enc{k}"), config.width(k), temb);
            let conv = Conv2d::new(
                &mut ps,
                &mut rng,
                &name_b,
                config.width(k),
                config.width(k),
                1,
                false,
            );
            enc.push(EncStage { down, time, conv });
        }

        let mut dec = Vec::new();
        for k in (1..=config.depth).rev() {
            let name = format!("dec{k}.conv");
            let conv = Conv2d::new(
                &mut ps,
                &mut rng,
                &name,
                config.width(k) + config.width(k - 1),
                config.width(k - 1),
                1,
                false,
            );
            let time = TimeBias::new(&mut ps, &mut rng, &format!("dec{k}"), config.width(k - 1), temb);
            dec.push(DecStage { conv, time });
        }

        let head = Conv2d::new(
            &mut ps,
            &mut rng,
            "head",
            config.width(0),
            config.out_channels,
            1,
            true,
        );

        Ok(UNet {
            config,
            params: ps,
            stem,
            stem_time,
            enc,
            dec,
            head,
        })
    }

    /// Forward pass over an explicit parameter set (layout must match this
    /// network), recording the activation tape for `backward`.
    pub fn forward_with_tape_in(&self, ps: &ParamSet, x: &Image, t: usize, t_max: usize) -> (Image, Tape) {
        debug_assert_eq!(x.channels(), self.config.in_channels);
        debug_assert_eq!(x.height(), self.config.image_size);
        debug_assert_eq!(x.width(), self.config.image_size);
        let emb = time_embedding(t, t_max, self.config.time_embed_dim);
        let mut tape = Tape {
            emb,
            stack: Vec::with_capacity(4 * self.config.depth + 3),
            skips: Vec::with_capacity(self.config.depth),
        };

        tape.push(x.clone());
        let h = self.stem.forward(ps, x);
        let h = self.stem_time.forward(ps, &h, &tape.emb);
        tape.push(h.clone());
        let mut a = silu(&h);
        tape.skips.push(a.clone());

        for (k, stage) in self.enc.iter().enumerate() {
            tape.push(a.clone());
            let h = stage.down.forward(ps, &a);
            let h = stage.time.forward(ps, &h, &tape.emb);
            tape.push(h.clone());
            let a1 = silu(&h);
            tape.push(a1.clone());
            let h2 = stage.conv.forward(ps, &a1);
            tape.push(h2.clone());
            a = silu(&h2);
            if k + 1 < self.config.depth {
                tape.skips.push(a.clone());
            }
        }

        for (j, stage) in self.dec.iter().enumerate() {
            let level = self.config.depth - j; // decoding from level -> level-1
            let u = upsample2x(&a);
            let skip = &tape.skips[level - 1];
            let cat = Image::concat_channels(&[&u, skip]).expect("skip shapes");
            tape.push(cat.clone());
            let h = stage.conv.forward(ps, &cat);
            let h = stage.time.forward(ps, &h, &tape.emb);
            tape.push(h.clone());
            a = silu(&h);
        }

        tape.push(a.clone());
        let out = self.head.forward(ps, &a);
        (out, tape)
    }

    /// Forward pass recording the activation tape for `backward`.
    pub fn forward_with_tape(&self, x: &Image, t: usize, t_max: usize) -> (Image, Tape) {
        self.forward_with_tape_in(&self.params, x, t, t_max)
    }

    /// Forward pass over an explicit parameter set, tape discarded.
    pub fn forward_in(&self, ps: &ParamSet, x: &Image, t: usize, t_max: usize) -> Image {
        self.forward_with_tape_in(ps, x, t, t_max).0
    }

    /// Forward pass without keeping the tape.
    pub fn forward(&self, x: &Image, t: usize, t_max: usize) -> Image {
        self.forward_with_tape(x, t, t_max).0
    }

    /// Reverse-mode pass. Consumes the tape of the matching forward call and
    /// the gradient on the output; returns parameter gradients and the
    /// gradient with respect to the network input.
    pub fn backward(&self, mut tape: Tape, gy: &Image) -> (GradSet, Image) {
        let mut grads = GradSet::zeros_like(&self.params);
        let mut set = |idx: usize, v: Vec<f64>| {
            grads.grads[idx] = v;
        };

        // head
        let a = tape.pop();
        let (mut g, gw, gb) = self.head.backward(&self.params, &a, gy);
        set(self.head.w_idx, gw);
        set(self.head.b_idx, gb);

        // decoder, reverse order; collects gradients for the skip activations
        let mut skip_grads: Vec<Option<Image>> = vec![None; self.config.depth];
        for (j, stage) in self.dec.iter().enumerate().rev() {
            let level = self.config.depth - j;
            let h = tape.pop();
            let g_pre = silu_backward(&h, &g);
            let (gtw, gtb) = stage.time.grads(&g_pre, &tape.emb);
            set(stage.time.w_idx, gtw);
            set(stage.time.b_idx, gtb);
            let cat = tape.pop();
            let (gcat, gw, gb) = stage.conv.backward(&self.params, &cat, &g_pre);
            set(stage.conv.w_idx, gw);
            set(stage.conv.b_idx, gb);
            // split concat gradient: upsampled part first, then the skip
            let up_ch = self.config.width(level);
            let (h2, w2) = (gcat.height(), gcat.width());
            let mut gu = Image::zeros(up_ch, h2, w2);
            gu.data_mut()
                .copy_from_slice(&gcat.data()[..up_ch * h2 * w2]);
            let skip_ch = self.config.width(level - 1);
            let mut gskip = Image::zeros(skip_ch, h2, w2);
            gskip
                .data_mut()
                .copy_from_slice(&gcat.data()[up_ch * h2 * w2..]);
            skip_grads[level - 1] = Some(gskip);
            g = upsample2x_backward(&gu);
        }

        // encoder, reverse order
        for (k, stage) in self.enc.iter().enumerate().rev() {
            let h2 = tape.pop();
            let g1 = silu_backward(&h2, &g);
            let a1 = tape.pop();
            let (g2, gw, gb) = stage.conv.backward(&self.params, &a1, &g1);
            set(stage.conv.w_idx, gw);
            set(stage.conv.b_idx, gb);
            let h = tape.pop();
            let g3 = silu_backward(&h, &g2);
            let (gtw, gtb) = stage.time.grads(&g3, &tape.emb);
            set(stage.time.w_idx, gtw);
            set(stage.time.b_idx, gtb);
            let aprev = tape.pop();
            let (mut g4, gw, gb) = stage.down.backward(&self.params, &aprev, &g3);
            set(stage.down.w_idx, gw);
            set(stage.down.b_idx, gb);
            // the stage input is also a decoder skip; fold that path in
            if let Some(sg) = skip_grads[k].take() {
                g4.add_scaled(&sg, 1.0).expect("skip grad shape");
            }
            g = g4;
        }

        // stem
        let h = tape.pop();
        let g_pre = silu_backward(&h, &g);
        let (gtw, gtb) = self.stem_time.grads(&g_pre, &tape.emb);
        set(self.stem_time.w_idx, gtw);
        set(self.stem_time.b_idx, gtb);
        let x0 = tape.pop();
        let (gx, gw, gb) = self.stem.backward(&self.params, &x0, &g_pre);
        set(self.stem.w_idx, gw);
        set(self.stem.b_idx, gb);

        (grads, gx)
    }

    /// Overwrites every parameter (including the zero head) with fan-in
    /// scaled noise. Gradient-check suites need a non-degenerate head.
    pub fn randomize_params(&mut self, seed: u64) {
        let mut rng = SeedStream::new(seed);
        for p in self.params.iter_mut() {
            let fan = if p.dims.len() > 1 {
                p.dims[1..].iter().product::<usize>()
            } else {
                p.dims[0]
            };
            let std = 1.0 / (fan as f64).sqrt();
            for v in p.data.iter_mut() {
                *v = crate::nn::to_f32_lattice(std * rng.standard_normal());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::UnitGradCheck;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 1,
            image_size: 8,
            base_channels: 4,
            depth: 2,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.image_size = 10; // not divisible by 4
        assert!(c.validate().is_err());
        c.image_size = 8;
        c.time_embed_dim = 7;
        assert!(c.validate().is_err());
        c.time_embed_dim = 8;
        c.base_channels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_sizes_halve_per_depth() {
        let c = UNetConfig {
            in_channels: 1,
            out_channels: 1,
            image_size: 32,
            base_channels: 4,
            depth: 2,
            time_embed_dim: 8,
        };
        assert_eq!(c.stage_sizes(), vec![32, 16, 8]);
    }

    #[test]
    fn fresh_network_outputs_zeros() {
        let net = UNet::build(tiny_config(), 1).unwrap();
        let x = SeedStream::new(2).normal_image(2, 8, 8);
        let y = net.forward(&x, 3, 10);
        assert_eq!(y.shape(), (1, 8, 8));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = UNet::build(tiny_config(), 7).unwrap();
        let b = UNet::build(tiny_config(), 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = UNet::build(tiny_config(), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn output_shape_matches_input_spatial_shape() {
        for (size, depth, base) in [(8usize, 2usize, 4usize), (16, 2, 2), (8, 3, 2), (4, 1, 3)] {
            let cfg = UNetConfig {
                in_channels: 2,
                out_channels: 3,
                image_size: size,
                base_channels: base,
                depth,
                time_embed_dim: 8,
            };
            let mut net = UNet::build(cfg, 5).unwrap();
            net.randomize_params(6);
            let x = SeedStream::new(7).normal_image(2, size, size);
            let y = net.forward(&x, 1, 4);
            assert_eq!(y.shape(), (3, size, size));
            assert!(y.is_finite());
        }
    }

    #[test]
    fn outputs_finite_for_bounded_inputs() {
        let mut net = UNet::build(tiny_config(), 3).unwrap();
        net.randomize_params(4);
        let x = SeedStream::new(5).normal_image(2, 8, 8).scale(5.0).clamp(-5.0, 5.0);
        for t in [1usize, 5, 10] {
            assert!(net.forward(&x, t, 10).is_finite());
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        // Probe objective: dot(forward(x), R) for a fixed random R, so that
        // parameter and input gradients are both exercised end to end.
        let mut net = UNet::build(tiny_config(), 11).unwrap();
        net.randomize_params(12);
        let x = SeedStream::new(13).normal_image(2, 8, 8);
        let probe = SeedStream::new(14).normal_image(1, 8, 8);
        let (t, t_max) = (3usize, 10usize);

        let (y, tape) = net.forward_with_tape(&x, t, t_max);
        let _ = y;
        let (grads, gx) = net.backward(tape, &probe);

        let check = UnitGradCheck::new(1e-3, 1e-4, 1e-6);
        check.input(&x, &gx, |xp| net.forward(xp, t, t_max).dot(&probe));

        for idx in 0..net.params.len() {
            let grad = grads.grads[idx].clone();
            let mut ps = net.params.clone();
            let worst = check.worst_params(&mut ps, idx, &grad, |ps_probe| {
                net.forward_in(ps_probe, &x, t, t_max).dot(&probe)
            });
            assert!(
                worst <= 1.0,
                "param {} violation ratio {:.3}",
                net.params.get(idx).name,
                worst
            );
        }
    }
}
