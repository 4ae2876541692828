//! Conditional score-matching network and its training-step primitives.
//!
//! The denoiser sees the noisy target concatenated with the clean source
//! image along the channel axis (conditional mode) or the noisy target alone
//! (unconditional baseline), plus a sinusoidal embedding of the step index.
//! The training target for a sample noised with eps at step t is
//! -eps / sqrt(1 - alpha_bar_t), the score of the perturbation kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{to_f32_lattice, GradSet, ParamSet};
use crate::schedule::NoiseSchedule;
use crate::tensor::Image;
use crate::unet::{UNet, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub image_size: usize,
    /// 2 = noisy target plus clean condition; 1 = unconditional baseline.
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig {
            image_size: 32,
            in_channels: 2,
            base_channels: 16,
            depth: 2,
            time_embed_dim: 32,
        }
    }
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 2 {
            return Err(Error::InvalidConfig(format!(
                "score net takes 1 or 2 input channels, got {}",
                self.in_channels
            )));
        }
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.in_channels,
            out_channels: 1,
            image_size: self.image_size,
            base_channels: self.base_channels,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.in_channels == 2
    }
}

/// Score estimator s([x_t, c], t) with hand-derived gradients.
pub struct ScoreNet {
    pub config: ScoreNetConfig,
    pub net: UNet,
}

impl ScoreNet {
    /// Deterministic build; the output convolution is zero-initialized so a
    /// fresh network predicts the zero score everywhere.
    pub fn build(config: ScoreNetConfig, seed: u64) -> Result<ScoreNet> {
        config.validate()?;
        let net = UNet::build(config.unet_config(), seed)?;
        Ok(ScoreNet { config, net })
    }

    fn check_image(&self, im: &Image, what: &'static str) -> Result<()> {
        let want = (1, self.config.image_size, self.config.image_size);
        if im.shape() != want {
            return Err(Error::shape(
                what,
                format!("{:?}", want),
                format!("{:?}", im.shape()),
            ));
        }
        Ok(())
    }

    fn assemble_input(&self, x_t: &Image, cond: Option<&Image>) -> Result<Image> {
        self.check_image(x_t, "score input")?;
        match (self.config.is_conditional(), cond) {
            (true, Some(c)) => {
                self.check_image(c, "score condition")?;
                Image::concat_channels(&[x_t, c])
            }
            (false, None) => Ok(x_t.clone()),
            (true, None) => Err(Error::InvalidConfig(
                "conditional score net needs a condition image".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidConfig(
                "unconditional score net takes no condition image".into(),
            )),
        }
    }

    /// Score estimate at (x_t, c, t); deterministic given the parameters.
    pub fn forward(&self, x_t: &Image, cond: Option<&Image>, t: usize, t_max: usize) -> Result<Image> {
        if t == 0 || t > t_max {
            return Err(Error::StepOutOfRange { t, t_max });
        }
        let input = self.assemble_input(x_t, cond)?;
        Ok(self.net.forward(&input, t, t_max))
    }

    /// One denoising score-matching sample: perturbs `x_target` at step t
    /// with the supplied noise, evaluates the squared L2 distance to the
    /// kernel score, and backpropagates it through every parameter.
    pub fn loss_and_grads(
        &self,
        cond: Option<&Image>,
        x_target: &Image,
        t: usize,
        eps: &Image,
        sched: &NoiseSchedule,
    ) -> Result<(f64, GradSet)> {
        self.check_image(x_target, "loss target image")?;
        if !x_target.same_shape(eps) {
            return Err(Error::shape(
                "loss noise",
                format!("{:?}", x_target.shape()),
                format!("{:?}", eps.shape()),
            ));
        }
        let x_t = sched.forward_perturb(x_target, t, eps)?;
        let ab = sched.alpha_bar(t)?;
        let target = eps.scale(-1.0 / (1.0 - ab).sqrt());

        let input = self.assemble_input(&x_t, cond)?;
        let (pred, tape) = self.net.forward_with_tape(&input, t, sched.t_max());
        let diff = pred.sub(&target)?;
        let loss = diff.sq_norm();
        if !loss.is_finite() {
            return Err(Error::NonFinite("score loss".into()));
        }
        let gy = diff.scale(2.0);
        let (grads, _gx) = self.net.backward(tape, &gy);
        Ok((loss, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// Optimizer state; moment arrays mirror the parameter layout.
///
/// Parameters and moments are rounded through f32 after every update so the
/// float32 checkpoint payload reproduces training state bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(ps: &ParamSet, lr: f64) -> Self {
        OptimizerState {
            kind: OptimKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ps.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: ps.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn sgd(ps: &ParamSet, lr: f64) -> Self {
        OptimizerState {
            kind: OptimKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            m: ps.iter().map(|_| Vec::new()).collect(),
            v: ps.iter().map(|_| Vec::new()).collect(),
        }
    }

    pub fn new(kind: OptimKind, ps: &ParamSet, lr: f64) -> Self {
        match kind {
            OptimKind::Adam => OptimizerState::adam(ps, lr),
            OptimKind::Sgd => OptimizerState::sgd(ps, lr),
        }
    }

    /// Applies one update step in place.
    pub fn apply(&mut self, ps: &mut ParamSet, grads: &GradSet) -> Result<()> {
        if grads.grads.len() != ps.len() {
            return Err(Error::shape(
                "optimizer update",
                format!("{} params", ps.len()),
                format!("{} grads", grads.grads.len()),
            ));
        }
        for (i, p) in ps.iter().enumerate() {
            if grads.grads[i].len() != p.len() {
                return Err(Error::shape(
                    "optimizer update",
                    format!("{} values in {}", p.len(), p.name),
                    format!("{}", grads.grads[i].len()),
                ));
            }
        }
        self.step += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in ps.iter_mut().zip(grads.grads.iter()) {
                    for (x, &gi) in p.data.iter_mut().zip(g.iter()) {
                        *x = to_f32_lattice(*x - self.lr * gi);
                    }
                }
            }
            OptimKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for ((p, g), (m, v)) in ps
                    .iter_mut()
                    .zip(grads.grads.iter())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for j in 0..g.len() {
                        let gi = g[j];
                        m[j] = to_f32_lattice(self.beta1 * m[j] + (1.0 - self.beta1) * gi);
                        v[j] = to_f32_lattice(self.beta2 * v[j] + (1.0 - self.beta2) * gi * gi);
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p.data[j] =
                            to_f32_lattice(p.data[j] - self.lr * mhat / (vhat.sqrt() + self.eps));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::UnitGradCheck;
    use crate::rng::SeedStream;

    fn tiny() -> ScoreNetConfig {
        ScoreNetConfig {
            image_size: 8,
            in_channels: 2,
            base_channels: 4,
            depth: 2,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn fresh_net_outputs_zeros_for_any_input() {
        let net = ScoreNet::build(tiny(), 1).unwrap();
        let mut s = SeedStream::new(2);
        let x = s.normal_image(1, 8, 8);
        let c = s.normal_image(1, 8, 8);
        let y = net.forward(&x, Some(&c), 5, 10).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_bit_deterministic() {
        let a = ScoreNet::build(tiny(), 99).unwrap();
        let b = ScoreNet::build(tiny(), 99).unwrap();
        assert_eq!(a.net.params, b.net.params);
    }

    #[test]
    fn forward_validates_shapes_and_steps() {
        let net = ScoreNet::build(tiny(), 1).unwrap();
        let x = Image::zeros(1, 8, 8);
        let bad = Image::zeros(1, 8, 9);
        assert!(net.forward(&x, Some(&bad), 1, 10).is_err());
        assert!(net.forward(&x, None, 1, 10).is_err());
        assert!(net.forward(&x, Some(&x), 0, 10).is_err());
        assert!(net.forward(&x, Some(&x), 11, 10).is_err());

        let uncond = ScoreNet::build(
            ScoreNetConfig {
                in_channels: 1,
                ..tiny()
            },
            1,
        )
        .unwrap();
        assert!(uncond.forward(&x, Some(&x), 1, 10).is_err());
        assert!(uncond.forward(&x, None, 1, 10).is_ok());
    }

    #[test]
    fn zero_noise_zero_loss_on_fresh_net() {
        let net = ScoreNet::build(tiny(), 1).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut s = SeedStream::new(3);
        let xn = s.normal_image(1, 8, 8);
        let xv = s.normal_image(1, 8, 8);
        let eps = Image::zeros(1, 8, 8);
        let (loss, _) = net.loss_and_grads(Some(&xv), &xn, 4, &eps, &sched).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn fresh_net_loss_is_noise_norm_over_one_minus_alpha_bar() {
        let net = ScoreNet::build(tiny(), 1).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-2, 0.2).unwrap();
        let mut s = SeedStream::new(4);
        let xn = s.normal_image(1, 8, 8);
        let xv = s.normal_image(1, 8, 8);
        let eps = s.normal_image(1, 8, 8);
        let t = 7;
        let (loss, _) = net.loss_and_grads(Some(&xv), &xn, t, &eps, &sched).unwrap();
        let expect = eps.sq_norm() / (1.0 - sched.alpha_bar(t).unwrap());
        assert!((loss - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn loss_grads_match_finite_differences() {
        // Tolerances as pinned: rel err 1e-4 at h = 1e-3, double precision.
        let mut net = ScoreNet::build(tiny(), 5).unwrap();
        net.net.randomize_params(6);
        let sched = NoiseSchedule::linear(10, 1e-2, 0.2).unwrap();
        let mut s = SeedStream::new(7);
        let xn = s.normal_image(1, 8, 8).scale(0.5);
        let xv = s.normal_image(1, 8, 8).scale(0.5);
        let eps = s.normal_image(1, 8, 8);
        let t = 6;
        let (_, grads) = net.loss_and_grads(Some(&xv), &xn, t, &eps, &sched).unwrap();

        // Rebuild the loss as a pure function of a parameter set.
        let x_t = sched.forward_perturb(&xn, t, &eps).unwrap();
        let ab = sched.alpha_bar(t).unwrap();
        let target = eps.scale(-1.0 / (1.0 - ab).sqrt());
        let input = Image::concat_channels(&[&x_t, &xv]).unwrap();
        let loss_of = |ps: &ParamSet| {
            let pred = net.net.forward_in(ps, &input, t, sched.t_max());
            pred.sub(&target).unwrap().sq_norm()
        };

        let check = UnitGradCheck::new(1e-3, 1e-4, 1e-6);
        for idx in 0..net.net.params.len() {
            let mut ps = net.net.params.clone();
            let worst = check.worst_params(&mut ps, idx, &grads.grads[idx], loss_of);
            assert!(
                worst <= 1.0,
                "param {} violation ratio {:.3}",
                net.net.params.get(idx).name,
                worst
            );
        }
    }

    #[test]
    fn sgd_update_definition() {
        let mut ps = ParamSet::default();
        ps.push("p", vec![1], vec![1.0]);
        let mut opt = OptimizerState::sgd(&ps, 0.1);
        let grads = GradSet {
            grads: vec![vec![2.0]],
        };
        opt.apply(&mut ps, &grads).unwrap();
        assert!((ps.get(0).data[0] - 0.8).abs() < 1e-7);
        assert_eq!(opt.step, 1);

        // zero gradient leaves parameters untouched
        let zero = GradSet {
            grads: vec![vec![0.0]],
        };
        let before = ps.get(0).data[0];
        opt.apply(&mut ps, &zero).unwrap();
        assert_eq!(ps.get(0).data[0], before);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for g in [0.001, 1.0, 250.0] {
            let mut ps = ParamSet::default();
            ps.push("p", vec![1], vec![1.0]);
            let mut opt = OptimizerState::adam(&ps, 0.01);
            let grads = GradSet {
                grads: vec![vec![g]],
            };
            opt.apply(&mut ps, &grads).unwrap();
            let delta = (ps.get(0).data[0] - 1.0).abs();
            assert!((delta - 0.01).abs() < 1e-4, "grad {g}: first step {delta}");
        }
    }

    #[test]
    fn optimizer_rejects_mismatched_grads() {
        let mut ps = ParamSet::default();
        ps.push("p", vec![2], vec![1.0, 2.0]);
        let mut opt = OptimizerState::sgd(&ps, 0.1);
        let bad = GradSet {
            grads: vec![vec![1.0]],
        };
        assert!(opt.apply(&mut ps, &bad).is_err());
    }
}
