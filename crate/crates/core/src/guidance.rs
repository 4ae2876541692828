//! Task-specific guidance energies for the reverse SDE.
//!
//! Two differentiable penalties between the denoised target x_t and the
//! source image perturbed to the same step, c_t:
//!   - landmark energy: half squared distance between keypoint heatmaps,
//!   - high-pass energy: squared distance between high-pass filter responses
//!     (high-frequency content is the modality-invariant part of a face).
//! Their gradients with respect to x_t feed the guided sampler as a score
//! modification term. All gradients here are exact; the finite-difference
//! suite is the arbiter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{conv2d_reflect, conv2d_reflect_adjoint, Kernel2d};
use crate::nn::GradSet;
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;
use crate::score::OptimizerState;
use crate::tensor::Image;
use crate::unet::{UNet, UNetConfig};

// ---------------------------------------------------------------------------
// high-pass filter / E_f

/// Linear high-pass filter with zero DC gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HighPassFilter {
    Laplacian3x3,
    IdentityMinusGaussian { blur_sigma: f64 },
}

impl HighPassFilter {
    pub fn apply(&self, x: &Image) -> Result<Image> {
        match self {
            HighPassFilter::Laplacian3x3 => conv2d_reflect(x, &Kernel2d::laplacian3x3()),
            HighPassFilter::IdentityMinusGaussian { blur_sigma } => {
                let blurred = conv2d_reflect(x, &Kernel2d::gaussian(*blur_sigma))?;
                x.sub(&blurred)
            }
        }
    }

    /// Exact adjoint of [`Self::apply`].
    pub fn apply_adjoint(&self, g: &Image) -> Result<Image> {
        match self {
            HighPassFilter::Laplacian3x3 => conv2d_reflect_adjoint(g, &Kernel2d::laplacian3x3()),
            HighPassFilter::IdentityMinusGaussian { blur_sigma } => {
                let folded = conv2d_reflect_adjoint(g, &Kernel2d::gaussian(*blur_sigma))?;
                g.sub(&folded)
            }
        }
    }
}

/// E_f: squared L2 distance of high-pass responses.
pub fn highpass_energy(filter: &HighPassFilter, x_t: &Image, c_t: &Image) -> Result<f64> {
    let rx = filter.apply(x_t)?;
    let rc = filter.apply(c_t)?;
    Ok(rx.sub(&rc)?.sq_norm())
}

/// Gradient of E_f with respect to x_t: 2 Phi^T (Phi x_t - Phi c_t).
pub fn highpass_energy_grad(filter: &HighPassFilter, x_t: &Image, c_t: &Image) -> Result<Image> {
    let rx = filter.apply(x_t)?;
    let rc = filter.apply(c_t)?;
    let residual = rx.sub(&rc)?;
    Ok(filter.apply_adjoint(&residual)?.scale(2.0))
}

// ---------------------------------------------------------------------------
// heatmap extractors / E_h

/// Fixed difference-of-Gaussian filter bank; a linear stand-in for the
/// learned landmark network so energy gradients have a closed-form oracle.
#[derive(Clone, Debug)]
pub struct LinearBank {
    kernels: Vec<Kernel2d>,
}

impl LinearBank {
    /// K channels of difference-of-Gaussian kernels at staggered scales.
    pub fn with_channels(k: usize) -> Self {
        let kernels = (0..k)
            .map(|i| {
                let narrow = 0.6 + 0.2 * i as f64;
                Kernel2d::difference_of_gaussians(narrow, 2.0 * narrow)
            })
            .collect();
        LinearBank { kernels }
    }

    pub fn channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn forward(&self, x: &Image) -> Result<Image> {
        let responses: Vec<Image> = self
            .kernels
            .iter()
            .map(|k| conv2d_reflect(x, k))
            .collect::<Result<_>>()?;
        Image::concat_channels(&responses.iter().collect::<Vec<_>>())
    }

    /// Adjoint: sums per-channel adjoints back into one image.
    pub fn adjoint(&self, g: &Image) -> Result<Image> {
        let mut acc = Image::zeros(1, g.height(), g.width());
        for (c, k) in self.kernels.iter().enumerate() {
            let part = conv2d_reflect_adjoint(&g.extract_channel(c), k)?;
            acc.add_scaled(&part, 1.0)?;
        }
        Ok(acc)
    }
}

/// Configuration of the learned time-dependent landmark heatmap network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapNetConfig {
    pub image_size: usize,
    /// Number of keypoints = output channels.
    pub keypoints: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Gaussian blob radius (pixels) of the regression targets.
    pub heat_sigma: f64,
    /// Diffusion step count the extractor was trained against.
    pub t_max: usize,
}

impl Default for HeatmapNetConfig {
    fn default() -> Self {
        HeatmapNetConfig {
            image_size: 32,
            keypoints: 5,
            base_channels: 8,
            depth: 2,
            time_embed_dim: 32,
            heat_sigma: 1.5,
            t_max: 1000,
        }
    }
}

impl HeatmapNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints == 0 || self.heat_sigma <= 0.0 || self.t_max < 2 {
            return Err(Error::InvalidConfig(
                "heatmap config needs keypoints > 0, heat_sigma > 0, t_max >= 2".into(),
            ));
        }
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: self.keypoints,
            image_size: self.image_size,
            base_channels: self.base_channels,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

/// Learned landmark heatmap regressor, conditioned on the diffusion step.
pub struct HeatmapNet {
    pub config: HeatmapNetConfig,
    pub net: UNet,
}

impl HeatmapNet {
    pub fn build(config: HeatmapNetConfig, seed: u64) -> Result<HeatmapNet> {
        config.validate()?;
        let net = UNet::build(config.unet_config(), seed)?;
        Ok(HeatmapNet { config, net })
    }
}

/// Keypoint heatmap extractor: fixed linear bank or trained network.
pub enum HeatmapExtractor {
    LinearBank(LinearBank),
    TrainedNet(HeatmapNet),
}

impl HeatmapExtractor {
    pub fn channels(&self) -> usize {
        match self {
            HeatmapExtractor::LinearBank(b) => b.channels(),
            HeatmapExtractor::TrainedNet(n) => n.config.keypoints,
        }
    }

    /// K-channel heatmap at the input resolution. The linear bank ignores
    /// the step index; the trained network conditions on it.
    pub fn forward(&self, x: &Image, t: usize) -> Result<Image> {
        if x.channels() != 1 {
            return Err(Error::shape(
                "heatmap input",
                "1 channel".to_string(),
                format!("{}", x.channels()),
            ));
        }
        match self {
            HeatmapExtractor::LinearBank(b) => b.forward(x),
            HeatmapExtractor::TrainedNet(n) => {
                if t == 0 || t > n.config.t_max {
                    return Err(Error::StepOutOfRange {
                        t,
                        t_max: n.config.t_max,
                    });
                }
                Ok(n.net.forward(x, t, n.config.t_max))
            }
        }
    }
}

/// E_h: half squared L2 distance between the two heatmaps.
pub fn heatmap_energy(
    h: &HeatmapExtractor,
    x_t: &Image,
    c_t: &Image,
    t: usize,
) -> Result<f64> {
    let hx = h.forward(x_t, t)?;
    let hc = h.forward(c_t, t)?;
    Ok(0.5 * hx.sub(&hc)?.sq_norm())
}

/// Gradient of E_h with respect to x_t only (c_t held constant).
pub fn heatmap_energy_grad(
    h: &HeatmapExtractor,
    x_t: &Image,
    c_t: &Image,
    t: usize,
) -> Result<Image> {
    match h {
        HeatmapExtractor::LinearBank(bank) => {
            let hx = bank.forward(x_t)?;
            let hc = bank.forward(c_t)?;
            let residual = hx.sub(&hc)?;
            bank.adjoint(&residual)
        }
        HeatmapExtractor::TrainedNet(net) => {
            let hc = net.net.forward(c_t, t, net.config.t_max);
            let (hx, tape) = net.net.forward_with_tape(x_t, t, net.config.t_max);
            let residual = hx.sub(&hc)?;
            let (_, gx) = net.net.backward(tape, &residual);
            Ok(gx)
        }
    }
}

// ---------------------------------------------------------------------------
// combined guidance

/// Weighted pair of guidance energies.
pub struct GuidanceConfig {
    pub lambda_h: f64,
    pub lambda_f: f64,
    pub filter: HighPassFilter,
    pub heatmap: HeatmapExtractor,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_h < 0.0 || self.lambda_f < 0.0 {
            return Err(Error::InvalidConfig(
                "guidance weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// No-op guidance (both weights zero).
    pub fn disabled() -> Self {
        GuidanceConfig {
            lambda_h: 0.0,
            lambda_f: 0.0,
            filter: HighPassFilter::Laplacian3x3,
            heatmap: HeatmapExtractor::LinearBank(LinearBank::with_channels(1)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.lambda_h > 0.0 || self.lambda_f > 0.0
    }

    /// Combined energy value lambda_h E_h + lambda_f E_f.
    pub fn energy(&self, x_t: &Image, c_t: &Image, t: usize) -> Result<f64> {
        let mut e = 0.0;
        if self.lambda_h > 0.0 {
            e += self.lambda_h * heatmap_energy(&self.heatmap, x_t, c_t, t)?;
        }
        if self.lambda_f > 0.0 {
            e += self.lambda_f * highpass_energy(&self.filter, x_t, c_t)?;
        }
        Ok(e)
    }

    /// Gradient of the combined energy with respect to x_t. Terms with zero
    /// weight are skipped entirely.
    pub fn combined_grad(&self, x_t: &Image, c_t: &Image, t: usize) -> Result<Image> {
        if !x_t.same_shape(c_t) {
            return Err(Error::shape(
                "guidance",
                format!("{:?}", x_t.shape()),
                format!("{:?}", c_t.shape()),
            ));
        }
        let mut grad = Image::zeros(1, x_t.height(), x_t.width());
        if self.lambda_h > 0.0 {
            let gh = heatmap_energy_grad(&self.heatmap, x_t, c_t, t)?;
            grad.add_scaled(&gh, self.lambda_h)?;
        }
        if self.lambda_f > 0.0 {
            let gf = highpass_energy_grad(&self.filter, x_t, c_t)?;
            grad.add_scaled(&gf, self.lambda_f)?;
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// heatmap extractor training

/// One supervised sample: image in the diffusion range with its keypoints.
pub struct HeatmapTrainSample {
    pub image: Image,
    pub keypoints: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct HeatmapTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HeatmapTrainOpts {
    fn default() -> Self {
        HeatmapTrainOpts {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Gaussian blob regression target: value exp(-d^2 / (2 sigma^2)) at
/// distance d from each keypoint, peak exactly 1.0 on the keypoint.
pub fn render_heatmap_target(
    keypoints: &[(f64, f64)],
    height: usize,
    width: usize,
    sigma: f64,
) -> Image {
    let mut out = Image::zeros(keypoints.len(), height, width);
    for (k, &(kr, kc)) in keypoints.iter().enumerate() {
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 - kr).powi(2) + (c as f64 - kc).powi(2);
                *out.at_mut(k, r, c) = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}

/// Argmax location per heatmap channel.
pub fn heatmap_peaks(heat: &Image) -> Vec<(usize, usize)> {
    (0..heat.channels())
        .map(|k| {
            let plane = heat.channel(k);
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0usize);
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            (arg / heat.width(), arg % heat.width())
        })
        .collect()
}

/// Mean Euclidean distance between per-channel heatmap peaks and the true
/// keypoints, in pixels.
pub fn mean_keypoint_error(heat: &Image, keypoints: &[(f64, f64)]) -> f64 {
    let peaks = heatmap_peaks(heat);
    let total: f64 = peaks
        .iter()
        .zip(keypoints.iter())
        .map(|(&(pr, pc), &(kr, kc))| ((pr as f64 - kr).powi(2) + (pc as f64 - kc).powi(2)).sqrt())
        .sum();
    total / keypoints.len() as f64
}

/// Trains the landmark network to regress blob heatmaps from images pushed
/// through the forward kernel at uniformly drawn steps; that per-step noise
/// exposure is what makes the extractor time-dependent. Returns the network
/// and the per-step loss trace.
pub fn train_heatmap_extractor(
    config: HeatmapNetConfig,
    samples: &[HeatmapTrainSample],
    sched: &NoiseSchedule,
    opts: &HeatmapTrainOpts,
) -> Result<(HeatmapNet, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty heatmap training set".into()));
    }
    if sched.t_max() != config.t_max {
        return Err(Error::InvalidConfig(format!(
            "heatmap config t_max {} does not match schedule T {}",
            config.t_max,
            sched.t_max()
        )));
    }
    let mut model = HeatmapNet::build(config.clone(), opts.seed)?;
    let mut opt = OptimizerState::adam(&model.net.params, opts.learning_rate);
    let mut stream = SeedStream::new(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);

    for _ in 0..opts.steps {
        // draw the batch plan first so per-sample work is order-independent
        let plan: Vec<(usize, usize, u64)> = (0..opts.batch_size)
            .map(|_| {
                let idx = stream.uniform_below(samples.len() as u64) as usize;
                let t = 1 + stream.uniform_below(sched.t_max() as u64) as usize;
                let eps_seed = stream.next_u64();
                (idx, t, eps_seed)
            })
            .collect();

        let mut total = GradSet::zeros_like(&model.net.params);
        let mut loss_sum = 0.0;
        for &(idx, t, eps_seed) in &plan {
            let sample = &samples[idx];
            let eps = SeedStream::new(eps_seed).normal_image(
                1,
                sample.image.height(),
                sample.image.width(),
            );
            let x_t = sched.forward_perturb(&sample.image, t, &eps)?;
            let target = render_heatmap_target(
                &sample.keypoints,
                x_t.height(),
                x_t.width(),
                model.config.heat_sigma,
            );
            let (pred, tape) = model.net.forward_with_tape(&x_t, t, sched.t_max());
            let diff = pred.sub(&target)?;
            let loss = 0.5 * diff.sq_norm();
            if !loss.is_finite() {
                return Err(Error::NonFinite("heatmap training loss".into()));
            }
            let (grads, _) = model.net.backward(tape, &diff);
            total.add_scaled(&grads, 1.0);
            loss_sum += loss;
        }
        total.scale(1.0 / opts.batch_size as f64);
        opt.apply(&mut model.net.params, &total)?;
        losses.push(loss_sum / opts.batch_size as f64);
    }
    Ok((model, losses))
}
