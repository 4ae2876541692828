//! Reverse-SDE sampling: unconditional generation and energy-guided
//! conditional translation.
//!
//! One Euler-Maruyama step with unit reverse step size reduces to
//!   x_{t-1} = x_t + 0.5 beta_t x_t + beta_t * score + sqrt(beta_t) * z.
//! Translation runs the same update with the score replaced by
//! s([x_t, c], t) - grad E(x_t, c_t, t), where c is the clean source fed to
//! the network and c_t the source pushed through the forward kernel at the
//! current step.
//!
//! Draw order per image stream (bit-reproducibility contract): the x_T
//! init first, then per visited step t: the noise z (skipped at t = 1,
//! where z is all-zeros), then the c_t perturbation noise (translation
//! only). Batches use one derived stream per image, so parallel sampling
//! cannot change results.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, HeatmapExtractor};
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;
use crate::score::ScoreNet;
use crate::tensor::Image;

#[derive(Clone, Debug)]
pub struct SamplerOptions {
    /// Reverse steps to execute; equal to the schedule T by default.
    /// Fewer steps stride across the index range (coarser integration).
    pub num_steps: usize,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl SamplerOptions {
    pub fn new(sched: &NoiseSchedule, seed: u64) -> Self {
        SamplerOptions {
            num_steps: sched.t_max(),
            seed,
            record_trajectory: false,
        }
    }
}

/// Ordered (t, state) snapshots from t = T down to t = 0.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<(usize, Image)>,
}

/// One discretized reverse step at unit step size.
pub fn reverse_step(
    x_t: &Image,
    t: usize,
    score_total: &Image,
    sched: &NoiseSchedule,
    z: &Image,
) -> Result<Image> {
    if !x_t.same_shape(score_total) || !x_t.same_shape(z) {
        return Err(Error::shape(
            "reverse_step",
            format!("{:?}", x_t.shape()),
            format!("{:?} / {:?}", score_total.shape(), z.shape()),
        ));
    }
    let b = sched.beta(t)?;
    let sb = b.sqrt();
    let mut out = x_t.clone();
    for ((o, &s), &zz) in out
        .data_mut()
        .iter_mut()
        .zip(score_total.data())
        .zip(z.data())
    {
        *o = *o + 0.5 * b * *o + b * s + sb * zz;
    }
    Ok(out)
}

/// Reverse step across `dt` schedule indices (strided sampling).
fn reverse_step_strided(
    x_t: &Image,
    t: usize,
    dt: usize,
    score_total: &Image,
    sched: &NoiseSchedule,
    z: &Image,
) -> Result<Image> {
    let b = sched.beta(t)?;
    let step = dt as f64;
    let sb = (step * b).sqrt();
    let mut out = x_t.clone();
    for ((o, &s), &zz) in out
        .data_mut()
        .iter_mut()
        .zip(score_total.data())
        .zip(z.data())
    {
        *o = *o + step * (0.5 * b * *o + b * s) + sb * zz;
    }
    Ok(out)
}

/// Visited step indices: strictly decreasing from T, ending at 1.
fn step_schedule(t_max: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > t_max {
        return Err(Error::InvalidConfig(format!(
            "num_steps must be in 1..={t_max}, got {num_steps}"
        )));
    }
    if num_steps == t_max {
        return Ok((1..=t_max).rev().collect());
    }
    let mut ts = Vec::with_capacity(num_steps);
    let mut prev = t_max + 1;
    for i in 0..num_steps {
        let frac = if num_steps == 1 {
            0.0
        } else {
            i as f64 / (num_steps - 1) as f64
        };
        let mut t = (t_max as f64 - frac * (t_max - 1) as f64).round() as usize;
        if t >= prev {
            t = prev - 1;
        }
        ts.push(t.max(1));
        prev = ts[i];
    }
    Ok(ts)
}

/// Core reverse loop. `score_total` receives (x_t, t) plus the image stream
/// so guided variants can draw their per-step condition noise in order.
fn reverse_loop(
    height: usize,
    width: usize,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    mut score_total: impl FnMut(&Image, usize, &mut SeedStream) -> Result<Image>,
) -> Result<(Image, Option<Trajectory>)> {
    let ts = step_schedule(sched.t_max(), opts.num_steps)?;
    let mut stream = SeedStream::new(opts.seed);
    let mut x = stream.normal_image(1, height, width);
    let mut snapshots = opts
        .record_trajectory
        .then(|| vec![(sched.t_max(), x.clone())]);

    for (k, &t) in ts.iter().enumerate() {
        let t_next = if k + 1 < ts.len() { ts[k + 1] } else { 0 };
        let z = if t == 1 {
            Image::zeros(1, height, width)
        } else {
            stream.normal_image(1, height, width)
        };
        let s = score_total(&x, t, &mut stream)?;
        let dt = t - t_next;
        x = if dt == 1 {
            reverse_step(&x, t, &s, sched, &z)?
        } else {
            reverse_step_strided(&x, t, dt, &s, sched, &z)?
        };
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step t={t}")));
        }
        if t_next == 0 {
            x = x.clamp(-1.0, 1.0);
        }
        if let Some(snaps) = snapshots.as_mut() {
            snaps.push((t_next, x.clone()));
        }
    }
    Ok((x, snapshots.map(|s| Trajectory { snapshots: s })))
}

fn check_guidance(guidance: &GuidanceConfig, sched: &NoiseSchedule) -> Result<()> {
    guidance.validate()?;
    if guidance.lambda_h > 0.0 {
        if let HeatmapExtractor::TrainedNet(net) = &guidance.heatmap {
            if net.config.t_max != sched.t_max() {
                return Err(Error::InvalidConfig(format!(
                    "heatmap extractor trained for T={}, schedule has T={}",
                    net.config.t_max,
                    sched.t_max()
                )));
            }
        }
    }
    Ok(())
}

/// Energy-guided conditional translation of one source image (in [-1,1]).
/// Starts from pure noise; the source enters through the network condition
/// channel (clean) and through the guidance energies (perturbed per step).
pub fn translate(
    net: &ScoreNet,
    guidance: &GuidanceConfig,
    source: &Image,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<(Image, Option<Trajectory>)> {
    if !net.config.is_conditional() {
        return Err(Error::InvalidConfig(
            "translate needs a conditional score network".into(),
        ));
    }
    check_guidance(guidance, sched)?;
    let n = net.config.image_size;
    if source.shape() != (1, n, n) {
        return Err(Error::shape(
            "translate source",
            format!("(1, {n}, {n})"),
            format!("{:?}", source.shape()),
        ));
    }
    reverse_loop(n, n, sched, opts, |x, t, stream| {
        let c_noise = stream.normal_image(1, n, n);
        let c_t = sched.forward_perturb(source, t, &c_noise)?;
        let mut s = net.forward(x, Some(source), t, sched.t_max())?;
        if guidance.is_active() {
            let g = guidance.combined_grad(x, &c_t, t)?;
            s.add_scaled(&g, -1.0)?;
        }
        Ok(s)
    })
}

/// Unconditional ancestral sampling with the baseline score network.
pub fn sample_unconditional(
    net: &ScoreNet,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<(Image, Option<Trajectory>)> {
    if net.config.is_conditional() {
        return Err(Error::InvalidConfig(
            "sample_unconditional needs an unconditional score network".into(),
        ));
    }
    let n = net.config.image_size;
    reverse_loop(n, n, sched, opts, |x, t, _| {
        net.forward(x, None, t, sched.t_max())
    })
}

/// Reverse run with an arbitrary score function (analytic oracles).
pub fn sample_with_score(
    height: usize,
    width: usize,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    mut score: impl FnMut(&Image, usize) -> Image,
) -> Result<(Image, Option<Trajectory>)> {
    reverse_loop(height, width, sched, opts, |x, t, _| Ok(score(x, t)))
}

/// Translates a batch in parallel; image i uses the stream derived from
/// (master seed, i), so results are independent of scheduling.
pub fn translate_batch(
    net: &ScoreNet,
    guidance: &GuidanceConfig,
    sources: &[Image],
    sched: &NoiseSchedule,
    master_seed: u64,
    num_steps: usize,
) -> Result<Vec<Image>> {
    sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let opts = SamplerOptions {
                num_steps,
                seed: seed_for_image(master_seed, i),
                record_trajectory: false,
            };
            translate(net, guidance, src, sched, &opts).map(|(im, _)| im)
        })
        .collect()
}

/// Unconditional batch; same per-image stream derivation as translation.
pub fn sample_unconditional_batch(
    net: &ScoreNet,
    count: usize,
    sched: &NoiseSchedule,
    master_seed: u64,
    num_steps: usize,
) -> Result<Vec<Image>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let opts = SamplerOptions {
                num_steps,
                seed: seed_for_image(master_seed, i),
                record_trajectory: false,
            };
            sample_unconditional(net, sched, &opts).map(|(im, _)| im)
        })
        .collect()
}

/// Per-image stream seed derivation (documented: splitmix of master, index).
pub fn seed_for_image(master_seed: u64, index: usize) -> u64 {
    let mut probe = SeedStream::derive(master_seed, index as u64);
    probe.next_u64()
}
