// temporary tuning probe, removed before finalizing
use emdiff::eval::{psnr, ssim};
use emdiff::guidance::*;
use emdiff::sampler::{sample_unconditional_batch, translate_batch};
use emdiff::schedule::NoiseSchedule;
use emdiff::score::ScoreNetConfig;
use emdiff::synth::{generate_dataset, GenParams, Split};
use emdiff::trainer::{train_baseline_unconditional, train_score_model, TrainConfig};
use emdiff::Image;
use std::time::Instant;

#[test]
fn probe_guided_quality() {
    let p = GenParams { n_subjects: 25, samples_per_subject: 40, ..GenParams::default() };
    let data = generate_dataset(&p, 1).unwrap();
    let train: Vec<_> = data.split(Split::Train).into_iter().cloned().collect();
    let test: Vec<_> = data.split(Split::Test).into_iter().cloned().collect();

    let pairs: Vec<_> = train.iter().map(|s| (s.vis.to_signed(), s.nir.as_ref().unwrap().to_signed())).collect();
    let nir_only: Vec<_> = pairs.iter().map(|(_, n)| n.clone()).collect();

    let sched = NoiseSchedule::linear(200, 5e-3, 0.1).unwrap();
    let netcfg = ScoreNetConfig { image_size: 32, in_channels: 2, base_channels: 8, depth: 2, time_embed_dim: 32 };
    let basecfg = ScoreNetConfig { in_channels: 1, ..netcfg.clone() };

    let steps = 8000usize;
    let cfg = TrainConfig { batch_size: 8, learning_rate: 1e-3, max_steps: steps, seed: 11, ..TrainConfig::default() };
    let t0 = Instant::now();
    let cond = train_score_model(&pairs, &cfg, &sched, &netcfg, None).unwrap();
    println!("cond {steps} steps {:.0}s loss {:.0}->{:.0}", t0.elapsed().as_secs_f64(),
        cond.log.mean_loss(1,100), cond.log.mean_loss(steps as u64-99, steps as u64));
    let base = train_baseline_unconditional(&nir_only, &cfg, &sched, &basecfg, None).unwrap();
    println!("base done");

    // heatmap extractor for E_h
    let hm_samples: Vec<HeatmapTrainSample> = train.iter().flat_map(|s| {
        [HeatmapTrainSample { image: s.vis.to_signed(), keypoints: s.keypoints.clone() },
         HeatmapTrainSample { image: s.nir.as_ref().unwrap().to_signed(), keypoints: s.keypoints.clone() }]
    }).collect();
    let hm_cfg = HeatmapNetConfig { image_size: 32, keypoints: 5, base_channels: 8, depth: 2,
        time_embed_dim: 32, heat_sigma: 1.5, t_max: 200 };
    let hm_opts = HeatmapTrainOpts { steps: 1200, batch_size: 8, learning_rate: 2e-3, seed: 7 };
    let t1 = Instant::now();
    let (hm, hm_losses) = train_heatmap_extractor(hm_cfg.clone(), &hm_samples, &sched, &hm_opts).unwrap();
    println!("heatmap {:.0}s loss {:.1}->{:.1}", t1.elapsed().as_secs_f64(), hm_losses[..50].iter().sum::<f64>()/50.0, hm_losses[hm_losses.len()-50..].iter().sum::<f64>()/50.0);

    // keypoint localization on clean + perturbed test images
    let mut err_clean = 0.0; let mut err_mid = 0.0;
    let t_mid = (1..=200).min_by_key(|&t| ((sched.alpha_bar(t).unwrap() - 0.5).abs() * 1e9) as u64).unwrap();
    let mut stream = emdiff::rng::SeedStream::new(5);
    for s in test.iter().take(40) {
        let xs = s.nir.as_ref().unwrap().to_signed();
        let h = hm.net.forward(&xs, 1, 200);
        err_clean += mean_keypoint_error(&h, &s.keypoints);
        let eps = stream.normal_image(1, 32, 32);
        let xt = sched.forward_perturb(&xs, t_mid, &eps).unwrap();
        let h2 = hm.net.forward(&xt, t_mid, 200);
        err_mid += mean_keypoint_error(&h2, &s.keypoints);
    }
    println!("keypoint err clean {:.2}px, at alpha_bar=0.5 {:.2}px (t={t_mid})", err_clean/40.0, err_mid/40.0);

    // quality under different guidance configs (24 test images)
    let sources: Vec<_> = test.iter().take(24).map(|s| s.vis.to_signed()).collect();
    let gts: Vec<_> = test.iter().take(24).map(|s| s.nir.as_ref().unwrap().clone()).collect();
    let quality = |outs: &[Image]| -> (f64, f64) {
        let (mut p, mut s) = (0.0, 0.0);
        for i in 0..outs.len() {
            p += psnr(&outs[i].to_unit(), &gts[i]).unwrap();
            s += ssim(&outs[i].to_unit(), &gts[i]).unwrap();
        }
        (p / outs.len() as f64, s / outs.len() as f64)
    };

    let uncond = sample_unconditional_batch(&base.net, 24, &sched, 99, 200).unwrap();
    let (pu, su) = quality(&uncond);
    println!("Baseline: PSNR {pu:.2} SSIM {su:.3}");

    let clone_hm = || { let mut c = HeatmapNet::build(hm_cfg.clone(), 0).unwrap(); c.net.params = hm.net.params.clone(); c };
    let configs: Vec<(&str, f64, f64)> = vec![
        ("Cond", 0.0, 0.0),
        ("Ef<0.05>", 0.0, 0.05),
        ("Ef<0.12>", 0.0, 0.12),
        ("Eh<10>", 10.0, 0.0),
        ("Eh<30>", 30.0, 0.0),
        ("Full<10,0.05>", 10.0, 0.05),
        ("Full<30,0.12>", 30.0, 0.12),
    ];
    for (name, lh, lf) in configs {
        let g = GuidanceConfig { lambda_h: lh, lambda_f: lf, filter: HighPassFilter::Laplacian3x3,
            heatmap: HeatmapExtractor::TrainedNet(clone_hm()) };
        let t = Instant::now();
        let outs = translate_batch(&cond.net, &g, &sources, &sched, 99, 200).unwrap();
        let (p, s) = quality(&outs);
        println!("{name}: PSNR {p:.2} SSIM {s:.3} ({:.0}s)", t.elapsed().as_secs_f64());
    }
}
