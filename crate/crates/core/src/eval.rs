//! Translation-quality metrics (PSNR, SSIM) and the downstream expression
//! recognition protocol (pooled-pixel multinomial logistic regression,
//! accuracy and macro F1 with and without translated augmentation).

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Image;

fn check_same_shape(a: &Image, b: &Image, context: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for [0,1] images, capped at 100 dB for
/// (near-)identical inputs so aggregation stays finite.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let mse = a.sub(b)?.sq_norm() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean local SSIM with a 7x7 Gaussian window (sigma 1.5), C1 = (0.01 L)^2,
/// C2 = (0.03 L)^2 at L = 1, reflect padding.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    if a.channels() != 1 {
        return Err(Error::shape(
            "ssim",
            "1 channel".to_string(),
            format!("{}", a.channels()),
        ));
    }
    let (h, w) = (a.height(), a.width());
    if h < 7 || w < 7 {
        return Err(Error::shape(
            "ssim",
            "at least 7x7".to_string(),
            format!("{h}x{w}"),
        ));
    }
    let window = gaussian_window7();
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        j as usize
    };

    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -3isize..=3 {
                for dx in -3isize..=3 {
                    let wgt = window[(dy + 3) as usize * 7 + (dx + 3) as usize];
                    let av = a.at(0, reflect(y + dy, h), reflect(x + dx, w));
                    let bv = b.at(0, reflect(y + dy, h), reflect(x + dx, w));
                    mx += wgt * av;
                    my += wgt * bv;
                    sxx += wgt * av * av;
                    syy += wgt * bv * bv;
                    sxy += wgt * av * bv;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let num = (2.0 * mx * my + C1) * (2.0 * cxy + C2);
            let den = (mx * mx + my * my + C1) * (vx + vy + C2);
            total += num / den;
        }
    }
    Ok(total / (h * w) as f64)
}

fn gaussian_window7() -> [f64; 49] {
    let sigma = 1.5f64;
    let mut w = [0.0; 49];
    let mut sum = 0.0;
    for y in 0..7 {
        for x in 0..7 {
            let dy = y as f64 - 3.0;
            let dx = x as f64 - 3.0;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            w[y * 7 + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Pearson correlation over all pixels of two equally shaped images.
pub fn pearson(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b, "pearson")?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(num / (va.sqrt() * vb.sqrt() + 1e-300))
}

/// Confusion matrix; rows = true class, columns = predicted class.
pub fn confusion_matrix(preds: &[u8], truth: &[u8], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != truth.len() {
        return Err(Error::shape(
            "confusion_matrix",
            format!("{} labels", truth.len()),
            format!("{}", preds.len()),
        ));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in preds.iter().zip(truth.iter()) {
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix: 2PR/(P+R), zero when P + R = 0.
pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    let n = confusion.len();
    (0..n)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let fp: f64 = (0..n).filter(|&i| i != k).map(|i| confusion[i][k] as f64).sum();
            let fnn: f64 = (0..n).filter(|&j| j != k).map(|j| confusion[k][j] as f64).sum();
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all `n_classes`.
pub fn macro_f1(preds: &[u8], truth: &[u8], n_classes: usize) -> Result<f64> {
    let m = confusion_matrix(preds, truth, n_classes)?;
    let f1 = per_class_f1(&m);
    Ok(f1.iter().sum::<f64>() / n_classes as f64)
}

// ---------------------------------------------------------------------------
// classifier

/// Multinomial logistic regression over 2x2-mean-pooled flattened pixels.
pub struct Classifier {
    n_classes: usize,
    pooled: usize,
    /// Row-major [n_classes][n_features + 1]; last column is the bias.
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClassifierOpts {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierOpts {
    fn default() -> Self {
        ClassifierOpts {
            iterations: 400,
            learning_rate: 0.5,
        }
    }
}

fn pool_features(im: &Image) -> Vec<f64> {
    let (h, w) = (im.height(), im.width());
    let (ph, pw) = (h / 2, w / 2);
    let mut f = Vec::with_capacity(ph * pw + 1);
    for y in 0..ph {
        for x in 0..pw {
            let s = im.at(0, 2 * y, 2 * x)
                + im.at(0, 2 * y, 2 * x + 1)
                + im.at(0, 2 * y + 1, 2 * x)
                + im.at(0, 2 * y + 1, 2 * x + 1);
            f.push(s * 0.25);
        }
    }
    f.push(1.0); // bias feature
    f
}

/// Mean cross-entropy and its gradient for the flat weight vector.
fn ce_loss_and_grad(
    weights: &[f64],
    feats: &[Vec<f64>],
    labels: &[u8],
    n_classes: usize,
) -> (f64, Vec<f64>) {
    let nf = feats[0].len();
    let n = feats.len() as f64;
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    for (f, &y) in feats.iter().zip(labels.iter()) {
        // logits and a stable softmax
        let mut logits = vec![0.0; n_classes];
        for c in 0..n_classes {
            logits[c] = weights[c * nf..(c + 1) * nf]
                .iter()
                .zip(f.iter())
                .map(|(&w, &x)| w * x)
                .sum();
        }
        let maxl = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - maxl).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(exps[y as usize] / z).ln();
        for c in 0..n_classes {
            let p = exps[c] / z;
            let d = p - if c == y as usize { 1.0 } else { 0.0 };
            for (g, &x) in grad[c * nf..(c + 1) * nf].iter_mut().zip(f.iter()) {
                *g += d * x;
            }
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    (loss / n, grad)
}

/// Trains by full-batch gradient descent to a fixed iteration budget;
/// zero-initialized, so the result is deterministic.
pub fn train_classifier(
    images: &[&Image],
    labels: &[u8],
    n_classes: usize,
    opts: &ClassifierOpts,
) -> Result<Classifier> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "classifier needs matching non-empty images/labels, got {}/{}",
            images.len(),
            labels.len()
        )));
    }
    let distinct: HashSet<u8> = labels.iter().cloned().collect();
    if distinct.len() < 2 {
        return Err(Error::Dataset(
            "classifier training set has a single class".into(),
        ));
    }
    let feats: Vec<Vec<f64>> = images.iter().map(|im| pool_features(im)).collect();
    let nf = feats[0].len();
    let mut weights = vec![0.0; n_classes * nf];
    for _ in 0..opts.iterations {
        let (_, grad) = ce_loss_and_grad(&weights, &feats, labels, n_classes);
        for (w, g) in weights.iter_mut().zip(grad.iter()) {
            *w -= opts.learning_rate * g;
        }
    }
    Ok(Classifier {
        n_classes,
        pooled: images[0].height() / 2 * (images[0].width() / 2),
        weights,
    })
}

impl Classifier {
    pub fn predict(&self, im: &Image) -> Result<u8> {
        let f = pool_features(im);
        if f.len() != self.pooled + 1 {
            return Err(Error::shape(
                "classifier predict",
                format!("{} pooled features", self.pooled),
                format!("{}", f.len() - 1),
            ));
        }
        let nf = f.len();
        let mut best = (f64::NEG_INFINITY, 0u8);
        for c in 0..self.n_classes {
            let logit: f64 = self.weights[c * nf..(c + 1) * nf]
                .iter()
                .zip(f.iter())
                .map(|(&w, &x)| w * x)
                .sum();
            if logit > best.0 {
                best = (logit, c as u8);
            }
        }
        Ok(best.1)
    }

    pub fn accuracy(&self, images: &[&Image], labels: &[u8]) -> Result<f64> {
        let preds = self.predict_all(images)?;
        let hits = preds
            .iter()
            .zip(labels.iter())
            .filter(|(p, t)| p == t)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn predict_all(&self, images: &[&Image]) -> Result<Vec<u8>> {
        images.iter().map(|im| self.predict(im)).collect()
    }
}

// ---------------------------------------------------------------------------
// FER protocol

/// Image with its expression label and subject id, [0,1] range.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Image,
    pub label: u8,
    pub subject: u32,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FerCondition {
    WithoutTranslation,
    WithTranslation,
}

#[derive(Clone, Debug, Serialize)]
pub struct FerReport {
    pub condition: FerCondition,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl FerReport {
    /// One CSV row per class plus a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,class,f1,accuracy,macro_f1\n");
        let tag = match self.condition {
            FerCondition::WithoutTranslation => "without_translation",
            FerCondition::WithTranslation => "with_translation",
        };
        for (k, f1) in self.per_class_f1.iter().enumerate() {
            out.push_str(&format!("{tag},{k},{f1},,\n"));
        }
        out.push_str(&format!("{tag},all,,{},{}\n", self.accuracy, self.macro_f1));
        out
    }
}

fn build_report(
    condition: FerCondition,
    clf: &Classifier,
    test: &[LabeledImage],
    n_classes: usize,
) -> Result<FerReport> {
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let truth: Vec<u8> = test.iter().map(|s| s.label).collect();
    let preds = clf.predict_all(&images)?;
    let confusion = confusion_matrix(&preds, &truth, n_classes)?;
    let f1 = per_class_f1(&confusion);
    let hits = preds
        .iter()
        .zip(truth.iter())
        .filter(|(p, t)| p == t)
        .count();
    Ok(FerReport {
        condition,
        accuracy: hits as f64 / truth.len() as f64,
        macro_f1: f1.iter().sum::<f64>() / n_classes as f64,
        per_class_f1: f1,
        confusion,
    })
}

/// Trains the classifier twice (target-modality training samples alone, and
/// with translated extras added), evaluates both on the held-out test set.
/// Any subject shared between a training condition and the test set is a
/// hard error.
pub fn evaluate_fer_protocol(
    real_train: &[LabeledImage],
    synthetic_extra: &[LabeledImage],
    test: &[LabeledImage],
    n_classes: usize,
    opts: &ClassifierOpts,
) -> Result<(FerReport, FerReport)> {
    let test_subjects: HashSet<u32> = test.iter().map(|s| s.subject).collect();
    for s in real_train.iter().chain(synthetic_extra.iter()) {
        if test_subjects.contains(&s.subject) {
            return Err(Error::Dataset(format!(
                "subject {} appears in both training and test splits",
                s.subject
            )));
        }
    }

    let base_images: Vec<&Image> = real_train.iter().map(|s| &s.image).collect();
    let base_labels: Vec<u8> = real_train.iter().map(|s| s.label).collect();
    let clf_base = train_classifier(&base_images, &base_labels, n_classes, opts)?;
    let without = build_report(FerCondition::WithoutTranslation, &clf_base, test, n_classes)?;

    let mut aug_images = base_images.clone();
    let mut aug_labels = base_labels.clone();
    for s in synthetic_extra {
        aug_images.push(&s.image);
        aug_labels.push(s.label);
    }
    let clf_aug = train_classifier(&aug_images, &aug_labels, n_classes, opts)?;
    let with = build_report(FerCondition::WithTranslation, &clf_aug, test, n_classes)?;

    Ok((without, with))
}

/// Per-image translation quality plus dataset-level summary statistics.
#[derive(Clone, Debug, Serialize)]
pub struct QualityReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

impl QualityReport {
    pub fn from_pairs(pairs: &[(&Image, &Image)]) -> Result<QualityReport> {
        let mut ps = Vec::with_capacity(pairs.len());
        let mut ss = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            ps.push(psnr(a, b)?);
            ss.push(ssim(a, b)?);
        }
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().max(1) as f64;
            (mean, var.sqrt())
        };
        let (pm, psd) = stats(&ps);
        let (sm, ssd) = stats(&ss);
        Ok(QualityReport {
            psnr: ps,
            ssim: ss,
            psnr_mean: pm,
            psnr_std: psd,
            ssim_mean: sm,
            ssim_std: ssd,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,psnr,ssim\n");
        for (i, (p, s)) in self.psnr.iter().zip(self.ssim.iter()).enumerate() {
            out.push_str(&format!("{i},{p},{s}\n"));
        }
        out
    }
}
