//! Procedural generator of paired two-modality face-like images with
//! ground-truth keypoints and six expression classes.
//!
//! Every sample renders one canonical face from per-subject geometry plus
//! per-sample jitter: a shaded head ellipse, two eyes, eyebrow strokes and a
//! parametric mouth whose curvature, openness and brow angle encode the
//! expression label. The second modality re-renders the same geometry with
//! inverted skin shading, a different texture band and a stronger vignette,
//! so facial edges (high-frequency content) are shared across modalities
//! while the low-frequency appearance flips.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::{read_pgm, write_pgm};
use crate::rng::SeedStream;
use crate::tensor::Image;

pub const EXPRESSION_CLASSES: usize = 6;
pub const KEYPOINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One paired sample; `nir` is absent for source-modality-only datasets.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub vis: Image,
    pub nir: Option<Image>,
    /// K = 5 (row, col) coordinates: eyes, mouth corners, mouth center.
    pub keypoints: Vec<(f64, f64)>,
    pub label: u8,
    pub subject: u32,
    pub split: Split,
}

impl PairedSample {
    pub fn nir(&self) -> Result<&Image> {
        self.nir
            .as_ref()
            .ok_or_else(|| Error::Dataset("sample has no target-modality image".into()))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PairedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub image_size: usize,
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    /// Scales all per-sample geometric jitter; 0 disables it.
    pub geometry_jitter: f64,
    pub texture_amplitude: f64,
    /// Target-modality skin map: nir = nir_offset + nir_gain * vis_tone.
    pub nir_gain: f64,
    pub nir_offset: f64,
    pub vis_vignette: f64,
    pub nir_vignette: f64,
    /// Added to every subject id (keeps extra datasets disjoint).
    pub subject_offset: u32,
    /// Render the source modality only (no ground-truth target images).
    pub vis_only: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            image_size: 32,
            n_subjects: 10,
            samples_per_subject: 10,
            geometry_jitter: 1.0,
            texture_amplitude: 0.035,
            nir_gain: -0.9,
            nir_offset: 1.08,
            vis_vignette: 0.10,
            nir_vignette: 0.28,
            subject_offset: 0,
            vis_only: false,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidConfig(
                "generator needs image_size >= 16".into(),
            ));
        }
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return Err(Error::InvalidConfig(
                "generator needs subjects and samples_per_subject > 0".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.geometry_jitter) {
            return Err(Error::InvalidConfig(
                "geometry_jitter must be in [0, 2]".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class mouth/eyebrow parameters:
/// (curvature, openness, brow angle, brow raise, eye openness).
pub fn expression_template(label: u8) -> [f64; 5] {
    match label % 6 {
        0 => [0.55, 0.6, 0.15, 2.8, 1.00],
        1 => [-0.50, 0.4, -0.30, 2.2, 0.80],
        2 => [0.05, 2.2, 0.35, 3.6, 1.30],
        3 => [-0.25, 0.5, -0.50, 1.7, 0.90],
        4 => [0.30, 1.5, 0.05, 2.5, 1.10],
        _ => [-0.05, 0.3, 0.28, 3.1, 0.72],
    }
}

struct SubjectGeometry {
    cy: f64,
    cx: f64,
    ax: f64,
    ay: f64,
    skin: f64,
    shade_angle: f64,
    shade_strength: f64,
    eye_dx: f64,
    eye_row: f64,
    mouth_row: f64,
    mouth_w: f64,
    tex_fx: f64,
    tex_fy: f64,
    tex_phase: f64,
}

fn subject_geometry(seed: u64, size: f64) -> SubjectGeometry {
    let mut r = SeedStream::new(seed);
    let s = size / 32.0;
    SubjectGeometry {
        cy: (15.5 + r.uniform_range(-0.8, 0.8)) * s,
        cx: (15.5 + r.uniform_range(-0.8, 0.8)) * s,
        ax: (10.5 + r.uniform_range(-1.2, 1.2)) * s,
        ay: (12.5 + r.uniform_range(-1.0, 1.0)) * s,
        skin: 0.62 + r.uniform_range(-0.08, 0.08),
        shade_angle: r.uniform_range(0.0, std::f64::consts::TAU),
        shade_strength: 0.22 + r.uniform_range(0.0, 0.14),
        eye_dx: (4.3 + r.uniform_range(-0.5, 0.5)) * s,
        eye_row: (-3.6 + r.uniform_range(-0.5, 0.5)) * s,
        mouth_row: (5.2 + r.uniform_range(-0.6, 0.6)) * s,
        mouth_w: (4.4 + r.uniform_range(-0.4, 0.4)) * s,
        tex_fx: r.uniform_range(0.9, 1.5),
        tex_fy: r.uniform_range(0.9, 1.5),
        tex_phase: r.uniform_range(0.0, std::f64::consts::TAU),
    }
}

struct SampleGeometry {
    curv: f64,
    open: f64,
    brow_angle: f64,
    brow_raise: f64,
    eye_open: f64,
    dy: f64,
    dx: f64,
}

fn sample_geometry(seed: u64, label: u8, jitter: f64, size: f64) -> SampleGeometry {
    let mut r = SeedStream::new(seed);
    let t = expression_template(label);
    let s = size / 32.0;
    let j = jitter;
    SampleGeometry {
        curv: t[0] + j * r.uniform_range(-0.08, 0.08),
        open: (t[1] + j * r.uniform_range(-0.15, 0.15)).max(0.1) * s,
        brow_angle: t[2] + j * r.uniform_range(-0.06, 0.06),
        brow_raise: (t[3] + j * r.uniform_range(-0.3, 0.3)) * s,
        eye_open: (t[4] + j * r.uniform_range(-0.08, 0.08)).max(0.4),
        dy: j * r.uniform_range(-0.5, 0.5) * s,
        dx: j * r.uniform_range(-0.5, 0.5) * s,
    }
}

#[inline]
fn blend(v: f64, target: f64, w: f64) -> f64 {
    v * (1.0 - w) + target * w
}

#[inline]
fn soft_disk(r: f64, c: f64, cr: f64, cc: f64, radius: f64) -> f64 {
    let d = ((r - cr).powi(2) + (c - cc).powi(2)).sqrt();
    (radius - d + 0.5).clamp(0.0, 1.0)
}

fn segment_dist(r: f64, c: f64, r0: f64, c0: f64, r1: f64, c1: f64) -> f64 {
    let (vy, vx) = (r1 - r0, c1 - c0);
    let len2 = vy * vy + vx * vx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((r - r0) * vy + (c - c0) * vx) / len2).clamp(0.0, 1.0)
    };
    let (py, px) = (r0 + t * vy, c0 + t * vx);
    ((r - py).powi(2) + (c - px).powi(2)).sqrt()
}

struct FaceSpec {
    sub: SubjectGeometry,
    smp: SampleGeometry,
    size: usize,
}

impl FaceSpec {
    fn center(&self) -> (f64, f64) {
        (self.sub.cy + self.smp.dy, self.sub.cx + self.smp.dx)
    }

    fn mouth_row_at(&self, u: f64) -> f64 {
        let (cy, _) = self.center();
        let curv_px = self.smp.curv * 2.4 * self.size as f64 / 32.0;
        cy + self.sub.mouth_row - curv_px * (u * u - 0.5)
    }

    fn keypoints(&self) -> Vec<(f64, f64)> {
        let (cy, cx) = self.center();
        let er = cy + self.sub.eye_row;
        vec![
            (er, cx - self.sub.eye_dx),
            (er, cx + self.sub.eye_dx),
            (self.mouth_row_at(-1.0), cx - self.sub.mouth_w),
            (self.mouth_row_at(1.0), cx + self.sub.mouth_w),
            (self.mouth_row_at(0.0), cx),
        ]
    }

    /// Renders one modality; shared geometry, modality-specific shading.
    fn render(&self, params: &GenParams, nir: bool) -> Image {
        let n = self.size;
        let s = n as f64 / 32.0;
        let (cy, cx) = self.center();
        let sub = &self.sub;
        let smp = &self.smp;

        // The target modality keeps its background near the skin tone, so
        // its low-frequency field is dominated by the flipped shading and
        // the stronger vignette instead of the figure/ground contrast that
        // dominates the source modality. Facial marks stay dark in both.
        let (bg, vignette) = if nir {
            (0.52, params.nir_vignette)
        } else {
            (0.10, params.vis_vignette)
        };
        let skin = if nir {
            (params.nir_offset + params.nir_gain * sub.skin).clamp(0.2, 0.95)
        } else {
            sub.skin
        };
        // shading direction flips across modalities
        let (shade_sign, shade_gain) = if nir { (1.0, 1.5) } else { (-1.0, 1.0) };
        let (tex_fx, tex_fy, tex_amp, tex_phase) = if nir {
            (
                sub.tex_fx * 2.3,
                sub.tex_fy * 2.3,
                params.texture_amplitude * 0.8,
                sub.tex_phase + 1.3,
            )
        } else {
            (sub.tex_fx, sub.tex_fy, params.texture_amplitude, sub.tex_phase)
        };

        let er = cy + sub.eye_row;
        let eye_radius = 1.35 * smp.eye_open * s;
        let brow_r = er - smp.brow_raise;
        let brow_half = 1.7 * s;
        let mouth_half_thick = 0.55 * s;
        let dmax2 = (n as f64 / 2.0).powi(2) * 2.0;

        let mut im = Image::zeros(1, n, n);
        for r in 0..n {
            for c in 0..n {
                let (rf, cf) = (r as f64, c as f64);
                // head ellipse with a soft edge
                let e = ((cf - cx) / sub.ax).powi(2) + ((rf - cy) / sub.ay).powi(2);
                let w_head = 1.0 / (1.0 + (-(1.0 - e) * 9.0).exp());
                // directional shading over the skin
                let proj = ((cf - cx) * sub.shade_angle.cos()
                    + (rf - cy) * sub.shade_angle.sin())
                    / sub.ax.max(sub.ay);
                let shaded = skin * (1.0 + shade_sign * shade_gain * sub.shade_strength * proj);
                // band-limited texture
                let tex = tex_amp
                    * (std::f64::consts::TAU * tex_fx * cf / n as f64 * 8.0 + tex_phase).sin()
                    * (std::f64::consts::TAU * tex_fy * rf / n as f64 * 8.0).sin();
                let mut v = blend(bg, shaded + tex, w_head);

                // eyes (dark disks; same polarity in both modalities)
                for side in [-1.0, 1.0] {
                    let w = soft_disk(rf, cf, er, cx + side * sub.eye_dx, eye_radius);
                    v = blend(v, 0.12, w);
                }
                // eyebrows (angled strokes above the eyes)
                for side in [-1.0f64, 1.0] {
                    let bc = cx + side * sub.eye_dx;
                    let tilt = side * smp.brow_angle * brow_half;
                    let d = segment_dist(
                        rf,
                        cf,
                        brow_r + tilt,
                        bc - brow_half,
                        brow_r - tilt,
                        bc + brow_half,
                    );
                    let w = (1.1 * s - d).clamp(0.0, 1.0);
                    v = blend(v, 0.18, w);
                }
                // mouth: parametric curve with label-coded curvature/openness
                let u = (cf - cx) / sub.mouth_w;
                if u.abs() <= 1.25 {
                    let uu = u.clamp(-1.0, 1.0);
                    let row = self.mouth_row_at(uu);
                    let half = mouth_half_thick + smp.open * (1.0 - uu * uu);
                    // full stroke strength through the corners, fading past them
                    let taper = ((1.25 - u.abs()) / 0.25).clamp(0.0, 1.0);
                    let w = (half - (rf - row).abs() + 0.5).clamp(0.0, 1.0) * taper;
                    v = blend(v, 0.15, w);
                }

                // vignette
                let d2 = (rf - (n as f64 - 1.0) / 2.0).powi(2) + (cf - (n as f64 - 1.0) / 2.0).powi(2);
                v *= 1.0 - vignette * d2 / dmax2;

                *im.at_mut(0, r, c) = v.clamp(0.0, 1.0);
            }
        }
        im
    }
}

/// Deterministic seeds for subject and sample streams.
fn subject_seed(master: u64, subject: u32) -> u64 {
    SeedStream::derive(master ^ 0x5355424a, subject as u64).next_u64()
}

fn sample_seed(master: u64, index: u64) -> u64 {
    SeedStream::derive(master ^ 0x53414d50, index).next_u64()
}

/// Renders one paired sample from explicit seeds.
pub fn generate_pair(
    params: &GenParams,
    subject_seed: u64,
    sample_seed: u64,
    label: u8,
    subject: u32,
    split: Split,
) -> PairedSample {
    let size = params.image_size;
    let spec = FaceSpec {
        sub: subject_geometry(subject_seed, size as f64),
        smp: sample_geometry(sample_seed, label, params.geometry_jitter, size as f64),
        size,
    };
    let vis = spec.render(params, false);
    let nir = (!params.vis_only).then(|| spec.render(params, true));
    PairedSample {
        vis,
        nir,
        keypoints: spec.keypoints(),
        label,
        subject,
        split,
    }
}

fn split_for_subject(subject_index: usize, n_subjects: usize) -> Split {
    // subject-independent 80/20 split; at least one test subject
    let n_train = ((n_subjects as f64 * 0.8).round() as usize)
        .clamp(1, n_subjects.saturating_sub(1).max(1));
    if subject_index < n_train {
        Split::Train
    } else {
        Split::Test
    }
}

/// Generates the full in-memory dataset, deterministic from the master seed.
/// Labels cycle through the six classes so every split stays balanced.
pub fn generate_dataset(params: &GenParams, master_seed: u64) -> Result<Dataset> {
    params.validate()?;
    let total = params.n_subjects * params.samples_per_subject;
    let samples: Vec<PairedSample> = (0..total)
        .into_par_iter()
        .map(|i| {
            let subj_idx = i / params.samples_per_subject;
            let label = (i % EXPRESSION_CLASSES) as u8;
            let subject = params.subject_offset + subj_idx as u32;
            generate_pair(
                params,
                subject_seed(master_seed, subject),
                sample_seed(master_seed, i as u64),
                label,
                subject,
                split_for_subject(subj_idx, params.n_subjects),
            )
        })
        .collect();
    Ok(Dataset {
        image_size: params.image_size,
        samples,
    })
}

// ---------------------------------------------------------------------------
// on-disk manifest

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSample {
    pub vis_path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nir_path: Option<String>,
    pub keypoints: Vec<(f64, f64)>,
    pub label: u8,
    pub subject: u32,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub image_size: usize,
    pub samples: Vec<ManifestSample>,
}

/// Writes PGM pairs plus a JSON manifest under `out_dir`; byte-deterministic
/// from (params, master_seed).
pub fn write_dataset(params: &GenParams, master_seed: u64, out_dir: &Path) -> Result<Manifest> {
    let data = generate_dataset(params, master_seed)?;
    std::fs::create_dir_all(out_dir.join("vis"))?;
    if !params.vis_only {
        std::fs::create_dir_all(out_dir.join("nir"))?;
    }
    let mut entries = Vec::with_capacity(data.samples.len());
    for (i, s) in data.samples.iter().enumerate() {
        let vis_rel = format!("vis/{i:05}.pgm");
        write_pgm(&out_dir.join(&vis_rel), &s.vis)?;
        let nir_rel = match &s.nir {
            Some(nir) => {
                let rel = format!("nir/{i:05}.pgm");
                write_pgm(&out_dir.join(&rel), nir)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestSample {
            vis_path: vis_rel,
            nir_path: nir_rel,
            keypoints: s.keypoints.clone(),
            label: s.label,
            subject: s.subject,
            split: s.split,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_size: params.image_size,
        samples: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a dataset back from its manifest; pixel values carry the 8-bit
/// quantization of the files.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read(manifest_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for m in &manifest.samples {
        let vis = read_pgm(&resolve(base, &m.vis_path))?;
        let nir = match &m.nir_path {
            Some(p) => Some(read_pgm(&resolve(base, p))?),
            None => None,
        };
        if vis.height() != manifest.image_size || vis.width() != manifest.image_size {
            return Err(Error::Dataset(format!(
                "{}: image size {}x{} does not match manifest size {}",
                m.vis_path,
                vis.height(),
                vis.width(),
                manifest.image_size
            )));
        }
        samples.push(PairedSample {
            vis,
            nir,
            keypoints: m.keypoints.clone(),
            label: m.label,
            subject: m.subject,
            split: m.split,
        });
    }
    Ok(Dataset {
        image_size: manifest.image_size,
        samples,
    })
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}
