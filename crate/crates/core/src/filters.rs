//! Fixed linear filters on single-channel images: reflect-padded
//! correlation, its exact adjoint, and the kernel zoo used by the guidance
//! energies (Laplacian, Gaussian blur, difference-of-Gaussians banks).
//!
//! The adjoint folds boundary contributions back through the mirror
//! padding, so `<Kx, y> == <x, K^T y>` holds to round-off and analytic
//! energy gradients match finite differences exactly.

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Odd-sized 2D kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    size: usize,
    data: Vec<f64>,
}

impl Kernel2d {
    pub fn new(size: usize, data: Vec<f64>) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        assert_eq!(data.len(), size * size);
        Kernel2d { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The 4-neighbour Laplacian stencil (0,-1,0; -1,4,-1; 0,-1,0).
    pub fn laplacian3x3() -> Self {
        Kernel2d::new(3, vec![0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0])
    }

    /// Normalized Gaussian, radius ceil(3 sigma).
    pub fn gaussian(sigma: f64) -> Self {
        assert!(sigma > 0.0);
        let r = (3.0 * sigma).ceil() as usize;
        let size = 2 * r + 1;
        let mut data = vec![0.0; size * size];
        let mut sum = 0.0;
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - r as f64;
                let dx = x as f64 - r as f64;
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                data[y * size + x] = v;
                sum += v;
            }
        }
        for v in data.iter_mut() {
            *v /= sum;
        }
        Kernel2d::new(size, data)
    }

    /// Difference of two normalized Gaussians; zero DC gain by construction.
    pub fn difference_of_gaussians(sigma_narrow: f64, sigma_wide: f64) -> Self {
        assert!(sigma_narrow < sigma_wide);
        let narrow = Kernel2d::gaussian(sigma_narrow);
        let wide = Kernel2d::gaussian(sigma_wide);
        let size = wide.size;
        let off = (wide.size - narrow.size) / 2;
        let mut data = wide.data.iter().map(|v| -v).collect::<Vec<_>>();
        for y in 0..narrow.size {
            for x in 0..narrow.size {
                data[(y + off) * size + (x + off)] += narrow.data[y * narrow.size + x];
            }
        }
        Kernel2d::new(size, data)
    }

    pub fn dc_gain(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Mirror index (reflect-101): -1 -> 1, n -> n-2.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // one fold suffices for the radii used here, but stay general
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn require_single_channel(x: &Image, context: &'static str) -> Result<()> {
    if x.channels() != 1 {
        return Err(Error::shape(
            context,
            "1 channel".to_string(),
            format!("{} channels", x.channels()),
        ));
    }
    Ok(())
}

/// Reflect-padded correlation; output has the input's shape.
pub fn conv2d_reflect(x: &Image, k: &Kernel2d) -> Result<Image> {
    require_single_channel(x, "conv2d_reflect")?;
    let (h, w) = (x.height(), x.width());
    let r = k.radius() as isize;
    let mut out = Image::zeros(1, h, w);
    for oy in 0..h as isize {
        for ox in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let iy = reflect(oy + ky, h);
                let krow = ((ky + r) as usize) * k.size();
                for kx in -r..=r {
                    let ix = reflect(ox + kx, w);
                    acc += k.data()[krow + (kx + r) as usize] * x.channel(0)[iy * w + ix];
                }
            }
            out.channel_mut(0)[oy as usize * w + ox as usize] = acc;
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d_reflect`]: scatters each output-gradient tap
/// back to the mirrored source pixel it read from.
pub fn conv2d_reflect_adjoint(g: &Image, k: &Kernel2d) -> Result<Image> {
    require_single_channel(g, "conv2d_reflect_adjoint")?;
    let (h, w) = (g.height(), g.width());
    let r = k.radius() as isize;
    let mut out = Image::zeros(1, h, w);
    for oy in 0..h as isize {
        for ox in 0..w as isize {
            let gv = g.channel(0)[oy as usize * w + ox as usize];
            for ky in -r..=r {
                let iy = reflect(oy + ky, h);
                let krow = ((ky + r) as usize) * k.size();
                for kx in -r..=r {
                    let ix = reflect(ox + kx, w);
                    out.channel_mut(0)[iy * w + ix] += k.data()[krow + (kx + r) as usize] * gv;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn reflect_mirrors_without_repeating_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(0, 5), 0);
        assert_eq!(reflect(4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
    }

    #[test]
    fn laplacian_impulse_stamps_stencil() {
        let mut x = Image::zeros(1, 5, 5);
        *x.at_mut(0, 2, 2) = 1.0;
        let y = conv2d_reflect(&x, &Kernel2d::laplacian3x3()).unwrap();
        let expect = [
            (1usize, 2usize, -1.0),
            (2, 1, -1.0),
            (2, 2, 4.0),
            (2, 3, -1.0),
            (3, 2, -1.0),
        ];
        for (r, c, v) in expect {
            assert_eq!(y.at(0, r, c), v, "at ({r},{c})");
        }
        assert_eq!(y.at(0, 0, 0), 0.0);
        assert_eq!(y.at(0, 1, 1), 0.0);
    }

    #[test]
    fn zero_dc_kernels_kill_constants() {
        let c = Image::filled(1, 6, 6, 3.7);
        for k in [
            Kernel2d::laplacian3x3(),
            Kernel2d::difference_of_gaussians(0.6, 1.2),
        ] {
            assert!(k.dc_gain().abs() < 1e-12);
            let y = conv2d_reflect(&c, &k).unwrap();
            for &v in y.data() {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_preserves_constants() {
        let c = Image::filled(1, 6, 6, 0.4);
        let y = conv2d_reflect(&c, &Kernel2d::gaussian(1.5)).unwrap();
        for &v in y.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_is_linear() {
        let mut s = SeedStream::new(8);
        let a = s.normal_image(1, 7, 7);
        let b = s.normal_image(1, 7, 7);
        let k = Kernel2d::laplacian3x3();
        let lhs = conv2d_reflect(&a.zip_map(&b, |x, y| 2.0 * x + y).unwrap(), &k).unwrap();
        let ya = conv2d_reflect(&a, &k).unwrap();
        let yb = conv2d_reflect(&b, &k).unwrap();
        let rhs = ya.zip_map(&yb, |x, y| 2.0 * x + y).unwrap();
        for (u, v) in lhs.data().iter().zip(rhs.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <Kx, y> == <x, K^T y> over random images, for every kernel kind.
        let mut s = SeedStream::new(9);
        for k in [
            Kernel2d::laplacian3x3(),
            Kernel2d::gaussian(1.2),
            Kernel2d::difference_of_gaussians(0.8, 1.6),
        ] {
            let x = s.normal_image(1, 9, 9);
            let y = s.normal_image(1, 9, 9);
            let lhs = conv2d_reflect(&x, &k).unwrap().dot(&y);
            let rhs = x.dot(&conv2d_reflect_adjoint(&y, &k).unwrap());
            assert!(
                (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
                "kernel size {}: {} vs {}",
                k.size(),
                lhs,
                rhs
            );
        }
    }

    #[test]
    fn multi_channel_input_rejected() {
        let x = Image::zeros(2, 4, 4);
        assert!(conv2d_reflect(&x, &Kernel2d::laplacian3x3()).is_err());
    }
}
