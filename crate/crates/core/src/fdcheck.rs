//! Central finite-difference verification of analytic gradients.
//!
//! These helpers evaluate an arbitrary scalar objective under coordinate
//! perturbations and never look inside the backward implementations they
//! check, so they stay a valid independent oracle.
//!
//! A coordinate passes when |fd - g| <= atol + rtol * max(|fd|, |g|); the
//! absolute term absorbs difference-quotient noise on near-zero gradients.

use crate::nn::ParamSet;
use crate::tensor::Image;

/// Relative error with an absolute floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        return (a - b).abs();
    }
    (a - b).abs() / scale
}

/// Central-difference gradient checker.
pub struct UnitGradCheck {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl UnitGradCheck {
    pub fn new(h: f64, rtol: f64, atol: f64) -> Self {
        UnitGradCheck { h, rtol, atol }
    }

    /// Exact-path check: quadratic/linear objectives where the central
    /// difference has no truncation error.
    pub fn exact(rtol: f64) -> Self {
        UnitGradCheck::new(1e-3, rtol, 1e-10)
    }

    fn ratio(&self, fd: f64, g: f64) -> f64 {
        (fd - g).abs() / (self.atol + self.rtol * fd.abs().max(g.abs()))
    }

    /// Worst violation ratio (<= 1 passes) between `gx` and central
    /// differences of `f` over every input coordinate.
    pub fn worst_input(&self, x: &Image, gx: &Image, mut f: impl FnMut(&Image) -> f64) -> f64 {
        let mut worst = 0.0f64;
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + self.h;
            let fp = f(&xp);
            xp.data_mut()[i] = orig - self.h;
            let fm = f(&xp);
            xp.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * self.h);
            worst = worst.max(self.ratio(fd, gx.data()[i]));
        }
        worst
    }

    /// Worst violation ratio for one parameter array of `ps`.
    pub fn worst_params(
        &self,
        ps: &mut ParamSet,
        idx: usize,
        grad: &[f64],
        mut f: impl FnMut(&ParamSet) -> f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let orig = ps.get(idx).data[i];
            ps.get_mut(idx).data[i] = orig + self.h;
            let fp = f(ps);
            ps.get_mut(idx).data[i] = orig - self.h;
            let fm = f(ps);
            ps.get_mut(idx).data[i] = orig;
            let fd = (fp - fm) / (2.0 * self.h);
            worst = worst.max(self.ratio(fd, grad[i]));
        }
        worst
    }

    /// Panicking wrapper around [`Self::worst_input`].
    pub fn input(&self, x: &Image, gx: &Image, f: impl FnMut(&Image) -> f64) {
        let worst = self.worst_input(x, gx, f);
        assert!(
            worst <= 1.0,
            "input gradient check failed: worst violation ratio {worst:.3}"
        );
    }

    /// Panicking wrapper around [`Self::worst_params`].
    pub fn params(
        &self,
        ps: &mut ParamSet,
        idx: usize,
        grad: &[f64],
        f: impl FnMut(&ParamSet) -> f64,
    ) {
        let name = ps.get(idx).name.clone();
        let worst = self.worst_params(ps, idx, grad, f);
        assert!(
            worst <= 1.0,
            "param '{name}' gradient check failed: worst violation ratio {worst:.3}"
        );
    }
}
