//! Three-point peak refinement shared by 2D and 3D peak finders.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubpixelFit {
    /// Parabola through the logarithms of the three samples; exact for
    /// Gaussian profiles. Falls back to `Parabolic` if a sample is not positive.
    #[default]
    Gaussian,
    /// Parabola through the raw samples: `(f- - f+) / (2 (f- - 2 f0 + f+))`.
    Parabolic,
}

/// Offset in `[-0.5, 0.5]` and the multiplicative change of the peak value
/// along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisFit {
    pub offset: f64,
    pub gain: f64,
}

pub fn parabolic_offset(fm: f64, f0: f64, fp: f64) -> f64 {
    let den = fm - 2.0 * f0 + fp;
    if den >= 0.0 {
        return 0.0;
    }
    ((fm - fp) / (2.0 * den)).clamp(-0.5, 0.5)
}

pub fn fit_axis(fm: f64, f0: f64, fp: f64, fit: SubpixelFit) -> AxisFit {
    if fit == SubpixelFit::Gaussian && fm > 0.0 && f0 > 0.0 && fp > 0.0 {
        let (lm, l0, lp) = (fm.ln(), f0.ln(), fp.ln());
        let curv = lm - 2.0 * l0 + lp;
        if curv < 0.0 {
            let o = ((lm - lp) / (2.0 * curv)).clamp(-0.5, 0.5);
            let slope = 0.5 * (lp - lm);
            return AxisFit {
                offset: o,
                gain: (slope * o + 0.5 * curv * o * o).exp(),
            };
        }
        return AxisFit {
            offset: 0.0,
            gain: 1.0,
        };
    }
    let o = parabolic_offset(fm, f0, fp);
    let gain = if f0 > 0.0 {
        (f0 + 0.5 * (fp - fm) * o + 0.5 * (fm - 2.0 * f0 + fp) * o * o) / f0
    } else {
        1.0
    };
    AxisFit { offset: o, gain }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabolic_formula() {
        assert_eq!(parabolic_offset(0.0, 1.0, 0.0), 0.0);
        // f = 1 - (x - 0.2)^2 sampled at -1, 0, 1
        let f = |x: f64| 1.0 - (x - 0.2) * (x - 0.2);
        assert!((parabolic_offset(f(-1.0), f(0.0), f(1.0)) - 0.2).abs() < 1e-12);
        assert_eq!(parabolic_offset(0.0, 1.0, 5.0), 0.0);
        assert!((parabolic_offset(0.0, 1.0, 0.9) - 0.9 / 2.2).abs() < 1e-12);
        let fit = fit_axis(f(-1.0), f(0.0), f(1.0), SubpixelFit::Parabolic);
        assert!((fit.gain * f(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fit_is_exact_for_gaussians() {
        let g = |x: f64| 0.7 * (-(x - 0.3f64).powi(2)).exp();
        let fit = fit_axis(g(-1.0), g(0.0), g(1.0), SubpixelFit::Gaussian);
        assert!((fit.offset - 0.3).abs() < 1e-12);
        assert!((fit.gain * g(0.0) - 0.7).abs() < 1e-12);
        // zero neighbours fall back to the raw-value parabola
        let iso = fit_axis(0.0, 1.0, 0.0, SubpixelFit::Gaussian);
        assert_eq!(
            iso,
            AxisFit {
                offset: 0.0,
                gain: 1.0
            }
        );
    }
}
