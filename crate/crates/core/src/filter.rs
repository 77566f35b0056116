//! Separable Gaussian filtering on row-major `f64` grids.
//!
//! Derivative kernels are applied in paired-difference form, so a constant
//! signal produces exactly zero derivatives instead of rounding residue.

/// Mirror an arbitrary index into `0..n` (`-1 -> 0`, `n -> n - 1`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Axis {
    X,
    Y,
}

/// One-sided taps `k[0..=radius]` of a symmetric or antisymmetric kernel.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    taps: Vec<f64>,
    kind: KernelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KernelKind {
    Smooth,
    FirstDerivative,
    SecondDerivative,
}

fn radius_for(sigma: f64) -> usize {
    (4.0 * sigma).ceil().max(1.0) as usize
}

impl Kernel {
    /// Normalised Gaussian, sum of all taps = 1.
    pub fn gaussian(sigma: f64) -> Self {
        let r = radius_for(sigma);
        let g: Vec<f64> = (0..=r)
            .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total = g[0] + 2.0 * g[1..].iter().sum::<f64>();
        Self {
            taps: g.into_iter().map(|v| v / total).collect(),
            kind: KernelKind::Smooth,
        }
    }

    /// Derivative of Gaussian, scaled so a unit ramp has slope exactly 1.
    pub fn first_derivative(sigma: f64) -> Self {
        let r = radius_for(sigma);
        let mut taps: Vec<f64> = (0..=r)
            .map(|j| {
                let j = j as f64;
                j * (-(j * j) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        taps[0] = 0.0;
        // response to f(x) = x is sum_{j>0} k_j * 2j
        let norm: f64 = taps.iter().enumerate().map(|(j, k)| 2.0 * j as f64 * k).sum();
        for t in &mut taps {
            *t /= norm;
        }
        Self {
            taps,
            kind: KernelKind::FirstDerivative,
        }
    }

    /// Second derivative of Gaussian with zero sum, scaled so `x^2` maps
    /// to exactly 2.
    pub fn second_derivative(sigma: f64) -> Self {
        let r = radius_for(sigma);
        let s2 = sigma * sigma;
        let mut taps: Vec<f64> = (0..=r)
            .map(|j| {
                let j2 = (j * j) as f64;
                (j2 / (s2 * s2) - 1.0 / s2) * (-j2 / (2.0 * s2)).exp()
            })
            .collect();
        taps[0] = 0.0;
        // response to f(x) = x^2 is sum_{j>0} k_j * 2 j^2
        let norm: f64 = taps
            .iter()
            .enumerate()
            .map(|(j, k)| 2.0 * (j * j) as f64 * k)
            .sum();
        for t in &mut taps {
            *t *= 2.0 / norm;
        }
        Self {
            taps,
            kind: KernelKind::SecondDerivative,
        }
    }

    fn radius(&self) -> usize {
        self.taps.len() - 1
    }

    /// Filter a line padded by `radius` mirrored samples on each side.
    fn apply_line(&self, padded: &[f64], out: &mut [f64]) {
        let r = self.radius();
        for (i, o) in out.iter_mut().enumerate() {
            let c = i + r;
            let centre = padded[c];
            *o = match self.kind {
                KernelKind::Smooth => {
                    let mut acc = self.taps[0] * centre;
                    for j in 1..=r {
                        acc += self.taps[j] * (padded[c + j] + padded[c - j]);
                    }
                    acc
                }
                KernelKind::FirstDerivative => {
                    let mut acc = 0.0;
                    for j in 1..=r {
                        acc += self.taps[j] * (padded[c + j] - padded[c - j]);
                    }
                    acc
                }
                KernelKind::SecondDerivative => {
                    let mut acc = 0.0;
                    for j in 1..=r {
                        acc += self.taps[j] * ((padded[c + j] - centre) + (padded[c - j] - centre));
                    }
                    acc
                }
            };
        }
    }
}

/// Convolve along one axis with mirrored borders.
pub(crate) fn convolve_axis(data: &[f64], width: usize, height: usize, kernel: &Kernel, axis: Axis) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if width == 0 || height == 0 {
        return out;
    }
    let r = kernel.radius() as isize;
    let (len, lines) = match axis {
        Axis::X => (width, height),
        Axis::Y => (height, width),
    };
    let mut padded = vec![0.0; len + 2 * r as usize];
    let mut result = vec![0.0; len];
    for line in 0..lines {
        let at = |i: usize| match axis {
            Axis::X => line * width + i,
            Axis::Y => i * width + line,
        };
        for (k, p) in padded.iter_mut().enumerate() {
            *p = data[at(reflect(k as isize - r, len))];
        }
        kernel.apply_line(&padded, &mut result);
        for (i, v) in result.iter().enumerate() {
            out[at(i)] = *v;
        }
    }
    out
}

/// Isotropic Gaussian blur; `sigma_px <= 0` returns the input unchanged.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma_px: f64) -> Vec<f64> {
    if !(sigma_px > 0.0) {
        return data.to_vec();
    }
    let k = Kernel::gaussian(sigma_px);
    let tmp = convolve_axis(data, width, height, &k, Axis::X);
    convolve_axis(&tmp, width, height, &k, Axis::Y)
}

/// Gaussian-smoothed partial derivatives of an image.
#[derive(Debug, Clone)]
pub(crate) struct Derivatives {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub fxx: Vec<f64>,
    pub fyy: Vec<f64>,
    pub fxy: Vec<f64>,
}

pub(crate) fn gaussian_derivatives(data: &[f64], width: usize, height: usize, sigma: f64) -> Derivatives {
    let g = Kernel::gaussian(sigma);
    let d1 = Kernel::first_derivative(sigma);
    let d2 = Kernel::second_derivative(sigma);
    let dx = convolve_axis(data, width, height, &d1, Axis::X);
    let dy = convolve_axis(data, width, height, &d1, Axis::Y);
    let fx = convolve_axis(&dx, width, height, &g, Axis::Y);
    let fy = convolve_axis(&dy, width, height, &g, Axis::X);
    let fxy = convolve_axis(&dx, width, height, &d1, Axis::Y);
    let dxx = convolve_axis(data, width, height, &d2, Axis::X);
    let dyy = convolve_axis(data, width, height, &d2, Axis::Y);
    let fxx = convolve_axis(&dxx, width, height, &g, Axis::Y);
    let fyy = convolve_axis(&dyy, width, height, &g, Axis::X);
    Derivatives { fx, fy, fxx, fyy, fxy }
}
