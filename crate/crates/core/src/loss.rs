//! Reconstruction and color-cast losses with their analytic gradients.
//!
//! Both losses carry stop-gradients: the reconstruction denominator and the
//! surface depth `d` are read at their current values but treated as
//! constants when differentiating.

use crate::error::{Error, Result};
use crate::raster::{ImageBuffer, Rgb};

/// `sum_c ((pred_c - obs_c) / (sg(pred_c) + eps))^2`.
pub fn recon_loss(pred: &Rgb, obs: &Rgb, eps: f64) -> f64 {
    recon_loss_frozen(pred, obs, &recon_denominator(pred, eps))
}

pub fn recon_denominator(pred: &Rgb, eps: f64) -> Rgb {
    pred.map(|p| p + eps)
}

/// Reconstruction loss with an explicitly frozen denominator.
pub fn recon_loss_frozen(pred: &Rgb, obs: &Rgb, denom: &Rgb) -> f64 {
    (0..3).map(|c| ((pred[c] - obs[c]) / denom[c]).powi(2)).sum()
}

/// `d recon / d pred` with the denominator held constant.
pub fn recon_loss_grad(pred: &Rgb, obs: &Rgb, eps: f64) -> Rgb {
    let denom = recon_denominator(pred, eps);
    [0, 1, 2].map(|c| 2.0 * (pred[c] - obs[c]) / (denom[c] * denom[c]))
}

/// Per-channel mean over every valid pixel of every image.
pub fn pooled_channel_means<'a>(images: impl IntoIterator<Item = &'a ImageBuffer>) -> Result<Rgb> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for (v, &ok) in img.data.iter().zip(&img.mask) {
            if ok {
                for c in 0..3 {
                    sum[c] += v[c];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("no valid pixels to average".into()));
    }
    let mean = sum.map(|s| s / n as f64);
    if mean.iter().any(|&m| m <= 0.0) {
        return Err(Error::DegenerateInput(format!("color cast ratio has a zero channel: {mean:?}")));
    }
    Ok(mean)
}

/// Back-scatter veil `A_c (1 - exp(-beta_c d))`.
pub fn backscatter(a: &Rgb, beta: &Rgb, d: f64) -> Rgb {
    [0, 1, 2].map(|c| a[c] * (1.0 - (-beta[c] * d).exp()))
}

fn check_denominators(b: &Rgb, gamma: &Rgb) -> Result<()> {
    if b[1] == 0.0 || b[2] == 0.0 {
        return Err(Error::DegenerateRatio(format!("back-scatter {b:?} has a zero green/blue channel")));
    }
    if gamma[1] == 0.0 || gamma[2] == 0.0 {
        return Err(Error::DegenerateRatio(format!("cast ratio {gamma:?} has a zero green/blue channel")));
    }
    Ok(())
}

/// Color-cast loss for one ray:
///
/// ```text
/// |B_g/B_b - γ_g/γ_b| + Σ_{c∈{g,b}} max(B_r/B_c - γ_r/γ_c, 0)
/// ```
pub fn cast_loss(a: &Rgb, beta: &Rgb, d: f64, gamma: &Rgb) -> Result<f64> {
    let b = backscatter(a, beta, d);
    check_denominators(&b, gamma)?;
    let mut loss = (b[1] / b[2] - gamma[1] / gamma[2]).abs();
    for c in [1, 2] {
        loss += (b[0] / b[c] - gamma[0] / gamma[c]).max(0.0);
    }
    Ok(loss)
}

/// Gradient of [`cast_loss`] w.r.t. `(A, beta)` with `d` held constant.
///
/// At the kinks the zero subgradient is used.
pub fn cast_loss_grad(a: &Rgb, beta: &Rgb, d: f64, gamma: &Rgb) -> Result<(Rgb, Rgb)> {
    let b = backscatter(a, beta, d);
    check_denominators(&b, gamma)?;
    // dL/dB first, then chain through B_c = A_c (1 - e^{-beta_c d})
    let mut g_b = [0.0; 3];
    let gb = b[1] / b[2] - gamma[1] / gamma[2];
    let sign = if gb > 0.0 {
        1.0
    } else if gb < 0.0 {
        -1.0
    } else {
        0.0
    };
    g_b[1] += sign / b[2];
    g_b[2] -= sign * b[1] / (b[2] * b[2]);
    for c in [1, 2] {
        if b[0] / b[c] - gamma[0] / gamma[c] > 0.0 {
            g_b[0] += 1.0 / b[c];
            g_b[c] -= b[0] / (b[c] * b[c]);
        }
    }
    let mut g_a = [0.0; 3];
    let mut g_beta = [0.0; 3];
    for c in 0..3 {
        let t = (-beta[c] * d).exp();
        g_a[c] = g_b[c] * (1.0 - t);
        g_beta[c] = g_b[c] * a[c] * d * t;
    }
    Ok((g_a, g_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recon_examples() {
        assert_eq!(recon_loss(&[0.3, 0.2, 0.1], &[0.3, 0.2, 0.1], 1e-3), 0.0);
        let l = recon_loss(&[0.5, 0.0, 0.0], &[0.4, 0.0, 0.0], 1e-3);
        assert!((l - 0.039_840_478_723).abs() < 1e-11);
        let g = recon_loss_grad(&[0.5, 0.0, 0.0], &[0.4, 0.0, 0.0], 1e-3);
        assert!((g[0] - 0.796_809_574_464).abs() < 1e-11);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn recon_gradient_freezes_the_denominator() {
        let (pred, obs, eps, h) = ([0.5, 0.3, 0.2], [0.4, 0.35, 0.05], 1e-3, 1e-6);
        let g = recon_loss_grad(&pred, &obs, eps);
        let denom = recon_denominator(&pred, eps);
        for c in 0..3 {
            let (mut up, mut dn) = (pred, pred);
            up[c] += h;
            dn[c] -= h;
            let frozen = (recon_loss_frozen(&up, &obs, &denom) - recon_loss_frozen(&dn, &obs, &denom)) / (2.0 * h);
            let full = (recon_loss(&up, &obs, eps) - recon_loss(&dn, &obs, eps)) / (2.0 * h);
            assert!((g[c] - frozen).abs() < 1e-6 * g[c].abs().max(1.0));
            assert!((full - frozen).abs() > 1e-2 * frozen.abs(), "channel {c} must differ");
        }
    }

    #[test]
    fn cast_ratio_pools_pixels() {
        let a = ImageBuffer::filled(3, 2, [0.2, 0.4, 0.6]);
        let b = ImageBuffer::filled(3, 2, [0.4, 0.6, 0.8]);
        let g = pooled_channel_means([&a, &b]).unwrap();
        let g2 = pooled_channel_means([&b, &a]).unwrap();
        for c in 0..3 {
            assert!((g[c] - [0.3, 0.5, 0.7][c]).abs() < 1e-15);
            assert!((g[c] - g2[c]).abs() < 1e-15);
        }
        let dark = ImageBuffer::filled(2, 2, [0.0, 0.4, 0.6]);
        assert!(matches!(pooled_channel_means([&dark]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cast_loss_examples() {
        let a = [0.9; 3];
        let beta = [0.4, 0.2, 0.2];
        let l = cast_loss(&a, &beta, 2.0, &[0.3, 0.4, 0.5]).unwrap();
        assert!((l - 2.190_640_092).abs() < 1e-8, "{l}");

        // matched ratios
        let b = backscatter(&a, &beta, 2.0);
        assert!(cast_loss(&a, &beta, 2.0, &b).unwrap().abs() < 1e-15);

        // red ratios below target, g/b matched: hinge inactive
        let gamma = [b[0] * 2.0, b[1], b[2]];
        assert_eq!(cast_loss(&a, &beta, 2.0, &gamma).unwrap(), 0.0);
        let (ga, gbeta) = cast_loss_grad(&a, &beta, 2.0, &gamma).unwrap();
        assert_eq!(ga, [0.0; 3]);
        assert_eq!(gbeta, [0.0; 3]);

        assert!(matches!(
            cast_loss(&[0.9, 0.0, 0.9], &beta, 2.0, &[0.3, 0.4, 0.5]),
            Err(Error::DegenerateRatio(_))
        ));
    }

    #[test]
    fn cast_gradient_matches_central_differences() {
        let a = [0.8, 0.7, 0.9];
        let beta = [0.5, 0.3, 0.25];
        let gamma = [0.3, 0.45, 0.5];
        let d = 1.7;
        let (ga, gbeta) = cast_loss_grad(&a, &beta, d, &gamma).unwrap();
        let h = 1e-6;
        for c in 0..3 {
            let mut up = a;
            let mut dn = a;
            up[c] += h;
            dn[c] -= h;
            let fd = (cast_loss(&up, &beta, d, &gamma).unwrap() - cast_loss(&dn, &beta, d, &gamma).unwrap()) / (2.0 * h);
            assert!((fd - ga[c]).abs() < 1e-7, "A[{c}]: {fd} vs {}", ga[c]);
            let mut up = beta;
            let mut dn = beta;
            up[c] += h;
            dn[c] -= h;
            let fd = (cast_loss(&a, &up, d, &gamma).unwrap() - cast_loss(&a, &dn, d, &gamma).unwrap()) / (2.0 * h);
            assert!((fd - gbeta[c]).abs() < 1e-7, "beta[{c}]: {fd} vs {}", gbeta[c]);
        }
    }
}
