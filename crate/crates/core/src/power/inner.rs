//! Per-round minimisers of the Lagrangian for fixed device multipliers.
//!
//! Case I: `a_k = clamp(r/M_k, 0, cap_k)` with
//! `M_k = B h_k + φ_k Ĝ/(N J h_k)` and the scalar `r` fixed by
//! `r = B − A (Σ_k h_k a_k − K)`.
//!
//! Case II: `a_k = clamp(h_k t / d_k, 0, cap_k)` with
//! `d_k = h_k² + λ_k Ĝ/(N J B)` and `t = 1 − μ/(2JB)` fixed by the alignment
//! `Σ_k h_k a_k = K`.

/// Sorts the usable devices by the level at which they saturate and returns
/// them with the suffix sums of their slopes.
fn order_by_breakpoint(h: &[f64], scale: &[f64], caps: &[f64], slope: impl Fn(usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..h.len()).filter(|&k| h[k] > 0.0 && scale[k].is_finite()).collect();
    let brk: Vec<f64> = (0..h.len()).map(|k| caps[k] * scale[k] / h[k]).collect();
    idx.sort_by(|&i, &j| brk[i].total_cmp(&brk[j]));
    let mut suffix = vec![0.0; idx.len() + 1];
    for p in (0..idx.len()).rev() {
        suffix[p] = suffix[p + 1] + slope(idx[p]);
    }
    (idx, brk, suffix)
}

/// `M_k^(n)` for one round; infinite where the gain is zero.
pub(crate) fn case_i_scales(h: &[f64], phi: &[f64], b: f64, ghat_over_nj: f64, out: &mut [f64]) {
    for k in 0..h.len() {
        out[k] = if h[k] > 0.0 {
            b * h[k] + phi[k] * ghat_over_nj / h[k]
        } else {
            f64::INFINITY
        };
    }
}

/// Exact box-constrained minimiser; returns `r`.
pub(crate) fn case_i_exact(h: &[f64], caps: &[f64], m: &[f64], a: f64, b: f64, out: &mut [f64]) -> f64 {
    let target = b + a * h.len() as f64;
    // In terms of r the device saturates at r = cap·M; reuse the generic
    // ordering with scale = M·h so that cap·scale/h = cap·M.
    let scale: Vec<f64> = h.iter().zip(m).map(|(h, m)| h * m).collect();
    let (idx, brk, suffix) = order_by_breakpoint(h, &scale, caps, |k| h[k] / m[k]);
    let mut saturated = 0.0;
    let mut r = None;
    for (p, &k) in idx.iter().enumerate() {
        let cand = (target - a * saturated) / (1.0 + a * suffix[p]);
        if cand <= brk[k] {
            r = Some(cand);
            break;
        }
        saturated += h[k] * caps[k];
    }
    let r = r.unwrap_or(target - a * saturated);
    for k in 0..h.len() {
        out[k] = if h[k] > 0.0 && m[k].is_finite() {
            (r / m[k]).clamp(0.0, caps[k])
        } else {
            0.0
        };
    }
    r
}

/// The unconstrained closed form clamped to the caps.
pub(crate) fn case_i_paper(h: &[f64], caps: &[f64], m: &[f64], a: f64, b: f64, out: &mut [f64]) {
    let k = h.len() as f64;
    let t: f64 = h.iter().zip(m).filter(|(h, m)| **h > 0.0 && m.is_finite()).map(|(h, m)| h / m).sum();
    for i in 0..h.len() {
        out[i] = if h[i] > 0.0 && m[i].is_finite() {
            ((b + a * k) / (m[i] * (1.0 + a * t))).min(caps[i])
        } else {
            0.0
        };
    }
}

/// `d_k^(n)` for one round.
pub(crate) fn case_ii_scales(h: &[f64], lambda: &[f64], ghat_over_njb: f64, out: &mut [f64]) {
    for k in 0..h.len() {
        out[k] = h[k] * h[k] + lambda[k] * ghat_over_njb;
    }
}

/// Aligned minimiser; returns `t`, or `None` when the caps cannot reach
/// `Σ h a = K` (amplitudes are then left at the caps).
pub(crate) fn case_ii_round(h: &[f64], caps: &[f64], d: &[f64], out: &mut [f64]) -> Option<f64> {
    let target = h.len() as f64;
    let (idx, brk, suffix) = order_by_breakpoint(h, d, caps, |k| h[k] * h[k] / d[k]);
    let mut saturated = 0.0;
    let mut t = None;
    for (p, &k) in idx.iter().enumerate() {
        let cand = (target - saturated) / suffix[p];
        if cand <= brk[k] {
            t = Some(cand);
            break;
        }
        saturated += h[k] * caps[k];
    }
    if t.is_none() && saturated >= target {
        t = idx.last().map(|&k| brk[k]);
    }
    for k in 0..h.len() {
        out[k] = match t {
            Some(t) if h[k] > 0.0 => (h[k] * t / d[k]).clamp(0.0, caps[k]),
            None if h[k] > 0.0 => caps[k],
            _ => 0.0,
        };
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn objective_i(h: &[f64], m_phi: &[f64], a: f64, b: f64, x: &[f64]) -> f64 {
        // J = 1; m_phi_k = φ_k Ĝ/N.
        let s: f64 = h.iter().zip(x).map(|(h, x)| h * x).sum();
        let k = h.len() as f64;
        a * (s - k).powi(2)
            + b * h.iter().zip(x).map(|(h, x)| (h * x - 1.0).powi(2)).sum::<f64>()
            + m_phi.iter().zip(x).map(|(w, x)| w * x * x).sum::<f64>()
    }

    #[test]
    fn single_device_alignment() {
        let mut out = [0.0];
        let m = [1.0 * 0.3];
        case_i_exact(&[1.0], &[10.0], &m, 0.7, 0.3, &mut out);
        assert_relative_eq!(out[0], 1.0, epsilon = 1e-14);
        case_i_paper(&[1.0], &[10.0], &m, 0.7, 0.3, &mut out);
        assert_relative_eq!(out[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_multipliers_invert_when_caps_are_slack() {
        let h = [0.5, 1.3, 2.0];
        let mut m = [0.0; 3];
        case_i_scales(&h, &[0.0; 3], 0.2, 1.0, &mut m);
        let mut out = [0.0; 3];
        case_i_exact(&h, &[10.0; 3], &m, 3.0, 0.2, &mut out);
        for k in 0..3 {
            assert_relative_eq!(out[k], 1.0 / h[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn exact_mode_beats_grid_search() {
        let h = [0.4, 1.1, 1.9];
        let caps = [1.2, 0.5, 0.9];
        let phi = [0.05, 0.3, 0.0];
        let (a, b) = (2.0, 0.4);
        let mut m = [0.0; 3];
        case_i_scales(&h, &phi, b, 1.0, &mut m);
        let mut out = [0.0; 3];
        case_i_exact(&h, &caps, &m, a, b, &mut out);
        let best = objective_i(&h, &phi, a, b, &out);
        let steps = 120;
        for i in 0..=steps {
            for j in 0..=steps {
                for l in 0..=steps {
                    let x = [
                        caps[0] * i as f64 / steps as f64,
                        caps[1] * j as f64 / steps as f64,
                        caps[2] * l as f64 / steps as f64,
                    ];
                    assert!(objective_i(&h, &phi, a, b, &x) >= best - 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_gain_gets_zero_amplitude() {
        let h = [0.0, 1.0];
        let mut m = [0.0; 2];
        case_i_scales(&h, &[0.0; 2], 0.5, 1.0, &mut m);
        let mut out = [9.0; 2];
        case_i_exact(&h, &[5.0; 2], &m, 1.0, 0.5, &mut out);
        assert_eq!(out[0], 0.0);
        assert!(out[1] > 1.0);
    }

    #[test]
    fn aligned_round_hits_target() {
        let h = [0.9, 1.2, 2.0];
        let caps = [3.0, 3.0, 0.6];
        let mut d = [0.0; 3];
        case_ii_scales(&h, &[0.2, 0.0, 0.5], 1.5, &mut d);
        let mut out = [0.0; 3];
        case_ii_round(&h, &caps, &d, &mut out).unwrap();
        let s: f64 = h.iter().zip(&out).map(|(h, a)| h * a).sum();
        assert_relative_eq!(s, 3.0, epsilon = 1e-13);
    }

    #[test]
    fn unreachable_alignment_is_reported() {
        let h = [0.1, 0.2];
        let mut out = [0.0; 2];
        assert!(case_ii_round(&h, &[1.0, 1.0], &[0.01, 0.04], &mut out).is_none());
        assert_eq!(out, [1.0, 1.0]);
    }
}
