//! Per-device feasible set: `0 ≤ a_n ≤ cap_n` and `Σ_n w_n a_n² ≤ budget`.

/// Finds the smallest `θ ≥ 0` with `usage(θ) ≤ budget` for a usage that is
/// nonincreasing in `θ`, returning a point where the budget holds. `usage`
/// returns the value and its derivative; Newton steps are kept inside the
/// bracket and replaced by bisection when they leave it.
fn solve_multiplier(usage: impl Fn(f64) -> (f64, f64), budget: f64) -> f64 {
    if usage(0.0).0 <= budget {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut guard = 0;
    while usage(hi).0 > budget {
        lo = hi;
        hi *= 4.0;
        guard += 1;
        if guard > 600 {
            return f64::INFINITY;
        }
    }
    let mut x = hi;
    for _ in 0..200 {
        let (v, dv) = usage(x);
        if v <= budget {
            hi = x;
            if budget - v <= 1e-14 * budget {
                break;
            }
        } else {
            lo = x;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
        let newton = x - (v - budget) / dv;
        x = if dv < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    hi
}

fn usage_of(a: &[f64], weights: &[f64]) -> f64 {
    a.iter().zip(weights).map(|(a, w)| w * a * a).sum()
}

/// Euclidean projection of `y` onto the box ∩ ellipsoid set.
pub fn project_box_ellipsoid(y: &[f64], caps: &[f64], weights: &[f64], budget: f64) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    project_into(y, caps, weights, budget, &mut out);
    out
}

pub(crate) fn project_into(y: &[f64], caps: &[f64], weights: &[f64], budget: f64, out: &mut [f64]) {
    debug_assert!(y.len() == caps.len() && y.len() == weights.len());
    if !(budget > 0.0) {
        out.fill(0.0);
        return;
    }
    // a_n(θ) = clamp(y_n/(1 + 2θw_n), 0, cap_n).
    let usage = |theta: f64| -> (f64, f64) {
        let (mut v, mut dv) = (0.0, 0.0);
        for ((y, c), w) in y.iter().zip(caps).zip(weights) {
            if *y <= 0.0 {
                continue;
            }
            let den = 1.0 + 2.0 * theta * w;
            let a = y / den;
            if a >= *c {
                v += w * c * c;
            } else {
                v += w * a * a;
                dv -= 4.0 * w * w * a * a / den;
            }
        }
        (v, dv)
    };
    let theta = solve_multiplier(usage, budget);
    if theta.is_infinite() {
        out.fill(0.0);
        return;
    }
    for (o, ((y, c), w)) in out.iter_mut().zip(y.iter().zip(caps).zip(weights)) {
        *o = (y / (1.0 + 2.0 * theta * w)).clamp(0.0, *c);
    }
}

/// Maximiser of `Σ_n c_n a_n` over the box ∩ ellipsoid set.
pub fn maximize_linear(c: &[f64], caps: &[f64], weights: &[f64], budget: f64) -> Vec<f64> {
    debug_assert!(c.len() == caps.len() && c.len() == weights.len());
    if !(budget > 0.0) {
        return vec![0.0; c.len()];
    }
    let full: Vec<f64> = c
        .iter()
        .zip(caps)
        .map(|(c, cap)| if *c > 0.0 { *cap } else { 0.0 })
        .collect();
    if usage_of(&full, weights) <= budget {
        return full;
    }
    // a_n = min(s c_n / w_n, cap_n) with the budget tight. Usage is
    // piecewise quadratic in s; walk the saturation points in order.
    let mut idx: Vec<usize> = (0..c.len()).filter(|&n| c[n] > 0.0 && caps[n] > 0.0).collect();
    let brk = |n: usize| caps[n] * weights[n] / c[n];
    idx.sort_by(|&i, &j| brk(i).total_cmp(&brk(j)));
    let mut quad = vec![0.0; idx.len() + 1];
    for p in (0..idx.len()).rev() {
        let n = idx[p];
        quad[p] = quad[p + 1] + c[n] * c[n] / weights[n];
    }
    let mut saturated = 0.0;
    let mut s = idx.last().map_or(0.0, |&n| brk(n));
    for (p, &n) in idx.iter().enumerate() {
        let cand = ((budget - saturated).max(0.0) / quad[p]).sqrt();
        if cand <= brk(n) {
            s = cand;
            break;
        }
        saturated += weights[n] * caps[n] * caps[n];
    }
    let mut a: Vec<f64> = c
        .iter()
        .zip(caps)
        .zip(weights)
        .map(|((c, cap), w)| if *c > 0.0 { (s * c / w).min(*cap) } else { 0.0 })
        .collect();
    // Rounding in the walk can leave the budget exceeded by an ulp.
    let u = usage_of(&a, weights);
    if u > budget {
        let f = (budget / u).sqrt();
        a.iter_mut().for_each(|x| *x *= f);
    }
    a
}
