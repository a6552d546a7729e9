//! Scale and translation schedules.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `((h - l) / 2) (sin(t / 4 + beta) + 1) + l`
pub fn sine_scale(t: usize, beta: f64, l: f64, h: f64) -> f64 {
    (h - l) / 2.0 * ((t as f64 / 4.0 + beta).sin() + 1.0) + l
}

/// Per-frame `(dx, dy)` offsets from the start: a Gaussian random walk
/// smoothed by a centred moving average of `window` frames.
pub fn brownian_path<R: Rng + ?Sized>(length: usize, sigma: f64, window: usize, rng: &mut R) -> Vec<(f64, f64)> {
    if length == 0 {
        return Vec::new();
    }
    let mut walk = vec![(0.0, 0.0); length];
    if sigma > 0.0 {
        let step = Normal::new(0.0, sigma).expect("finite sigma");
        for t in 1..length {
            let (x, y) = walk[t - 1];
            walk[t] = (x + step.sample(rng), y + step.sample(rng));
        }
    }
    let w = window.max(1);
    if w == 1 {
        return walk;
    }
    let (lo, hi) = (w / 2, (w - 1) / 2);
    let smooth: Vec<(f64, f64)> = (0..length)
        .map(|t| {
            let a = t.saturating_sub(lo);
            let b = (t + hi).min(length - 1);
            let n = (b - a + 1) as f64;
            let (sx, sy) = walk[a..=b].iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
            (sx / n, sy / n)
        })
        .collect();
    // keep the path anchored at its start
    let (x0, y0) = smooth[0];
    smooth.into_iter().map(|(x, y)| (x - x0, y - y0)).collect()
}

/// Folds `x` into `[lo, hi]` by mirroring at the ends.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let p = (x - lo).rem_euclid(2.0 * span);
    lo + if p > span { 2.0 * span - p } else { p }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_rule_values() {
        assert!((sine_scale(0, 0.0, 0.67, 1.5) - 1.085).abs() < 1e-12);
        assert_eq!(sine_scale(0, std::f64::consts::FRAC_PI_2, 0.67, 1.5), 1.5);
        for t in 0..200 {
            let s = sine_scale(t, 0.37 * t as f64, 0.67, 1.5);
            assert!((0.67..=1.5).contains(&s));
        }
    }

    #[test]
    fn zero_sigma_is_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(brownian_path(30, 0.0, 5, &mut rng).iter().all(|&p| p == (0.0, 0.0)));
    }

    #[test]
    fn raw_walk_has_zero_mean_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = brownian_path(10_001, 2.0, 1, &mut rng);
        let n = (p.len() - 1) as f64;
        let mx = p.windows(2).map(|w| w[1].0 - w[0].0).sum::<f64>() / n;
        let my = p.windows(2).map(|w| w[1].1 - w[0].1).sum::<f64>() / n;
        // standard error of the mean step is 2 / 100
        assert!(mx.abs() < 0.08 && my.abs() < 0.08, "{} {}", mx, my);
        let var = p.windows(2).map(|w| (w[1].0 - w[0].0).powi(2)).sum::<f64>() / n;
        assert!((var - 4.0).abs() < 0.3, "{}", var);
    }

    #[test]
    fn path_is_reproducible() {
        let a = brownian_path(50, 2.0, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = brownian_path(50, 2.0, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a[0], (0.0, 0.0));
    }

    #[test]
    fn reflection_stays_in_range() {
        assert_eq!(reflect(5.0, 0.0, 10.0), 5.0);
        assert_eq!(reflect(12.0, 0.0, 10.0), 8.0);
        assert_eq!(reflect(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(reflect(23.0, 0.0, 10.0), 3.0);
        for i in -100..100 {
            let r = reflect(i as f64 * 0.7, 2.0, 9.0);
            assert!((2.0..=9.0).contains(&r));
        }
    }
}
