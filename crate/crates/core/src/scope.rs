//! Gaussian label scope: per-unit importance weights around ground-truth
//! transitions, PN-ratio based radius selection and the weighted loss.

use crate::audio::LabelVector;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Default scope radius.
pub const DEFAULT_SIGMA: f64 = 0.9;

/// Radius grid searched by [`estimate_sigma`].
pub fn default_sigma_grid() -> Vec<f64> {
    (6..=13).map(|i| i as f64 / 10.0).collect()
}

/// `exp(−(i−k)² / 2σ²)`.
pub fn gaussian_scope(i: usize, k: usize, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let d = i.abs_diff(k) as f64;
    Ok((-d * d / (2.0 * sigma * sigma)).exp())
}

/// Per-unit importance weights, normalized so their maximum is one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeMask {
    weights: Vec<f32>,
    sigma_hat: f64,
    enabled: bool,
}

impl ScopeMask {
    /// A mask that weighs every unit by one.
    pub fn disabled(n: usize, sigma_hat: f64) -> Self {
        Self { weights: vec![1.0; n], sigma_hat, enabled: false }
    }

    /// Weights applied by the loss; all ones when disabled.
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn sigma_hat(&self) -> f64 {
        self.sigma_hat
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn unnormalized(y: &[u8], sigma: f64) -> Vec<f64> {
    let positives: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    let two_s2 = 2.0 * sigma * sigma;
    (0..y.len())
        .map(|k| {
            positives
                .iter()
                .map(|&i| {
                    let d = i.abs_diff(k) as f64;
                    (-d * d / two_s2).exp()
                })
                .sum()
        })
        .collect()
}

/// Sums the Gaussian scopes of all positives and divides by the largest
/// sum. Transition-free label vectors yield a disabled mask.
pub fn scope_mask(y: &LabelVector, sigma_hat: f64) -> Result<ScopeMask> {
    gaussian_scope(0, 0, sigma_hat)?;
    if y.positives() == 0 {
        return Ok(ScopeMask::disabled(y.len(), sigma_hat));
    }
    let u = unnormalized(y.values(), sigma_hat);
    let z = u.iter().copied().fold(0.0f64, f64::max);
    Ok(ScopeMask {
        weights: u.iter().map(|&v| (v / z) as f32).collect(),
        sigma_hat,
        enabled: true,
    })
}

/// `Σ S(i)·y_i / Σ S(i)·(1−y_i)` under the scope mask of `y`.
pub fn pn_ratio(y: &LabelVector, sigma_hat: f64) -> Result<f64> {
    gaussian_scope(0, 0, sigma_hat)?;
    let pos = y.positives();
    if pos == 0 || pos == y.len() {
        return Err(Error::UndefinedRatio);
    }
    // Z cancels in the ratio, so the unnormalized sums are used directly.
    let u = unnormalized(y.values(), sigma_hat);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&w, &v) in u.iter().zip(y.values()) {
        if v == 1 {
            num += w;
        } else {
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(num / den)
}

/// Mean PN ratio over the eligible label vectors (those with at least one
/// positive and one negative), or `None` if there are none.
pub fn mean_pn_ratio(labels: &[LabelVector], sigma: f64) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in labels {
        match pn_ratio(y, sigma) {
            Ok(r) => {
                sum += r;
                n += 1;
            }
            Err(Error::UndefinedRatio) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Picks the grid radius whose mean PN ratio is closest to one. Ties go to
/// the smaller radius.
pub fn estimate_sigma(labels: &[LabelVector], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty sigma grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &s in &sorted {
        let mean = mean_pn_ratio(labels, s)?.ok_or(Error::NoEligibleSamples)?;
        let gap = (mean - 1.0).abs();
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((s, gap));
        }
    }
    Ok(best.expect("non-empty grid").0)
}

/// Mean binary cross-entropy of probabilities `p` against `y`, each unit
/// weighted by the mask (uniform weights when the mask is disabled).
pub fn weighted_bce_loss(g: &mut Graph, p: Var, y: &LabelVector, mask: &ScopeMask) -> Result<Var> {
    if mask.len() != y.len() {
        return Err(Error::LengthMismatch { expected: y.len(), got: mask.len() });
    }
    g.weighted_bce(p, &y.as_f32(), mask.weights())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor, BCE_EPS};
    use proptest::prelude::*;

    fn lv(v: &[u8]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }

    fn oracle_scope(d: f64, s: f64) -> f64 {
        (-(d * d) / (2.0 * s * s)).exp()
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_scope(4, 4, 0.9).unwrap(), 1.0);
        let v = gaussian_scope(3, 4, 0.9).unwrap();
        assert!((v - (-1.0f64 / 1.62).exp()).abs() < 1e-12);
        assert!((v - 0.5394).abs() < 1e-4);
        assert_eq!(v, gaussian_scope(5, 4, 0.9).unwrap());
        assert!(gaussian_scope(0, 3, 1e6).unwrap() > 1.0 - 1e-9);
        assert!(matches!(gaussian_scope(0, 1, 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn mask_examples() {
        let s1 = oracle_scope(1.0, 0.9);
        let m = scope_mask(&lv(&[0, 1, 0]), 0.9).unwrap();
        assert!(m.enabled());
        for (w, want) in m.weights().iter().zip([s1, 1.0, s1]) {
            assert!((*w as f64 - want).abs() < 1e-6);
        }

        let m = scope_mask(&lv(&[1, 1]), 0.9).unwrap();
        assert_eq!(m.weights(), &[1.0, 1.0]);

        let m = scope_mask(&lv(&[0, 0, 0]), 0.9).unwrap();
        assert!(!m.enabled());
        assert_eq!(m.weights(), &[1.0; 3]);
    }

    #[test]
    fn pn_examples() {
        let r = pn_ratio(&lv(&[1, 0]), 0.9).unwrap();
        assert!((r - 1.0 / oracle_scope(1.0, 0.9)).abs() < 1e-9);
        assert!((r - 1.854).abs() < 1e-3);
        let y = lv(&[1, 0, 0, 1, 0, 0, 0]);
        assert!((pn_ratio(&y, 1e6).unwrap() - 2.0 / 5.0).abs() < 1e-6);
        assert!(matches!(pn_ratio(&lv(&[0, 0]), 0.9), Err(Error::UndefinedRatio)));
        assert!(matches!(pn_ratio(&lv(&[1, 1]), 0.9), Err(Error::UndefinedRatio)));
    }

    #[test]
    fn sigma_estimation() {
        let grid = default_sigma_grid();
        assert_eq!(grid.len(), 8);
        assert!((grid[0] - 0.6).abs() < 1e-12 && (grid[7] - 1.3).abs() < 1e-12);

        // brute force for the single sample [1, 0]: PN = exp(1/2σ²)
        let y = vec![lv(&[1, 0])];
        let want = grid
            .iter()
            .copied()
            .min_by(|a, b| {
                let fa = ((1.0 / (2.0 * a * a)).exp() - 1.0).abs();
                let fb = ((1.0 / (2.0 * b * b)).exp() - 1.0).abs();
                fa.total_cmp(&fb)
            })
            .unwrap();
        assert_eq!(estimate_sigma(&y, &grid).unwrap(), want);
        assert_eq!(estimate_sigma(&y, &[0.7]).unwrap(), 0.7);
        assert!(matches!(estimate_sigma(&[lv(&[0, 0])], &grid), Err(Error::NoEligibleSamples)));
    }

    #[test]
    fn sigma_ties_prefer_smaller() {
        let y = vec![lv(&[0, 1, 0, 0])];
        assert_eq!(estimate_sigma(&y, &[2.0, 0.9, 0.9]).unwrap(), 0.9);
        // unsorted grid: the search still walks from small to large
        let y = vec![lv(&[1, 0])];
        assert_eq!(estimate_sigma(&y, &[1.3, 0.6]).unwrap(), 1.3);
    }

    fn loss_of(p: &[f32], y: &LabelVector, m: &ScopeMask) -> f32 {
        let mut g = Graph::new();
        let pv = g.leaf(&Tensor::new(&[p.len()], p.to_vec()).unwrap());
        let l = weighted_bce_loss(&mut g, pv, y, m).unwrap();
        g.value(l)[0]
    }

    #[test]
    fn loss_examples() {
        let y = lv(&[0, 1, 0, 1]);
        let off = ScopeMask::disabled(4, 0.9);
        assert!((loss_of(&[0.5; 4], &y, &off) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(loss_of(&[0.0, 1.0, 0.0, 1.0], &y, &off) <= 2.0 * BCE_EPS);

        let y = lv(&[0, 1, 0]);
        let m = scope_mask(&y, 0.9).unwrap();
        let s1 = oracle_scope(1.0, 0.9);
        let want = -(s1 * (0.8f64).ln() + (0.9f64).ln() + s1 * (0.8f64).ln()) / 3.0;
        assert!((loss_of(&[0.2, 0.9, 0.2], &y, &m) as f64 - want).abs() < 1e-6);

        let mut g = Graph::new();
        let pv = g.leaf(&Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        assert!(matches!(weighted_bce_loss(&mut g, pv, &y, &m), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let y = lv(&[0, 1, 0, 0, 1, 0]);
        let m = scope_mask(&y, 0.9).unwrap();
        let p = Tensor::new(&[6], vec![0.2, 0.7, 0.4, 0.1, 0.55, 0.3]).unwrap();
        let err = grad_check(|g, v| weighted_bce_loss(g, v[0], &y, &m), &[p], 1e-3).unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    fn labels_strategy() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop::bool::weighted(0.15).prop_map(u8::from), 2..80)
    }

    proptest! {
        #[test]
        fn mask_is_bounded_with_unit_peak(y in labels_strategy(), sigma in 0.3f64..3.0) {
            let m = scope_mask(&lv(&y), sigma).unwrap();
            let w = m.weights();
            prop_assert!(w.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&(v as f64))));
            prop_assert!(w.iter().any(|&v| v == 1.0));
        }

        #[test]
        fn disabled_loss_is_plain_bce(y in labels_strategy(), seed in any::<u64>()) {
            let n = y.len();
            let p: Vec<f32> = (0..n).map(|i| (((seed >> (i % 60)) & 0xff) as f32 + 0.5) / 256.5).collect();
            let yv = lv(&y);
            let got = loss_of(&p, &yv, &ScopeMask::disabled(n, 0.9)) as f64;
            let want = -(0..n).map(|i| {
                let pi = p[i] as f64;
                if y[i] == 1 { pi.ln() } else { (1.0 - pi).ln() }
            }).sum::<f64>() / n as f64;
            prop_assert!((got - want).abs() <= 1e-6 * want.max(1.0));
        }

        #[test]
        fn mean_pn_decreases_along_grid(set in prop::collection::vec(labels_strategy(), 1..8)) {
            let labels: Vec<LabelVector> = set.iter().map(|v| lv(v)).collect();
            let means: Vec<Option<f64>> = default_sigma_grid().iter().map(|&s| mean_pn_ratio(&labels, s).unwrap()).collect();
            if means[0].is_some() {
                for w in means.windows(2) {
                    prop_assert!(w[1].unwrap() < w[0].unwrap());
                }
            }
        }
    }
}
