//! Small, exactly-specified statistics used by the evaluation and defense
//! code: means, empirical quantiles, Spearman rank correlation, ROC AUC,
//! and a paired two-sided Student's t-test.

use crate::error::{Error, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("mean of no samples"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Unbiased sample standard deviation (n − 1 denominator).
pub fn sample_std(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::EmptyInput("standard deviation needs two samples"));
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    Ok(var.sqrt())
}

/// Empirical quantile with linear interpolation between order statistics
/// (the same convention as numpy's default): position q·(n−1).
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("quantile of no samples"));
    }
    if !(0.0..=1.0).contains(&q) || !q.is_finite() {
        return Err(Error::InvalidConfig(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample in quantile"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = pos - lo as f64;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Average ranks (1-based), ties share the mean of their rank range.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite sample in ranks"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties (Pearson on the
/// rank vectors). Errors when either side has zero rank variance.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            context: "rank correlation inputs",
            expected: xs.len().to_string(),
            got: ys.len().to_string(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("rank correlation needs two samples"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mx = mean(&rx)?;
    let my = mean(&ry)?;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateTest("all ranks tied in rank correlation"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Area under the ROC curve from positive-class and negative-class scores
/// (higher score means more positive). Computed as the pairwise
/// probability of correct ordering, ties counting one half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::EmptyInput("ROC AUC needs both classes"));
    }
    let mut wins = 0.0;
    for &p in positive {
        for &q in negative {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positive.len() as f64 * negative.len() as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct PairedTTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub mean_difference: f64,
    pub degrees_of_freedom: usize,
}

/// Two-sided paired Student's t-test on matched samples. An all-zero
/// difference vector is a well-defined null result (t = 0, p = 1); a
/// constant nonzero difference has no variance to test against and is an
/// error.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<PairedTTest> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            context: "paired test inputs",
            expected: xs.len().to_string(),
            got: ys.len().to_string(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("paired test needs two pairs"));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys.iter()).map(|(a, b)| a - b).collect();
    let md = mean(&diffs)?;
    let sd = sample_std(&diffs)?;
    let n = diffs.len();
    if sd == 0.0 {
        if md == 0.0 {
            return Ok(PairedTTest {
                t_statistic: 0.0,
                p_value: 1.0,
                mean_difference: 0.0,
                degrees_of_freedom: n - 1,
            });
        }
        return Err(Error::DegenerateTest(
            "constant nonzero paired differences have zero variance",
        ));
    }
    let t = md / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidConfig(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest {
        t_statistic: t,
        p_value: p.clamp(0.0, 1.0),
        mean_difference: md,
        degrees_of_freedom: n - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_and_std_match_hand_computation() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert_abs_diff_eq!(mean(&xs).unwrap(), 5.0);
        // Sum of squared deviations is 32, so the unbiased variance is 32/7.
        assert_abs_diff_eq!(sample_std(&xs).unwrap(), (32.0f64 / 7.0).sqrt(), epsilon = 1e-12);
        assert!(mean(&[]).is_err());
        assert!(sample_std(&[1.0]).is_err());
    }

    #[test]
    fn quantile_interpolates_between_order_statistics() {
        let xs = [3.0, 1.0, 2.0, 4.0];
        assert_abs_diff_eq!(quantile(&xs, 0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(quantile(&xs, 1.0).unwrap(), 4.0);
        assert_abs_diff_eq!(quantile(&xs, 0.5).unwrap(), 2.5);
        // position 0.05·3 = 0.15: 1 + 0.15·(2 − 1)
        assert_abs_diff_eq!(quantile(&xs, 0.05).unwrap(), 1.15, epsilon = 1e-12);
        assert!(quantile(&xs, -0.1).is_err());
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn spearman_is_signed_one_for_monotone_data() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [10.0, 20.0, 30.0, 40.0, 50.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_abs_diff_eq!(spearman_rho(&xs, &up).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman_rho(&xs, &down).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        // Ranks of x are [1, 2.5, 2.5, 4]; Pearson against [1, 2, 3, 4]
        // gives 4.5 / sqrt(4.5 · 5).
        let xs = [1.0, 2.0, 2.0, 3.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        let want = 4.5 / (4.5f64 * 5.0).sqrt();
        assert_abs_diff_eq!(spearman_rho(&xs, &ys).unwrap(), want, epsilon = 1e-12);
        assert!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn roc_auc_covers_perfect_random_and_tied_cases() {
        assert_abs_diff_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(roc_auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(roc_auc(&[1.0], &[1.0]).unwrap(), 0.5);
        // Three of four pairs ordered correctly, one tied.
        assert_abs_diff_eq!(roc_auc(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 0.875);
        assert!(roc_auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn paired_t_matches_closed_form_for_two_degrees_of_freedom() {
        // Differences [1, 2, 3]: mean 2, sd 1, t = 2·sqrt(3), df = 2. The
        // df = 2 CDF has the closed form 1/2 + t / (2·sqrt(2)·sqrt(1 + t²/2)).
        let xs = [2.0, 4.0, 6.0];
        let ys = [1.0, 2.0, 3.0];
        let out = paired_t_test(&xs, &ys).unwrap();
        let t = 2.0 * 3.0f64.sqrt();
        assert_abs_diff_eq!(out.t_statistic, t, epsilon = 1e-12);
        let cdf = 0.5 + t / (2.0 * 2.0f64.sqrt() * (1.0 + t * t / 2.0).sqrt());
        assert_abs_diff_eq!(out.p_value, 2.0 * (1.0 - cdf), epsilon = 1e-10);
        assert_eq!(out.degrees_of_freedom, 2);
    }

    #[test]
    fn paired_t_with_one_degree_of_freedom_is_the_cauchy_quantile() {
        // df = 1 is a Cauchy distribution, whose CDF at 1 is 3/4, so a unit
        // t statistic yields p = 1/2 exactly.
        let xs = [1.0, 3.0];
        let ys = [1.0, 1.0];
        // Differences [0, 2]: mean 1, sd sqrt(2), t = 1/(sqrt(2)/sqrt(2)) = 1.
        let out = paired_t_test(&xs, &ys).unwrap();
        assert_abs_diff_eq!(out.t_statistic, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.p_value, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn paired_t_agrees_with_exact_sign_flip_permutation_test() {
        // The two-sided sign-flip permutation test on the t statistic is an
        // exact nonparametric analogue; on symmetric-ish data the Student
        // approximation should land close to it.
        let xs = [5.2, 4.9, 6.1, 5.5, 5.8, 4.7, 6.3, 5.1, 5.9, 5.4];
        let ys = [4.8, 5.0, 5.2, 5.1, 5.3, 4.5, 5.6, 4.9, 5.2, 5.0];
        let out = paired_t_test(&xs, &ys).unwrap();
        let diffs: Vec<f64> = xs.iter().zip(ys.iter()).map(|(a, b)| a - b).collect();
        let t_of = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            let v = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64;
            m / (v.sqrt() / (d.len() as f64).sqrt())
        };
        let observed = t_of(&diffs).abs();
        let n = diffs.len();
        let mut at_least = 0usize;
        for mask in 0..(1usize << n) {
            let flipped: Vec<f64> = diffs
                .iter()
                .enumerate()
                .map(|(i, &d)| if mask >> i & 1 == 1 { -d } else { d })
                .collect();
            if t_of(&flipped).abs() >= observed - 1e-12 {
                at_least += 1;
            }
        }
        let p_perm = at_least as f64 / (1usize << n) as f64;
        assert!(
            (out.p_value - p_perm).abs() < 0.08,
            "parametric p {} vs permutation p {}",
            out.p_value,
            p_perm
        );
    }

    #[test]
    fn degenerate_paired_inputs_follow_the_documented_contract() {
        let same = [1.0, 2.0, 3.0];
        let out = paired_t_test(&same, &same).unwrap();
        assert_eq!(out.t_statistic, 0.0);
        assert_eq!(out.p_value, 1.0);
        let shifted = [2.0, 3.0, 4.0];
        assert!(matches!(
            paired_t_test(&shifted, &same),
            Err(Error::DegenerateTest(_))
        ));
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }
}
