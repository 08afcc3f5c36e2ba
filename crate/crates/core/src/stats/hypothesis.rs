use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use super::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoSampleTest {
    /// Welch's unequal-variance t test on means.
    WelchT,
    /// Two-sided F test on the variance ratio.
    FVar,
    /// Brown–Forsythe (median-centred Levene) test on scale.
    Levene,
    /// Wilcoxon rank-sum (Mann–Whitney U).
    Wilcoxon,
}

/// Below this smaller-group size, tie-free samples get an exact rank-sum
/// distribution.
pub const WILCOXON_EXACT_BELOW: usize = 10;

pub fn two_sample_test(a: &[f64], b: &[f64], kind: TwoSampleTest) -> Result<TestResult, StatsError> {
    match kind {
        TwoSampleTest::WelchT => welch_t(a, b),
        TwoSampleTest::FVar => f_var(a, b),
        TwoSampleTest::Levene => levene(a, b),
        TwoSampleTest::Wilcoxon => wilcoxon(a, b),
    }
}

fn need(x: &[f64], n: usize) -> Result<(), StatsError> {
    if x.len() < n {
        return Err(StatsError::DegenerateSample(format!("{} points, need at least {n}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::DegenerateSample("non-finite value".into()));
    }
    Ok(())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(0.0, 1.0)
    }
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    need(a, 2)?;
    need(b, 2)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult {
                statistic: (ma - mb).signum() * f64::INFINITY,
                p_value: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::DegenerateSample(e.to_string()))?;
    Ok(TestResult {
        statistic: t,
        p_value: clamp_p(2.0 * dist.sf(t.abs())),
    })
}

/// Two-sided F test of equal variances. The statistic is `var(a) / var(b)`.
pub fn f_var(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    need(a, 2)?;
    need(b, 2)?;
    let (_, va) = mean_var(a);
    let (_, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Ok(TestResult { statistic: 1.0, p_value: 1.0 });
    }
    if vb == 0.0 || va == 0.0 {
        return Ok(TestResult {
            statistic: va / vb,
            p_value: 0.0,
        });
    }
    let f = va / vb;
    let dist = FisherSnedecor::new((a.len() - 1) as f64, (b.len() - 1) as f64)
        .map_err(|e| StatsError::DegenerateSample(e.to_string()))?;
    Ok(TestResult {
        statistic: f,
        p_value: clamp_p(2.0 * dist.cdf(f).min(dist.sf(f))),
    })
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Brown–Forsythe variant of Levene's test: one-way ANOVA on absolute
/// deviations from each group's median.
pub fn levene(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    need(a, 2)?;
    need(b, 2)?;
    let za: Vec<f64> = {
        let m = median(a);
        a.iter().map(|v| (v - m).abs()).collect()
    };
    let zb: Vec<f64> = {
        let m = median(b);
        b.iter().map(|v| (v - m).abs()).collect()
    };
    let (na, nb) = (za.len() as f64, zb.len() as f64);
    let n = na + nb;
    let (ma, mb) = (za.iter().sum::<f64>() / na, zb.iter().sum::<f64>() / nb);
    let grand = (ma * na + mb * nb) / n;
    let between = na * (ma - grand).powi(2) + nb * (mb - grand).powi(2);
    let within: f64 = za.iter().map(|z| (z - ma).powi(2)).sum::<f64>() + zb.iter().map(|z| (z - mb).powi(2)).sum::<f64>();
    if within == 0.0 {
        return Ok(if between == 0.0 {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult {
                statistic: f64::INFINITY,
                p_value: 0.0,
            }
        });
    }
    let w = (n - 2.0) * between / within;
    let dist = FisherSnedecor::new(1.0, n - 2.0).map_err(|e| StatsError::DegenerateSample(e.to_string()))?;
    Ok(TestResult {
        statistic: w,
        p_value: clamp_p(dist.sf(w)),
    })
}

/// Midranks of the pooled sample, plus the sizes of every tie group.
fn pooled_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<(f64, usize)> = a.iter().chain(b).copied().zip(0..).collect();
    idx.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ranks = vec![0.0; idx.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for item in &idx[i..=j] {
            ranks[item.1] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of ways, for each `u`, that `m` of `m + n` distinct ranks give
/// Mann–Whitney statistic `u`.
fn mann_whitney_counts(m: usize, n: usize) -> Vec<f64> {
    // f[i][j][u]: arrangements of i items of a and j of b with statistic u.
    let max_u = m * n;
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for _ in 0..m {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n + 1];
        cur[0][0] = 1.0;
        for j in 1..=n {
            for u in 0..=max_u {
                // Largest element is from a (beats all j of b) or from b.
                let from_a = if u >= j { prev[j][u - j] } else { 0.0 };
                cur[j][u] = from_a + cur[j - 1][u];
            }
        }
        prev = cur;
    }
    prev.swap_remove(n)
}

/// Two-sided Wilcoxon rank-sum test. The statistic is `U_a - n_a n_b / 2`,
/// where `U_a` counts pairs with the `a` value larger.
pub fn wilcoxon(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    need(a, 1)?;
    need(b, 1)?;
    let (na, nb) = (a.len(), b.len());
    let (ranks, ties) = pooled_ranks(a, b);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mu = (na * nb) as f64 / 2.0;
    let statistic = u_a - mu;
    let u_big = u_a.max((na * nb) as f64 - u_a);

    if na.min(nb) < WILCOXON_EXACT_BELOW && ties.is_empty() {
        let counts = mann_whitney_counts(na, nb);
        let total: f64 = counts.iter().sum();
        let k = u_big.round() as usize;
        let upper: f64 = counts[k..].iter().sum::<f64>() / total;
        return Ok(TestResult {
            statistic,
            p_value: clamp_p(2.0 * upper),
        });
    }

    let n = (na + nb) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(TestResult { statistic, p_value: 1.0 });
    }
    let z = (u_big - mu - 0.5) / var.sqrt();
    let normal = Normal::standard();
    Ok(TestResult {
        statistic,
        p_value: clamp_p(2.0 * normal.sf(z)),
    })
}
