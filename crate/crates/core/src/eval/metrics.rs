//! Concordance, Kaplan–Meier, log-rank and Welch tests.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::special::{chi2_sf, student_t_two_sided};

fn check_lengths(a: usize, b: usize, c: usize, op: &'static str) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Shape {
            op,
            left: (a, b),
            right: (a, c),
        });
    }
    Ok(())
}

/// Pairs `(i, j)` with `t_i < t_j` and an event at `t_i` are comparable; a pair
/// is concordant when `risk_i > risk_j` and counts one half on a risk tie.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_lengths(risks.len(), times.len(), events.len(), "c_index")?;
    // doubled counts keep the tie half-credit exact
    let (mut concordant2, mut comparable) = (0u64, 0u64);
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risks.len() {
            if times[i] < times[j] {
                comparable += 1;
                concordant2 += match risks[i].partial_cmp(&risks[j]) {
                    Some(core::cmp::Ordering::Greater) => 2,
                    Some(core::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("c-index has no comparable pairs"));
    }
    Ok(concordant2 as f64 / (2 * comparable) as f64)
}

/// Product-limit estimate, one step per distinct event time.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `Ŝ(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Distinct times in ascending order with (at risk, events) counts.
fn risk_sets(times: &[f64], events: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = Vec::new();
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut n) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            d += events[order[i]] as usize;
            n += 1;
            i += 1;
        }
        out.push((t, at_risk, d));
        at_risk -= n;
    }
    out
}

pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    check_lengths(times.len(), events.len(), times.len(), "km_estimate")?;
    if times.is_empty() {
        return Err(Error::UndefinedMetric("Kaplan-Meier needs at least one sample"));
    }
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    for (t, n, d) in risk_sets(times, events) {
        if d == 0 {
            continue;
        }
        s *= 1.0 - d as f64 / n as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
    }
    Ok(curve)
}

/// Test statistic with its degrees of freedom and p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-group log-rank test, χ² with one degree of freedom.
pub fn log_rank_test(times_a: &[f64], events_a: &[bool], times_b: &[f64], events_b: &[bool]) -> Result<TestResult> {
    check_lengths(times_a.len(), events_a.len(), events_a.len(), "log_rank_test")?;
    check_lengths(times_b.len(), events_b.len(), events_b.len(), "log_rank_test")?;
    if times_a.is_empty() || times_b.is_empty() {
        return Err(Error::DegenerateTest("log-rank needs two non-empty groups"));
    }
    let times: Vec<f64> = times_a.iter().chain(times_b).copied().collect();
    let events: Vec<bool> = events_a.iter().chain(events_b).copied().collect();
    let in_a: Vec<bool> = (0..times.len()).map(|i| i < times_a.len()).collect();

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&x, &y| times[x].total_cmp(&times[y]));
    let (mut n, mut n_a) = (times.len() as f64, times_a.len() as f64);
    let (mut observed_a, mut expected_a, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut d_a, mut leave, mut leave_a) = (0.0, 0.0, 0.0, 0.0);
        while i < order.len() && times[order[i]] == t {
            let k = order[i];
            let ev = events[k] as u8 as f64;
            d += ev;
            leave += 1.0;
            if in_a[k] {
                d_a += ev;
                leave_a += 1.0;
            }
            i += 1;
        }
        if d > 0.0 {
            observed_a += d_a;
            expected_a += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    if !(var > 0.0) {
        return Err(Error::DegenerateTest("log-rank variance is zero"));
    }
    let diff = observed_a - expected_a;
    let chi2 = diff * diff / var;
    Ok(TestResult {
        statistic: chi2,
        df: 1.0,
        p_value: chi2_sf(chi2, 1.0),
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test with Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateTest("Welch test needs two samples per group"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(Error::DegenerateTest("Welch test groups have zero variance"));
    }
    let t = (ma - mb) / libm::sqrt(se2);
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(TestResult {
        statistic: t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

/// Type-7 median.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `true` for entries strictly above the median.
pub fn median_split(xs: &[f64]) -> Vec<bool> {
    match median(xs) {
        None => Vec::new(),
        Some(m) => xs.iter().map(|&x| x > m).collect(),
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(v))
}

/// Partition `(times, events)` by a boolean mask: `(true group, false group)`.
pub fn split_by<T: Copy>(values: &[T], mask: &[bool]) -> (Vec<T>, Vec<T>) {
    let mut yes = Vec::new();
    let mut no = Vec::new();
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            yes.push(v);
        } else {
            no.push(v);
        }
    }
    (yes, no)
}
