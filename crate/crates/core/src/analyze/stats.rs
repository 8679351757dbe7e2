use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean with a 95% normal-approximation half width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower() && x <= self.upper()
    }
}

pub fn mean_ci(xs: &[f64]) -> ConfidenceInterval {
    let n = xs.len();
    if n == 0 {
        return ConfidenceInterval::default();
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let half_width = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    ConfidenceInterval { mean, half_width, n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Mean of `b - a`.
    pub mean_delta: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
}

impl PairedTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Paired t-test on `b - a`. Returns `None` for fewer than two pairs or
/// mismatched lengths. Identical samples give `t = 0`, `p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let df = n - 1;
    let (t, p) = if se == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, df as f64).ok()?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Some(PairedTest {
        mean_delta: mean,
        t,
        df,
        p_value: p,
        n,
    })
}

/// Picks the candidate with the highest mean over its validation runs;
/// the earliest candidate wins ties. `None` if there are no scored candidates.
pub fn select_best(runs: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in runs.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let m = r.iter().sum::<f64>() / r.len() as f64;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}
