//! Analytical cost model for remote process creation, recursive
//! distribution and parallel mergesort.
//!
//! All values are nanoseconds held in `f64`. With the default constants
//! every quantity evaluated at power-of-two sizes is an exact integer, so
//! golden values compare with `==`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostModelError {
    #[error("p = {0} is not a power of two")]
    NotPowerOfTwo(u64),
    #[error("n = {n} is smaller than p = {p}")]
    TooFewItems { n: u64, p: u64 },
    #[error("no sign change for the inflection equation in [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },
    #[error("least-squares fit is singular: {0}")]
    SingularFit(String),
    #[error("constants file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("constant {key} = {value} is out of range")]
    OutOfRange { key: &'static str, value: f64 },
    #[error("unknown formula {0:?}")]
    UnknownFormula(String),
    #[error("unknown sequential-cost mode {0:?}")]
    UnknownMode(String),
    #[error("unknown measured model {0:?}")]
    UnknownModel(String),
    #[error("{model} needs at least 2 measurements with distinct x, got {rows}")]
    InsufficientData { model: &'static str, rows: usize },
}

/// Every constant appearing in the cost equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    /// `C_i`: fixed cost of one mergesort spawn, including its closure.
    pub spawn_init_ns: f64,
    /// `C_j`: fixed cost of one distribute spawn.
    pub distribute_init_ns: f64,
    /// `C_o`: sequential overhead per recursion level (fork/join).
    pub level_overhead_ns: f64,
    /// `C_w`: per-word transfer cost over a single off-chip hop.
    pub word_ns: f64,
    /// `C_l`: guest-to-host path multiplier.
    pub path_multiplier: f64,
    /// `C_a`: merge cost per word.
    pub merge_word_ns: f64,
    /// `C_b`: merge cost per call.
    pub merge_call_ns: f64,
    /// `C_c`: sequential sort cost per word per log2 n.
    pub sort_word_log_ns: f64,
    /// `C_d`: sequential sort cost per word.
    pub sort_word_ns: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        CostConstants {
            spawn_init_ns: 28_000.0,
            distribute_init_ns: 18_400.0,
            level_overhead_ns: 60.0,
            word_ns: 150.0,
            path_multiplier: 1.0,
            merge_word_ns: 90.0,
            merge_call_ns: 830.0,
            sort_word_log_ns: 200.0,
            sort_word_ns: 1_200.0,
        }
    }
}

const KEYS: [&str; 9] = [
    "C_i_ns", "C_j_ns", "C_o_ns", "C_w_ns", "C_l", "C_a_ns", "C_b_ns", "C_c_ns", "C_d_ns",
];

impl CostConstants {
    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "C_i_ns" => &mut self.spawn_init_ns,
            "C_j_ns" => &mut self.distribute_init_ns,
            "C_o_ns" => &mut self.level_overhead_ns,
            "C_w_ns" => &mut self.word_ns,
            "C_l" => &mut self.path_multiplier,
            "C_a_ns" => &mut self.merge_word_ns,
            "C_b_ns" => &mut self.merge_call_ns,
            "C_c_ns" => &mut self.sort_word_log_ns,
            "C_d_ns" => &mut self.sort_word_ns,
            _ => return None,
        })
    }

    fn values(&self) -> [f64; 9] {
        [
            self.spawn_init_ns,
            self.distribute_init_ns,
            self.level_overhead_ns,
            self.word_ns,
            self.path_multiplier,
            self.merge_word_ns,
            self.merge_call_ns,
            self.sort_word_log_ns,
            self.sort_word_ns,
        ]
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        for (key, value) in KEYS.iter().zip(self.values()) {
            let ok = if *key == "C_o_ns" {
                value >= 0.0
            } else {
                value > 0.0
            };
            if !ok || !value.is_finite() {
                return Err(CostModelError::OutOfRange { key, value });
            }
        }
        Ok(())
    }

    /// Parses a flat `key=value` file. Keys left out keep their defaults;
    /// blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, CostModelError> {
        let mut c = CostConstants::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| CostModelError::Parse { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| err(format!("bad number {:?}: {e}", value.trim())))?;
            *c.slot(key.trim())
                .ok_or_else(|| err(format!("unknown key {:?}", key.trim())))? = value;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_file_string(&self) -> String {
        KEYS.iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// How the sequential sort cost `T_s(n, 1)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SeqCostMode {
    /// `n (C_c log n + C_d)`.
    Closed,
    /// `T(n) = T(floor(n/2)) + T(ceil(n/2)) + T_m(n)`, `T(1) = base`.
    Recurrence { base_ns: f64 },
}

impl FromStr for SeqCostMode {
    type Err = CostModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "closed" => Ok(SeqCostMode::Closed),
            "recurrence" => Ok(SeqCostMode::Recurrence { base_ns: 0.0 }),
            other => Err(CostModelError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formula {
    Distribute,
    ParallelSort,
    LowerBound,
    LowerBoundNoData,
}

impl Formula {
    pub fn name(self) -> &'static str {
        match self {
            Formula::Distribute => "t_d",
            Formula::ParallelSort => "t_snp",
            Formula::LowerBound => "t_min",
            Formula::LowerBoundNoData => "t_min_nodata",
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formula {
    type Err = CostModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t_d" => Ok(Formula::Distribute),
            "t_snp" => Ok(Formula::ParallelSort),
            "t_min" => Ok(Formula::LowerBound),
            "t_min_nodata" => Ok(Formula::LowerBoundNoData),
            other => Err(CostModelError::UnknownFormula(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub n: u64,
    pub p: u64,
    pub formula: Formula,
    pub time_ns: f64,
}

fn log2_pow2(p: u64) -> Result<f64, CostModelError> {
    if p == 0 || !p.is_power_of_two() {
        return Err(CostModelError::NotPowerOfTwo(p));
    }
    Ok(f64::from(p.trailing_zeros()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub constants: CostConstants,
}

impl CostModel {
    pub fn new(constants: CostConstants) -> Self {
        CostModel { constants }
    }

    /// Process-creation cost for `n` argument, `m` procedure and `o` result words.
    pub fn t_c(&self, n: f64, m: f64, o: f64, mult: f64) -> f64 {
        let c = &self.constants;
        (c.spawn_init_ns + c.word_ns * n + c.word_ns * m + c.word_ns * o) * mult
    }

    /// Mergesort spawn carrying `n` words out and `n` words back.
    pub fn t_c_sort(&self, n: f64) -> f64 {
        self.constants.spawn_init_ns + 2.0 * self.constants.word_ns * n
    }

    /// Time for distribute to populate `p` processors.
    pub fn t_d(&self, p: u64) -> Result<f64, CostModelError> {
        let c = &self.constants;
        Ok((c.distribute_init_ns + c.level_overhead_ns) * log2_pow2(p)?)
    }

    pub fn t_m(&self, n: f64) -> f64 {
        self.constants.merge_word_ns * n + self.constants.merge_call_ns
    }

    /// Closed-form sequential sort time.
    pub fn t_s1(&self, n: f64) -> f64 {
        let c = &self.constants;
        n * (c.sort_word_log_ns * n.log2() + c.sort_word_ns)
    }

    /// Sequential sort time by direct evaluation of the merge recurrence,
    /// splitting like the sort does (`floor(n/2)` then `ceil(n/2)`).
    pub fn t_s1_recurrence(&self, n: u64, base_ns: f64) -> f64 {
        fn go(model: &CostModel, n: u64, base: f64, memo: &mut BTreeMap<u64, f64>) -> f64 {
            match n {
                0 => 0.0,
                1 => base,
                _ => {
                    if let Some(&v) = memo.get(&n) {
                        return v;
                    }
                    let lo = n / 2;
                    let v = go(model, lo, base, memo) + go(model, n - lo, base, memo) + model.t_m(n as f64);
                    memo.insert(n, v);
                    v
                }
            }
        }
        go(self, n, base_ns, &mut BTreeMap::new())
    }

    /// Sequential sort time under the chosen mode. Empty input costs nothing.
    pub fn t_seq(&self, n: u64, mode: SeqCostMode) -> f64 {
        if n == 0 {
            return 0.0;
        }
        match mode {
            SeqCostMode::Closed => self.t_s1(n as f64),
            SeqCostMode::Recurrence { base_ns } => self.t_s1_recurrence(n, base_ns),
        }
    }

    /// Simplified parallel mergesort time on `p` processors.
    pub fn t_snp(&self, n: u64, p: u64) -> Result<f64, CostModelError> {
        let log_p = log2_pow2(p)?;
        if n < p {
            return Err(CostModelError::TooFewItems { n, p });
        }
        let c = &self.constants;
        let (nf, pf) = (n as f64, p as f64);
        let per = nf / pf;
        Ok((2.0 * nf / pf) * (pf - 1.0) * (c.word_ns + c.merge_word_ns)
            + (c.spawn_init_ns + c.merge_call_ns) * log_p
            + per * (c.sort_word_log_ns * per.log2() + c.sort_word_ns))
    }

    /// Parallel mergesort time as the level-by-level sum
    /// `sum_i (C_o + T_c(n/2^i) + T_m(n/2^(i-1))) + T_s(n/p, 1)`, with the
    /// sequential leaf cost taken from `mode`. This is the critical path the
    /// simulator follows; it exceeds `t_snp` by `C_o log p` in closed mode.
    pub fn t_snp_sum(&self, n: u64, p: u64, mode: SeqCostMode) -> Result<f64, CostModelError> {
        let levels = log2_pow2(p)? as u32;
        if n < p {
            return Err(CostModelError::TooFewItems { n, p });
        }
        let nf = n as f64;
        let mut total = 0.0;
        for i in 1..=levels {
            total += self.constants.level_overhead_ns
                + self.t_c_sort(nf / 2f64.powi(i as i32))
                + self.t_m(nf / 2f64.powi(i as i32 - 1));
        }
        let leaf = match mode {
            SeqCostMode::Closed => self.t_s1(nf / p as f64),
            SeqCostMode::Recurrence { base_ns } => self.t_s1_recurrence(n / p, base_ns),
        };
        Ok(total + leaf)
    }

    /// Parallel-overhead lower bound: spawns plus input data movement.
    pub fn t_min(&self, n: u64, p: u64) -> Result<f64, CostModelError> {
        let log_p = log2_pow2(p)?;
        let c = &self.constants;
        let (nf, pf) = (n as f64, p as f64);
        Ok(c.spawn_init_ns * log_p + c.word_ns * (2.0 * nf / pf) * (pf - 1.0))
    }

    /// Input size at which a remote spawn costs as much as sorting locally,
    /// by bracketing and bisection to 0.01 words. Returns 1.0 when spawning
    /// is already cheaper at a single word.
    pub fn inflection(&self) -> Result<f64, CostModelError> {
        let f = |n: f64| self.t_c_sort(n) - self.t_s1(n);
        let mut lo = 1.0;
        if f(lo) <= 0.0 {
            return Ok(lo);
        }
        let mut hi = 2.0;
        while f(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > 2f64.powi(60) {
                return Err(CostModelError::NoRoot { lo: 1.0, hi });
            }
        }
        while hi - lo > 0.01 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Power-of-two processor count `p <= n` minimising `t_snp`; ties go to
    /// the smaller `p`.
    pub fn argmin_p(&self, n: u64) -> Result<u64, CostModelError> {
        let mut best: Option<(u64, f64)> = None;
        let mut p = 1u64;
        while p <= n.max(1) {
            let t = self.t_snp(n.max(1), p)?;
            if best.is_none_or(|(_, b)| t < b) {
                best = Some((p, t));
            }
            p <<= 1;
        }
        Ok(best.map(|(p, _)| p).unwrap_or(1))
    }

    pub fn predict(
        &self,
        formula: Formula,
        n: u64,
        p: u64,
        mode: SeqCostMode,
    ) -> Result<Prediction, CostModelError> {
        let time_ns = match formula {
            Formula::Distribute => self.t_d(p)?,
            Formula::ParallelSort => match mode {
                SeqCostMode::Closed => self.t_snp(n, p)?,
                SeqCostMode::Recurrence { .. } => self.t_snp_sum(n, p, mode)?,
            },
            Formula::LowerBound => self.t_min(n, p)?,
            Formula::LowerBoundNoData => self.t_min(0, p)?,
        };
        Ok(Prediction {
            n,
            p,
            formula,
            time_ns,
        })
    }
}

/// Result of a least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the residuals.
    pub residual_norm: f64,
}

/// Ordinary least squares `t = slope * x + intercept`.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit, CostModelError> {
    if points.len() < 2 {
        return Err(CostModelError::SingularFit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let k = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / k;
    let mean_t = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxt: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_t)).sum();
    if sxx == 0.0 {
        return Err(CostModelError::SingularFit("all x values are equal".into()));
    }
    let slope = sxt / sxx;
    let intercept = mean_t - slope * mean_x;
    Ok(LinearFit {
        slope,
        intercept,
        residual_norm: residual_norm(points, slope, intercept),
    })
}

/// Least squares through the origin, `t = slope * x`.
pub fn fit_through_origin(points: &[(f64, f64)]) -> Result<LinearFit, CostModelError> {
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    if points.is_empty() || sxx == 0.0 {
        return Err(CostModelError::SingularFit("no non-zero x values".into()));
    }
    let slope = points.iter().map(|p| p.0 * p.1).sum::<f64>() / sxx;
    Ok(LinearFit {
        slope,
        intercept: 0.0,
        residual_norm: residual_norm(points, slope, 0.0),
    })
}

fn residual_norm(points: &[(f64, f64)], slope: f64, intercept: f64) -> f64 {
    points
        .iter()
        .map(|&(x, t)| (t - (slope * x + intercept)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Which timing a calibration measurement samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MeasuredModel {
    /// Merge time against merged length.
    Merge,
    /// Distribute time against processor count.
    Distribute,
    /// Sequential sort time against input length.
    SeqSort,
}

impl MeasuredModel {
    pub const ALL: [MeasuredModel; 3] = [
        MeasuredModel::Merge,
        MeasuredModel::Distribute,
        MeasuredModel::SeqSort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeasuredModel::Merge => "t_m",
            MeasuredModel::Distribute => "t_d",
            MeasuredModel::SeqSort => "t_s1",
        }
    }
}

impl fmt::Display for MeasuredModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasuredModel {
    type Err = CostModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MeasuredModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CostModelError::UnknownModel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub model: MeasuredModel,
    pub x: f64,
    pub time_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub constants: CostConstants,
    pub fits: Vec<(MeasuredModel, LinearFit)>,
}

/// Fits constants from measurements, starting from `base` for anything
/// not measured.
///
/// Merge rows give `C_a` and `C_b`. Distribute rows are fitted through the
/// origin against `log2 p`; the slope is `C_j + C_o` and `C_j` is taken as
/// the slope minus the base `C_o`. Sort rows are fitted as `t / n` against
/// `log2 n`, giving `C_c` and `C_d`. A model with no rows is skipped; a
/// model with fewer than two distinct x values is an error.
pub fn calibrate(base: CostConstants, rows: &[Measurement]) -> Result<Calibration, CostModelError> {
    let mut constants = base;
    let mut fits = Vec::new();
    for model in MeasuredModel::ALL {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.model == model)
            .map(|r| match model {
                MeasuredModel::Merge => (r.x, r.time_ns),
                MeasuredModel::Distribute => (r.x.log2(), r.time_ns),
                MeasuredModel::SeqSort => (r.x.log2(), r.time_ns / r.x),
            })
            .collect();
        if pts.is_empty() {
            continue;
        }
        let distinct = {
            let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            xs.len()
        };
        let min_distinct = if model == MeasuredModel::Distribute { 1 } else { 2 };
        if pts.len() < 2 || distinct < min_distinct || pts.iter().any(|p| !p.0.is_finite()) {
            return Err(CostModelError::InsufficientData {
                model: model.name(),
                rows: pts.len(),
            });
        }
        let fit = match model {
            MeasuredModel::Distribute => fit_through_origin(&pts)?,
            _ => fit_linear(&pts)?,
        };
        match model {
            MeasuredModel::Merge => {
                constants.merge_word_ns = fit.slope;
                constants.merge_call_ns = fit.intercept;
            }
            MeasuredModel::Distribute => {
                constants.distribute_init_ns = fit.slope - constants.level_overhead_ns;
            }
            MeasuredModel::SeqSort => {
                constants.sort_word_log_ns = fit.slope;
                constants.sort_word_ns = fit.intercept;
            }
        }
        fits.push((model, fit));
    }
    constants.validate()?;
    Ok(Calibration { constants, fits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel {
        CostModel::default()
    }

    #[test]
    fn process_creation_cost() {
        let m = model();
        assert_eq!(m.t_c(0.0, 0.0, 0.0, 1.0), 28_000.0);
        assert_eq!(m.t_c(100.0, 0.0, 100.0, 1.0), 58_000.0);
        assert_eq!(m.t_c(10.0, 5.0, 3.0, 2.0), 2.0 * m.t_c(10.0, 5.0, 3.0, 1.0));
    }

    #[test]
    fn distribute_time() {
        let m = model();
        assert_eq!(m.t_d(1).unwrap(), 0.0);
        assert_eq!(m.t_d(64).unwrap(), 110_760.0);
        assert_eq!(m.t_d(1024).unwrap(), 184_600.0);
        assert_eq!(m.t_d(3), Err(CostModelError::NotPowerOfTwo(3)));
        assert!(m.t_d(0).is_err());
    }

    #[test]
    fn merge_time() {
        let m = model();
        assert_eq!(m.t_m(0.0), 830.0);
        assert_eq!(m.t_m(1024.0), 92_990.0);
        assert_eq!(m.t_m(2048.0) - m.t_m(1024.0), 90.0 * 1024.0);
    }

    #[test]
    fn closed_form_sequential() {
        let m = model();
        assert_eq!(m.t_s1(1.0), 1_200.0);
        assert_eq!(m.t_s1(64.0), 153_600.0);
        assert_eq!(m.t_s1(8192.0), 31_129_600.0);
    }

    #[test]
    fn recurrence_values() {
        let m = model();
        assert_eq!(m.t_s1_recurrence(1, 1_200.0), 1_200.0);
        assert_eq!(m.t_s1_recurrence(4, 0.0), 3_210.0);
        // For powers of two the recurrence solves to C_a n log n + C_b (n-1) + n*base.
        for k in 0..20u32 {
            let n = 1u64 << k;
            let oracle = 90.0 * n as f64 * f64::from(k) + 830.0 * (n - 1) as f64 + 7.0 * n as f64;
            assert_eq!(m.t_s1_recurrence(n, 7.0), oracle, "n={n}");
        }
        assert_eq!(m.t_seq(0, SeqCostMode::Closed), 0.0);
    }

    #[test]
    fn parallel_sort_time() {
        let m = model();
        let expected = [153_600.0, 114_590.0, 112_700.0, 127_770.0];
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(m.t_snp(64, 1 << i).unwrap(), *e);
        }
        assert_eq!(m.t_snp(128, 8).unwrap(), 172_250.0);
        assert_eq!(m.t_snp(128, 4).unwrap(), 174_140.0);
        assert_eq!(m.t_snp(4, 8), Err(CostModelError::TooFewItems { n: 4, p: 8 }));
    }

    #[test]
    fn level_sum_matches_simplified_form() {
        // Two independent routes to the same quantity, apart from the
        // per-level overhead the level sum adds.
        let m = model();
        for k in 0..=14u32 {
            for d in 0..=k.min(10) {
                let (n, p) = (1u64 << k, 1u64 << d);
                let a = m.t_snp(n, p).unwrap();
                let b = m.t_snp_sum(n, p, SeqCostMode::Closed).unwrap() - 60.0 * f64::from(d);
                assert!((a - b).abs() <= 1e-9 * a, "n={n} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lower_bound() {
        let m = model();
        assert_eq!(m.t_min(0, 64).unwrap(), 168_000.0);
        assert_eq!(m.t_min(0, 1).unwrap(), 0.0);
        assert_eq!(m.t_min(64, 4).unwrap(), 70_400.0);
    }

    #[test]
    fn inflection_point() {
        let m = model();
        let root = m.inflection().unwrap();
        // Brute-force scan at 1e-4 words puts the root at 16.4016.
        assert!((root - 16.4016).abs() < 0.01, "root {root}");

        let mut big = m;
        big.constants.spawn_init_ns *= 2.0;
        assert!(big.inflection().unwrap() > root);

        let mut free = m;
        free.constants.spawn_init_ns = 1e-9;
        free.constants.word_ns = 1e-9;
        assert_eq!(free.inflection().unwrap(), 1.0);
    }

    #[test]
    fn minimum_processor_counts() {
        let m = model();
        assert_eq!(m.argmin_p(64).unwrap(), 4);
        assert_eq!(m.argmin_p(128).unwrap(), 8);
        assert_eq!(m.argmin_p(1).unwrap(), 1);
    }

    #[test]
    fn exact_line_fit() {
        let pts: Vec<_> = (1..10).map(|x| (x as f64, 90.0 * x as f64 + 830.0)).collect();
        let f = fit_linear(&pts).unwrap();
        assert!((f.slope - 90.0).abs() < 1e-9);
        assert!((f.intercept - 830.0).abs() < 1e-9);
        assert!(f.residual_norm < 1e-9);
        assert!(fit_linear(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(fit_linear(&[(1.0, 2.0)]).is_err());
    }

    #[test]
    fn distribute_fit_through_origin() {
        let m = model();
        let pts: Vec<_> = (0..=10u32)
            .map(|d| (f64::from(d), m.t_d(1 << d).unwrap()))
            .collect();
        let f = fit_through_origin(&pts).unwrap();
        assert!((f.slope - 18_460.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_fit_is_deterministic() {
        let pts: Vec<_> = (0..20)
            .map(|x| {
                (
                    x as f64,
                    3.0 * x as f64 + 1.0 + if x % 2 == 0 { 0.5 } else { -0.5 },
                )
            })
            .collect();
        let a = fit_linear(&pts).unwrap();
        let b = fit_linear(&pts).unwrap();
        assert_eq!(a, b);
        assert!(a.residual_norm > 0.0);
    }

    #[test]
    fn constants_file_round_trip() {
        let c = CostConstants::default();
        let text = c.to_file_string();
        assert!(text.contains("C_w_ns=150\n"));
        assert_eq!(CostConstants::parse(&text).unwrap(), c);
        let partial = CostConstants::parse("# tweak\nC_w_ns = 100\n\n").unwrap();
        assert_eq!(partial.word_ns, 100.0);
        assert!(matches!(
            CostConstants::parse("C_w_ns=1\nbogus\n"),
            Err(CostModelError::Parse { line: 2, .. })
        ));
        assert!(CostConstants::parse("C_q_ns=1").is_err());
        assert!(CostConstants::parse("C_a_ns=0").is_err());
        assert!(CostConstants::parse("C_o_ns=0").is_ok());
    }

    #[test]
    fn formula_names() {
        for f in [
            Formula::Distribute,
            Formula::ParallelSort,
            Formula::LowerBound,
            Formula::LowerBoundNoData,
        ] {
            assert_eq!(f.name().parse::<Formula>().unwrap(), f);
        }
        assert!("t_x".parse::<Formula>().is_err());
    }
}
