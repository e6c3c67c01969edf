//! Personalization indicators and driving-style reference lines.
//!
//! A lane-change decision is characterised by three indicators taken at the
//! decision instant:
//!
//! - `t_f`: time to collision with the front car in the current lane,
//! - `t_nf`: time to collision with the front car in the target lane,
//! - `dv_nb`: speed difference to the follower in the target lane.
//!
//! Each driving style is an affine reference line `I = A * v_e + b` over ego
//! speed. This module computes indicators from scenario states, evaluates
//! and fits reference lines, and provides the statistics used to analyse
//! decision data (Pearson correlation, k-means style clustering).

use std::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::seed::Rng;
use crate::sim::{Action, ScenarioConfig, ScenarioState, SimError};

/// Value recorded for `t_nf` when the target lane has no leader.
pub const MISSING_SENTINEL: f64 = -1.0;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum IndicatorError {
    #[error("degenerate design: need at least two distinct ego speeds, got {0}")]
    DegenerateDesign(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot form {k} clusters from {n} points")]
    TooManyClusters { k: usize, n: usize },
    #[error("invalid indicator config: {0}")]
    InvalidConfig(String),
    #[error("record indicators do not match its state: {0}")]
    InconsistentRecord(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("unknown builtin style {0:?}")]
    UnknownStyle(String),
    #[error("profile parse error: {0}")]
    Parse(String),
}

/// Sign convention for `dv_nb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedDiffSign {
    /// `ego.v - behind.v`.
    EgoMinusBehind,
    /// `behind.v - ego.v`.
    BehindMinusEgo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorConfig {
    /// TTC reported when the gap is not closing, seconds.
    pub ttc_cap: f64,
    /// Multiplier applied to ego speed (m/s) before evaluating or fitting
    /// reference lines. 1.0 reads reference lines in m/s, 3.6 in km/h.
    pub reference_speed_scale: f64,
    pub dv_nb_sign: SpeedDiffSign,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            ttc_cap: 99.0,
            reference_speed_scale: 1.0,
            dv_nb_sign: SpeedDiffSign::EgoMinusBehind,
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<(), IndicatorError> {
        if !(self.ttc_cap.is_finite() && self.ttc_cap > 0.0) {
            return Err(IndicatorError::InvalidConfig("ttc_cap must be > 0".into()));
        }
        if !(self.reference_speed_scale.is_finite() && self.reference_speed_scale > 0.0) {
            return Err(IndicatorError::InvalidConfig("reference_speed_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// The personalization triple at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorVector {
    pub t_f: f64,
    /// [`MISSING_SENTINEL`] when the target lane has no leader.
    pub t_nf: f64,
    pub dv_nb: f64,
    /// False when the follower is absent or beyond the relevance limit; the
    /// `dv_nb` term then contributes no error.
    #[serde(default = "yes")]
    pub dv_nb_relevant: bool,
}

fn yes() -> bool {
    true
}

impl IndicatorVector {
    pub fn new(t_f: f64, t_nf: f64, dv_nb: f64) -> Self {
        Self {
            t_f,
            t_nf,
            dv_nb,
            dv_nb_relevant: true,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.t_f, self.t_nf, self.dv_nb]
    }

    pub fn t_nf_missing(&self) -> bool {
        self.t_nf == MISSING_SENTINEL
    }

    /// Whether indicator `i` (0 = t_f, 1 = t_nf, 2 = dv_nb) carries information.
    pub fn is_relevant(&self, i: usize) -> bool {
        match i {
            0 => true,
            1 => !self.t_nf_missing(),
            _ => self.dv_nb_relevant,
        }
    }

    /// Absolute errors against `reference`, with missing or irrelevant
    /// entries neutralized to zero error.
    pub fn errors_against(&self, reference: &IndicatorVector) -> [f64; 3] {
        let actual = self.as_array();
        let refs = reference.as_array();
        std::array::from_fn(|i| {
            if self.is_relevant(i) {
                crate::reward::absolute_error(actual[i], refs[i])
            } else {
                0.0
            }
        })
    }

    /// Copy with sentinel and irrelevant entries replaced by the reference
    /// value, so that they carry zero error.
    pub fn neutralized(&self, reference: &IndicatorVector) -> IndicatorVector {
        let mut out = *self;
        if self.t_nf_missing() {
            out.t_nf = reference.t_nf;
        }
        if !self.dv_nb_relevant {
            out.dv_nb = reference.dv_nb;
            out.dv_nb_relevant = true;
        }
        out
    }
}

fn ttc(gap: f64, closing_speed: f64, cap: f64) -> f64 {
    if closing_speed > 0.0 {
        (gap / closing_speed).min(cap)
    } else {
        cap
    }
}

/// Indicators for `state`. Pure function of its inputs.
pub fn compute_indicators(state: &ScenarioState, config: &ScenarioConfig) -> IndicatorVector {
    let cap = config.indicators.ttc_cap;
    let ego = state.ego;
    let t_f = ttc(state.front.x - ego.x, ego.v - state.front.v, cap);
    let t_nf = match state.target_front {
        Some(nf) => ttc(nf.x - ego.x, ego.v - nf.v, cap),
        None => MISSING_SENTINEL,
    };
    let (dv_nb, dv_nb_relevant) = match state.target_behind {
        Some(nb) => {
            let dv = match config.indicators.dv_nb_sign {
                SpeedDiffSign::EgoMinusBehind => ego.v - nb.v,
                SpeedDiffSign::BehindMinusEgo => nb.v - ego.v,
            };
            (dv, ego.x - nb.x <= config.behind_relevance_limit)
        }
        None => (0.0, false),
    };
    IndicatorVector {
        t_f,
        t_nf,
        dv_nb,
        dv_nb_relevant,
    }
}

/// Where a profile came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    Builtin,
    Fitted,
}

/// One driving style: slopes `A` and intercepts `b` of the three reference
/// lines, ordered `(t_f, t_nf, dv_nb)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleProfile {
    pub name: String,
    #[serde(rename = "A")]
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub source: ProfileSource,
}

pub const BUILTIN_STYLES: [&str; 3] = ["defensive", "normal", "aggressive"];

impl StyleProfile {
    /// Reference indicator values at (scaled) ego speed `v_e`.
    pub fn reference_values(&self, v_e: f64) -> IndicatorVector {
        IndicatorVector::new(
            self.a[0] * v_e + self.b[0],
            self.a[1] * v_e + self.b[1],
            self.a[2] * v_e + self.b[2],
        )
    }

    /// Reference values at the ego speed of `state`, honoring the configured
    /// speed unit scale.
    pub fn reference_for(&self, state: &ScenarioState, config: &IndicatorConfig) -> IndicatorVector {
        self.reference_values(state.ego.v * config.reference_speed_scale)
    }

    pub fn validate(&self) -> Result<(), IndicatorError> {
        if self.a.iter().chain(&self.b).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(IndicatorError::InvalidConfig(format!("profile {} has non-finite parameters", self.name)))
        }
    }

    pub fn builtin_json(name: &str) -> Option<&'static str> {
        match name {
            "defensive" => Some(include_str!("../assets/profiles/defensive.json")),
            "normal" => Some(include_str!("../assets/profiles/normal.json")),
            "aggressive" => Some(include_str!("../assets/profiles/aggressive.json")),
            _ => None,
        }
    }

    /// One of the three shipped profiles: `defensive`, `normal`, `aggressive`.
    pub fn builtin(name: &str) -> Result<StyleProfile, IndicatorError> {
        let json = Self::builtin_json(&name.to_ascii_lowercase())
            .ok_or_else(|| IndicatorError::UnknownStyle(name.to_string()))?;
        Self::from_json(json)
    }

    pub fn from_json(json: &str) -> Result<StyleProfile, IndicatorError> {
        let p: StyleProfile = serde_json::from_str(json).map_err(|e| IndicatorError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// One timestamped decision with the state it was taken in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub state: ScenarioState,
    pub indicators: IndicatorVector,
    pub v_e: f64,
    pub decision: Action,
    /// RFC 3339 wall-clock time for human data; absent for simulated data.
    #[serde(default)]
    pub wall_time: Option<String>,
    pub driver_id: String,
}

impl DecisionRecord {
    pub fn new(state: ScenarioState, indicators: IndicatorVector, decision: Action, driver_id: &str) -> Self {
        Self {
            v_e: state.ego.v,
            state,
            indicators,
            decision,
            wall_time: None,
            driver_id: driver_id.to_string(),
        }
    }

    /// Ingest check: the stored indicators must recompute exactly from the
    /// stored state.
    pub fn validate(&self, config: &ScenarioConfig) -> Result<(), IndicatorError> {
        self.state.validate()?;
        if self.v_e.to_bits() != self.state.ego.v.to_bits() {
            return Err(IndicatorError::InconsistentRecord("v_e differs from state ego speed".into()));
        }
        let recomputed = compute_indicators(&self.state, config);
        let same = recomputed
            .as_array()
            .iter()
            .zip(self.indicators.as_array())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && recomputed.dv_nb_relevant == self.indicators.dv_nb_relevant;
        if same {
            Ok(())
        } else {
            Err(IndicatorError::InconsistentRecord(format!(
                "stored {:?}, recomputed {:?}",
                self.indicators, recomputed
            )))
        }
    }
}

/// Slope and intercept of a least-squares line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Ordinary least squares for `y = slope * x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit, IndicatorError> {
    if xs.len() != ys.len() {
        return Err(IndicatorError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(IndicatorError::DegenerateDesign(distinct.len()));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (sxy, sxx) = xs
        .iter()
        .zip(ys)
        .fold((0.0, 0.0), |(sxy, sxx), (x, y)| (sxy + (x - mx) * (y - my), sxx + (x - mx) * (x - mx)));
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        n,
    })
}

/// Fit a style profile from lane-change decisions.
///
/// Only `CHANGE` records are used. Records whose target lane had no leader
/// are dropped entirely; records with an irrelevant follower are dropped
/// from the `dv_nb` regression only.
pub fn fit_profile_ols(
    records: &[DecisionRecord],
    config: &IndicatorConfig,
    name: &str,
) -> Result<StyleProfile, IndicatorError> {
    let usable: Vec<&DecisionRecord> = records
        .iter()
        .filter(|r| r.decision == Action::Change && !r.indicators.t_nf_missing())
        .collect();
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for i in 0..3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = usable
            .iter()
            .filter(|r| r.indicators.is_relevant(i))
            .map(|r| (r.v_e * config.reference_speed_scale, r.indicators.as_array()[i]))
            .unzip();
        let fit = fit_line(&xs, &ys)?;
        a[i] = fit.slope;
        b[i] = fit.intercept;
    }
    Ok(StyleProfile {
        name: name.to_string(),
        a,
        b,
        source: ProfileSource::Fitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value of `r = 0` under a t-distribution with `n - 2`
    /// degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<Correlation, IndicatorError> {
    if xs.len() != ys.len() {
        return Err(IndicatorError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(IndicatorError::TooFewSamples { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(IndicatorError::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(IndicatorError::ZeroVariance("ys"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p_value, n })
}

/// Result of clustering per-driver indicator features.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleClustering {
    /// Cluster index for every input point, in input order. Clusters are
    /// numbered by ascending `t_f` centroid, so with `k = 3` cluster 0 is
    /// Aggressive, 1 Normal and 2 Defensive.
    pub assignments: Vec<usize>,
    /// Centroids in the original (unstandardized) feature units.
    pub centroids: Vec<[f64; 3]>,
    /// Clusters that ended up with no members.
    pub degenerate: Vec<bool>,
    pub iterations: usize,
}

impl StyleClustering {
    pub fn label(&self, cluster: usize) -> String {
        if self.centroids.len() == 3 {
            ["aggressive", "normal", "defensive"][cluster].to_string()
        } else {
            format!("cluster{cluster}")
        }
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// k-means over standardized features with k-means++ seeding.
///
/// Points are processed in a canonical (sorted) order, so the outcome does
/// not depend on the order of `features`.
pub fn cluster_styles(features: &[[f64; 3]], k: usize, rng: &mut Rng) -> Result<StyleClustering, IndicatorError> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(IndicatorError::TooManyClusters { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&features[i], &features[j]);
        (0..3)
            .map(|d| a[d].total_cmp(&b[d]))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });

    let nf = n as f64;
    let sorted: Vec<&[f64; 3]> = order.iter().map(|&i| &features[i]).collect();
    let mean: [f64; 3] = std::array::from_fn(|d| sorted.iter().map(|p| p[d]).sum::<f64>() / nf);
    let scale: [f64; 3] = std::array::from_fn(|d| {
        let var = sorted.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / nf;
        if var > 0.0 {
            var.sqrt()
        } else {
            1.0
        }
    });
    let points: Vec<[f64; 3]> = sorted
        .iter()
        .map(|p| std::array::from_fn(|d| (p[d] - mean[d]) / scale[d]))
        .collect();

    // k-means++ seeding.
    let mut centroids = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            points[pick]
        } else {
            // All points coincide with existing centroids.
            centroids[0]
        };
        centroids.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &next));
        }
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for d in 0..3 {
                sums[c][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = std::array::from_fn(|d| sums[c][d] / counts[c] as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut counts = vec![0usize; k];
    for &c in &assign {
        counts[c] += 1;
    }
    let original: Vec<[f64; 3]> = centroids
        .iter()
        .map(|c| std::array::from_fn(|d| c[d] * scale[d] + mean[d]))
        .collect();
    // Relabel by ascending t_f centroid.
    let mut rank: Vec<usize> = (0..k).collect();
    rank.sort_by(|&i, &j| original[i][0].total_cmp(&original[j][0]).then(i.cmp(&j)));
    let mut new_index = vec![0; k];
    for (new, &old) in rank.iter().enumerate() {
        new_index[old] = new;
    }
    let mut assignments = vec![0; n];
    for (sorted_pos, &input_idx) in order.iter().enumerate() {
        assignments[input_idx] = new_index[assign[sorted_pos]];
    }
    Ok(StyleClustering {
        assignments,
        centroids: rank.iter().map(|&o| original[o]).collect(),
        degenerate: rank.iter().map(|&o| counts[o] == 0).collect(),
        iterations,
    })
}
