//! k-NN classification, repeated stratified k-fold evaluation, one-way ANOVA
//! and Tukey HSD.

use std::io::Write;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, erf::erfc, gamma::ln_gamma};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, LabeledDataset, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self::power_stage(0)
    }
}

impl CvPlan {
    /// 5 folds × 10 repeats = 50 models.
    pub fn power_stage(seed: u64) -> Self {
        Self {
            folds: 5,
            repeats: 10,
            seed,
        }
    }

    /// 5 folds × 60 repeats = 300 models.
    pub fn velocity_split(seed: u64) -> Self {
        Self {
            folds: 5,
            repeats: 60,
            seed,
        }
    }

    pub fn models(&self) -> usize {
        self.folds * self.repeats
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidDataset(format!("{} folds; need at least 2", self.folds)));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidDataset(
                "cross-validation needs at least one repeat".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Ranges fitted on every row before splitting.
    Full,
    /// Ranges fitted on the training rows of each fold.
    #[default]
    FoldSafe,
}

impl NormalizeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizeMode::Full => "full",
            NormalizeMode::FoldSafe => "fold-safe",
        }
    }
}

/// Majority vote among the `k` nearest `points` to `query`.
///
/// Neighbours are ranked by Euclidean distance with equal distances kept in
/// input order. A tied vote goes to the label whose tied neighbours are
/// closest on average, then to the lowest label.
pub fn knn_vote(points: &[&[f64]], labels: &[usize], query: &[f64], k: usize) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::InvalidDataset("k-NN training set is empty".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidDataset(format!(
            "k = {k} must lie in [1, {}]",
            points.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                got: p.len(),
            });
        }
        let d2: f64 = p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        ranked.push((d2.sqrt(), i));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (label, votes, summed distance)
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for &(d, i) in &ranked[..k] {
        match tally.iter_mut().find(|t| t.0 == labels[i]) {
            Some(t) => {
                t.1 += 1;
                t.2 += d;
            }
            None => tally.push((labels[i], 1, d)),
        }
    }
    let best = tally
        .into_iter()
        .min_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| (a.2 / a.1 as f64).total_cmp(&(b.2 / b.1 as f64)))
                .then_with(|| a.0.cmp(&b.0))
        })
        .expect("k ≥ 1");
    Ok(best.0)
}

pub fn knn_predict(train: &LabeledDataset, query: &FeatureVector, cfg: &KnnConfig) -> Result<usize> {
    if let Some(first) = train.rows.first() {
        if first.features.version != query.version {
            return Err(Error::SchemaMismatch {
                expected: first.features.version.clone(),
                got: query.version.clone(),
            });
        }
    }
    let points: Vec<&[f64]> = train.rows.iter().map(|r| r.features.values.as_slice()).collect();
    knn_vote(&points, &train.labels(), &query.values, cfg.k)
}

fn repeat_rng(seed: u64, repeat: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    rng
}

/// Fold id of every row, one vector per repeat.
///
/// Within a repeat each class (in label order) is shuffled and dealt
/// round-robin, the dealer position carrying over between classes.
pub fn stratified_folds(labels: &[usize], plan: &CvPlan) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (label, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < plan.folds {
            return Err(Error::ClassTooSmall {
                label,
                count: members.len(),
                folds: plan.folds,
            });
        }
    }
    Ok((0..plan.repeats)
        .map(|r| {
            let mut rng = repeat_rng(plan.seed, r);
            let mut assignment = vec![0; labels.len()];
            let mut dealer = 0;
            for members in &by_class {
                let mut order = members.clone();
                order.shuffle(&mut rng);
                for i in order {
                    assignment[i] = dealer % plan.folds;
                    dealer += 1;
                }
            }
            assignment
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelAccuracy {
    pub repeat: usize,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyDistribution {
    /// Ordered by (repeat, fold).
    pub models: Vec<ModelAccuracy>,
}

impl AccuracyDistribution {
    pub fn accuracies(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.accuracy).collect()
    }

    pub fn mean(&self) -> f64 {
        if self.models.is_empty() {
            return 0.0;
        }
        self.models.iter().map(|m| m.accuracy).sum::<f64>() / self.models.len() as f64
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        let n = self.models.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let ss: f64 = self.models.iter().map(|a| (a.accuracy - m).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

/// Repeated stratified k-fold accuracy of k-NN on `dataset`.
pub fn evaluate(
    dataset: &LabeledDataset,
    plan: &CvPlan,
    cfg: &KnnConfig,
    mode: NormalizeMode,
) -> Result<AccuracyDistribution> {
    dataset.check_layout()?;
    if dataset.class_count() < 2 {
        return Err(Error::InvalidDataset(format!(
            "classification needs at least 2 classes, found {}",
            dataset.class_count()
        )));
    }
    let labels = dataset.labels();
    let assignments = stratified_folds(&labels, plan)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let global = match mode {
        NormalizeMode::Full => Some(normalized_rows(dataset, &Normalizer::fit(dataset, &all)?)),
        NormalizeMode::FoldSafe => None,
    };

    let jobs: Vec<(usize, usize)> = (0..plan.repeats)
        .flat_map(|r| (0..plan.folds).map(move |f| (r, f)))
        .collect();
    let models = jobs
        .par_iter()
        .map(|&(repeat, fold)| {
            let assignment = &assignments[repeat];
            let (test, train): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| assignment[i] == fold);
            let local;
            let rows = match &global {
                Some(rows) => rows,
                None => {
                    local = normalized_rows(dataset, &Normalizer::fit(dataset, &train)?);
                    &local
                }
            };
            let points: Vec<&[f64]> = train.iter().map(|&i| rows[i].as_slice()).collect();
            let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let mut correct = 0;
            for &i in &test {
                if knn_vote(&points, &train_labels, &rows[i], cfg.k)? == labels[i] {
                    correct += 1;
                }
            }
            Ok(ModelAccuracy {
                repeat,
                fold,
                accuracy: correct as f64 / test.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyDistribution { models })
}

fn normalized_rows(dataset: &LabeledDataset, norm: &Normalizer) -> Vec<Vec<f64>> {
    dataset.rows.iter().map(|r| norm.apply(&r.features.values)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
}

impl AnovaResult {
    pub fn ms_within(&self) -> f64 {
        self.ss_within / self.df_within as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InvalidStats(
            "one-way ANOVA needs at least 2 groups of at least 2 values".into(),
        ));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidStats("non-finite value in ANOVA input".into()));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n - groups.len();
    let (f, p) = if ss_between == 0.0 {
        (0.0, 1.0)
    } else if ss_within == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
        let (d1, d2) = (df_between as f64, df_within as f64);
        (f, beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))
    };
    Ok(AnovaResult {
        f,
        p,
        df_between,
        df_within,
        ss_between,
        ss_within,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TukeyResult {
    pub a: usize,
    pub b: usize,
    /// mean(a) − mean(b)
    pub mean_diff: f64,
    pub q: f64,
    pub q_crit: f64,
    pub p: f64,
    pub significant: bool,
}

/// All pairwise Tukey–Kramer comparisons at level `alpha`.
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<Vec<TukeyResult>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidStats(format!("alpha {alpha} outside (0, 1)")));
    }
    let anova = anova_oneway(groups)?;
    let k = groups.len();
    let df = anova.df_within as f64;
    let msw = anova.ms_within();
    let q_crit = studentized_range_quantile(1.0 - alpha, k, df)?;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let diff = means[a] - means[b];
            let se = (msw / 2.0 * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64)).sqrt();
            let q = if diff == 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                diff.abs() / se
            };
            let p = if q.is_infinite() {
                0.0
            } else {
                (1.0 - studentized_range_cdf(q, k, df)).clamp(0.0, 1.0)
            };
            out.push(TukeyResult {
                a,
                b,
                mean_diff: diff,
                q,
                q_crit,
                p,
                significant: q > q_crit,
            });
        }
    }
    Ok(out)
}

// Composite Gauss–Legendre: 16 nodes per panel, 16 panels inner, 32 outer.
const GL_ORDER: usize = 16;
const INNER_PANELS: usize = 16;
const OUTER_PANELS: usize = 32;
const INNER_LIMIT: f64 = 8.5;

fn gauss_legendre() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = GL_ORDER;
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for j in 2..=n {
                        let j = j as f64;
                        let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let step = p1 / dp;
                    x -= step;
                    if step.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    })
}

fn integrate(lo: f64, hi: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    let nodes = gauss_legendre();
    let width = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * width;
        for &(x, w) in nodes {
            total += w * f(mid + 0.5 * width * x);
        }
    }
    total * 0.5 * width
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// P(range of k standard normals ≤ w).
fn normal_range_cdf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let kf = k as f64;
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let v = integrate(-INNER_LIMIT, INNER_LIMIT, INNER_PANELS, |z| {
        let band = normal_cdf(z) - normal_cdf(z - w);
        kf * inv_sqrt_2pi * (-0.5 * z * z).exp() * band.powi(k as i32 - 1)
    });
    v.min(1.0)
}

/// CDF of the studentized range for `k` groups and `df` error degrees of
/// freedom (`f64::INFINITY` for a known variance).
pub fn studentized_range_cdf(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if !df.is_finite() || df > 1e5 {
        return normal_range_cdf(q, k);
    }
    // density of s = sqrt(χ²_df / df)
    let log_norm = 0.5 * df * df.ln() - ln_gamma(0.5 * df) - (0.5 * df - 1.0) * std::f64::consts::LN_2;
    let density = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            (log_norm + (df - 1.0) * s.ln() - 0.5 * df * s * s).exp()
        }
    };
    let spread = 12.0 / (2.0 * df).sqrt();
    let lo = (1.0 - spread).max(0.0);
    let hi = 1.0 + spread.max(0.0) + if df < 4.0 { 6.0 } else { 0.0 };
    integrate(lo, hi, OUTER_PANELS, |s| density(s) * normal_range_cdf(q * s, k)).clamp(0.0, 1.0)
}

/// Smallest q with CDF(q) ≥ `prob`, by bisection.
pub fn studentized_range_quantile(prob: f64, k: usize, df: f64) -> Result<f64> {
    if k < 2 || !(df > 0.0) || !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidStats(format!(
            "studentized range needs k ≥ 2, df > 0, prob in (0, 1); got k={k}, df={df}, prob={prob}"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while studentized_range_cdf(hi, k, df) < prob {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::InvalidStats("studentized range quantile did not bracket".into()));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k, df) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One row of the per-model accuracy report.
pub struct AccuracyRecord<'a> {
    pub design: &'a str,
    pub velocity: &'a str,
    pub mode: NormalizeMode,
    pub distribution: &'a AccuracyDistribution,
}

pub fn write_accuracy_report<W: Write>(
    mut w: W,
    records: &[AccuracyRecord],
    comments: &[String],
) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "design,velocity,normalize,repeat,fold,accuracy")?;
    for r in records {
        for m in &r.distribution.models {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.design,
                r.velocity,
                r.mode.as_str(),
                m.repeat,
                m.fold,
                m.accuracy
            )?;
        }
    }
    Ok(())
}

/// ANOVA table and Tukey pair matrix for one comparison across named groups.
pub fn write_stats_report<W: Write>(
    mut w: W,
    scope: &str,
    names: &[String],
    groups: &[Vec<f64>],
    anova: &AnovaResult,
    tukey: &[TukeyResult],
) -> std::io::Result<()> {
    writeln!(w, "# scope={scope}")?;
    writeln!(
        w,
        "section,a,b,n_a,n_b,mean_a,mean_b,statistic,critical,p,significant,df1,df2"
    )?;
    writeln!(
        w,
        "anova,,,,,,,{},,{},{},{},{}",
        anova.f,
        anova.p,
        anova.p < 0.05,
        anova.df_between,
        anova.df_within
    )?;
    for t in tukey {
        writeln!(
            w,
            "tukey,{},{},{},{},{},{},{},{},{},{},{},{}",
            names[t.a],
            names[t.b],
            groups[t.a].len(),
            groups[t.b].len(),
            mean(&groups[t.a]),
            mean(&groups[t.b]),
            t.q,
            t.q_crit,
            t.p,
            t.significant,
            groups.len(),
            anova.df_within
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{RowMeta, FEATURE_COUNT};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn meta() -> RowMeta {
        RowMeta {
            design: "d".into(),
            surface: "s".into(),
            velocity: 25.0,
            direction: "+x".into(),
            repetition: 0,
            trial: 0,
            pass: 0,
        }
    }

    fn dataset(points: Vec<(Vec<f64>, usize)>) -> LabeledDataset {
        let rows = points
            .into_iter()
            .map(|(mut v, l)| {
                v.resize(FEATURE_COUNT, 0.0);
                (FeatureVector::new(v).unwrap(), format!("c{l}"), meta())
            })
            .collect();
        LabeledDataset::from_named(rows).unwrap()
    }

    /// Independent reference: full sort, count votes, same tie rules.
    fn oracle(points: &[Vec<f64>], labels: &[usize], q: &[f64], k: usize) -> usize {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let classes = labels.iter().max().unwrap() + 1;
        let mut votes = vec![0usize; classes];
        let mut dist = vec![0.0; classes];
        for &(di, i) in &d[..k] {
            votes[labels[i]] += 1;
            dist[labels[i]] += di;
        }
        let top = *votes.iter().max().unwrap();
        let mut best = None;
        for c in 0..classes {
            if votes[c] == top {
                let m = dist[c] / top as f64;
                match best {
                    Some((_, bm)) if bm <= m => {}
                    _ => best = Some((c, m)),
                }
            }
        }
        best.unwrap().0
    }

    #[test]
    fn knn_simple_cases() {
        let mut pts = vec![];
        for _ in 0..3 {
            pts.push((vec![0.0; 3], 0));
        }
        for _ in 0..3 {
            pts.push((vec![1.0; 3], 1));
        }
        let ds = dataset(pts);
        let mut q = vec![0.0; FEATURE_COUNT];
        q[0] = 0.1;
        let q = FeatureVector::new(q).unwrap();
        assert_eq!(knn_predict(&ds, &q, &KnnConfig::default()).unwrap(), 0);

        let one = dataset(vec![(vec![5.0], 2), (vec![-3.0], 2)]);
        assert_eq!(knn_predict(&one, &q, &KnnConfig { k: 1 }).unwrap(), 0);
        assert!(knn_predict(&one, &q, &KnnConfig { k: 3 }).is_err());

        let pts: Vec<&[f64]> = vec![&[0.0, 0.0]];
        assert!(matches!(
            knn_vote(&pts, &[0], &[0.0], 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn knn_tie_rules() {
        // two votes each; class 1 is closer on average
        let pts: Vec<Vec<f64>> = vec![vec![1.0], vec![-1.0], vec![0.5], vec![-0.5]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(knn_vote(&refs, &[0, 0, 1, 1], &[0.0], 4).unwrap(), 1);
        // full tie on votes and distances: lowest id
        assert_eq!(knn_vote(&refs[..2], &[3, 2], &[0.0], 2).unwrap(), 2);
        // equal distances at the boundary: earlier row wins the slot
        assert_eq!(knn_vote(&refs[..2], &[4, 7], &[0.0], 1).unwrap(), 4);
    }

    #[test]
    fn knn_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..FEATURE_COUNT).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..3)).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        for _ in 0..100 {
            let q: Vec<f64> = (0..FEATURE_COUNT).map(|_| rng.random::<f64>()).collect();
            assert_eq!(knn_vote(&refs, &labels, &q, 5).unwrap(), oracle(&pts, &labels, &q, 5));
        }
    }

    fn counts(assign: &[usize], labels: &[usize], folds: usize, class: usize) -> Vec<usize> {
        let mut c = vec![0; folds];
        for (a, l) in assign.iter().zip(labels) {
            if *l == class {
                c[*a] += 1;
            }
        }
        c
    }

    #[test]
    fn stratified_fold_examples() {
        let plan = CvPlan {
            folds: 5,
            repeats: 3,
            seed: 9,
        };
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        for a in stratified_folds(&labels, &plan).unwrap() {
            assert_eq!(counts(&a, &labels, 5, 0), vec![1; 5]);
            assert_eq!(counts(&a, &labels, 5, 1), vec![1; 5]);
        }
        let labels: Vec<usize> = [vec![0; 6], vec![1; 5]].concat();
        for a in stratified_folds(&labels, &plan).unwrap() {
            assert!(counts(&a, &labels, 5, 0).iter().all(|&c| c == 1 || c == 2));
            assert_eq!(counts(&a, &labels, 5, 1), vec![1; 5]);
        }
        let once = stratified_folds(&labels, &plan).unwrap();
        assert_eq!(once, stratified_folds(&labels, &plan).unwrap());
        assert_ne!(once[0], once[1]);

        assert!(matches!(
            stratified_folds(&[0, 0, 0, 1, 1, 1, 1, 1], &plan),
            Err(Error::ClassTooSmall { label: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn folds_balanced(labels in prop::collection::vec(0usize..4, 20..80), seed in any::<u64>()) {
            let plan = CvPlan { folds: 5, repeats: 2, seed };
            let mut sizes = [0usize; 4];
            for &l in &labels { sizes[l] += 1; }
            match stratified_folds(&labels, &plan) {
                Err(_) => prop_assert!(sizes.iter().any(|&s| s > 0 && s < 5)),
                Ok(all) => for a in all {
                    prop_assert_eq!(a.len(), labels.len());
                    for (c, &size) in sizes.iter().enumerate() {
                        let ideal = size as f64 / 5.0;
                        for n in counts(&a, &labels, 5, c) {
                            prop_assert!((n as f64 - ideal).abs() < 1.0);
                        }
                    }
                },
            }
        }

        #[test]
        fn knn_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let q: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * c).collect()).collect();
            let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
            let a: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
            let b: Vec<&[f64]> = scaled.iter().map(|p| p.as_slice()).collect();
            prop_assert_eq!(knn_vote(&a, &labels, &q, 5).unwrap(), knn_vote(&b, &labels, &qs, 5).unwrap());
        }

        #[test]
        fn anova_affine_invariant(groups in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3..8), 2..5),
                                  shift in -100.0f64..100.0, scale in 0.1f64..10.0) {
            let base = anova_oneway(&groups).unwrap();
            let moved: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| v * scale + shift).collect()).collect();
            let other = anova_oneway(&moved).unwrap();
            prop_assert!((base.f - other.f).abs() <= 1e-6 * base.f.max(1.0));
        }
    }

    #[test]
    fn evaluate_counts_and_separable() {
        let mut pts = vec![];
        for i in 0..10 {
            pts.push((vec![0.0, i as f64 * 0.01], 0));
            pts.push((vec![1.0, i as f64 * 0.01], 1));
        }
        let ds = dataset(pts);
        for mode in [NormalizeMode::Full, NormalizeMode::FoldSafe] {
            let acc = evaluate(&ds, &CvPlan::power_stage(3), &KnnConfig::default(), mode).unwrap();
            assert_eq!(acc.models.len(), 50);
            assert_eq!(acc.mean(), 1.0);
        }
        let acc = evaluate(
            &ds,
            &CvPlan::velocity_split(3),
            &KnnConfig::default(),
            NormalizeMode::FoldSafe,
        )
        .unwrap();
        assert_eq!(acc.models.len(), 300);
        assert!(acc
            .models
            .windows(2)
            .all(|w| (w[0].repeat, w[0].fold) < (w[1].repeat, w[1].fold)));
    }

    #[test]
    fn evaluate_identical_points_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = (0..60).map(|_| (vec![0.3; 4], rng.random_range(0..2))).collect();
        let ds = dataset(pts);
        let acc = evaluate(
            &ds,
            &CvPlan::velocity_split(1),
            &KnnConfig::default(),
            NormalizeMode::FoldSafe,
        )
        .unwrap();
        assert_eq!(acc.models.len(), 300);
        assert!(acc.models.iter().all(|m| (0.0..=1.0).contains(&m.accuracy)));
        assert!((0.4..=0.6).contains(&acc.mean()), "{}", acc.mean());
    }

    #[test]
    fn evaluate_rejects_single_class() {
        let ds = dataset((0..10).map(|i| (vec![i as f64], 0)).collect());
        assert!(evaluate(&ds, &CvPlan::default(), &KnnConfig::default(), NormalizeMode::Full).is_err());
    }

    #[test]
    fn anova_examples() {
        let g = vec![vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0]];
        let a = anova_oneway(&g).unwrap();
        assert_relative_eq!(a.f, 3.0, max_relative = 1e-12);
        assert_eq!((a.df_between, a.df_within), (2, 6));
        // F(2, 6) survival at 3: (1 + F·d1/d2)^(−d2/2) = (1 + 1)^(−3)
        assert_relative_eq!(a.p, 0.125, max_relative = 1e-9);

        let same = anova_oneway(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!((same.f, same.p), (0.0, 1.0));
        let flat = anova_oneway(&[vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!((flat.f, flat.p), (0.0, 1.0));
        assert!(anova_oneway(&[vec![1.0, 2.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn anova_two_groups_is_t_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let na = rng.random_range(3..20);
            let nb = rng.random_range(3..20);
            let a: Vec<f64> = (0..na).map(|_| rng.random::<f64>() * 10.0).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() * 10.0 + 1.0).collect();
            let (ma, mb) = (mean(&a), mean(&b));
            let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>();
            let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>();
            let pooled = (va + vb) / (na + nb - 2) as f64;
            let t = (ma - mb) / (pooled * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
            let f = anova_oneway(&[a, b]).unwrap().f;
            assert!((f - t * t).abs() <= 1e-9 * f.max(1.0), "{f} vs {}", t * t);
        }
    }

    #[test]
    fn quadrature_nodes_integrate_polynomials() {
        let nodes = gauss_legendre();
        assert_relative_eq!(nodes.iter().map(|n| n.1).sum::<f64>(), 2.0, epsilon = 1e-14);
        // exact through degree 31
        let x30: f64 = nodes.iter().map(|(x, w)| w * x.powi(30)).sum();
        assert_relative_eq!(x30, 2.0 / 31.0, epsilon = 1e-14);
    }

    #[test]
    fn studentized_range_table_values() {
        // upper 5% points from published tables
        for (k, df, q) in [
            (3, 10.0, 3.877),
            (4, 20.0, 3.958),
            (5, 30.0, 4.102),
            (2, f64::INFINITY, 2.772),
            (3, 60.0, 3.399),
        ] {
            let got = studentized_range_quantile(0.95, k, df).unwrap();
            assert!((got - q).abs() < 0.002, "k={k} df={df}: {got}");
        }
    }

    #[test]
    fn two_group_range_is_scaled_t() {
        for df in [5.0, 12.0, 40.0] {
            let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
            let q = studentized_range_quantile(0.95, 2, df).unwrap();
            assert_relative_eq!(q, std::f64::consts::SQRT_2 * t, max_relative = 1e-6);
        }
    }

    #[test]
    fn tukey_examples() {
        let far = tukey_hsd(&[vec![0.0, 0.01, -0.01], vec![10.0, 10.01, 9.99]], 0.05).unwrap();
        assert_eq!(far.len(), 1);
        assert!(far[0].significant);
        assert!(far[0].p < 1e-6);

        let same = tukey_hsd(&vec![vec![1.0, 2.0, 3.0]; 3], 0.05).unwrap();
        assert_eq!(same.len(), 3);
        assert!(same.iter().all(|t| t.q == 0.0 && !t.significant));

        // swapping groups flips the sign of the difference only
        let g = vec![vec![1.0, 2.0, 3.0], vec![2.5, 3.5, 4.5]];
        let ab = tukey_hsd(&g, 0.05).unwrap()[0];
        let ba = tukey_hsd(&[g[1].clone(), g[0].clone()], 0.05).unwrap()[0];
        assert_eq!(ab.mean_diff, -ba.mean_diff);
        assert_relative_eq!(ab.q, ba.q, max_relative = 1e-12);
    }

    #[test]
    fn tukey_decisions_affine_invariant() {
        let g = vec![
            vec![1.0, 2.0, 3.0, 2.2],
            vec![2.5, 3.5, 4.5, 3.1],
            vec![6.0, 5.0, 7.0, 6.4],
        ];
        let base: Vec<bool> = tukey_hsd(&g, 0.05).unwrap().iter().map(|t| t.significant).collect();
        let moved: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| 0.37 * x - 12.0).collect()).collect();
        let other: Vec<bool> = tukey_hsd(&moved, 0.05).unwrap().iter().map(|t| t.significant).collect();
        assert_eq!(base, other);
    }
}
