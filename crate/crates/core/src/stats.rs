//! Two-sample tests used to compare F1 distributions across seeds, and the
//! seeded multi-trial evaluation protocol that produces them.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    draw_eval_cohort, split_grouped_stratified, DatasetError, Imputer, Label, SampleSet,
};
use crate::ensemble::{
    evaluate_metrics, prepare_train, train_prepared, EnsembleError, MetricTriple, MetricsError,
    Model, ModelKind, TrainOptions, TreeEnsemble,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub mod special {
    //! Log-gamma, incomplete gamma/beta and the distribution tails built on them.

    use std::f64::consts::PI;

    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    const MAX_ITER: usize = 10_000;

    /// Lanczos approximation (g = 7, 9 terms).
    pub fn ln_gamma(x: f64) -> f64 {
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        if x < 0.5 {
            return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
        }
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + 7.5;
        for (i, &c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    /// Regularized lower incomplete gamma P(a, x).
    pub fn gamma_p(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x < a + 1.0 {
            gamma_series(a, x)
        } else {
            1.0 - gamma_cf(a, x)
        }
    }

    /// Regularized upper incomplete gamma Q(a, x).
    pub fn gamma_q(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        if x < a + 1.0 {
            1.0 - gamma_series(a, x)
        } else {
            gamma_cf(a, x)
        }
    }

    fn gamma_series(a: f64, x: f64) -> f64 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    }

    fn gamma_cf(a: f64, x: f64) -> f64 {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }

    pub fn erfc(x: f64) -> f64 {
        if x < 0.0 {
            2.0 - erfc(-x)
        } else {
            gamma_q(0.5, x * x)
        }
    }

    /// Upper tail of the standard normal.
    pub fn normal_sf(z: f64) -> f64 {
        0.5 * erfc(z / std::f64::consts::SQRT_2)
    }

    /// Regularized incomplete beta I_x(a, b).
    pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front =
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        if x < (a + 1.0) / (a + b + 2.0) {
            ln_front.exp() * beta_cf(a, b, x) / a
        } else {
            1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
        }
    }

    /// Modified Lentz evaluation of the incomplete-beta continued fraction.
    fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
        let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..MAX_ITER {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }

    /// P(F ≤ f) for the F distribution with (d1, d2) degrees of freedom.
    pub fn f_cdf(f: f64, d1: f64, d2: f64) -> f64 {
        if f <= 0.0 {
            return 0.0;
        }
        beta_inc(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2))
    }

    /// P(F > f), computed directly on the upper tail.
    pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
        if f <= 0.0 {
            return 1.0;
        }
        if f.is_infinite() {
            return 0.0;
        }
        beta_inc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (n − 1 denominator).
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn std_dev(v: &[f64]) -> f64 {
    variance(v).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample.
    pub u: f64,
    /// Two-sided p-value from `method`.
    pub p: f64,
    pub method: PMethod,
    /// Normal approximation with tie and continuity correction.
    pub p_asymptotic: f64,
    /// Enumeration over all arrangements, when computed.
    pub p_exact: Option<f64>,
}

/// Largest smaller-sample size for which the exact distribution is used.
pub const EXACT_MAX_N: usize = 8;

/// Number of arrangements of `m` and `n` items with each value of U.
fn u_counts(m: usize, n: usize) -> Vec<f64> {
    // f[j][u] over the second sample size j, rebuilt for each first size
    let mut f: Vec<Vec<f64>> = (0..=n).map(|_| vec![1.0]).collect();
    for i in 1..=m {
        let mut g: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        g.push(vec![1.0]);
        for j in 1..=n {
            let mut row = vec![0.0; i * j + 1];
            // last item from the second sample: U unchanged
            for (u, &c) in g[j - 1].iter().enumerate() {
                row[u] += c;
            }
            // last item from the first sample: it exceeds all j of the second
            for (u, &c) in f[j].iter().enumerate() {
                row[u + j] += c;
            }
            g.push(row);
        }
        f = g;
    }
    f.pop().expect("n + 1 rows")
}

fn exact_p(u: f64, m: usize, n: usize) -> f64 {
    let counts = u_counts(m, n);
    let total: f64 = counts.iter().sum();
    let k = u.round() as usize;
    let lower: f64 = counts[..=k].iter().sum();
    let upper: f64 = counts[k..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Two-sided Mann-Whitney U test. The exact null distribution is used when
/// the smaller sample has at most [`EXACT_MAX_N`] values and there are no ties.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Input("both samples must be nonempty".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::Input("non-finite value".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = crate::ensemble::midranks(&all);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&x| x == sorted[i]).count();
        if j > 1 {
            has_ties = true;
            tie_term += (j * j * j - j) as f64;
        }
        i += j;
    }
    let n = (na + nb) as f64;
    let mu = (na * nb) as f64 / 2.0;
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p_asymptotic = if var > 0.0 {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * special::normal_sf(z)).min(1.0)
    } else {
        1.0
    };
    let p_exact = (!has_ties && na.min(nb) <= EXACT_MAX_N).then(|| exact_p(u, na, nb));
    let (p, method) = match p_exact {
        Some(p) => (p, PMethod::Exact),
        None => (p_asymptotic, PMethod::Asymptotic),
    };
    Ok(MannWhitney {
        u,
        p,
        method,
        p_asymptotic,
        p_exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    #[default]
    Mean,
    Median,
}

impl FromStr for Center {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Center::Mean),
            "median" => Ok(Center::Median),
            o => Err(format!("unknown center {o:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levene {
    pub w: f64,
    pub p: f64,
    /// Set when every absolute deviation equals its group mean.
    pub degenerate: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Levene's test for equal variances of two groups.
pub fn levene_test(a: &[f64], b: &[f64], center: Center) -> Result<Levene, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::Input(
            "each group needs at least 2 values".into(),
        ));
    }
    let dev = |g: &[f64]| -> Vec<f64> {
        let c = match center {
            Center::Mean => mean(g),
            Center::Median => median(g),
        };
        g.iter().map(|x| (x - c).abs()).collect()
    };
    let (za, zb) = (dev(a), dev(b));
    let (ma, mb) = (mean(&za), mean(&zb));
    let n = (a.len() + b.len()) as f64;
    let grand = (za.iter().sum::<f64>() + zb.iter().sum::<f64>()) / n;
    let between = a.len() as f64 * (ma - grand).powi(2) + b.len() as f64 * (mb - grand).powi(2);
    let within: f64 = za.iter().map(|z| (z - ma).powi(2)).sum::<f64>()
        + zb.iter().map(|z| (z - mb).powi(2)).sum::<f64>();
    if within == 0.0 {
        return Ok(if between == 0.0 {
            Levene {
                w: 0.0,
                p: 1.0,
                degenerate: true,
            }
        } else {
            Levene {
                w: f64::INFINITY,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let w = (n - 2.0) * between / within;
    Ok(Levene {
        w,
        p: special::f_sf(w, 1.0, n - 2.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub f: f64,
    pub p: f64,
}

/// Two-sided variance-ratio F test, `F = s_a² / s_b²`.
pub fn f_test_variance(a: &[f64], b: &[f64]) -> Result<FTest, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::Input(
            "each group needs at least 2 values".into(),
        ));
    }
    let (va, vb) = (variance(a), variance(b));
    if va <= 0.0 || vb <= 0.0 {
        return Err(StatsError::Degenerate("zero variance".into()));
    }
    let f = va / vb;
    let (d1, d2) = ((a.len() - 1) as f64, (b.len() - 1) as f64);
    let p = (2.0 * special::f_cdf(f, d1, d2).min(special::f_sf(f, d1, d2))).min(1.0);
    Ok(FTest { f, p })
}

/// Standardized mean difference with the pooled (n − 1) standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::Input(
            "each group needs at least 2 values".into(),
        ));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(StatsError::Degenerate("zero pooled variance".into()));
    }
    Ok((mean(a) - mean(b)) / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelTag {
    #[serde(rename = "baseline-gbdt")]
    BaselineGbdt,
    #[serde(rename = "baseline-rf")]
    BaselineRf,
    #[serde(rename = "baseline-lr")]
    BaselineLr,
    #[serde(rename = "adam")]
    Adam,
}

impl ModelTag {
    pub const ALL: [ModelTag; 4] = [
        ModelTag::BaselineGbdt,
        ModelTag::BaselineRf,
        ModelTag::BaselineLr,
        ModelTag::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::BaselineGbdt => "baseline-gbdt",
            ModelTag::BaselineRf => "baseline-rf",
            ModelTag::BaselineLr => "baseline-lr",
            ModelTag::Adam => "adam",
        }
    }

    /// The learner behind a baseline tag; ADAM deploys the boosted model.
    pub fn learner(self) -> ModelKind {
        match self {
            ModelTag::BaselineGbdt | ModelTag::Adam => ModelKind::Gbdt,
            ModelTag::BaselineRf => ModelKind::RandomForest,
            ModelTag::BaselineLr => ModelKind::LogisticRegression,
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "adam" => Ok(ModelTag::Adam),
            other => {
                let kind: ModelKind = other.strip_prefix("baseline-").unwrap_or(other).parse()?;
                Ok(match kind {
                    ModelKind::Gbdt => ModelTag::BaselineGbdt,
                    ModelKind::RandomForest => ModelTag::BaselineRf,
                    ModelKind::LogisticRegression => ModelTag::BaselineLr,
                })
            }
        }
    }
}

/// One (seed, model) evaluation. The cohort size is not written to trial files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub model: ModelTag,
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    #[serde(skip)]
    pub cohort_size: usize,
}

impl TrialResult {
    pub fn metrics(&self) -> MetricTriple<f64> {
        MetricTriple {
            accuracy: self.accuracy,
            auc: self.auc,
            f1: self.f1,
        }
    }
}

pub fn write_trials<W: std::io::Write>(out: W, trials: &[TrialResult]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for t in trials {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials<R: std::io::Read>(input: R) -> Result<Vec<TrialResult>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub train_fraction: f64,
    pub cohort_positive: usize,
    pub cohort_negative: usize,
    pub threshold: f64,
    pub train: TrainOptions,
    pub tolerate_failures: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            cohort_positive: 15,
            cohort_negative: 15,
            threshold: 0.5,
            train: TrainOptions::default(),
            tolerate_failures: false,
        }
    }
}

/// Everything the agent pipeline sees for one seed.
pub struct TrialContext<'a> {
    pub seed: u64,
    /// Full dataset, for visit histories.
    pub dataset: &'a SampleSet,
    pub train: &'a SampleSet,
    pub cohort: &'a SampleSet,
    pub model: &'a TreeEnsemble<f64>,
    pub imputer: &'a Imputer,
}

/// Produces one AD verdict per cohort sample, in cohort order.
pub trait VerdictPipeline: Sync {
    fn verdicts(&self, ctx: &TrialContext<'_>) -> Result<Vec<bool>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialRun {
    pub results: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
}

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("seed {seed}: {message}")]
    Seed { seed: u64, message: String },
    #[error("invalid trial request: {0}")]
    Request(String),
}

fn metrics_or_partial(
    r: Result<MetricTriple<f64>, MetricsError<f64>>,
) -> Result<MetricTriple<f64>, String> {
    match r {
        Ok(m) => Ok(m),
        Err(MetricsError::AucUndefined { accuracy, f1 }) => Ok(MetricTriple {
            accuracy,
            auc: f64::NAN,
            f1,
        }),
        Err(e) => Err(e.to_string()),
    }
}

fn one_seed(
    data: &SampleSet,
    config: &ProtocolConfig,
    seed: u64,
    models: &[ModelTag],
    adam: Option<&dyn VerdictPipeline>,
) -> Result<Vec<TrialResult>, String> {
    let (train, test) = split_grouped_stratified(data, config.train_fraction, seed)
        .map_err(|e: DatasetError| e.to_string())?;
    let cohort = draw_eval_cohort(&test, config.cohort_positive, config.cohort_negative, seed)
        .map_err(|e| e.to_string())?;
    let prep = prepare_train(&train, seed).map_err(|e: EnsembleError| e.to_string())?;
    let labels: Vec<Label> = cohort.samples.iter().map(|s| s.label).collect();
    let mut fitted: BTreeMap<ModelKind, Model<f64>> = BTreeMap::new();
    let mut out = Vec::new();
    for &tag in models {
        let kind = tag.learner();
        let model = match fitted.entry(kind) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                let t =
                    train_prepared(&prep, kind, &config.train, seed).map_err(|e| e.to_string())?;
                e.insert(t.bundle.model)
            }
        };
        let model = &*model;
        let scores: Vec<f64> = if tag == ModelTag::Adam {
            let Model::Gbdt(ensemble) = model else {
                unreachable!("adam deploys the boosted model")
            };
            let pipeline = adam.ok_or("adam requested without an agent pipeline")?;
            let ctx = TrialContext {
                seed,
                dataset: data,
                train: &train,
                cohort: &cohort,
                model: ensemble,
                imputer: &prep.imputer,
            };
            let v = pipeline.verdicts(&ctx)?;
            if v.len() != cohort.len() {
                return Err(format!("{} verdicts for {} samples", v.len(), cohort.len()));
            }
            v.into_iter().map(|y| if y { 1.0 } else { 0.0 }).collect()
        } else {
            let m = prep
                .imputer
                .transform::<f64>(&cohort, model.feature_order())
                .map_err(|n| format!("cannot impute {n:?}"))?;
            m.rows.iter().map(|r| model.predict_row(r)).collect()
        };
        let threshold = if tag == ModelTag::Adam {
            0.5
        } else {
            config.threshold
        };
        let m = metrics_or_partial(evaluate_metrics(&scores, &labels, threshold))?;
        out.push(TrialResult {
            seed,
            model: tag,
            accuracy: m.accuracy,
            auc: m.auc,
            f1: m.f1,
            cohort_size: cohort.len(),
        });
    }
    Ok(out)
}

/// Runs every requested model on every seed. Seeds run in parallel; the
/// output is ordered by seed list position, then by `models` order.
pub fn run_seeded_trials(
    data: &SampleSet,
    config: &ProtocolConfig,
    seeds: &[u64],
    models: &[ModelTag],
    adam: Option<&dyn VerdictPipeline>,
) -> Result<TrialRun, TrialError> {
    let mut uniq = seeds.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != seeds.len() {
        return Err(TrialError::Request("seeds must be distinct".into()));
    }
    if models.contains(&ModelTag::Adam) && adam.is_none() {
        return Err(TrialError::Request(
            "adam requested without an agent pipeline".into(),
        ));
    }
    let per_seed: Vec<(u64, Result<Vec<TrialResult>, String>)> = seeds
        .par_iter()
        .map(|&s| (s, one_seed(data, config, s, models, adam)))
        .collect();
    let mut run = TrialRun::default();
    for (seed, r) in per_seed {
        match r {
            Ok(v) => run.results.extend(v),
            Err(message) if config.tolerate_failures => {
                log::warn!("seed {seed} failed: {message}");
                run.failures.push(TrialFailure { seed, message });
            }
            Err(message) => return Err(TrialError::Seed { seed, message }),
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            self::mean(&finite)
        };
        let std = if finite.len() < 2 {
            0.0
        } else {
            std_dev(&finite)
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Mean ± std of every metric per model, rows in [`ModelTag::ALL`] order.
pub fn summarize_trials(
    trials: &[TrialResult],
) -> Vec<(ModelTag, MeanStd, MeanStd, MeanStd, usize)> {
    ModelTag::ALL
        .iter()
        .filter_map(|&tag| {
            let rows: Vec<&TrialResult> = trials.iter().filter(|t| t.model == tag).collect();
            if rows.is_empty() {
                return None;
            }
            let pick = |f: fn(&TrialResult) -> f64| {
                MeanStd::of(&rows.iter().map(|t| f(t)).collect::<Vec<_>>())
            };
            Some((
                tag,
                pick(|t| t.accuracy),
                pick(|t| t.auc),
                pick(|t| t.f1),
                rows.len(),
            ))
        })
        .collect()
}

pub fn render_trial_table(trials: &[TrialResult]) -> String {
    let rows = summarize_trials(trials);
    let n_seeds = rows.iter().map(|r| r.4).max().unwrap_or(0);
    let mut out = format!("Model performance averaged across {n_seeds} random seeds\n");
    let _ = writeln!(
        out,
        "{:<15} {:<17} {:<17} {:<17}",
        "Model", "Accuracy", "AUC", "F1"
    );
    for (tag, acc, auc, f1, _) in rows {
        let _ = writeln!(
            out,
            "{:<15} {:<17} {:<17} {:<17}",
            tag.name(),
            acc.to_string(),
            auc.to_string(),
            f1.to_string()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub adam_label: String,
    pub baseline_label: String,
    pub n_adam: usize,
    pub n_baseline: usize,
    pub mean_f1_adam: f64,
    pub mean_f1_baseline: f64,
    pub std_f1_adam: f64,
    pub std_f1_baseline: f64,
    /// var(baseline) / var(adam).
    pub variance_ratio: f64,
    pub mann_whitney: MannWhitney,
    pub levene: Levene,
    pub f_test: FTest,
    pub cohens_d: f64,
}

fn label_of(v: &[TrialResult]) -> String {
    let mut tags: Vec<&str> = v.iter().map(|t| t.model.name()).collect();
    tags.sort_unstable();
    tags.dedup();
    tags.join("+")
}

/// Compares two F1 vectors, with classic (mean-centered) Levene.
pub fn compare_f1(
    adam: &[f64],
    baseline: &[f64],
    adam_label: &str,
    baseline_label: &str,
) -> Result<ComparisonSummary, StatsError> {
    compare_f1_centered(adam, baseline, adam_label, baseline_label, Center::Mean)
}

pub fn compare_f1_centered(
    adam: &[f64],
    baseline: &[f64],
    adam_label: &str,
    baseline_label: &str,
    center: Center,
) -> Result<ComparisonSummary, StatsError> {
    if adam.is_empty() || baseline.is_empty() {
        return Err(StatsError::Input(
            "both trial lists must be nonempty".into(),
        ));
    }
    if adam.iter().chain(baseline).any(|x| !x.is_finite()) {
        return Err(StatsError::Input("every trial needs a finite F1".into()));
    }
    let f = f_test_variance(baseline, adam)?;
    Ok(ComparisonSummary {
        adam_label: adam_label.into(),
        baseline_label: baseline_label.into(),
        n_adam: adam.len(),
        n_baseline: baseline.len(),
        mean_f1_adam: mean(adam),
        mean_f1_baseline: mean(baseline),
        std_f1_adam: std_dev(adam),
        std_f1_baseline: std_dev(baseline),
        variance_ratio: f.f,
        mann_whitney: mann_whitney_u(adam, baseline)?,
        levene: levene_test(adam, baseline, center)?,
        f_test: f,
        cohens_d: cohens_d(adam, baseline)?,
    })
}

pub fn compare_models(
    adam: &[TrialResult],
    baseline: &[TrialResult],
) -> Result<ComparisonSummary, StatsError> {
    compare_models_centered(adam, baseline, Center::Mean)
}

pub fn compare_models_centered(
    adam: &[TrialResult],
    baseline: &[TrialResult],
    center: Center,
) -> Result<ComparisonSummary, StatsError> {
    let f1 = |v: &[TrialResult]| v.iter().map(|t| t.f1).collect::<Vec<_>>();
    compare_f1_centered(
        &f1(adam),
        &f1(baseline),
        &label_of(adam),
        &label_of(baseline),
        center,
    )
}

impl ComparisonSummary {
    /// `key = value` lines with full-precision numbers.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("adam_label", self.adam_label.clone());
        kv("baseline_label", self.baseline_label.clone());
        kv("n_adam", self.n_adam.to_string());
        kv("n_baseline", self.n_baseline.to_string());
        kv("mean_f1_adam", format!("{:?}", self.mean_f1_adam));
        kv("mean_f1_baseline", format!("{:?}", self.mean_f1_baseline));
        kv("std_f1_adam", format!("{:?}", self.std_f1_adam));
        kv("std_f1_baseline", format!("{:?}", self.std_f1_baseline));
        kv("variance_ratio", format!("{:?}", self.variance_ratio));
        kv("mann_whitney_u", format!("{:?}", self.mann_whitney.u));
        kv("mann_whitney_p", format!("{:?}", self.mann_whitney.p));
        kv(
            "mann_whitney_method",
            format!("{:?}", self.mann_whitney.method).to_lowercase(),
        );
        kv("levene_w", format!("{:?}", self.levene.w));
        kv("levene_p", format!("{:?}", self.levene.p));
        kv("f_test_f", format!("{:?}", self.f_test.f));
        kv("f_test_p", format!("{:?}", self.f_test.p));
        kv("cohens_d", format!("{:?}", self.cohens_d));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>12}",
            "", self.adam_label, self.baseline_label
        );
        let _ = writeln!(
            out,
            "{:<28} {:>12.4} {:>12.4}",
            "Mean F1", self.mean_f1_adam, self.mean_f1_baseline
        );
        let _ = writeln!(
            out,
            "{:<28} {:>12.4} {:>12.4}",
            "Std F1", self.std_f1_adam, self.std_f1_baseline
        );
        let _ = writeln!(
            out,
            "{:<28} {:>12.4}",
            "Variance ratio", self.variance_ratio
        );
        let _ = writeln!(
            out,
            "{:<28} U = {:.1}, p = {:.4}",
            "Mann-Whitney U", self.mann_whitney.u, self.mann_whitney.p
        );
        let _ = writeln!(
            out,
            "{:<28} W = {:.4}, p = {:.4}",
            "Levene", self.levene.w, self.levene.p
        );
        let _ = writeln!(
            out,
            "{:<28} F = {:.4}, p = {:.4}",
            "F-test (variance)", self.f_test.f, self.f_test.p
        );
        let _ = writeln!(out, "{:<28} {:.4}", "Cohen's d", self.cohens_d);
        out
    }
}
