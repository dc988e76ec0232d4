//! Paired clinical + microbiome samples: ingestion, grouped stratified
//! splitting, evaluation-cohort draws and train-only median imputation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no valid rows ({rejected} rejected)")]
    EmptyInput { rejected: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("cohort error: requested {requested} {class} samples, only {available} available")]
    Cohort {
        class: Label,
        requested: usize,
        available: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "0")]
    Negative,
    #[serde(rename = "1")]
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    fn parse(cell: &str) -> Option<Self> {
        match cell.trim() {
            "0" => Some(Label::Negative),
            "1" => Some(Label::Positive),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

/// One stool-sample record. Absent keys are missing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub study_id: String,
    pub visit_index: u32,
    pub clinical: BTreeMap<String, f64>,
    pub abundance: BTreeMap<String, f64>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub feature_order: Vec<String>,
    pub taxon_order: Vec<String>,
}

impl SampleSet {
    pub fn new(
        samples: Vec<Sample>,
        feature_order: impl IntoIterator<Item = String>,
        taxon_order: impl IntoIterator<Item = String>,
    ) -> Result<Self, DatasetError> {
        let feature_order: BTreeSet<String> = feature_order.into_iter().collect();
        let taxon_order: BTreeSet<String> = taxon_order.into_iter().collect();
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(DatasetError::DuplicateSampleId(s.sample_id.clone()));
            }
            if let Some(k) = s.clinical.keys().find(|k| !feature_order.contains(*k)) {
                return Err(DatasetError::Schema(format!(
                    "sample {} has unknown clinical feature {k:?}",
                    s.sample_id
                )));
            }
            if let Some(k) = s.abundance.keys().find(|k| !taxon_order.contains(*k)) {
                return Err(DatasetError::Schema(format!(
                    "sample {} has unknown taxon {k:?}",
                    s.sample_id
                )));
            }
            if let Some((k, _)) = s
                .abundance
                .iter()
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                return Err(DatasetError::Schema(format!(
                    "sample {} has invalid abundance for {k:?}",
                    s.sample_id
                )));
            }
        }
        Ok(Self {
            samples,
            feature_order: feature_order.into_iter().collect(),
            taxon_order: taxon_order.into_iter().collect(),
        })
    }

    /// A set holding a subset of this one's samples with the same orders.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            feature_order: self.feature_order.clone(),
            taxon_order: self.taxon_order.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Model feature names: clinical features then taxa, each in canonical order.
    pub fn feature_names(&self) -> Vec<String> {
        self.feature_order
            .iter()
            .chain(&self.taxon_order)
            .cloned()
            .collect()
    }

    /// Abundance in taxon order; an absent taxon counts as zero abundance.
    pub fn abundance_vector(&self, sample: &Sample) -> Vec<f64> {
        self.taxon_order
            .iter()
            .map(|t| sample.abundance.get(t).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn study_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.study_id.as_str()).collect()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }
}

impl Sample {
    /// Raw value of a clinical feature or taxon, if present.
    pub fn value(&self, name: &str) -> Option<f64> {
        self.clinical
            .get(name)
            .or_else(|| self.abundance.get(name))
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Label,
    StudyId,
    SampleId,
    VisitIndex,
    Clinical,
    Taxon,
    Ignore,
}

/// Column-role map for delimited sample files.
///
/// ```toml
/// delimiter = "tab"          # "," by default
/// default_role = "taxon"     # role for unlisted columns, "ignore" by default
/// [columns]
/// sample = "sample_id"
/// participant = "study_id"
/// ad = "label"
/// age = "clinical"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_role")]
    pub default_role: ColumnRole,
    pub columns: BTreeMap<String, ColumnRole>,
}

fn default_delimiter() -> String {
    ",".into()
}

fn default_role() -> ColumnRole {
    ColumnRole::Ignore
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn delimiter_byte(&self) -> Result<u8, DatasetError> {
        match self.delimiter.as_str() {
            "tab" | "\t" | "\\t" => Ok(b'\t'),
            d if d.len() == 1 => Ok(d.as_bytes()[0]),
            d => Err(DatasetError::Schema(format!("unsupported delimiter {d:?}"))),
        }
    }

    fn role_of(&self, column: &str) -> ColumnRole {
        self.columns
            .get(column)
            .copied()
            .unwrap_or(self.default_role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    /// 1-based line number in the input (the header is line 1).
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ParsedSamples {
    pub set: SampleSet,
    pub rejected: Vec<RejectedRow>,
}

pub fn parse_samples(path: &Path, schema: &Schema) -> Result<ParsedSamples, DatasetError> {
    let file = std::fs::File::open(path)?;
    parse_samples_from_reader(file, schema)
}

pub fn parse_samples_from_reader<R: Read>(
    reader: R,
    schema: &Schema,
) -> Result<ParsedSamples, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(Ok(h)) if h.iter().any(|c| !c.trim().is_empty()) => h,
        Some(Err(e)) => return Err(DatasetError::Format(e.to_string())),
        _ => return Err(DatasetError::Format("missing header row".into())),
    };
    let header: Vec<String> = header.iter().map(|c| c.trim().to_string()).collect();

    let find = |role: ColumnRole| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, c)| schema.role_of(c) == role)
            .map(|(i, _)| i)
            .collect()
    };
    let single = |role: ColumnRole, required: bool| -> Result<Option<usize>, DatasetError> {
        let cols = find(role);
        match cols.len() {
            0 if required => Err(DatasetError::Schema(format!(
                "no column with role {role:?} in header"
            ))),
            0 => Ok(None),
            1 => Ok(Some(cols[0])),
            _ => Err(DatasetError::Schema(format!(
                "more than one column with role {role:?}"
            ))),
        }
    };
    for (col, role) in &schema.columns {
        if matches!(
            role,
            ColumnRole::Label | ColumnRole::StudyId | ColumnRole::SampleId
        ) && !header.contains(col)
        {
            return Err(DatasetError::Schema(format!(
                "designated {role:?} column {col:?} absent from header"
            )));
        }
    }
    let label_col = single(ColumnRole::Label, true)?.expect("required");
    let study_col = single(ColumnRole::StudyId, true)?.expect("required");
    let sample_col = single(ColumnRole::SampleId, true)?.expect("required");
    let visit_col = single(ColumnRole::VisitIndex, false)?;
    let clinical_cols = find(ColumnRole::Clinical);
    let taxon_cols = find(ColumnRole::Taxon);

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut visits_seen: HashMap<String, u32> = HashMap::new();
    for (row, rec) in records.enumerate() {
        let line = row + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let cell = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let Some(label) = Label::parse(cell(label_col)) else {
            rejected.push(RejectedRow {
                line,
                reason: format!("unparseable label {:?}", cell(label_col)),
            });
            continue;
        };
        let sample_id = cell(sample_col).to_string();
        let study_id = cell(study_col).to_string();
        if sample_id.is_empty() || study_id.is_empty() {
            rejected.push(RejectedRow {
                line,
                reason: "empty sample or study id".into(),
            });
            continue;
        }
        if !seen_ids.insert(sample_id.clone()) {
            rejected.push(RejectedRow {
                line,
                reason: format!("duplicate sample id {sample_id:?}"),
            });
            continue;
        }
        let counter = visits_seen.entry(study_id.clone()).or_insert(0);
        let visit_index = match visit_col.map(cell) {
            Some(v) => match v.parse::<u32>() {
                Ok(v) => v,
                Err(_) => {
                    rejected.push(RejectedRow {
                        line,
                        reason: format!("unparseable visit index {v:?}"),
                    });
                    continue;
                }
            },
            None => *counter,
        };
        *counter += 1;
        let numeric = |i: usize| cell(i).parse::<f64>().ok().filter(|v| v.is_finite());
        let clinical = clinical_cols
            .iter()
            .filter_map(|&i| numeric(i).map(|v| (header[i].clone(), v)))
            .collect();
        let abundance = taxon_cols
            .iter()
            .filter_map(|&i| {
                numeric(i)
                    .filter(|v| *v >= 0.0)
                    .map(|v| (header[i].clone(), v))
            })
            .collect();
        samples.push(Sample {
            sample_id,
            study_id,
            visit_index,
            clinical,
            abundance,
            label,
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyInput {
            rejected: rejected.len(),
        });
    }
    let set = SampleSet::new(
        samples,
        clinical_cols.iter().map(|&i| header[i].clone()),
        taxon_cols.iter().map(|&i| header[i].clone()),
    )?;
    Ok(ParsedSamples { set, rejected })
}

/// Writes a sample set as delimited text with a matching schema.
pub fn write_samples(set: &SampleSet, delimiter: u8) -> (String, Schema) {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(Vec::new());
    let mut header = vec![
        "sample_id".to_string(),
        "study_id".into(),
        "visit_index".into(),
        "label".into(),
    ];
    header.extend(set.feature_order.iter().cloned());
    header.extend(set.taxon_order.iter().cloned());
    wtr.write_record(&header).expect("in-memory write");
    for s in &set.samples {
        let mut row = vec![
            s.sample_id.clone(),
            s.study_id.clone(),
            s.visit_index.to_string(),
            s.label.as_u8().to_string(),
        ];
        for f in &set.feature_order {
            row.push(s.clinical.get(f).map(|v| v.to_string()).unwrap_or_default());
        }
        for t in &set.taxon_order {
            row.push(
                s.abundance
                    .get(t)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        wtr.write_record(&row).expect("in-memory write");
    }
    let text = String::from_utf8(wtr.into_inner().expect("flush")).expect("utf-8");
    let mut columns = BTreeMap::new();
    columns.insert("sample_id".into(), ColumnRole::SampleId);
    columns.insert("study_id".into(), ColumnRole::StudyId);
    columns.insert("visit_index".into(), ColumnRole::VisitIndex);
    columns.insert("label".into(), ColumnRole::Label);
    for f in &set.feature_order {
        columns.insert(f.clone(), ColumnRole::Clinical);
    }
    for t in &set.taxon_order {
        columns.insert(t.clone(), ColumnRole::Taxon);
    }
    let delimiter = if delimiter == b'\t' {
        "tab".into()
    } else {
        (delimiter as char).to_string()
    };
    (
        text,
        Schema {
            delimiter,
            default_role: ColumnRole::Ignore,
            columns,
        },
    )
}

/// Majority label per study id; ties go to the positive class.
pub fn study_labels(set: &SampleSet) -> BTreeMap<&str, Label> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in &set.samples {
        let c = counts.entry(s.study_id.as_str()).or_default();
        if s.label.is_positive() {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(id, (pos, neg))| (id, Label::from_bool(pos >= neg)))
        .collect()
}

/// Per-stratum train count: nearest integer to `fraction * n`, kept within
/// `[1, n - 1]` so both partitions receive every class.
fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Partitions study ids (not samples) into train/test, stratified by each
/// participant's majority label.
pub fn split_grouped_stratified(
    set: &SampleSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(SampleSet, SampleSet), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Parameter(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let labels = study_labels(set);
    let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::SPLIT));
    let mut train_ids = HashSet::new();
    for class in [Label::Negative, Label::Positive] {
        let mut ids: Vec<&str> = labels
            .iter()
            .filter(|(_, l)| **l == class)
            .map(|(id, _)| *id)
            .collect();
        if ids.len() < 2 {
            return Err(DatasetError::Stratification(format!(
                "{class} stratum has {} study id(s); at least 2 required",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let k = train_count(ids.len(), train_fraction);
        train_ids.extend(ids[..k].iter().copied());
    }
    let (train, test): (Vec<Sample>, Vec<Sample>) = set
        .samples
        .iter()
        .cloned()
        .partition(|s| train_ids.contains(s.study_id.as_str()));
    Ok((set.with_samples(train), set.with_samples(test)))
}

/// Draws `n_pos` positive and `n_neg` negative samples without replacement.
/// Output keeps the input order of the drawn samples.
pub fn draw_eval_cohort(
    test: &SampleSet,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<SampleSet, DatasetError> {
    let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::COHORT));
    let mut chosen = HashSet::new();
    for (class, requested) in [(Label::Positive, n_pos), (Label::Negative, n_neg)] {
        let mut idx: Vec<usize> = (0..test.len())
            .filter(|&i| test.samples[i].label == class)
            .collect();
        if idx.len() < requested {
            return Err(DatasetError::Cohort {
                class,
                requested,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(requested));
    }
    let samples = (0..test.len())
        .filter(|i| chosen.contains(i))
        .map(|i| test.samples[i].clone())
        .collect();
    Ok(test.with_samples(samples))
}

/// Dense numeric view of a sample set over a fixed feature list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<F> {
    pub names: Vec<String>,
    pub rows: Vec<Vec<F>>,
    pub labels: Vec<Label>,
    pub groups: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl<F: Scalar> FeatureMatrix<F> {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn targets(&self) -> Vec<F> {
        self.labels
            .iter()
            .map(|l| if l.is_positive() { F::one() } else { F::zero() })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Option<Self> {
        let pos: Option<Vec<usize>> = names
            .iter()
            .map(|n| self.names.iter().position(|m| m == n))
            .collect();
        let pos = pos?;
        Some(Self {
            names: names.to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| pos.iter().map(|&j| r[j]).collect())
                .collect(),
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            sample_ids: self.sample_ids.clone(),
        })
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = F> + '_ {
        self.rows.iter().map(move |r| r[j])
    }
}

/// Per-feature medians learned on a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub medians: BTreeMap<String, f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl Imputer {
    /// Medians of observed values over `train`; a feature never observed gets 0.
    pub fn fit(train: &SampleSet) -> Self {
        let medians = train
            .feature_names()
            .into_iter()
            .map(|name| {
                let observed: Vec<f64> = train
                    .samples
                    .iter()
                    .filter_map(|s| s.value(&name))
                    .collect();
                let m = median(observed).unwrap_or(0.0);
                (name, m)
            })
            .collect();
        Self { medians }
    }

    pub fn value(&self, sample: &Sample, name: &str) -> Option<f64> {
        sample
            .value(name)
            .or_else(|| self.medians.get(name).copied())
    }

    /// Imputed feature row for one sample; `None` names a feature that is
    /// neither present nor imputable.
    pub fn row<F: Scalar>(&self, sample: &Sample, names: &[String]) -> Result<Vec<F>, String> {
        names
            .iter()
            .map(|n| self.value(sample, n).map(F::lit).ok_or_else(|| n.clone()))
            .collect()
    }

    pub fn transform<F: Scalar>(
        &self,
        set: &SampleSet,
        names: &[String],
    ) -> Result<FeatureMatrix<F>, String> {
        let rows = set
            .samples
            .iter()
            .map(|s| self.row(s, names))
            .collect::<Result<_, _>>()?;
        Ok(FeatureMatrix {
            names: names.to_vec(),
            rows,
            labels: set.samples.iter().map(|s| s.label).collect(),
            groups: set.samples.iter().map(|s| s.study_id.clone()).collect(),
            sample_ids: set.samples.iter().map(|s| s.sample_id.clone()).collect(),
        })
    }
}
