use super::{fit_gbdt, EnsembleError, HyperParams};
use crate::dataset::FeatureMatrix;
use crate::rng;
use crate::scalar::Scalar;

/// Settings of the preliminary ensemble used only for ranking.
pub fn selector_params() -> HyperParams {
    HyperParams {
        n_trees: 50,
        max_depth: 3,
        learning_rate: 0.3,
        ..HyperParams::default()
    }
}

/// Every feature with its total split gain, best first; equal gains are
/// ordered by name.
pub fn rank_features_by_gain<F: Scalar>(
    data: &FeatureMatrix<F>,
    seed: u64,
) -> Result<Vec<(String, F)>, EnsembleError> {
    let model = fit_gbdt(
        data,
        &selector_params(),
        rng::derive_seed(seed, rng::stream::SELECT),
    )?;
    let mut ranked: Vec<(String, F)> = data
        .names
        .iter()
        .cloned()
        .zip(model.gain_importance())
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite gain")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(ranked)
}

/// Top-`k` features by gain. `k` larger than the feature count is clipped.
pub fn select_features<F: Scalar>(
    data: &FeatureMatrix<F>,
    k: usize,
    seed: u64,
) -> Result<Vec<String>, EnsembleError> {
    if k == 0 {
        return Err(EnsembleError::InvalidParams("k must be >= 1".into()));
    }
    if k > data.n_features() {
        log::warn!(
            "requested {k} features but only {} exist; using all",
            data.n_features()
        );
    }
    let ranked = rank_features_by_gain(data, seed)?;
    Ok(ranked.into_iter().take(k).map(|(n, _)| n).collect())
}
