//! Classification of Alzheimer's disease from gut microbiome and clinical
//! records: diversity metrics, boosted trees with Shapley attribution,
//! retrieval over a literature corpus and the three-stage agent pipeline.

pub mod rng;
pub mod scalar;

pub mod agents;
pub mod attribution;
pub mod chunker;
pub mod dataset;
pub mod diversity;
pub mod embedding;
pub mod ensemble;
pub mod stats;
pub mod synthetic;
pub mod vectorstore;

pub use scalar::Scalar;

pub type FeatureMatrix = dataset::FeatureMatrix<f64>;
pub type TreeEnsemble = ensemble::TreeEnsemble<f64>;
pub type Model = ensemble::Model<f64>;
pub type MetricTriple = ensemble::MetricTriple<f64>;
pub type DiversityProfile = diversity::DiversityProfile<f64>;
