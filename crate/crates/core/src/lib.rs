pub mod bench;
pub mod dataset;
pub mod experiment;
pub mod features;
pub mod label;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod stratify;
pub mod twostep;
pub mod util;

pub type Rational = num_rational::Ratio<i64>;
/// Single-precision trained classifier.
pub type Model = model::TrainedModel<f32>;
pub type Features = features::FeatureMatrix<f32>;
pub type Metrics = metrics::MetricsReport<f64>;
/// Exact metrics for checking float results.
pub type ExactMetrics = metrics::MetricsReport<Rational>;
