//! Quasi-REML and quasi-ML estimation of variance components in mixed linear
//! models with non-Gaussian random effects, the partially observed
//! quasi-information matrix (POQUIM), and robust dispersion tests built on it.

pub mod error;
pub mod index_classes;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod oracle;
pub mod poquim;
pub mod simulation;
pub mod special;
pub mod system;

pub use error::{Error, Result};
pub use index_classes::{
    classify_quadruples, classify_triples, classify_with_budget, ClassKey, ClassMember, IndexClass,
    IndexClassPartition, DEFAULT_BUDGET,
};
pub use inference::{
    dispersion_test, jackknife_oneway_test, poquim_test, twoway_equal_variance_test, Decision,
    Hypothesis, OneWayLayout, PoquimTest, TestMethod, TestOptions, TestResult,
};
pub use likelihood::{
    fit_ml, fit_ml_constrained, fit_reml, fit_reml_constrained, Criterion, FitOptions, FitResult,
    MlScoreParts, RemlScoreParts, Start,
};
pub use model::{Design, FixedEffects, ModelSpec, RandomTerm, TermKind, VarianceComponents};
pub use oracle::{
    analytic_quim_ml, analytic_quim_reml, distribution_moments, mc_poquim_check, mc_score_variance,
    DistributionMoments, HigherMoments, MonteCarloEstimate, PoquimCheck,
};
pub use poquim::{acm, poquim_ml, poquim_reml, AcmEstimate, QuimDecomposition};
pub use system::{CovarianceSystem, GlsSystem};
pub use simulation::{
    run_study, simulate_dataset, DesignSpec, DistributionSpec, Family, HypothesisConfig, Study, StudyConfig,
    StudyResult, Truth,
};
