//! Shared scenarios for the benchmarks.

use poquim_core::{
    simulate_dataset, DesignSpec, Family, FitOptions, HypothesisConfig, ModelSpec, StudyConfig, TestMethod, Truth,
};

/// One normal dataset from `design` at `λ = 1`, `γ_t = 1`.
pub fn dataset(design: DesignSpec, seed: u64) -> ModelSpec {
    let terms = match design {
        DesignSpec::OneWay { .. } => 1,
        DesignSpec::TwoWay { .. } => 2,
        DesignSpec::Custom { ref terms, .. } => terms.len(),
    };
    let mut k = vec![0.0; terms + 1];
    k[1] = 1.0;
    let config = StudyConfig {
        name: String::new(),
        design,
        truth: Truth {
            beta: vec![1.0],
            lambda: 1.0,
            gamma: vec![1.0; terms],
        },
        distributions: vec![Family::Normal; terms + 1],
        hypothesis: HypothesisConfig {
            k: vec![k],
            phi: vec![1.0],
            null_substitution: true,
        },
        methods: vec![TestMethod::PoquimChi2],
        nominal_levels: vec![0.05],
        replicates: 1,
        master_seed: seed,
        fit: FitOptions::default(),
    };
    simulate_dataset(&config, 0).expect("valid scenario")
}
