// Temporary: reproduce the N=4000 exploratory-fit failure.
use proxlvm::models::{IfaParams, Penalty};
use proxlvm::study::{
    fit_ifa, seeds, simulate_replication, study_truth, StudyConfig, StudyId, StudyTruth,
    Variant,
};

fn main() {
    let n = 4000usize;
    let config = StudyConfig {
        n: Some(n),
        master_seed: 2024,
        ..StudyConfig::new(StudyId::II)
    };
    let truth = study_truth(&config);
    let truth_params = match &truth {
        StudyTruth::Ifa(p) => p.clone(),
        _ => unreachable!(),
    };
    let data = simulate_replication(&config, &truth, 0);
    let lambda = config.lambda(n, 80);
    let penalty = Penalty::L1 { lambda };
    let base = config.base_optimizer();
    let start = IfaParams {
        penalty,
        q_mask: None,
        ..truth_params.clone()
    };
    match fit_ifa(
        &data,
        5,
        None,
        penalty,
        Variant::Usp,
        &base,
        seeds::fit_seed(config.master_seed, 0, 0),
        Some(&start),
    ) {
        Ok((est, fit)) => println!(
            "ok iters {} mse {:.4}",
            fit.n_iters,
            proxlvm::metrics::mse_loading_permuted(&est.a, &truth_params.a).unwrap()
        ),
        Err(e) => println!("ERROR: {e:#?}"),
    }
}
