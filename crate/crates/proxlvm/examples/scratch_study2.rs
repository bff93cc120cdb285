// Temporary: penalty-weight calibration for the exploratory study.

use proxlvm::models::{IfaParams, Penalty};
use proxlvm::study::{
    fit_ifa, seeds, simulate_replication, study_truth, StudyConfig, StudyId, StudyTruth,
    Variant,
};

fn main() {
    for (n, cs) in [
        (1000usize, vec![0.3]),
        (4000usize, vec![0.3]),
    ] {
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
        for c in cs {
            let lambda = c * ((n as f64) * (80f64).ln()).sqrt();
            let mut mses = Vec::new();
            let mut secs = Vec::new();
            for rep in 0..3usize {
                let data = simulate_replication(&config, &truth, rep);
                let penalty = Penalty::L1 { lambda };
                let base = config.base_optimizer();
                let start = IfaParams {
                    penalty,
                    q_mask: None,
                    ..truth_params.clone()
                };
                let t0 = std::time::Instant::now();
                let (est, fit) = fit_ifa(
                    &data,
                    5,
                    None,
                    penalty,
                    Variant::Usp,
                    &base,
                    seeds::fit_seed(config.master_seed, rep, 0),
                    Some(&start),
                )
                .unwrap();
                secs.push(t0.elapsed().as_secs_f64());
                mses.push(
                    proxlvm::metrics::mse_loading_permuted(&est.a, &truth_params.a).unwrap(),
                );
                let _ = fit;
            }
            println!(
                "N={n} c={c}: lambda {lambda:6.1} mse {:?} fit secs {:?}",
                mses.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
                secs.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
        }
    }
}
