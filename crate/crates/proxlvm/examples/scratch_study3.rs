// Temporary: squared-gradient scaling form on the class-model study.

use proxlvm::metrics::rlca_mse;
use proxlvm::models::{CompleteDataModel, RlcaModel};
use proxlvm::optim::{run, CurvatureEstimator, OptimizerConfig};
use proxlvm::samplers::RlcaExact;
use proxlvm::study::{
    default_rlca_start, seeds, simulate_replication, study_truth, StudyConfig, StudyId,
    StudyTruth,
};

fn main() {
    for nn in [1000usize, 4000] {
        for start_truth in [true, false] {
            let config = StudyConfig {
                n: Some(nn),
                master_seed: 2024,
                ..StudyConfig::new(StudyId::III)
            };
            let truth = study_truth(&config);
            let truth_params = match &truth {
                StudyTruth::Rlca(p) => p.clone(),
                _ => unreachable!(),
            };
            let mut rows = Vec::new();
            for rep in 0..3usize {
                let data = simulate_replication(&config, &truth, rep);
                let model = RlcaModel::new(&data, truth_params.q.clone());
                let cfg = OptimizerConfig {
                    max_iters: 3000,
                    burn_in: 50,
                    seed: seeds::fit_seed(config.master_seed, rep, 0),
                    curvature: CurvatureEstimator::SquaredGradient,
                    ..Default::default()
                };
                let start = if start_truth {
                    truth_params.clone()
                } else {
                    default_rlca_start(&data, model.n_classes(), model.q())
                };
                let beta0 = model.params_to_vec(&start);
                let prox = model.prox_blocks();
                let fit =
                    run(&model, &mut RlcaExact, &prox, &cfg, &beta0, vec![], None).unwrap();
                let est = model.vec_to_params(&fit.beta_bar);
                let (t_mse, n_mse) =
                    rlca_mse(&est.theta, &truth_params.theta, &est.nu, &truth_params.nu)
                        .unwrap();
                rows.push((t_mse, n_mse, fit.n_iters, fit.stopped_early));
            }
            println!(
                "N={nn} start={}: {:?}",
                if start_truth { "truth" } else { "cold " },
                rows.iter()
                    .map(|(t, n, it, s)| {
                        (
                            (t * 1e4).round() / 1e4,
                            (n * 1e4).round() / 1e4,
                            *it,
                            *s,
                        )
                    })
                    .collect::<Vec<_>>()
            );
        }
    }
}
