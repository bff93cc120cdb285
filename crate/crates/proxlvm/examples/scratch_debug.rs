// Temporary: compare the stochastic fit against a direct EM fit of the
// latent class model (enumeration E-step, closed-form M-step).

use proxlvm::metrics::rlca_mse;
use proxlvm::models::rlca::rlca_marginal_loglik;
use proxlvm::models::{CompleteDataModel, ResponseMatrix, RlcaModel, RlcaParams};
use proxlvm::numeric::logsumexp;
use proxlvm::optim::{run, OptimizerConfig};
use proxlvm::samplers::RlcaExact;
use proxlvm::study::{
    seeds, simulate_replication, study_truth, StudyConfig, StudyId, StudyTruth,
};

/// EM for the latent class model; `pooled` ties the covering classes of
/// each item to a common success probability (the equality part of the
/// design constraints).
fn em_lca(data: &ResponseMatrix, truth: &RlcaParams, iters: usize, pooled: bool) -> RlcaParams {
    let n = data.n_respondents();
    let j = data.n_items();
    let c = truth.n_classes();
    let mut params = truth.clone();
    for _ in 0..iters {
        // E-step.
        let theta_flat: Vec<f64> = params.theta.iter().flatten().copied().collect();
        let mut w = vec![0.0; n * c];
        for i in 0..n {
            let post = proxlvm::samplers::lca_posterior(data.row(i), &theta_flat, &params.nu);
            w[i * c..(i + 1) * c].copy_from_slice(&post);
        }
        // M-step.
        let mut n_alpha = vec![0.0; c];
        let mut correct = vec![0.0; j * c];
        for i in 0..n {
            for alpha in 0..c {
                let wi = w[i * c + alpha];
                n_alpha[alpha] += wi;
                for (jj, &y) in data.row(i).iter().enumerate() {
                    if y == 1 {
                        correct[jj * c + alpha] += wi;
                    }
                }
            }
        }
        for alpha in 0..c {
            params.nu[alpha] = (n_alpha[alpha].max(1e-9) / n_alpha[0].max(1e-9)).ln();
        }
        let masks = proxlvm::models::rlca::q_masks(&params.q);
        for jj in 0..j {
            if pooled {
                let (mut cap_n, mut cap_c) = (0.0, 0.0);
                for alpha in 0..c {
                    if proxlvm::qp::covers(alpha, masks[jj]) {
                        cap_n += n_alpha[alpha];
                        cap_c += correct[jj * c + alpha];
                    }
                }
                let p_plus = (cap_c / cap_n.max(1e-9)).clamp(1e-6, 1.0 - 1e-6);
                for alpha in 0..c {
                    if proxlvm::qp::covers(alpha, masks[jj]) {
                        params.theta[jj][alpha] = (p_plus / (1.0 - p_plus)).ln();
                    } else {
                        let p = (correct[jj * c + alpha] / n_alpha[alpha].max(1e-9))
                            .clamp(1e-6, 1.0 - 1e-6);
                        params.theta[jj][alpha] = (p / (1.0 - p)).ln();
                    }
                }
            } else {
                for alpha in 0..c {
                    let p = (correct[jj * c + alpha] / n_alpha[alpha].max(1e-9))
                        .clamp(1e-6, 1.0 - 1e-6);
                    params.theta[jj][alpha] = (p / (1.0 - p)).ln();
                }
            }
        }
    }
    params
}

/// EM with the full constraint chain enforced in the M-step via
/// prox-Newton iterations (projection through the dual QP).
fn em_lca_constrained(data: &ResponseMatrix, truth: &RlcaParams, iters: usize) -> RlcaParams {
    let n = data.n_respondents();
    let j = data.n_items();
    let c = truth.n_classes();
    let masks = proxlvm::models::rlca::q_masks(&truth.q);
    let mut params = truth.clone();
    for _ in 0..iters {
        let theta_flat: Vec<f64> = params.theta.iter().flatten().copied().collect();
        let mut n_alpha = vec![0.0; c];
        let mut correct = vec![0.0; j * c];
        let mut post_sum = vec![0.0; c];
        for i in 0..n {
            let post = proxlvm::samplers::lca_posterior(data.row(i), &theta_flat, &params.nu);
            for alpha in 0..c {
                let wi = post[alpha];
                n_alpha[alpha] += wi;
                post_sum[alpha] += wi;
                for (jj, &y) in data.row(i).iter().enumerate() {
                    if y == 1 {
                        correct[jj * c + alpha] += wi;
                    }
                }
            }
        }
        for alpha in 0..c {
            params.nu[alpha] = (post_sum[alpha].max(1e-12) / post_sum[0].max(1e-12)).ln();
        }
        for jj in 0..j {
            let mut th: Vec<f64> = params.theta[jj].clone();
            for _ in 0..40 {
                let mut target = vec![0.0; c];
                let mut weights = vec![0.0; c];
                for alpha in 0..c {
                    let p = proxlvm::numeric::sigmoid(th[alpha]);
                    let g = n_alpha[alpha] * p - correct[jj * c + alpha];
                    let h = (n_alpha[alpha] * p * (1.0 - p)).max(1e-6);
                    target[alpha] = th[alpha] - g / h;
                    weights[alpha] = h;
                }
                let next =
                    proxlvm::qp::project_item_row(&target, &weights, c, masks[jj]).unwrap();
                let diff = next
                    .iter()
                    .zip(&th)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                th = next;
                if diff < 1e-9 {
                    break;
                }
            }
            params.theta[jj] = th;
        }
    }
    params
}

fn main() {
    let config = StudyConfig {
        n: Some(4000),
        master_seed: 2024,
        ..StudyConfig::new(StudyId::III)
    };
    let truth = study_truth(&config);
    let truth_params = match &truth {
        StudyTruth::Rlca(p) => p.clone(),
        _ => unreachable!(),
    };

    for rep in 0..3usize {
        let data = simulate_replication(&config, &truth, rep);
        let model = RlcaModel::new(&data, truth_params.q.clone());
        let cfg = OptimizerConfig {
            max_iters: 4000,
            burn_in: 500,
            seed: seeds::fit_seed(config.master_seed, rep, 0),
            c1: 1.0,
            ..Default::default()
        };
        let beta0 = model.params_to_vec(&truth_params);
        let prox = model.prox_blocks();
        let fit = run(&model, &mut RlcaExact, &prox, &cfg, &beta0, vec![], None).unwrap();
        let est = model.vec_to_params(&fit.beta_bar);

        let em = em_lca(&data, &truth_params, 400, false);
        let emp = em_lca(&data, &truth_params, 400, true);
        let emc = em_lca_constrained(&data, &truth_params, 300);
        let feas = proxlvm::models::rlca::rlca_feasible(&est.theta, &truth_params.q, 1e-7);
        println!("  usp feasible: {feas}");

        let (t_mse, n_mse) =
            rlca_mse(&est.theta, &truth_params.theta, &est.nu, &truth_params.nu).unwrap();
        let (t_em, n_em) =
            rlca_mse(&em.theta, &truth_params.theta, &em.nu, &truth_params.nu).unwrap();
        let (t_x, n_x) = rlca_mse(&est.theta, &em.theta, &est.nu, &em.nu).unwrap();
        let (t_p, n_p) =
            rlca_mse(&emp.theta, &truth_params.theta, &emp.nu, &truth_params.nu).unwrap();
        println!("  pooled-em vs truth: theta {t_p:.4} nu {n_p:.4}");
        println!("rep {rep}:");
        println!("  usp vs truth: theta {t_mse:.4} nu {n_mse:.4}");
        println!("  em  vs truth: theta {t_em:.4} nu {n_em:.4}");
        println!("  usp vs em   : theta {t_x:.4} nu {n_x:.4}");
        println!(
            "  loglik: usp {:.2} em {:.2} truth {:.2}",
            rlca_marginal_loglik(&est, &data),
            rlca_marginal_loglik(&em, &data),
            rlca_marginal_loglik(&truth_params, &data)
        );
        let (t_c, n_c) =
            rlca_mse(&emc.theta, &truth_params.theta, &emc.nu, &truth_params.nu).unwrap();
        let feas_c = proxlvm::models::rlca::rlca_feasible(&emc.theta, &truth_params.q, 1e-6);
        println!("  cEM vs truth: theta {t_c:.4} nu {n_c:.4} (feasible {feas_c})");
        let (t_uc, n_uc) = rlca_mse(&est.theta, &emc.theta, &est.nu, &emc.nu).unwrap();
        println!("  usp vs cEM  : theta {t_uc:.4} nu {n_uc:.4}");
        println!(
            "  loglik pooled-em {:.2} cEM {:.2}",
            rlca_marginal_loglik(&emp, &data),
            rlca_marginal_loglik(&emc, &data)
        );
        // Item 0 table detail: truth / usp / pooled-em.
        for jj in [0usize, 16] {
            let fmt = |v: &Vec<f64>| -> Vec<f64> {
                v.iter().map(|x| (x * 100.0).round() / 100.0).collect()
            };
            println!("  item {jj} truth : {:?}", fmt(&truth_params.theta[jj]));
            println!("  item {jj} usp   : {:?}", fmt(&est.theta[jj]));
            println!("  item {jj} em-p  : {:?}", fmt(&emp.theta[jj]));
        }
        // Largest nu deviations from the EM solution.
        let mut devs: Vec<(usize, f64, f64)> = (1..16)
            .map(|a| (a, est.nu[a], em.nu[a]))
            .collect();
        devs.sort_by(|x, y| {
            (y.1 - y.2)
                .abs()
                .partial_cmp(&(x.1 - x.2).abs())
                .unwrap()
        });
        println!("  worst nu (class, usp, em): {:?}", &devs[..4]);
    }
}
