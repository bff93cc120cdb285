// Temporary: constrained-MLE score distribution across master seeds, via
// the deterministic constrained EM (the ceiling for any correct fit).

use proxlvm::models::{ResponseMatrix, RlcaParams};
use proxlvm::numeric::median;
use proxlvm::study::{simulate_replication, study_truth, StudyConfig, StudyId, StudyTruth};

fn em_lca_constrained(data: &ResponseMatrix, start: &RlcaParams, iters: usize) -> RlcaParams {
    let n = data.n_respondents();
    let j = data.n_items();
    let c = start.n_classes();
    let masks = proxlvm::models::rlca::q_masks(&start.q);
    let mut params = start.clone();
    for _ in 0..iters {
        let theta_flat: Vec<f64> = params.theta.iter().flatten().copied().collect();
        let mut n_alpha = vec![0.0; c];
        let mut correct = vec![0.0; j * c];
        for i in 0..n {
            let post = proxlvm::samplers::lca_posterior(data.row(i), &theta_flat, &params.nu);
            for alpha in 0..c {
                let wi = post[alpha];
                n_alpha[alpha] += wi;
                for (jj, &y) in data.row(i).iter().enumerate() {
                    if y == 1 {
                        correct[jj * c + alpha] += wi;
                    }
                }
            }
        }
        for alpha in 0..c {
            params.nu[alpha] = (n_alpha[alpha].max(1e-12) / n_alpha[0].max(1e-12)).ln();
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
    for seed in [2024u64, 7, 777, 12345] {
        for n in [1000usize, 4000] {
            let config = StudyConfig {
                n: Some(n),
                master_seed: seed,
                ..StudyConfig::new(StudyId::III)
            };
            let truth = study_truth(&config);
            let truth_params = match &truth {
                StudyTruth::Rlca(p) => p.clone(),
                _ => unreachable!(),
            };
            let mut tv = Vec::new();
            let mut nv = Vec::new();
            for rep in 0..10usize {
                let data = simulate_replication(&config, &truth, rep);
                let est = em_lca_constrained(&data, &truth_params, 250);
                let (t, v) = proxlvm::metrics::rlca_mse(
                    &est.theta,
                    &truth_params.theta,
                    &est.nu,
                    &truth_params.nu,
                )
                .unwrap();
                tv.push(t);
                nv.push(v);
            }
            println!(
                "seed {seed} N={n}: theta median {:.4} (range {:.4}..{:.4}) nu median {:.4} (range {:.4}..{:.4})",
                median(&tv),
                tv.iter().cloned().fold(f64::INFINITY, f64::min),
                tv.iter().cloned().fold(0.0f64, f64::max),
                median(&nv),
                nv.iter().cloned().fold(f64::INFINITY, f64::min),
                nv.iter().cloned().fold(0.0f64, f64::max),
            );
        }
    }
}
