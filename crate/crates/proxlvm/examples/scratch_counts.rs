// Temporary: verify generated class frequencies.
use proxlvm::study::{simulate_replication, study_truth, StudyConfig, StudyId, StudyTruth};

fn main() {
    let config = StudyConfig {
        n: Some(4000),
        master_seed: 2024,
        ..StudyConfig::new(StudyId::III)
    };
    let truth = study_truth(&config);
    if let StudyTruth::Rlca(p) = &truth {
        assert!(p.nu.iter().all(|&v| v == 0.0));
    }
    for rep in 0..3 {
        let data = simulate_replication(&config, &truth, rep);
        let classes = data.latent_classes.clone().unwrap();
        let mut counts = vec![0usize; 16];
        for &c in &classes {
            counts[c as usize] += 1;
        }
        // Implied nu from raw counts (log count ratio to class 0).
        let nu_hat: Vec<f64> = counts
            .iter()
            .map(|&c| ((c as f64) / (counts[0] as f64)).ln())
            .collect();
        let mse: f64 =
            nu_hat[1..].iter().map(|v| v * v).sum::<f64>() / 15.0;
        println!("rep {rep}: counts {counts:?}");
        println!("  count-implied nu-MSE vs 0: {mse:.4}");
    }
}
