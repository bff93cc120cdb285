// Temporary: confirmatory-study variant comparison at desk scale.

use proxlvm::study::{run_study, StudyConfig, StudyId, Variant};

fn main() {
    let cfg = StudyConfig {
        replications: Some(3),
        master_seed: 2024,
        ..StudyConfig::new(StudyId::I)
    };
    let started = std::time::Instant::now();
    let out = run_study(&cfg).unwrap();
    assert!(out.failures.is_empty(), "failures: {:?}", out.failures);
    for v in Variant::ALL {
        let name = v.name();
        let mse_a = out.metric_values(&format!("{name}.mse_loadings"));
        let mse_d = out.metric_values(&format!("{name}.mse_d"));
        let s12 = out.metric_values(&format!("{name}.mse_sigma12"));
        println!(
            "{name:8}: loadings {:?} med {:.2e} | d med {:.2e} | s12 med {:.2e} | total {:.1}s",
            mse_a.iter().map(|v| (v * 1e6).round() / 1e6).collect::<Vec<_>>(),
            proxlvm::numeric::median(&mse_a),
            proxlvm::numeric::median(&mse_d),
            proxlvm::numeric::median(&s12),
            out.total_seconds(name),
        );
    }
    println!("wall {:.1}s", started.elapsed().as_secs_f64());
}
