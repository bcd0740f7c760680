//! The whole training pipeline at toy scale: pretraining, the alternating
//! policy/generator stage, evaluation and the ablations.
//!
//! Run with `cargo run --release --example train_pipeline`. The same steps
//! at desk scale are `rain simulate`, `rain train` and `rain evaluate`.

use rain::generator::PredictionMode;
use rain::kv::KvDoc;
use rain::pipeline::{evaluate_run, run_ablation, run_formal_training, run_pretraining, Ablation, Dataset, RunDir, TrainConfig};
use rain::sim::{generate_dataset, DatasetSizes, ParticleConfig};

fn main() -> rain::Result<()> {
    let root = std::env::temp_dir().join("rain_example_pipeline");
    let _ = std::fs::remove_dir_all(&root);
    let particles = ParticleConfig { total_steps: 16, history_steps: 8, future_steps: 8, ..ParticleConfig::default() };
    generate_dataset(&particles, DatasetSizes { train: 64, val: 16, test: 16 }, 1, root.join("data"))?;
    let data = Dataset::open(root.join("data"))?;

    // Configuration is a flat key=value document; unknown keys are rejected.
    let mut doc = KvDoc::new();
    for (k, v) in [
        ("seed", "3"),
        ("train.epochs", "6"),
        ("train.n_s", "2"),
        ("train.gmp_epochs", "5"),
        ("train.generator_epochs", "5"),
        ("train.rollouts_per_epoch", "8"),
        ("train.ddqn_updates_per_epoch", "20"),
        ("gmp.hidden", "16"),
        ("generator.hidden", "16"),
        ("generator.n_heads", "2"),
        ("rl.q_hidden", "32"),
        ("classifier.hidden", "32"),
        ("classifier.epochs", "20"),
    ] {
        doc.set(k, v);
    }
    let cfg = TrainConfig::from_kv(&doc, &data.handle.config)?;
    let run = RunDir::create(root.join("run"))?;
    cfg.to_kv().write(&run.config_path())?;

    let pre = run_pretraining(&data, &cfg, &run)?;
    let outcome = run_formal_training(&data, &pre, &cfg, &run, None)?;
    for r in &outcome.epochs {
        println!(
            "epoch {}: reward {:.3}, {} DDQN updates, finetune loss {:.4}, {:.1} edges kept",
            r.epoch, r.mean_reward, r.ddqn_updates, r.finetune_loss, r.mean_edges
        );
    }

    let summary = evaluate_run(&data, &cfg, &run, PredictionMode::Static)?;
    let rel = summary.relations.expect("policy graphs are scored");
    println!("\nhybrid: accuracy {:.3}, F1 {:.3}, mean edges {:.2}", rel.accuracy, rel.f1, summary.mean_edges);
    println!("final-step position MSE {:.5}", summary.mse_curve.last().unwrap());
    if let Some((ade, fde, mr)) = summary.displacement {
        println!("minADE {ade:.4}, minFDE {fde:.4}, miss rate {mr:.3}");
    }

    println!();
    for a in Ablation::ALL {
        let report = run_ablation(a, &data, &cfg, &run)?;
        let get = |k| report.get(k).unwrap_or("-").to_string();
        println!("{:<15} accuracy {:<20} mse.final {}", a.name(), get("relation.accuracy"), get("mse.final"));
    }
    println!("\nrun directory: {}", run.root.display());
    Ok(())
}
