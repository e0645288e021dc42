//! Scratch probe for acceptance parameter tuning (temporary).

use crossmix::data::{generate_synthetic, make_episode, EpisodeSplit, SyntheticSpec};
use crossmix::eval::{self, Direction};
use crossmix::trainer::{self, TrainConfig};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "noiseless".into());
    match mode.as_str() {
        "noiseless" => noiseless(),
        "inspect" => inspect(),
        "sweep" => sweep(),
        "scan" => scan(),
        "grid" => grid(),
        "diag" => diag(),
        other => eprintln!("unknown probe {other}"),
    }
}

/// Training diagnosis on the multi-peak benchmark: loss trace plus source
/// and target mAP.
fn diag() {
    let arg = |i: usize, default: f64| -> f64 {
        std::env::args()
            .nth(i)
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    let epochs = arg(2, 30.0) as u32;
    let lr = arg(3, 1e-4);
    let batch = arg(4, 8.0) as usize;
    let alpha = arg(5, 1.0);
    let tau = arg(6, 0.1);

    let seed = 1u64;
    let spec = SyntheticSpec {
        classes: 10,
        peaks_per_class: 3,
        samples_per_class: 30,
        latent_dim: 8,
        image_descriptors: 12,
        text_descriptors: 12,
        image_dim: 12,
        text_dim: 10,
        class_spread: 1.0,
        coupling_noise: 0.3,
        image_noise: 0.3,
        text_noise: 0.3,
        seed,
    };
    let records = generate_synthetic(&spec).unwrap();
    let config = TrainConfig {
        seed,
        stage1_epochs: epochs,
        stage2_epochs: epochs,
        learning_rate: lr,
        batch_size: batch,
        alpha,
        temperature: tau,
        ..TrainConfig::default()
    };
    let split = make_episode(&records, seed, 0, 0.5).unwrap();
    let source: Vec<_> = records
        .iter()
        .filter(|r| split.is_source_class(r.label))
        .cloned()
        .collect();
    let (state, metrics) = trainer::train(&config, &source).unwrap();
    for m in metrics.iter().step_by((epochs as usize / 5).max(1)) {
        println!(
            "epoch {:3} stage {}: ence {:.4}/{:.4} cross {:.4} rdp {:.4} total {:.4}",
            m.epoch, m.stage, m.ence_image, m.ence_text, m.cross, m.rdp, m.total
        );
    }
    let last = metrics.last().unwrap();
    println!(
        "final: ence {:.4}/{:.4} cross {:.4} rdp {:.4} total {:.4}",
        last.ence_image, last.ence_text, last.cross, last.rdp, last.total
    );

    // Source-domain retrieval: swap the class roles.
    let source_eval = EpisodeSplit {
        source_classes: split.target_classes.clone(),
        target_classes: split.source_classes.clone(),
        k: 0,
        support: vec![],
        queries: split
            .source_classes
            .iter()
            .map(|&c| {
                (
                    c,
                    records
                        .iter()
                        .filter(|r| r.label == c)
                        .map(|r| r.id)
                        .collect(),
                )
            })
            .collect(),
    };
    for (name, ep) in [("source", &source_eval), ("target", &split)] {
        let i2t = eval::evaluate(&state, &records, ep, Direction::ImageToText).unwrap();
        let t2i = eval::evaluate(&state, &records, ep, Direction::TextToImage).unwrap();
        println!(
            "{name}: I2T {:.4} T2I {:.4} Avg {:.4}",
            i2t.map,
            t2i.map,
            (i2t.map + t2i.map) / 2.0
        );
    }
}

/// Ablation grid on the multi-peak benchmark.
fn grid() {
    let arg = |i: usize, default: f64| -> f64 {
        std::env::args()
            .nth(i)
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    let noise = arg(2, 0.3);
    let coupling = arg(3, 0.3);
    let spc = arg(4, 30.0) as usize;
    let finetune_epochs = arg(5, 200.0) as u32;
    let alpha = arg(6, 20.0);
    let tau = arg(7, 0.5);
    let lr = arg(8, 1e-3);
    let epochs = arg(9, 100.0) as u32;
    let lambda = arg(10, 1.0);
    let class_spread = arg(11, 0.0);

    let mut results: Vec<(u64, Vec<f64>)> = Vec::new();
    let started = std::time::Instant::now();
    for seed in 1..=5u64 {
        let spec = SyntheticSpec {
            classes: 10,
            peaks_per_class: 3,
            samples_per_class: spc,
            latent_dim: 8,
            image_descriptors: 12,
            text_descriptors: 12,
            image_dim: 12,
            text_dim: 10,
            class_spread,
            coupling_noise: coupling,
            image_noise: noise,
            text_noise: noise,
            seed,
        };
        let records = generate_synthetic(&spec).unwrap();
        let mut row = Vec::new();
        for variant in ["full", "no-gmm", "no-rdp"] {
            let mut config = TrainConfig {
                seed,
                finetune_epochs,
                alpha,
                temperature: tau,
                learning_rate: lr,
                stage1_epochs: epochs,
                stage2_epochs: epochs,
                lambda,
                ..TrainConfig::default()
            };
            match variant {
                "no-gmm" => config.disable_gmm = true,
                "no-rdp" => config.lambda = 0.0,
                _ => {}
            }
            let class_split = make_episode(&records, seed, 0, 0.5).unwrap();
            let source: Vec<_> = records
                .iter()
                .filter(|r| class_split.is_source_class(r.label))
                .cloned()
                .collect();
            let (state, _) = trainer::train(&config, &source).unwrap();
            for k in [0usize, 3] {
                let split = make_episode(&records, seed, k, 0.5).unwrap();
                let mut st = state.clone();
                if k > 0 {
                    trainer::finetune(&mut st, &records, &split).unwrap();
                }
                let i2t = eval::evaluate(&st, &records, &split, Direction::ImageToText).unwrap();
                let t2i = eval::evaluate(&st, &records, &split, Direction::TextToImage).unwrap();
                row.push((i2t.map + t2i.map) / 2.0);
            }
        }
        println!(
            "seed {seed}: full k0 {:.4} k3 {:.4} | no-gmm k0 {:.4} k3 {:.4} | no-rdp k0 {:.4} k3 {:.4}",
            row[0], row[1], row[2], row[3], row[4], row[5]
        );
        results.push((seed, row));
    }
    let mean = |idx: usize| -> f64 {
        results.iter().map(|(_, r)| r[idx]).sum::<f64>() / results.len() as f64
    };
    let wins = |a: usize, b: usize| -> usize {
        results.iter().filter(|(_, r)| r[a] > r[b]).count()
    };
    println!(
        "means: full k0 {:.4} k3 {:.4} | no-gmm k0 {:.4} k3 {:.4} | no-rdp k0 {:.4} k3 {:.4}",
        mean(0), mean(1), mean(2), mean(3), mean(4), mean(5)
    );
    println!(
        "wins vs no-gmm: k0 {}/5 k3 {}/5 | vs no-rdp: k0 {}/5 k3 {}/5 | k3>=k0(full): {}/5",
        wins(0, 2), wins(1, 3), wins(0, 4), wins(1, 5),
        results.iter().filter(|(_, r)| r[1] >= r[0]).count()
    );
    println!("grid wall time {:.1}s", started.elapsed().as_secs_f64());
}

/// Scan candidate sanity instances and report pass margins.
fn scan() {
    for latent in [2usize, 3] {
        for batch in [4usize, 8] {
            for data_seed in 0..10u64 {
                let spec = SyntheticSpec {
                    classes: 4,
                    peaks_per_class: 1,
                    samples_per_class: 200,
                    latent_dim: latent,
                    image_descriptors: 6,
                    text_descriptors: 6,
                    image_dim: 8,
                    text_dim: 7,
                    class_spread: 1.0,
                    coupling_noise: 0.0,
                    image_noise: 0.0,
                    text_noise: 0.0,
                    seed: data_seed,
                };
                let records = generate_synthetic(&spec).unwrap();
                let config = TrainConfig {
                    batch_size: batch,
                    ..TrainConfig::default()
                };
                let split = make_episode(&records, config.seed, 0, 0.5).unwrap();
                let source: Vec<_> = records
                    .iter()
                    .filter(|r| split.is_source_class(r.label))
                    .cloned()
                    .collect();
                let (state, _) = trainer::train(&config, &source).unwrap();
                let i2t =
                    eval::evaluate(&state, &records, &split, Direction::ImageToText).unwrap();
                let t2i =
                    eval::evaluate(&state, &records, &split, Direction::TextToImage).unwrap();

                // Margin: min over target classes of (matched cross-modal
                // cosine - best mismatched cosine).
                let mut reps = Vec::new();
                for &class in &split.target_classes {
                    let rec = records.iter().find(|r| r.label == class).unwrap();
                    reps.push(trainer::embed(&state, rec).unwrap());
                }
                let mut margin = f64::INFINITY;
                for a in &reps {
                    for (b_idx, b) in reps.iter().enumerate() {
                        for (c_idx, c) in reps.iter().enumerate() {
                            if b_idx == c_idx {
                                continue;
                            }
                            for (q, m, o) in [
                                (&a.image.vector, &b.text.vector, &c.text.vector),
                                (&a.text.vector, &b.image.vector, &c.image.vector),
                            ] {
                                if b.label == a.label && c.label != a.label {
                                    let matched = crossmix::kernel::tensor::cosine(q, m);
                                    let other = crossmix::kernel::tensor::cosine(q, o);
                                    margin = margin.min(matched - other);
                                }
                            }
                        }
                    }
                }
                println!(
                    "latent={latent} batch={batch} data_seed={data_seed}: I2T {:.4} T2I {:.4} margin {margin:+.3}",
                    i2t.map, t2i.map
                );
            }
        }
    }
}

/// Sweep instance geometry for the noiseless sanity run.
fn sweep() {
    for (latent, spc, batch) in [
        (2usize, 100usize, 8usize),
        (2, 100, 32),
        (2, 200, 4),
        (2, 400, 16),
        (3, 200, 8),
        (4, 200, 8),
    ] {
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..5u64 {
            let spec = SyntheticSpec {
                classes: 4,
                peaks_per_class: 1,
                samples_per_class: spc,
                latent_dim: latent,
                image_descriptors: 6,
                text_descriptors: 6,
                image_dim: 8,
                text_dim: 7,
                class_spread: 1.0,
                coupling_noise: 0.0,
                image_noise: 0.0,
                text_noise: 0.0,
                seed,
            };
            let records = generate_synthetic(&spec).unwrap();
            let config = TrainConfig {
                seed,
                batch_size: batch,
                ..TrainConfig::default()
            };
            let split = make_episode(&records, seed, 0, 0.5).unwrap();
            let source: Vec<_> = records
                .iter()
                .filter(|r| split.is_source_class(r.label))
                .cloned()
                .collect();
            let (state, _) = trainer::train(&config, &source).unwrap();
            for direction in [Direction::ImageToText, Direction::TextToImage] {
                let report = eval::evaluate(&state, &records, &split, direction).unwrap();
                total += 1;
                if report.map == 1.0 {
                    hits += 1;
                }
            }
        }
        println!("latent={latent} spc={spc} batch={batch}: {hits}/{total} perfect");
    }
}

/// Print the class-level cross-modal similarity structure after training.
fn inspect() {
    for seed in 0..4u64 {
        let spec = SyntheticSpec {
            classes: 4,
            peaks_per_class: 1,
            samples_per_class: 50,
            latent_dim: 2,
            image_descriptors: 6,
            text_descriptors: 6,
            image_dim: 8,
            text_dim: 7,
            class_spread: 1.0,
            coupling_noise: 0.0,
            image_noise: 0.0,
            text_noise: 0.0,
            seed,
        };
        let records = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let split = make_episode(&records, seed, 0, 0.5).unwrap();
        let source: Vec<_> = records
            .iter()
            .filter(|r| split.is_source_class(r.label))
            .cloned()
            .collect();
        let (state, _) = trainer::train(&config, &source).unwrap();

        // One representative per class (all samples identical).
        let mut reps = Vec::new();
        for class in 0..4 {
            let rec = records.iter().find(|r| r.label == class).unwrap();
            reps.push(trainer::embed(&state, rec).unwrap());
        }
        println!(
            "seed {seed}: source {:?} target {:?}",
            split.source_classes, split.target_classes
        );
        println!("  image x text class cosine matrix:");
        for image_rep in &reps {
            let row: Vec<String> = reps
                .iter()
                .map(|text_rep| {
                    format!(
                        "{:+.3}",
                        crossmix::kernel::tensor::cosine(
                            &image_rep.image.vector,
                            &text_rep.text.vector
                        )
                    )
                })
                .collect();
            println!("    {}", row.join(" "));
        }
        println!("  image x image:");
        for a in &reps {
            let row: Vec<String> = reps
                .iter()
                .map(|b| {
                    format!(
                        "{:+.3}",
                        crossmix::kernel::tensor::cosine(&a.image.vector, &b.image.vector)
                    )
                })
                .collect();
            println!("    {}", row.join(" "));
        }
    }
}

fn noiseless() {
    let spc: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    for seed in 0..5u64 {
        let spec = SyntheticSpec {
            classes: 4,
            peaks_per_class: 1,
            samples_per_class: spc,
            latent_dim: 2,
            image_descriptors: 6,
            text_descriptors: 6,
            image_dim: 8,
            text_dim: 7,
            class_spread: 1.0,
            coupling_noise: 0.0,
            image_noise: 0.0,
            text_noise: 0.0,
            seed,
        };
        let records = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let split = make_episode(&records, seed, 0, 0.5).unwrap();
        let source: Vec<_> = records
            .iter()
            .filter(|r| split.is_source_class(r.label))
            .cloned()
            .collect();
        let start = std::time::Instant::now();
        let (state, metrics) = trainer::train(&config, &source).unwrap();
        let i2t = eval::evaluate(&state, &records, &split, Direction::ImageToText).unwrap();
        let t2i = eval::evaluate(&state, &records, &split, Direction::TextToImage).unwrap();
        println!(
            "seed {seed}: I2T {:.4} T2I {:.4} | loss {:.4} -> {:.4} | {:.1}s",
            i2t.map,
            t2i.map,
            metrics.first().map(|m| m.total).unwrap_or(f64::NAN),
            metrics.last().map(|m| m.total).unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    }
}
