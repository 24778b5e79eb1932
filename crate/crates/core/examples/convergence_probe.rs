//! Throwaway probe: can a small model drive full-grid TV below 0.05 on the
//! side-3 coupled binary distribution with fully sequential sampling?
//!
//! Prints the exact conditional-entropy loss floor (by enumeration) and the
//! expected TV of a PERFECT sampler at the evaluation sample count, so the
//! trained model's numbers have context.

use std::collections::HashMap;

use checkerboard_core::experiment::{run_experiment, ExperimentConfig};
use checkerboard_core::model::ModelConfig;
use checkerboard_core::optim::AdamWConfig;
use checkerboard_core::oracle::{enumerate_exact, GridDistribution};
use checkerboard_core::resample::{multiscale_codes, TokenGrid};
use checkerboard_core::sampler::SamplerConfig;
use checkerboard_core::schedule::RatioTag;
use checkerboard_core::train::{layout_bundle, TrainConfig};

/// All (sequence, probability) rows for one class under the P=1 layout.
fn class_rows(
    model: &ModelConfig,
    dist: &GridDistribution,
    class: usize,
) -> Vec<(Vec<usize>, f64)> {
    let bundle = layout_bundle(model, 1).unwrap();
    let sizes = bundle.layout.sizes.clone();
    let table = enumerate_exact(dist, class).unwrap();
    let mut rows = Vec::new();
    for (state, &p) in table.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let fine = TokenGrid::new(dist.side(), table.tokens_of(state)).unwrap();
        let grids = multiscale_codes(&fine, &sizes, dist.vocab()).unwrap();
        let seq: Vec<usize> = bundle
            .meta
            .tokens
            .iter()
            .map(|tm| {
                let (s, cell) = tm.target;
                grids[s].tokens[cell]
            })
            .collect();
        rows.push((seq, p));
    }
    rows
}

/// Mean conditional entropy per predicted slot, conditioning each slot on
/// every earlier block (exactly the information a P=1 model may use).
fn floor_of(model: &ModelConfig, vocab: usize, rows: &[(Vec<usize>, f64)]) -> f64 {
    let bundle = layout_bundle(model, 1).unwrap();
    let block_ids = &bundle.layout.block_ids;
    let t = bundle.layout.seq_len;
    let mut total = 0.0;
    for i in 0..t - 1 {
        let bid = block_ids[i + 1];
        let prefix_len = (1..t).take_while(|&j| block_ids[j] < bid).count();
        let mut groups: HashMap<&[usize], Vec<f64>> = HashMap::new();
        for (seq, p) in rows {
            let slot = groups
                .entry(&seq[..prefix_len])
                .or_insert_with(|| vec![0.0; vocab]);
            slot[seq[i]] += p;
        }
        for masses in groups.values() {
            let z: f64 = masses.iter().sum();
            for &m in masses {
                if m > 0.0 {
                    total -= m * (m / z).ln();
                }
            }
        }
    }
    total / (t - 1) as f64
}

/// Expected TV between the exact table and an n-sample empirical estimate.
fn sampling_noise_floor(dist: &GridDistribution, class: usize, n: usize) -> f64 {
    let table = enumerate_exact(dist, class).unwrap();
    table
        .probs
        .iter()
        .map(|&p| (p * (1.0 - p) / (2.0 * std::f64::consts::PI * n as f64)).sqrt())
        .sum::<f64>()
}

fn main() {
    let config = ExperimentConfig {
        name: "probe_side3_sequential".to_string(),
        model: ModelConfig {
            layers: 2,
            dim: 32,
            heads: 4,
            vocab: 2,
            classes: 2,
            embed_dim: 12,
            mlp_factor: 3,
            mix_layers: 1,
            ratio: RatioTag::X2,
            side: 3,
        },
        train: TrainConfig {
            steps: 300_000,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            lr_final: Some(1e-5),
            parallelism_candidates: vec![1],
            label_dropout: 0.1,
            seed: 7,
            log_every: 20_000,
        },
        sampler: SamplerConfig {
            parallelism: 1,
            cfg_scale: 1.0,
            cfg_warmup_steps: Some(0),
            temperature: 1.0,
            seed: 11,
        },
        distribution: GridDistribution::coupled_binary(3, 0.5, 0.4, 2),
        train_examples: 262_144,
        eval_samples: 100_000,
        data_seed: 5,
        gibbs: None,
        checkpoint_every: 0,
    };

    let dist = &config.distribution;
    let classes = dist.classes();
    let rows: Vec<_> = (0..classes)
        .map(|c| class_rows(&config.model, dist, c))
        .collect();
    let class_floors: Vec<f64> = rows
        .iter()
        .map(|r| floor_of(&config.model, dist.vocab(), r))
        .collect();
    let mixture: Vec<(Vec<usize>, f64)> = rows
        .iter()
        .flatten()
        .map(|(s, p)| (s.clone(), p / classes as f64))
        .collect();
    let null_floor = floor_of(&config.model, dist.vocab(), &mixture);
    let mean_floor = class_floors.iter().sum::<f64>() / classes as f64;
    let drop = config.train.label_dropout;
    println!("class floors:      {class_floors:?}");
    println!("null-label floor:  {null_floor:.6}");
    println!(
        "train-loss floor:  {:.6}  (dropout-weighted)",
        (1.0 - drop) * mean_floor + drop * null_floor
    );
    for class in 0..classes {
        println!(
            "sampling noise (class {class}, n={}): {:.4}",
            config.eval_samples,
            sampling_noise_floor(dist, class, config.eval_samples)
        );
    }

    let dir = std::env::temp_dir().join("checkerboard_probe_side3");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create run directory");

    let start = std::time::Instant::now();
    let report = run_experiment(&config, &dir).expect("experiment run");
    let elapsed = start.elapsed();

    println!("elapsed:    {:.1}s", elapsed.as_secs_f64());
    println!("final loss: {:.6}", report.final_loss);
    for class in &report.per_class {
        println!(
            "class {}: full-grid TV {:.4} | patch TV {:.4} | ci {:.4}",
            class.class,
            class.full_grid_tv.unwrap_or(f64::NAN),
            class.patch_tv,
            class.ci_half_width
        );
    }
}
