//! Reproducible end-to-end runs: dataset generation, training, sampling,
//! evaluation against the synthetic oracle, and plot-data emission.
//!
//! A run writes every artifact into one directory — scan order, mask
//! summary, loss curve, checkpoints, sampled grids, entropy aggregates, an
//! evaluation report — and finishes with a manifest listing each file's
//! SHA-256. Artifacts carry no timestamps, so a rerun with the same config
//! and seeds reproduces every byte, and the manifest doubles as an
//! integrity check. Stages whose artifacts already exist are skipped,
//! which makes interrupted runs resumable; a run directory holding a
//! different config is refused.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TrainingBatch};
use crate::oracle::{
    binomial_ci_half_width, enumerate_exact, mean_patch_tv, sample_direct, sample_exact,
    sample_gibbs, tv_estimate, DistributionEstimate, GibbsConfig, GridDistribution,
    PatchMarginals,
};
use crate::order::scan_order;
use crate::resample::{multiscale_codes, TokenGrid};
use crate::sampler::{entropy_csv, entropy_trace, Sampler, SamplerConfig};
use crate::train::{layout_bundle, loss_csv, train_from, TrainConfig};

/// Complete description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Run name, echoed into the report (the CLI also uses it as the
    /// directory name).
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub distribution: GridDistribution,
    /// Training-set size (examples cycle through the classes evenly).
    pub train_examples: usize,
    /// Generated samples per class for evaluation.
    pub eval_samples: usize,
    /// Seed for dataset generation (training and sampling seeds live in
    /// their own configs).
    pub data_seed: u64,
    /// Gibbs settings for coupled references beyond exact enumeration.
    #[serde(default)]
    pub gibbs: Option<GibbsConfig>,
    /// Write `ckpt_{step}.ckbd` every this many steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distribution.validate()?;
        if self.model.side != self.distribution.side() {
            return Err(Error::invalid_argument(format!(
                "model side {} does not match distribution side {}",
                self.model.side,
                self.distribution.side()
            )));
        }
        if self.model.vocab != self.distribution.vocab() {
            return Err(Error::invalid_argument(format!(
                "model vocabulary {} does not match distribution vocabulary {}",
                self.model.vocab,
                self.distribution.vocab()
            )));
        }
        if self.model.classes != self.distribution.classes() {
            return Err(Error::invalid_argument(format!(
                "model classes {} do not match distribution classes {}",
                self.model.classes,
                self.distribution.classes()
            )));
        }
        if self.train_examples == 0 || self.eval_samples == 0 {
            return Err(Error::invalid_argument(
                "training examples and evaluation samples must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-class evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    /// Full-grid TV against exact enumeration, when the state space allows.
    pub full_grid_tv: Option<f64>,
    /// Mean TV over all overlapping 2×2 patch marginals.
    pub patch_tv: f64,
    /// Conservative 95% half-width for proportions at this sample count.
    pub ci_half_width: f64,
    /// Where the reference came from: exact enumeration, an exact factored
    /// form, or Gibbs sampling.
    pub reference: String,
}

/// Evaluation summary written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub ratio: String,
    pub side: usize,
    pub parallelism: usize,
    pub total_steps: usize,
    pub steps_per_scale: Vec<usize>,
    pub cfg_scale: f64,
    pub warmup_steps: usize,
    pub eval_samples: usize,
    pub final_loss: f64,
    pub per_class: Vec<ClassReport>,
    pub mean_full_grid_tv: Option<f64>,
    pub mean_patch_tv: f64,
}

/// Draw class-conditional ground-truth grids: exact inverse-CDF where the
/// state space is enumerable, exact direct sampling for factorable kinds,
/// Gibbs sweeps otherwise.
pub fn ground_truth_samples(
    dist: &GridDistribution,
    class: usize,
    rng: &mut ChaCha8Rng,
    n: usize,
    gibbs: Option<GibbsConfig>,
) -> Result<Vec<TokenGrid>> {
    if dist.state_count().is_some() {
        let table = enumerate_exact(dist, class)?;
        return Ok(sample_exact(&table, rng, n));
    }
    match dist {
        GridDistribution::Coupled { .. } => {
            sample_gibbs(dist, class, rng, n, gibbs.unwrap_or_default())
        }
        _ => sample_direct(dist, class, rng, n),
    }
}

/// Build the training set: grids cycle through classes evenly, each fine
/// grid expanded to per-scale codes by majority-vote downsampling.
pub fn generate_dataset(config: &ExperimentConfig) -> Result<Vec<TrainingBatch>> {
    config.validate()?;
    let dist = &config.distribution;
    let classes = dist.classes();
    let sizes = config.model.schedule()?.sizes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    let mut batches = Vec::with_capacity(config.train_examples);
    for class in 0..classes {
        let share = config.train_examples / classes
            + usize::from(class < config.train_examples % classes);
        let fines = ground_truth_samples(dist, class, &mut rng, share, config.gibbs)?;
        for fine in fines {
            let grids = multiscale_codes(&fine, &sizes, dist.vocab())?;
            batches.push(TrainingBatch { label: class, grids });
        }
    }
    Ok(batches)
}

fn write_if_absent(path: &Path, bytes: &[u8]) -> Result<bool> {
    if path.exists() {
        return Ok(false);
    }
    fs::write(path, bytes)?;
    Ok(true)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// Hash every artifact in a run directory (except the manifest itself)
/// into path-sorted manifest rows.
pub fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, ManifestEntry>> {
    let mut entries = BTreeMap::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    for path in paths {
        if !path.is_file() {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid_state("artifact name is not valid UTF-8"))?
            .to_string();
        if name == "manifest.json" {
            continue;
        }
        let bytes = fs::read(&path)?;
        entries.insert(
            name,
            ManifestEntry { sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 },
        );
    }
    Ok(entries)
}

fn to_pretty(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Scan-order artifact: the generation-time permutation of the final grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct OrderArtifact {
    side: usize,
    /// `positions[i] = [x, y]` of the cell generated at rank `i`.
    positions: Vec<[usize; 2]>,
}

/// Mask artifact: block ids fully determine the visibility relation
/// (a query sees every key whose block id is not larger).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct MaskArtifact {
    seq_len: usize,
    block_ids: Vec<usize>,
    block_ends: Vec<usize>,
}

/// Run the staging and training stages into `dir`: resolved config, scan
/// order, mask, loss CSV, and the final checkpoint. Existing artifacts are
/// reused, so a finished directory loads instead of retraining. Returns the
/// trained parameters and final loss.
pub fn run_training(config: &ExperimentConfig, dir: &Path) -> Result<(ModelParams<f64>, f64)> {
    config.validate()?;
    fs::create_dir_all(dir)?;

    // Stage 0: the directory is either fresh or holds this exact config.
    let config_path = dir.join("config.json");
    if config_path.exists() {
        let stored: ExperimentConfig = serde_json::from_slice(&fs::read(&config_path)?)?;
        if stored != *config {
            return Err(Error::invalid_state(format!(
                "run directory {} holds a different config; refusing to mix artifacts",
                dir.display()
            )));
        }
    } else {
        fs::write(&config_path, to_pretty(config)?)?;
    }

    // Stage 1: scan order of the final grid.
    let order = scan_order(config.model.side, config.model.side)?;
    write_if_absent(
        &dir.join("order.json"),
        &to_pretty(&OrderArtifact {
            side: config.model.side,
            positions: order.positions.iter().map(|p| [p.x, p.y]).collect(),
        })?,
    )?;

    // Stage 2: the block-causal mask of the evaluation layout.
    let bundle = layout_bundle(&config.model, config.sampler.parallelism)?;
    write_if_absent(
        &dir.join("mask.json"),
        &to_pretty(&MaskArtifact {
            seq_len: bundle.layout.seq_len,
            block_ids: bundle.layout.block_ids.clone(),
            block_ends: bundle.mask.block_ends.clone(),
        })?,
    )?;

    // Stage 3: training (skipped wholesale when its artifacts exist).
    let ckpt_path = dir.join("model.ckbd");
    let loss_path = dir.join("loss.csv");
    let (params, final_loss): (ModelParams<f64>, f64) =
        if ckpt_path.exists() && loss_path.exists() {
            let params = checkpoint::load(&ckpt_path)?;
            let final_loss = read_final_loss(&loss_path)?;
            (params, final_loss)
        } else {
            let dataset = generate_dataset(config)?;
            let every = config.checkpoint_every;
            let mut save_periodic = |step: usize, p: &ModelParams<f64>| {
                checkpoint::save(p, dir.join(format!("ckpt_{step}.ckbd")))
            };
            let hook: Option<(usize, &mut dyn FnMut(usize, &ModelParams<f64>) -> Result<()>)> =
                if every > 0 { Some((every, &mut save_periodic)) } else { None };
            let init = ModelParams::init(&config.model, config.train.seed)?;
            let out = train_from(init, &dataset, &config.train, hook)?;
            fs::write(&loss_path, loss_csv(&out.loss_rows))?;
            checkpoint::save(&out.params, &ckpt_path)?;
            let final_loss = out.loss_rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
            (out.params, final_loss)
        };
    Ok((params, final_loss))
}

/// Run every stage into `dir` and return the evaluation report.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    let (params, final_loss) = run_training(config, dir)?;

    // Stage 4: sampling per class (each class skipped if already present).
    let sampler = Sampler::new(&params, config.sampler.clone())?;
    let classes = config.distribution.classes();
    let mut samples_per_class: Vec<Vec<TokenGrid>> = Vec::with_capacity(classes);
    for class in 0..classes {
        let samples_path = dir.join(format!("samples_class{class}.json"));
        let entropy_path = dir.join(format!("entropy_class{class}.csv"));
        if samples_path.exists() && entropy_path.exists() {
            samples_per_class.push(serde_json::from_slice(&fs::read(&samples_path)?)?);
            continue;
        }
        let (grids, traces) = sampler.sample_many(class, config.eval_samples)?;
        fs::write(&samples_path, serde_json::to_vec(&grids)?)?;
        fs::write(&entropy_path, entropy_csv(&entropy_trace(&traces)?))?;
        samples_per_class.push(grids);
    }

    // Stage 5: evaluation against the oracle.
    let report_path = dir.join("report.json");
    let report: RunReport = if report_path.exists() {
        serde_json::from_slice(&fs::read(&report_path)?)?
    } else {
        let report = evaluate(config, &sampler, &samples_per_class, final_loss)?;
        fs::write(&report_path, to_pretty(&report)?)?;
        report
    };

    // Stage 6: the manifest goes last so it covers everything above.
    let manifest = hash_artifacts(dir)?;
    fs::write(dir.join("manifest.json"), to_pretty(&manifest)?)?;
    Ok(report)
}

fn read_final_loss(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path)?;
    let last = text
        .lines()
        .filter(|l| !l.is_empty())
        .last()
        .ok_or_else(|| Error::invalid_state("loss CSV is empty"))?;
    let loss = last
        .split(',')
        .nth(1)
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| Error::invalid_state(format!("malformed loss row: {last}")))?;
    Ok(loss)
}

fn evaluate(
    config: &ExperimentConfig,
    sampler: &Sampler<'_, f64>,
    samples_per_class: &[Vec<TokenGrid>],
    final_loss: f64,
) -> Result<RunReport> {
    let dist = &config.distribution;
    let (side, vocab) = (dist.side(), dist.vocab());
    let enumerable = dist.state_count().is_some();
    let n = config.eval_samples;
    let mut per_class = Vec::with_capacity(samples_per_class.len());

    for (class, grids) in samples_per_class.iter().enumerate() {
        let (full_grid_tv, patch_tv, reference) = if enumerable {
            let table = enumerate_exact(dist, class)?;
            let est = DistributionEstimate::from_grids(grids, side, vocab)?;
            let full = tv_estimate(&est, &table)?;
            let patch = mean_patch_tv(
                &PatchMarginals::from_samples(grids, side, vocab)?,
                &PatchMarginals::from_table(&table)?,
            )?;
            (Some(full), patch, "exact enumeration".to_string())
        } else {
            let sampled = PatchMarginals::from_samples(grids, side, vocab)?;
            match dist {
                GridDistribution::Coupled { .. } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed ^ 0x9e3779b9);
                    let reference = sample_gibbs(
                        dist,
                        class,
                        &mut rng,
                        n,
                        config.gibbs.unwrap_or_default(),
                    )?;
                    let patch = mean_patch_tv(
                        &sampled,
                        &PatchMarginals::from_samples(&reference, side, vocab)?,
                    )?;
                    (None, patch, "Gibbs sampling".to_string())
                }
                _ => {
                    let patch =
                        mean_patch_tv(&sampled, &PatchMarginals::from_factored(dist, class)?)?;
                    (None, patch, "exact factored form".to_string())
                }
            }
        };
        per_class.push(ClassReport {
            class,
            full_grid_tv,
            patch_tv,
            ci_half_width: binomial_ci_half_width(n),
            reference,
        });
    }

    let mean_full_grid_tv = per_class
        .iter()
        .map(|c| c.full_grid_tv)
        .collect::<Option<Vec<f64>>>()
        .map(|tvs| tvs.iter().sum::<f64>() / tvs.len() as f64);
    let mean_patch = per_class.iter().map(|c| c.patch_tv).sum::<f64>() / per_class.len() as f64;
    let partition = &sampler.layout().partition;
    Ok(RunReport {
        name: config.name.clone(),
        ratio: config.model.ratio.to_string(),
        side: config.model.side,
        parallelism: config.sampler.parallelism,
        total_steps: sampler.total_steps(),
        steps_per_scale: partition.steps_per_scale.clone(),
        cfg_scale: config.sampler.cfg_scale,
        warmup_steps: sampler.warmup_steps(),
        eval_samples: n,
        final_loss,
        per_class,
        mean_full_grid_tv,
        mean_patch_tv: mean_patch,
    })
}

/// Gather `report.json` files from the run directories directly under
/// `runs_root`, sorted by directory name.
pub fn collect_reports(runs_root: &Path) -> Result<Vec<(String, RunReport)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs_root)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?;
    dirs.sort();
    let mut reports = Vec::new();
    for run_dir in dirs {
        let report_path = run_dir.join("report.json");
        if !report_path.is_file() {
            continue;
        }
        let report: RunReport = serde_json::from_slice(&fs::read(&report_path)?)?;
        let dir_name = run_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        reports.push((dir_name, report));
    }
    if reports.is_empty() {
        return Err(Error::invalid_argument(format!(
            "no report.json found under {}",
            runs_root.display()
        )));
    }
    Ok(reports)
}

/// Emit gnuplot-ready whitespace-separated data files summarizing every run
/// under `runs_root`: TV versus total steps and versus per-scale step count
/// (one block per schedule tag), and the entropy aggregates per step (one
/// block per run and class).
pub fn emit_plots(runs_root: &Path, out_dir: &Path) -> Result<()> {
    let reports = collect_reports(runs_root)?;
    fs::create_dir_all(out_dir)?;

    let tv_of = |r: &RunReport| r.mean_full_grid_tv.unwrap_or(r.mean_patch_tv);

    // Group runs by schedule tag, keeping directory order within groups.
    let mut tags: Vec<String> = Vec::new();
    for (_, r) in &reports {
        if !tags.contains(&r.ratio) {
            tags.push(r.ratio.clone());
        }
    }

    let mut by_total = String::from("# total_steps tv (one block per schedule tag)\n");
    let mut by_scale = String::from("# steps_per_scale tv (one block per schedule tag)\n");
    for tag in &tags {
        let mut rows: Vec<&RunReport> =
            reports.iter().map(|(_, r)| r).filter(|r| &r.ratio == tag).collect();
        let _ = writeln!(by_total, "# schedule {tag}");
        rows.sort_by_key(|r| r.total_steps);
        for r in &rows {
            let _ = writeln!(by_total, "{} {}", r.total_steps, tv_of(r));
        }
        by_total.push('\n');
        let _ = writeln!(by_scale, "# schedule {tag}");
        rows.sort_by_key(|r| r.parallelism);
        for r in &rows {
            let _ = writeln!(by_scale, "{} {}", r.parallelism, tv_of(r));
        }
        by_scale.push('\n');
    }
    fs::write(out_dir.join("tv_vs_total_steps.dat"), by_total)?;
    fs::write(out_dir.join("tv_vs_steps_per_scale.dat"), by_scale)?;

    let mut entropy = String::from("# step mean p25 p75 (one block per run and class)\n");
    for (dir_name, report) in &reports {
        for class in 0.. {
            let path = runs_root.join(dir_name).join(format!("entropy_class{class}.csv"));
            if !path.is_file() {
                break;
            }
            let _ = writeln!(entropy, "# run {} class {class}", report.name);
            let text = fs::read_to_string(&path)?;
            for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
                entropy.push_str(&line.replace(',', " "));
                entropy.push('\n');
            }
            entropy.push('\n');
        }
    }
    fs::write(out_dir.join("entropy_by_step.dat"), entropy)?;
    Ok(())
}
