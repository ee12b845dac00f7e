//! The three top-level workflows behind the command-line interface:
//! verify (run the property suites), train (the ablation protocol: one
//! run per seed, CSVs and checkpoints out), and count (static cost
//! accounting of an architecture descriptor).

use std::fs;
use std::path::{Path, PathBuf};

use crate::archs;
use crate::checkpoint::save_network;
use crate::config::ExperimentConfig;
use crate::costmodel::{count_model, ArchDescriptor, CostReport};
use crate::data::{load_mnist_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{build_mnist_toy, evaluate, train, RunHistory};
use crate::verify::{self, SuiteResult};

/// Run the property suites, optionally a single one by name.
pub fn run_verify(filter: Option<&str>) -> (Vec<SuiteResult>, bool) {
    verify::run(filter)
}

pub enum ArchSource<'a> {
    Builtin(&'a str),
    DescriptorPath(&'a Path),
}

/// Count parameters/multiplies/adds for an architecture at a square input
/// size, optionally writing the CSV report.
pub fn run_count(src: ArchSource, input_size: usize, out: Option<&Path>) -> Result<CostReport> {
    let arch: ArchDescriptor = match src {
        ArchSource::Builtin(name) => archs::builtin(name)?,
        ArchSource::DescriptorPath(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        }
    };
    // The toy net is defined on 28x28 inputs regardless of the flag.
    let hw = if arch.name.starts_with("mnist-toy") { (28, 28) } else { (input_size, input_size) };
    let report = count_model(&arch, hw)?;
    if let Some(path) = out {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub history: RunHistory,
    /// Error on the full test split after the final epoch.
    pub final_test_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub per_seed: Vec<SeedOutcome>,
    pub mean_error: f64,
    pub std_error: f64,
}

pub fn mnist_paths(data_dir: &Path) -> [PathBuf; 4] {
    [
        data_dir.join("train-images-idx3-ubyte"),
        data_dir.join("train-labels-idx1-ubyte"),
        data_dir.join("t10k-images-idx3-ubyte"),
        data_dir.join("t10k-labels-idx1-ubyte"),
    ]
}

/// Load the MNIST IDX pair from a data directory (the UGCONV_DATA_DIR
/// contract of the CLI).
pub fn load_mnist_dir(data_dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let [ti, tl, ei, el] = mnist_paths(data_dir);
    for p in [&ti, &tl, &ei, &el] {
        if !p.exists() {
            return Err(Error::Data(format!(
                "missing dataset file {} (set UGCONV_DATA_DIR or run docs/fetch-mnist.sh)",
                p.display()
            )));
        }
    }
    Ok((load_mnist_idx(&ti, &tl)?, load_mnist_idx(&ei, &el)?))
}

/// The training workflow against the on-disk dataset.
pub fn run_train(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let (train_ds, test_ds) = load_mnist_dir(data_dir)?;
    run_train_on(cfg, &train_ds, &test_ds, out_dir)
}

/// The training workflow with datasets supplied by the caller (tests,
/// smoke runs). Datasets arrive with pixels in [0, 1]; normalization and
/// subsetting follow the config.
pub fn run_train_on(
    cfg: &ExperimentConfig,
    train_full: &LabeledDataset,
    test_full: &LabeledDataset,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let row = cfg.table2_row()?;
    let settings = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("train workflow needs train settings".into()))?;

    let mut train_ds = match settings.train_subset {
        Some(n) => train_full.take(n.min(train_full.len()))?,
        None => train_full.clone(),
    };
    let mut test_eval = match settings.eval_subset {
        Some(n) => test_full.take(n.min(test_full.len()))?,
        None => test_full.clone(),
    };
    let mut test_ds = test_full.clone();
    for ds in [&mut train_ds, &mut test_eval, &mut test_ds] {
        ds.normalize(settings.input_mean, settings.input_std);
    }

    fs::create_dir_all(out_dir)?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut net = build_mnist_toy::<f64>(&row, seed)?;
        let history = if settings.epochs == 0 {
            RunHistory { epochs: vec![], final_test_error: 1.0 }
        } else {
            let tc = settings.to_train_config(seed);
            train(&mut net, &train_ds, &test_eval, &tc)?
        };
        let final_test_error = evaluate(&mut net, &test_ds)?;

        let mut csv = String::from("epoch,train_loss,test_error,wall_seconds\n");
        for e in &history.epochs {
            csv.push_str(&format!(
                "{},{:.6},{:.4},{:.3}\n",
                e.epoch, e.train_loss, e.test_error, e.wall_seconds
            ));
        }
        write_atomic(&out_dir.join(format!("seed{seed}.csv")), csv.as_bytes())?;
        save_network(&net, &out_dir.join(format!("seed{seed}.ugck")))?;
        per_seed.push(SeedOutcome { seed, history, final_test_error });
    }

    let n = per_seed.len() as f64;
    let mean_error = per_seed.iter().map(|o| o.final_test_error).sum::<f64>() / n;
    let std_error = if per_seed.len() > 1 {
        (per_seed.iter().map(|o| (o.final_test_error - mean_error).powi(2)).sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };

    let mut csv = String::from("seed,final_test_error\n");
    for o in &per_seed {
        csv.push_str(&format!("{},{:.4}\n", o.seed, o.final_test_error));
    }
    csv.push_str(&format!("mean,{mean_error:.4}\nstd,{std_error:.4}\n"));
    write_atomic(&out_dir.join("summary.csv"), csv.as_bytes())?;

    Ok(TrainSummary { per_seed, mean_error, std_error })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    #[test]
    fn count_builtin_and_missing() {
        let report = run_count(ArchSource::Builtin("shufflenet-x025-g8"), 224, None).unwrap();
        assert_eq!(report.totals().params, 444_480);
        assert!(run_count(ArchSource::Builtin("nonesuch"), 224, None).is_err());
    }

    #[test]
    fn count_descriptor_file_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let arch = crate::archs::resnet18_grouped(8);
        let path = dir.path().join("arch.json");
        std::fs::write(&path, serde_json::to_string_pretty(&arch).unwrap()).unwrap();
        let report = run_count(ArchSource::DescriptorPath(&path), 224, None).unwrap();
        assert_eq!(report.totals().fpmuls, 329_957_376);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{ not json").unwrap();
        let err = run_count(ArchSource::DescriptorPath(&bad), 224, None).unwrap_err();
        assert!(err.to_string().contains("bad.json"), "{err}");
    }

    #[test]
    fn epochs_zero_is_evaluation_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = crate::config::preset("table2-row1-none").unwrap();
        cfg.seeds = vec![1];
        if let Some(t) = cfg.train.as_mut() {
            t.epochs = 0;
            t.train_subset = Some(16);
            t.eval_subset = Some(16);
        }
        let summary = run_train_on(
            &cfg,
            &synthetic_dataset(32, 1),
            &synthetic_dataset(32, 2),
            dir.path(),
        )
        .unwrap();
        assert!(summary.per_seed[0].history.epochs.is_empty());
        assert!((0.0..=1.0).contains(&summary.per_seed[0].final_test_error));
    }

    #[test]
    fn missing_data_dir_is_reported() {
        let err = load_mnist_dir(Path::new("/nonexistent-ugconv-data")).unwrap_err();
        assert!(err.to_string().contains("missing dataset file"));
    }
}
