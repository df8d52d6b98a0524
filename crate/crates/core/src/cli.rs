//! Command-line entry point: synthesis, training, evaluation and experiment
//! sweeps driven by JSON config files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{apply_window, fit_normalizer, load_records, normalize, Dataset, Normalizer};
use crate::experiment::{
    modality_key, run_experiment, ExperimentConfig, ExperimentError, Featurizer,
};
use crate::models::ModelSpec;
use crate::synth::{synthesize, SynthConfig};
use crate::train::{evaluate_auc, pipeline, Example};
use crate::{ParameterStore, Real};

/// Exit code 1: usage or input error. Exit code 2: data-contract violation.
#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn contract(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::BadConfig(_) => CliError::usage(e.to_string()),
            _ => CliError::contract(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "ipfusion", about = "Sparse time-series and clinical-text fusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event file.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a trained model on an event file; prints `auc=<float>`.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full modality/hours/seed sweep and write report files.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Where the records come from: an event file or the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Events { path: PathBuf },
    Synthetic { seed: u64, config: SynthConfig },
}

/// Top-level config for `train` and `experiment`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from(".")
}

/// Everything needed to score new data: architecture, fitted featurizer and
/// normalizer, the observation window, and the parameters themselves.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub spec: ModelSpec,
    pub featurizer: Option<Featurizer>,
    pub normalizer: Normalizer,
    pub hours: Real,
    params: serde_json::Value,
}

impl ModelArtifact {
    pub fn new(
        spec: ModelSpec,
        featurizer: Option<Featurizer>,
        normalizer: Normalizer,
        hours: Real,
        store: &ParameterStore,
    ) -> std::io::Result<Self> {
        let mut buf = Vec::new();
        store.save_json(&mut buf)?;
        Ok(Self { spec, featurizer, normalizer, hours, params: serde_json::from_slice(&buf)? })
    }

    pub fn params(&self) -> std::io::Result<ParameterStore> {
        ParameterStore::load_json(serde_json::to_vec(&self.params)?.as_slice())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid {what} {}: {e}", path.display())))
}

fn load_dataset(source: &DataSource) -> Result<Dataset, CliError> {
    match source {
        DataSource::Events { path } => load_records(path).map_err(|e| match e {
            crate::data::DataError::Io(_) => {
                CliError::usage(format!("cannot read event file {}: {e}", path.display()))
            }
            _ => CliError::contract(e.to_string()),
        }),
        DataSource::Synthetic { seed, config } => {
            synthesize(config, *seed).map_err(|e| CliError::usage(e.to_string()))
        }
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("FUSION_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                // ignore the error if a global pool already exists
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn cmd_synthesize(config: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let cfg: SynthConfig = read_json(config, "synthesis config")?;
    let dataset = synthesize(&cfg, seed).map_err(|e| CliError::usage(e.to_string()))?;
    crate::data::save_records(&dataset, out)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let run: RunConfig = read_json(config_path, "run config")?;
    run.experiment.validate().map_err(CliError::from)?;
    let dataset = load_dataset(&run.data)?;
    let modality = run.experiment.modalities[0];
    let hours = *run.experiment.hours.last().unwrap();
    let split_seed = run.experiment.seeds[0];

    let split = crate::eval::split_by_id(&dataset.ids(), split_seed)
        .map_err(|e| CliError::contract(e.to_string()))?;
    let windowed = apply_window(&dataset, hours).map_err(|e| CliError::usage(e.to_string()))?;
    let to_set = |v: &[String]| v.iter().cloned().collect::<std::collections::BTreeSet<_>>();
    let train_raw = windowed.subset(&to_set(&split.train));
    let val_raw = windowed.subset(&to_set(&split.validation));
    let normalizer = fit_normalizer(&train_raw);
    let train_n = normalize(&train_raw, &normalizer);
    let val_n = normalize(&val_raw, &normalizer);

    let featurizer = if modality.uses_text() {
        Some(
            Featurizer::fit(
                run.experiment.text_variant,
                &train_n,
                &run.experiment.featurizer,
                run.experiment.train.seed,
            )
            .map_err(|e| CliError::contract(e.to_string()))?,
        )
    } else {
        None
    };
    let featurize = |d: &Dataset| -> Vec<Example> {
        d.records
            .iter()
            .map(|r| Example {
                record: r.clone(),
                text: featurizer.as_ref().map(|f| f.features(r)),
            })
            .collect()
    };
    let spec = crate::experiment::cell_spec(
        modality,
        hours,
        dataset.d(),
        featurizer.as_ref().map(|f| f.input_dim()),
        &run.experiment,
    );
    let result = pipeline(&spec, &featurize(&train_n), &featurize(&val_n), &run.experiment.train)
        .map_err(|e| CliError::contract(e.to_string()))?;

    fs::create_dir_all(&run.out_dir)
        .map_err(|e| CliError::usage(format!("cannot create output dir: {e}")))?;
    let artifact =
        ModelArtifact::new(result.spec, featurizer, normalizer, hours, &result.model.store)
            .map_err(|e| CliError::usage(e.to_string()))?;
    let model_path = run.out_dir.join("model.json");
    fs::write(&model_path, serde_json::to_string_pretty(&artifact).unwrap())
        .map_err(|e| CliError::usage(format!("cannot write model: {e}")))?;
    fs::write(run.out_dir.join("history.csv"), result.model.history_csv())
        .map_err(|e| CliError::usage(format!("cannot write history: {e}")))?;
    println!("model written to {}", model_path.display());
    Ok(())
}

fn cmd_evaluate(model: &Path, data: &Path) -> Result<(), CliError> {
    let artifact: ModelArtifact = read_json(model, "model checkpoint")?;
    let store = artifact.params().map_err(|e| CliError::usage(e.to_string()))?;
    let dataset = load_dataset(&DataSource::Events { path: data.to_path_buf() })?;
    let windowed =
        apply_window(&dataset, artifact.hours).map_err(|e| CliError::usage(e.to_string()))?;
    let prepared = normalize(&windowed, &artifact.normalizer);
    let examples: Vec<Example> = prepared
        .records
        .iter()
        .map(|r| Example {
            record: r.clone(),
            text: artifact.featurizer.as_ref().map(|f| f.features(r)),
        })
        .collect();
    let auc = evaluate_auc(&artifact.spec, &store, &examples)
        .map_err(|e| CliError::contract(e.to_string()))?;
    println!("auc={auc}");
    Ok(())
}

fn cmd_experiment(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let run: RunConfig = read_json(config_path, "run config")?;
    let dataset = load_dataset(&run.data)?;
    configure_threads();
    let report = run_experiment(&dataset, &run.experiment)?;
    fs::create_dir_all(out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
    let write = |name: &str, contents: String| -> Result<(), CliError> {
        fs::write(out.join(name), contents)
            .map_err(|e| CliError::usage(format!("cannot write {name}: {e}")))
    };
    write("results.csv", report.results_csv())?;
    write("aggregate.json", serde_json::to_string_pretty(&report).unwrap())?;
    for &m in &run.experiment.modalities {
        write(&format!("plotdata_{}.csv", modality_key(m)), report.plotdata_csv(m))?;
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synthesize { config, out, seed } => cmd_synthesize(config, out, *seed),
        Command::Train { config } => cmd_train(config),
        Command::Evaluate { model, data } => cmd_evaluate(model, data),
        Command::Experiment { config, out } => cmd_experiment(config, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
