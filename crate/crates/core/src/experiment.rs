//! Experiment sweeps: modality x observation-window x split-seed grids,
//! aggregation with confidence intervals, and significance tests of late
//! fusion against the single modalities.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{apply_window, fit_normalizer, normalize, DataError, Dataset, EpisodeRecord};
use crate::eval::{confidence_interval, paired_t_test, split_by_id, EvalError, TTestResult};
use crate::models::{Modality, ModelSpec, TextEncoderSpec, TextVariant};
use crate::text::{
    embed_sentences, fit_vocabulary, load_embedding_table, split_sentences, tfidf_fit,
    tfidf_transform, tokenize, tokens_to_matrix, EmbeddingTable, SentenceMode, TextError,
    TfIdfModel, Vocabulary,
};
use crate::train::{evaluate_auc, pipeline, Example, TrainConfig, TrainError};
use crate::{InterpSpec, Real, ReferenceGrid, Tensor};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("experiment config: {0}")]
    BadConfig(String),
}

/// Turns a record's text into the tensor the configured encoder consumes;
/// fitted on the training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Featurizer {
    Tfidf(TfIdfModel),
    Tokens { table: EmbeddingTable, max_len: usize },
    Sentences { table: EmbeddingTable, weighted: bool, vocabulary: Vocabulary },
}

impl Featurizer {
    pub fn fit(
        variant: TextVariant,
        train: &Dataset,
        options: &FeaturizerOptions,
        seed: u64,
    ) -> Result<Self, TextError> {
        let corpus: Vec<Vec<String>> =
            train.records.iter().map(|r| tokenize(&r.pooled_document())).collect();
        match variant {
            TextVariant::Tfidf1nn => Ok(Featurizer::Tfidf(tfidf_fit(&corpus, options.vocab_cap)?)),
            TextVariant::WeCnn => {
                let table = build_table(&corpus, options, seed)?;
                Ok(Featurizer::Tokens { table, max_len: options.max_tokens })
            }
            TextVariant::UseGru | TextVariant::WseGru => {
                let table = build_table(&corpus, options, seed)?;
                let vocabulary = fit_vocabulary(&corpus, options.vocab_cap)?;
                Ok(Featurizer::Sentences {
                    table,
                    weighted: variant == TextVariant::WseGru,
                    vocabulary,
                })
            }
        }
    }

    /// Width the matching text encoder must be configured with.
    pub fn input_dim(&self) -> usize {
        match self {
            Featurizer::Tfidf(m) => m.vocabulary.size(),
            Featurizer::Tokens { table, .. } => table.width(),
            Featurizer::Sentences { table, .. } => table.width(),
        }
    }

    pub fn features(&self, record: &EpisodeRecord) -> Tensor {
        let doc = record.pooled_document();
        match self {
            Featurizer::Tfidf(m) => tfidf_transform(m, &tokenize(&doc)),
            Featurizer::Tokens { table, max_len } => {
                tokens_to_matrix(&tokenize(&doc), table, *max_len)
            }
            Featurizer::Sentences { table, weighted, vocabulary } => {
                let mode =
                    if *weighted { SentenceMode::Weighted } else { SentenceMode::Unweighted };
                embed_sentences(&split_sentences(&doc), table, mode, Some(vocabulary))
            }
        }
    }
}

/// A pretrained table when one is supplied; otherwise random word vectors over
/// the training vocabulary, seeded for reproducibility.
fn build_table(
    corpus: &[Vec<String>],
    options: &FeaturizerOptions,
    seed: u64,
) -> Result<EmbeddingTable, TextError> {
    if let Some(path) = &options.embedding_path {
        return load_embedding_table(path);
    }
    let vocab = fit_vocabulary(corpus, options.vocab_cap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = options.word_vec_width;
    let bound = 1.0 / w as Real;
    let entries: Vec<(String, Vec<Real>)> = vocab
        .tokens()
        .iter()
        .map(|t| (t.clone(), (0..w).map(|_| rng.gen_range(-bound..bound)).collect()))
        .collect();
    EmbeddingTable::from_entries(entries)
}

fn default_vocab_cap() -> usize {
    6000
}
fn default_word_vec_width() -> usize {
    16
}
fn default_max_tokens() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizerOptions {
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    #[serde(default = "default_word_vec_width")]
    pub word_vec_width: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub embedding_path: Option<PathBuf>,
}

impl Default for FeaturizerOptions {
    fn default() -> Self {
        Self {
            vocab_cap: default_vocab_cap(),
            word_vec_width: default_word_vec_width(),
            max_tokens: default_max_tokens(),
            embedding_path: None,
        }
    }
}

fn default_text_variant() -> TextVariant {
    TextVariant::Tfidf1nn
}
fn default_embed_dim() -> usize {
    128
}
fn default_pred_hidden() -> usize {
    64
}
fn default_text_proj() -> usize {
    16
}
fn default_ref_points() -> usize {
    24
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub modalities: Vec<Modality>,
    pub hours: Vec<Real>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_text_variant")]
    pub text_variant: TextVariant,
    #[serde(default)]
    pub featurizer: FeaturizerOptions,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_pred_hidden")]
    pub pred_hidden: usize,
    #[serde(default = "default_text_proj")]
    pub text_proj: usize,
    /// Reference points of the interpolation grid.
    #[serde(default = "default_ref_points")]
    pub ref_points: usize,
    /// Extra hyperparameter candidates tried per cell; the best by validation
    /// AUC wins. The base `train` config is always a candidate.
    #[serde(default)]
    pub search: Vec<TrainConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.modalities.is_empty() || self.hours.is_empty() || self.seeds.is_empty() {
            return Err(ExperimentError::BadConfig(
                "modalities, hours and seeds must all be non-empty".into(),
            ));
        }
        for &h in &self.hours {
            if !(0.0..=48.0).contains(&h) || h % 6.0 != 0.0 {
                return Err(ExperimentError::BadConfig(format!(
                    "hours value {h} is not in {{0, 6, ..., 48}}"
                )));
            }
        }
        self.train.validate().map_err(|e| ExperimentError::BadConfig(e.to_string()))?;
        Ok(())
    }
}

/// Short modality key used in report files.
pub fn modality_key(m: Modality) -> &'static str {
    match m {
        Modality::TextOnly => "text",
        Modality::TsOnly => "ts",
        Modality::EarlyFusion => "early",
        Modality::LateFusion => "late",
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub modality: Modality,
    pub hours: Real,
    pub seed: u64,
    pub auc: Real,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub modality: Modality,
    pub hours: Real,
    pub mean: Real,
    pub ci_half_width: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTest {
    pub hours: Real,
    pub against: Modality,
    pub t: Real,
    pub df: usize,
    pub p: Real,
    pub degenerate_variance: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub aggregates: Vec<Aggregate>,
    /// Late fusion vs each single modality, paired by split seed.
    pub t_tests: Vec<ComparisonTest>,
}

impl ExperimentReport {
    /// `modality,hours,seed,auc` rows.
    pub fn results_csv(&self) -> String {
        let mut out = String::from("modality,hours,seed,auc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                modality_key(r.modality),
                r.hours,
                r.seed,
                r.auc
            ));
        }
        out
    }

    /// Per-modality `hours,mean,ci_lo,ci_hi` plot data.
    pub fn plotdata_csv(&self, modality: Modality) -> String {
        let mut out = String::from("hours,mean,ci_lo,ci_hi\n");
        for a in self.aggregates.iter().filter(|a| a.modality == modality) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.hours,
                a.mean,
                a.mean - a.ci_half_width,
                a.mean + a.ci_half_width
            ));
        }
        out
    }

    pub fn auc_for(&self, modality: Modality, hours: Real, seed: u64) -> Option<Real> {
        self.rows
            .iter()
            .find(|r| r.modality == modality && r.hours == hours && r.seed == seed)
            .map(|r| r.auc)
    }

    pub fn mean_auc(&self, modality: Modality, hours: Real) -> Option<Real> {
        self.aggregates
            .iter()
            .find(|a| a.modality == modality && a.hours == hours)
            .map(|a| a.mean)
    }
}

fn cell_seed(base: u64, modality: Modality, hours: Real, split_seed: u64) -> u64 {
    let m = modality as u64 + 1;
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(m.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(hours.to_bits().rotate_left(13))
        .wrapping_add(split_seed.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// Prepared data for one experiment cell.
struct CellData {
    train: Vec<Example>,
    validation: Vec<Example>,
    test: Vec<Example>,
    featurizer: Option<Featurizer>,
}

fn prepare_cell(
    dataset: &Dataset,
    modality: Modality,
    hours: Real,
    split_seed: u64,
    config: &ExperimentConfig,
) -> Result<CellData, ExperimentError> {
    let split = split_by_id(&dataset.ids(), split_seed)?;
    let windowed = apply_window(dataset, hours)?;
    let to_set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
    let train_raw = windowed.subset(&to_set(&split.train));
    let val_raw = windowed.subset(&to_set(&split.validation));
    let test_raw = windowed.subset(&to_set(&split.test));
    let normalizer = fit_normalizer(&train_raw);
    let train_n = normalize(&train_raw, &normalizer);
    let val_n = normalize(&val_raw, &normalizer);
    let test_n = normalize(&test_raw, &normalizer);
    let featurizer = if modality.uses_text() {
        Some(Featurizer::fit(
            config.text_variant,
            &train_n,
            &config.featurizer,
            cell_seed(config.train.seed, modality, hours, split_seed),
        )?)
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
    Ok(CellData {
        train: featurize(&train_n),
        validation: featurize(&val_n),
        test: featurize(&test_n),
        featurizer,
    })
}

/// Spec for one cell of the sweep.
pub fn cell_spec(
    modality: Modality,
    hours: Real,
    d: usize,
    text_input_dim: Option<usize>,
    config: &ExperimentConfig,
) -> ModelSpec {
    let text = text_input_dim.map(|dim| TextEncoderSpec {
        embed_dim: config.embed_dim,
        ..TextEncoderSpec::new(config.text_variant, dim)
    });
    let (interp, grid) = if modality.uses_timeseries() {
        (
            Some(InterpSpec::new(d)),
            Some(ReferenceGrid::uniform(hours.max(1.0), config.ref_points)),
        )
    } else {
        (None, None)
    };
    ModelSpec {
        modality,
        text: if modality.uses_text() { text } else { None },
        interp,
        grid,
        pred_hidden: config.pred_hidden,
        text_proj: config.text_proj,
    }
}

/// Train one cell end to end and return its test AUC.
fn run_cell(
    dataset: &Dataset,
    modality: Modality,
    hours: Real,
    split_seed: u64,
    config: &ExperimentConfig,
) -> Result<ExperimentRow, ExperimentError> {
    let cell = prepare_cell(dataset, modality, hours, split_seed, config)?;
    let spec = cell_spec(
        modality,
        hours,
        dataset.d(),
        cell.featurizer.as_ref().map(|f| f.input_dim()),
        config,
    );
    let mut candidates: Vec<TrainConfig> = Vec::with_capacity(1 + config.search.len());
    candidates.push(config.train.clone());
    candidates.extend(config.search.iter().cloned());
    let mut best: Option<(Real, crate::train::PipelineResult)> = None;
    for mut cand in candidates {
        cand.seed = cell_seed(cand.seed, modality, hours, split_seed);
        let result = pipeline(&spec, &cell.train, &cell.validation, &cand)?;
        let val = result.model.best_val_auc;
        if best.as_ref().map_or(true, |(b, _)| val > *b) {
            best = Some((val, result));
        }
    }
    let (_, result) = best.unwrap();
    let test_auc = evaluate_auc(&result.spec, &result.model.store, &cell.test)?;
    Ok(ExperimentRow { modality, hours, seed: split_seed, auc: test_auc })
}

/// Run the full modality x hours x seed sweep; cells execute in parallel and
/// the report is deterministically ordered.
pub fn run_experiment(
    dataset: &Dataset,
    config: &ExperimentConfig,
) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let mut cells = Vec::new();
    for &m in &config.modalities {
        for &h in &config.hours {
            for &s in &config.seeds {
                cells.push((m, h, s));
            }
        }
    }
    let mut rows: Vec<ExperimentRow> = cells
        .par_iter()
        .map(|&(m, h, s)| run_cell(dataset, m, h, s, config))
        .collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| {
        (a.modality as u8, a.hours.to_bits(), a.seed)
            .cmp(&(b.modality as u8, b.hours.to_bits(), b.seed))
    });

    let mut aggregates = Vec::new();
    for &m in &config.modalities {
        for &h in &config.hours {
            let values: Vec<Real> = rows
                .iter()
                .filter(|r| r.modality == m && r.hours == h)
                .map(|r| r.auc)
                .collect();
            let (mean, hw) = if values.len() >= 2 {
                confidence_interval(&values)?
            } else {
                (values[0], 0.0)
            };
            aggregates.push(Aggregate { modality: m, hours: h, mean, ci_half_width: hw });
        }
    }

    let mut t_tests = Vec::new();
    if config.modalities.contains(&Modality::LateFusion) && config.seeds.len() >= 2 {
        for &h in &config.hours {
            let series = |m: Modality| -> Vec<Real> {
                config
                    .seeds
                    .iter()
                    .filter_map(|&s| {
                        rows.iter()
                            .find(|r| r.modality == m && r.hours == h && r.seed == s)
                            .map(|r| r.auc)
                    })
                    .collect()
            };
            let late = series(Modality::LateFusion);
            for other in [Modality::TextOnly, Modality::TsOnly] {
                if !config.modalities.contains(&other) {
                    continue;
                }
                let base = series(other);
                let TTestResult { t, df, p, degenerate_variance } =
                    paired_t_test(&late, &base)?;
                t_tests.push(ComparisonTest {
                    hours: h,
                    against: other,
                    t,
                    df,
                    p,
                    degenerate_variance,
                });
            }
        }
    }
    Ok(ExperimentReport { rows, aggregates, t_tests })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthConfig};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            modalities: vec![Modality::TextOnly],
            hours: vec![48.0],
            seeds: vec![1],
            train: TrainConfig { max_epochs: 2, batch_size: 16, ..TrainConfig::default() },
            text_variant: TextVariant::Tfidf1nn,
            featurizer: FeaturizerOptions { vocab_cap: 50, ..FeaturizerOptions::default() },
            embed_dim: 8,
            pred_hidden: 4,
            text_proj: 4,
            ref_points: 6,
            search: vec![],
        }
    }

    fn tiny_dataset() -> Dataset {
        let mut config = SynthConfig::basic(60, 3);
        config.vocab_size = 40;
        synthesize(&config, 5).unwrap()
    }

    #[test]
    fn single_cell_report_shapes() {
        let data = tiny_dataset();
        let report = run_experiment(&data, &tiny_config()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.aggregates.len(), 1);
        assert!(report.t_tests.is_empty());
        let auc = report.rows[0].auc;
        assert!((0.0..=1.0).contains(&auc));
        let csv = report.results_csv();
        assert!(csv.starts_with("modality,hours,seed,auc\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn experiment_is_deterministic() {
        let data = tiny_dataset();
        let config = tiny_config();
        let a = run_experiment(&data, &config).unwrap();
        let b = run_experiment(&data, &config).unwrap();
        assert_eq!(a.results_csv(), b.results_csv());
    }

    #[test]
    fn invalid_hours_rejected() {
        let mut config = tiny_config();
        config.hours = vec![7.0];
        assert!(run_experiment(&tiny_dataset(), &config).is_err());
    }

    #[test]
    fn cell_cardinality() {
        let mut config = tiny_config();
        config.modalities = vec![Modality::TextOnly, Modality::TsOnly];
        config.hours = vec![6.0, 48.0];
        config.seeds = vec![1, 2];
        config.train.max_epochs = 1;
        let report = run_experiment(&tiny_dataset(), &config).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert_eq!(report.aggregates.len(), 4);
        let plot = report.plotdata_csv(Modality::TsOnly);
        assert_eq!(plot.lines().count(), 3);
    }

    #[test]
    fn featurizer_tfidf_dims_match_vocab() {
        let data = tiny_dataset();
        let f = Featurizer::fit(
            TextVariant::Tfidf1nn,
            &data,
            &FeaturizerOptions { vocab_cap: 25, ..FeaturizerOptions::default() },
            0,
        )
        .unwrap();
        assert!(f.input_dim() <= 25);
        let v = f.features(&data.records[0]);
        assert_eq!(v.shape(), &[f.input_dim()]);
    }

    #[test]
    fn featurizer_random_table_is_seeded() {
        let data = tiny_dataset();
        let opts = FeaturizerOptions::default();
        let a = Featurizer::fit(TextVariant::WeCnn, &data, &opts, 3).unwrap();
        let b = Featurizer::fit(TextVariant::WeCnn, &data, &opts, 3).unwrap();
        let fa = a.features(&data.records[0]);
        let fb = b.features(&data.records[0]);
        assert_eq!(fa, fb);
        assert_eq!(fa.shape()[1], opts.word_vec_width);
    }
}
