//! Train-decode-score runs and the seeded variant comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::decoder::{DecoderParams, Variant};
use crate::decoding::{decode_all, BeamOptions, DecodeError};
use crate::metrics::{evaluate_corpus, format_table, EvalReport, MetricError, TokenizedPair};
use crate::training::{fit, TrainConfig, TrainError, TrainLog};
use crate::vocab::tokenize;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no seeds requested")]
    NoSeeds,
}

/// Variants compared by default, in table order.
pub const ABLATION_VARIANTS: [Variant; 3] = [Variant::BuOnly, Variant::BuTd, Variant::BuResTd];

/// Decodes every image of `data` and pairs the rendered captions with its
/// reference texts.
pub fn caption_pairs(
    params: &DecoderParams,
    data: &Dataset,
    beam: &BeamOptions,
) -> Result<Vec<TokenizedPair>, ExperimentError> {
    let images: Vec<_> = data.examples.iter().map(|e| &e.features).collect();
    let captions = decode_all(&images, params, beam)?;
    Ok(data
        .examples
        .iter()
        .zip(captions)
        .map(|(e, c)| TokenizedPair {
            image_id: e.features.image_id().to_string(),
            candidate: tokenize(&data.vocab.render(c.content())),
            references: e.references.clone(),
        })
        .collect())
}

pub fn evaluate_model(params: &DecoderParams, data: &Dataset, beam: &BeamOptions) -> Result<EvalReport, ExperimentError> {
    Ok(evaluate_corpus(&caption_pairs(params, data, beam)?)?)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub params: DecoderParams,
    pub log: TrainLog,
    pub report: EvalReport,
}

pub fn train_and_evaluate(
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    beam: &BeamOptions,
) -> Result<RunResult, ExperimentError> {
    let (params, log) = fit(train, config)?;
    let report = evaluate_model(&params, test, beam)?;
    Ok(RunResult { params, log, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// One report per seed, in seed order.
    pub runs: Vec<EvalReport>,
    pub median: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn table(&self) -> String {
        let names: Vec<String> = self.rows.iter().map(|r| r.variant.to_string()).collect();
        let rows: Vec<(&str, &EvalReport)> = names.iter().map(String::as_str).zip(self.rows.iter().map(|r| &r.median)).collect();
        format_table(&rows)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Field-wise median of several reports.
pub fn median_report(reports: &[EvalReport]) -> EvalReport {
    let pick = |f: fn(&EvalReport) -> f64| median(&mut reports.iter().map(f).collect::<Vec<_>>());
    EvalReport {
        schema_version: reports[0].schema_version,
        images: reports[0].images,
        bleu: [
            pick(|r| r.bleu[0]),
            pick(|r| r.bleu[1]),
            pick(|r| r.bleu[2]),
            pick(|r| r.bleu[3]),
        ],
        avg_bleu: pick(|r| r.avg_bleu),
        rouge_l: pick(|r| r.rouge_l),
        cider: pick(|r| r.cider),
        meteor_lite: pick(|r| r.meteor_lite),
    }
}

/// Trains every variant under every seed with otherwise identical settings
/// and reports per-variant medians on `test`.
pub fn ablate(
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    beam: &BeamOptions,
) -> Result<Ablation, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let config = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let r = train_and_evaluate(train, test, &config, beam)?;
            log::info!(
                "{variant} seed {seed}: loss {:.4} CIDEr {:.2}",
                r.log.final_loss().unwrap_or(f64::NAN),
                r.report.cider
            );
            runs.push(r.report);
        }
        rows.push(AblationRow {
            variant,
            median: median_report(&runs),
            runs,
        });
    }
    Ok(Ablation {
        seeds: seeds.to_vec(),
        rows,
    })
}
