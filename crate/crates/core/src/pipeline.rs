//! Glue between the stages: samples → dataset → ROS → prompts → responses →
//! metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::augment::{histogram, ros_balance, ClassHistogram, HistogramError};
use crate::dataset::{load_samples, split, AuditSample, DatasetError, DatasetSplit, DialogueRecord, Granularity};
use crate::eval_metrics::{apply_verifier, score, EvalError, GoldLabel, MetricsReport, Prediction};
use crate::model_client::{run_batch, BatchItem, ReplayBackend};
use crate::prompts::{render, render_verifier, PromptError, PromptTemplate, RenderedPrompt, TemplateName};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error("sample {sample_id}: {source}")]
    Prompt {
        sample_id: String,
        #[source]
        source: PromptError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Renders one auditor prompt per sample.
pub fn render_all(template: &PromptTemplate, samples: &[AuditSample]) -> Result<Vec<RenderedPrompt>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            render(template, s).map_err(|source| PipelineError::Prompt {
                sample_id: s.id.clone(),
                source,
            })
        })
        .collect()
}

/// Turns auditor responses into predictions, one per successful response.
pub fn predictions_from(responses: &[BatchItem]) -> Vec<Prediction> {
    responses
        .iter()
        .filter_map(BatchItem::response)
        .map(|r| Prediction::from_response(r.sample_id.clone(), &r.raw_text))
        .collect()
}

/// Verifier prompts for every prediction that claims a vulnerability.
pub fn verifier_prompts(predictions: &[Prediction], samples: &[AuditSample]) -> Result<Vec<RenderedPrompt>, PipelineError> {
    let by_id: BTreeMap<&str, &AuditSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    predictions
        .iter()
        .filter(|p| p.predicted.is_vulnerable())
        .filter_map(|p| by_id.get(p.sample_id.as_str()).map(|s| (p, *s)))
        .map(|(p, s)| {
            render_verifier(p.predicted, s).map_err(|source| PipelineError::Prompt {
                sample_id: s.id.clone(),
                source,
            })
        })
        .collect()
}

/// Applies verifier verdicts by sample id. A claim with no usable verdict is
/// demoted, like an unparseable one.
pub fn apply_verdicts(predictions: &[Prediction], verdicts: &[BatchItem]) -> Vec<Prediction> {
    let by_id: BTreeMap<&str, &str> = verdicts
        .iter()
        .filter_map(BatchItem::response)
        .map(|r| (r.sample_id.as_str(), r.raw_text.as_str()))
        .collect();
    predictions
        .iter()
        .map(|p| apply_verifier(p, by_id.get(p.sample_id.as_str()).copied().unwrap_or("")))
        .collect()
}

/// Scores auditor responses (and optional verdicts) against gold samples.
pub fn evaluate(
    gold: &[AuditSample],
    responses: &[BatchItem],
    verdicts: Option<&[BatchItem]>,
) -> Result<MetricsReport, EvalError> {
    let mut predictions = predictions_from(responses);
    if let Some(v) = verdicts {
        predictions = apply_verdicts(&predictions, v);
    }
    let gold: Vec<GoldLabel> = gold
        .iter()
        .map(|s| GoldLabel {
            sample_id: s.id.clone(),
            label: s.label,
        })
        .collect();
    score(&predictions, &gold)
}

#[derive(Debug, Clone)]
pub struct OfflineRun {
    /// Manifest file, or a directory containing `manifest.json`.
    pub samples: PathBuf,
    pub granularity: Granularity,
    pub ratio: f64,
    pub seed: u64,
    pub template: TemplateName,
    /// Canned responses laid out as `<dir>/<template>/<sample_id>.txt`.
    pub replay_dir: PathBuf,
    pub verify: bool,
    pub concurrency: usize,
}

#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    pub split: DatasetSplit,
    pub before: ClassHistogram,
    pub after: ClassHistogram,
    pub balanced_train: Vec<DialogueRecord>,
    pub prompts: Vec<RenderedPrompt>,
    pub responses: Vec<BatchItem>,
    pub verdicts: Option<Vec<BatchItem>>,
    pub report: MetricsReport,
}

/// Runs every stage against canned responses, with no network access.
pub async fn run_offline(run: &OfflineRun) -> Result<OfflineArtifacts, PipelineError> {
    let samples = load_samples(&run.samples, run.granularity)?;
    let split = split(&samples, run.ratio, run.seed)?;
    let before = histogram(&split.train)?;
    let balanced_train = ros_balance(&split.train, run.seed)?;
    let after = histogram(&balanced_train)?;

    let template = PromptTemplate::builtin(run.template);
    let prompts = render_all(&template, &split.test)?;
    let backend = ReplayBackend::new(&run.replay_dir);
    let responses = run_batch(&backend, &prompts, run.concurrency).await;

    let verdicts = if run.verify {
        let claims = verifier_prompts(&predictions_from(&responses), &split.test)?;
        Some(run_batch(&backend, &claims, run.concurrency).await)
    } else {
        None
    };
    let method = if run.verify {
        format!("{}+verifier", run.template)
    } else {
        run.template.to_string()
    };
    let report = evaluate(&split.test, &responses, verdicts.as_deref())?.with_method(method);
    Ok(OfflineArtifacts {
        split,
        before,
        after,
        balanced_train,
        prompts,
        responses,
        verdicts,
        report,
    })
}
