//! Seeded end-to-end demo: a generated dataset, a mock model, a full
//! stage-1 run, and a report, with zero network access. Repeat invocations
//! over the same directory are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{save_dataset, AnswerKind, Dataset, DatasetError, QuestionItem};
use crate::pipeline::{
    run_stage1, FreeformGrading, PipelineError, ProviderConfig, ProviderRegistry, RunConfig,
    RunOutcome,
};
use crate::promptkit::PromptStrategy;
use crate::provider::{EffortStyle, ModelSpec, ReasoningEffort, RetryPolicy};
use crate::report::{run_report, GroupDim, ReportError, ReportPaths};

pub const DEMO_SEED: u64 = 11;
pub const DEMO_ITEMS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// Deterministic arithmetic multiple-choice questions.
pub fn demo_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ["A", "B", "C", "D"];
    let items = (0..n)
        .map(|i| {
            let a: i64 = rng.random_range(7..90);
            let b: i64 = rng.random_range(7..90);
            let sum = a + b;
            let correct_slot = rng.random_range(0..labels.len());
            let mut used = vec![sum];
            let options = labels
                .iter()
                .enumerate()
                .map(|(slot, label)| {
                    let value = if slot == correct_slot {
                        sum
                    } else {
                        loop {
                            let candidate = sum + rng.random_range(-9..=9i64);
                            if !used.contains(&candidate) {
                                used.push(candidate);
                                break candidate;
                            }
                        }
                    };
                    (label.to_string(), value.to_string())
                })
                .collect();
            QuestionItem {
                id: format!("q{:03}", i + 1),
                question_text: format!("What is {a} + {b}?"),
                options: Some(options),
                ground_truth: labels[correct_slot].to_string(),
                answer_kind: AnswerKind::McqLetter,
            }
        })
        .collect();
    Dataset {
        id: "demo_arithmetic".to_string(),
        items,
        answer_kind: AnswerKind::McqLetter,
        metadata: BTreeMap::new(),
    }
}

/// The demo run configuration: one mock model over the generated dataset,
/// two strategies, timestamps off so artifacts are byte-stable.
pub fn demo_config(out_dir: &Path) -> RunConfig {
    let mut providers = BTreeMap::new();
    providers.insert(
        "mock".to_string(),
        ProviderConfig::Mock { fixtures: None, fallback_seed: Some(DEMO_SEED) },
    );
    RunConfig {
        run_dir: out_dir.join("run"),
        models: vec![ModelSpec {
            provider_id: "mock".into(),
            model_name: "demo-reasoner".into(),
            effort_style: EffortStyle::None,
            budget_map: None,
            exposes_trace: false,
        }],
        datasets: vec![out_dir.join("demo_arithmetic.jsonl")],
        strategies: vec![PromptStrategy::Basic, PromptStrategy::ChainOfThought],
        efforts: vec![ReasoningEffort::Unspecified],
        iuq_levels: vec![],
        per_dataset_limit: None,
        concurrency: 4,
        retry: RetryPolicy::default(),
        freeform_grading: FreeformGrading::Normalized,
        seed: DEMO_SEED,
        providers,
        temperature: Some(0.0),
        max_output_tokens: None,
        record_timestamps: false,
        refusal_sentinel: None,
    }
}

/// Write the dataset, run stage 1 on the mock provider, and report into
/// `<out_dir>/report`. Rerunning over an existing directory resumes (a
/// no-op) and rewrites the same report bytes.
pub fn run_demo(out_dir: &Path) -> Result<(RunOutcome, ReportPaths), DemoError> {
    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        context: format!("create {}", out_dir.display()),
        source,
    })?;
    let dataset = demo_dataset(DEMO_ITEMS, DEMO_SEED);
    let config = demo_config(out_dir);
    save_dataset(&dataset, &config.datasets[0])?;
    let registry = ProviderRegistry::from_config(&config)?;
    let outcome = run_stage1(&config, &registry, true)?;
    let report = run_report(
        &config.run_dir,
        &report_dir(out_dir),
        20,
        &[GroupDim::Model, GroupDim::Dataset, GroupDim::Strategy],
        None,
    )?;
    Ok((outcome, report))
}

pub fn report_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("report")
}
