//! Hallucination metrics, report aggregation and the judge client.

mod chair;
mod judge;
mod mme;
mod pope;
mod report;

pub use chair::{chair, chair_records, objects_in_text, CaptionRecord, ChairScore};
pub use judge::{
    parse_judge_reply, render_judge_prompt, JudgeClient, JudgeScore, ASSISTANTS, DEFAULT_TIMEOUT,
    EMPTY_SLOT, JUDGE_TEMPLATE,
};
pub use mme::{mme_eval, MmeScore};
pub use pope::{
    class_frequency, cooccurrence, pope_eval, pope_questions, ExistRecord, PopeScore, PopeSplit,
    Prediction,
};
pub use report::{read_jsonl, render_table, write_jsonl, Summary, TimingSummary};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}: no samples to score")]
    EmptyInput(&'static str),
    #[error("image {id} has {count} questions, expected 2")]
    MmeGroupSize { id: String, count: usize },
    #[error("could not parse judge reply ({reason}): {raw:?}")]
    JudgeParse { raw: String, reason: String },
    #[error("judge request failed: {0}")]
    JudgeTransport(String),
    #[error("judge: {0}")]
    JudgeConfig(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
