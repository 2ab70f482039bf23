//! Domain types shared by every stage.

mod domain;
mod ids;
mod records;
mod suffix;
mod validate;

pub use domain::{ConvType, Domain, PromptMode, QuestionType, UnknownDomain, UnknownQuestionType};
pub use ids::{
    bytes_digest, content_digest, BatchId, DedupKey, ImageId, RecordId, SeedId, TaskId, ID_HEX_LEN,
};
pub use records::{
    prompt_fingerprint, CaptionRecord, Extra, GenerationConfig, ImageFlag, ImageRecord, ImageState,
    InstructionRecord, Provenance, ReviewState, SourceChannel, SourceRef, Turn,
};
pub use suffix::{IndicatorSuffixTable, SuffixTableError, MULTIPLE_CHOICE_SUFFIX};
pub use validate::{validate_record, ValidationReport, Violation, MC_OPTION_COUNT};
