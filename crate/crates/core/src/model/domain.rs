use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Conversation family a domain belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvType {
    SingleTurnPerception,
    SingleTurnReasoning,
    MultiRound,
}

/// The 24 task domains of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    // single-turn perception
    ImageStyle,
    ImageScene,
    ImageQuality,
    ImageComparison,
    ObjectLocalization,
    ObjectRelation,
    AttributeRecognition,
    ImageDescription,
    Ocr,
    Posters,
    Artwork,
    Landmark,
    SpatialRelationship,
    BrandRecognition,
    SpeciesRecognition,
    // single-turn reasoning
    NumericalCalculation,
    ImageEmotion,
    CommonsenseReasoning,
    ComplexReasoning,
    SocialRelation,
    FuturePrediction,
    MemeComprehension,
    Writing,
    // multi-round
    MultiRoundLongVqa,
}

/// How generation prompts are assembled for a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    WithSeed,
    NoSeed,
    MultiRound,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown domain `{0}`")]
pub struct UnknownDomain(pub String);

impl Domain {
    pub const ALL: [Domain; 24] = [
        Domain::ImageStyle,
        Domain::ImageScene,
        Domain::ImageQuality,
        Domain::ImageComparison,
        Domain::ObjectLocalization,
        Domain::ObjectRelation,
        Domain::AttributeRecognition,
        Domain::ImageDescription,
        Domain::Ocr,
        Domain::Posters,
        Domain::Artwork,
        Domain::Landmark,
        Domain::SpatialRelationship,
        Domain::BrandRecognition,
        Domain::SpeciesRecognition,
        Domain::NumericalCalculation,
        Domain::ImageEmotion,
        Domain::CommonsenseReasoning,
        Domain::ComplexReasoning,
        Domain::SocialRelation,
        Domain::FuturePrediction,
        Domain::MemeComprehension,
        Domain::Writing,
        Domain::MultiRoundLongVqa,
    ];

    /// Human-readable name as used in prompts and reports.
    pub fn name(self) -> &'static str {
        match self {
            Domain::ImageStyle => "image style",
            Domain::ImageScene => "image scene",
            Domain::ImageQuality => "image quality",
            Domain::ImageComparison => "image comparison",
            Domain::ObjectLocalization => "object localization",
            Domain::ObjectRelation => "object relation",
            Domain::AttributeRecognition => "attribute recognition",
            Domain::ImageDescription => "image description",
            Domain::Ocr => "OCR",
            Domain::Posters => "posters",
            Domain::Artwork => "artwork",
            Domain::Landmark => "landmark",
            Domain::SpatialRelationship => "spatial relationship",
            Domain::BrandRecognition => "brand recognition",
            Domain::SpeciesRecognition => "species recognition",
            Domain::NumericalCalculation => "numerical calculation",
            Domain::ImageEmotion => "image emotion",
            Domain::CommonsenseReasoning => "commonsense reasoning",
            Domain::ComplexReasoning => "complex reasoning",
            Domain::SocialRelation => "social relation",
            Domain::FuturePrediction => "future prediction",
            Domain::MemeComprehension => "meme comprehension",
            Domain::Writing => "writing",
            Domain::MultiRoundLongVqa => "multi-round long visual question answering",
        }
    }

    /// Stable snake_case key used in files and on the wire.
    pub fn key(self) -> &'static str {
        match self {
            Domain::ImageStyle => "image_style",
            Domain::ImageScene => "image_scene",
            Domain::ImageQuality => "image_quality",
            Domain::ImageComparison => "image_comparison",
            Domain::ObjectLocalization => "object_localization",
            Domain::ObjectRelation => "object_relation",
            Domain::AttributeRecognition => "attribute_recognition",
            Domain::ImageDescription => "image_description",
            Domain::Ocr => "ocr",
            Domain::Posters => "posters",
            Domain::Artwork => "artwork",
            Domain::Landmark => "landmark",
            Domain::SpatialRelationship => "spatial_relationship",
            Domain::BrandRecognition => "brand_recognition",
            Domain::SpeciesRecognition => "species_recognition",
            Domain::NumericalCalculation => "numerical_calculation",
            Domain::ImageEmotion => "image_emotion",
            Domain::CommonsenseReasoning => "commonsense_reasoning",
            Domain::ComplexReasoning => "complex_reasoning",
            Domain::SocialRelation => "social_relation",
            Domain::FuturePrediction => "future_prediction",
            Domain::MemeComprehension => "meme_comprehension",
            Domain::Writing => "writing",
            Domain::MultiRoundLongVqa => "multi_round_long_vqa",
        }
    }

    pub fn conv_type(self) -> ConvType {
        use Domain::*;
        match self {
            ImageStyle | ImageScene | ImageQuality | ImageComparison | ObjectLocalization
            | ObjectRelation | AttributeRecognition | ImageDescription | Ocr | Posters
            | Artwork | Landmark | SpatialRelationship | BrandRecognition | SpeciesRecognition => {
                ConvType::SingleTurnPerception
            }
            NumericalCalculation | ImageEmotion | CommonsenseReasoning | ComplexReasoning
            | SocialRelation | FuturePrediction | MemeComprehension | Writing => {
                ConvType::SingleTurnReasoning
            }
            MultiRoundLongVqa => ConvType::MultiRound,
        }
    }

    /// Commonsense and complex reasoning have no seed bank; the multi-round
    /// domain has its own prompt family.
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            Domain::CommonsenseReasoning | Domain::ComplexReasoning => PromptMode::NoSeed,
            Domain::MultiRoundLongVqa => PromptMode::MultiRound,
            _ => PromptMode::WithSeed,
        }
    }

    pub fn is_multi_round(self) -> bool {
        self.conv_type() == ConvType::MultiRound
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn normalize_name(s: &str) -> String {
    s.trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect()
}

impl FromStr for Domain {
    type Err = UnknownDomain;

    /// Accepts the snake_case key or the human-readable name, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = normalize_name(s);
        Domain::ALL
            .into_iter()
            .find(|d| d.key() == wanted || normalize_name(d.name()) == wanted)
            .ok_or_else(|| UnknownDomain(s.to_owned()))
    }
}

/// The five instruction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Judgment,
    MultipleChoice,
    LongVqa,
    ShortVqa,
    MultiRound,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown question type `{0}`")]
pub struct UnknownQuestionType(pub String);

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Judgment,
        QuestionType::MultipleChoice,
        QuestionType::LongVqa,
        QuestionType::ShortVqa,
        QuestionType::MultiRound,
    ];

    pub const SINGLE_TURN: [QuestionType; 4] = [
        QuestionType::Judgment,
        QuestionType::MultipleChoice,
        QuestionType::LongVqa,
        QuestionType::ShortVqa,
    ];

    pub fn key(self) -> &'static str {
        match self {
            QuestionType::Judgment => "judgment",
            QuestionType::MultipleChoice => "multiple_choice",
            QuestionType::LongVqa => "long_vqa",
            QuestionType::ShortVqa => "short_vqa",
            QuestionType::MultiRound => "multi_round",
        }
    }

    /// Short label used in statistics tables.
    pub fn abbrev(self) -> &'static str {
        match self {
            QuestionType::Judgment => "TF",
            QuestionType::MultipleChoice => "MC",
            QuestionType::LongVqa => "LVQA",
            QuestionType::ShortVqa => "SVQA",
            QuestionType::MultiRound => "multi-round",
        }
    }

    /// Wording substituted into generation prompts.
    pub fn prompt_label(self) -> &'static str {
        match self {
            QuestionType::Judgment => "judgment",
            QuestionType::MultipleChoice => "multiple-choice",
            QuestionType::LongVqa => "Long VQA",
            QuestionType::ShortVqa => "Short VQA",
            QuestionType::MultiRound => "multi-round long VQA",
        }
    }

    pub fn is_single_turn(self) -> bool {
        self != QuestionType::MultiRound
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for QuestionType {
    type Err = UnknownQuestionType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = normalize_name(s);
        QuestionType::ALL
            .into_iter()
            .find(|q| {
                q.key() == wanted
                    || q.abbrev().eq_ignore_ascii_case(s.trim())
                    || normalize_name(q.prompt_label()) == wanted
            })
            .ok_or_else(|| UnknownQuestionType(s.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn taxonomy_has_fifteen_eight_one() {
        let count = |c| Domain::ALL.iter().filter(|d| d.conv_type() == c).count();
        assert_eq!(count(ConvType::SingleTurnPerception), 15);
        assert_eq!(count(ConvType::SingleTurnReasoning), 8);
        assert_eq!(count(ConvType::MultiRound), 1);
        let distinct: HashSet<_> = Domain::ALL.iter().collect();
        assert_eq!(distinct.len(), 24);
    }

    #[test]
    fn keys_round_trip_through_serde_and_from_str() {
        for d in Domain::ALL {
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(json, format!("\"{}\"", d.key()));
            assert_eq!(d.key().parse::<Domain>().unwrap(), d);
            assert_eq!(d.name().parse::<Domain>().unwrap(), d);
        }
        assert_eq!(
            "Future-Prediction".parse::<Domain>().unwrap(),
            Domain::FuturePrediction
        );
        assert!("feature prediction".parse::<Domain>().is_err());
    }

    #[test]
    fn prompt_modes() {
        assert_eq!(Domain::ComplexReasoning.prompt_mode(), PromptMode::NoSeed);
        assert_eq!(
            Domain::CommonsenseReasoning.prompt_mode(),
            PromptMode::NoSeed
        );
        assert_eq!(
            Domain::MultiRoundLongVqa.prompt_mode(),
            PromptMode::MultiRound
        );
        assert_eq!(Domain::Landmark.prompt_mode(), PromptMode::WithSeed);
    }

    #[test]
    fn question_type_parsing() {
        assert_eq!(
            "MC".parse::<QuestionType>().unwrap(),
            QuestionType::MultipleChoice
        );
        assert_eq!(
            "tf".parse::<QuestionType>().unwrap(),
            QuestionType::Judgment
        );
        assert_eq!(
            "long_vqa".parse::<QuestionType>().unwrap(),
            QuestionType::LongVqa
        );
        assert_eq!(
            "Short VQA".parse::<QuestionType>().unwrap(),
            QuestionType::ShortVqa
        );
        assert!("essay".parse::<QuestionType>().is_err());
    }
}
