//! Prompt template sets and their formatting rules.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::IMAGE_MARKER;

pub const MOD: &str = "{MOD}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    ImageModification,
    CaptionSummary,
    Stage1Summary,
    InferenceCaption,
    InferenceModification,
}

pub const IMAGE_MODIFICATION: [&str; 10] = [
    "<IMG> The image is conditioned on the following prompt: {MOD}, summarize the image and the prompt to retrieve a description of the image changed by the condition:",
    "<IMG> Given the image conditioned by the prompt: {MOD}, condense the essence of the image and the prompt into a single word to fetch a description of the altered image:",
    "<IMG> Using the prompt to condition the image: {MOD}, provide one word that encapsulates the overall concept of the conditioned image to retrieve its description:",
    "<IMG> Based on the image influenced by this prompt: {MOD}, distill the description of the conditioned image and the prompt into one word to access the altered description:",
    "<IMG> With the image modified according to the prompt: {MOD}, summarize both the image and the prompt to obtain a description of the conditioned image:",
    "<IMG> Condition the image with this condition: {MOD}. Summarize the result:",
    "<IMG> Using this prompt: {MOD}, describe the conditioned image:",
    "<IMG> Apply the prompt: {MOD} to the image. Provide one word for the conditioned image:",
    "<IMG> Given this prompt: {MOD}, condense the conditioned image into one word:",
    "<IMG> {MOD}:",
];

/// Suffixes appended after the caption text. The last entry is empty: the
/// caption is encoded on its own.
pub const CAPTION_SUMMARY: [&str; 5] = [
    "Summary:",
    "Summarize the caption for retrieval:",
    "A shorter description is:",
    "Shorter caption:",
    "",
];

pub const STAGE1_IMAGE: &str = "Summarize the image in one word:";
pub const STAGE1_CAPTION: &str = "Summarize the caption in one word:";

pub const INFERENCE_CAPTION: &str = "<IMG> Describe this image in one word:";
pub const INFERENCE_MODIFICATION: &str =
    "<IMG> Modify this image with {MOD}, describe the modified image in one word:";

/// Templates of the fixed-template ablation arm.
pub const FIXED_MODIFICATION: &str = IMAGE_MODIFICATION[6];
pub const FIXED_SUMMARY: &str = CAPTION_SUMMARY[1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub kind: TemplateKind,
    pub templates: Vec<String>,
}

impl TemplateSet {
    pub fn new(kind: TemplateKind, templates: Vec<String>) -> Result<Self> {
        let set = Self { kind, templates };
        set.validate()?;
        Ok(set)
    }

    fn from_strs(kind: TemplateKind, t: &[&str]) -> Self {
        Self::new(kind, t.iter().map(|s| s.to_string()).collect())
            .expect("shipped templates are valid")
    }

    pub fn image_modification() -> Self {
        Self::from_strs(TemplateKind::ImageModification, &IMAGE_MODIFICATION)
    }

    pub fn caption_summary() -> Self {
        Self::from_strs(TemplateKind::CaptionSummary, &CAPTION_SUMMARY)
    }

    /// Checks the placeholder rules of the set's kind.
    pub fn validate(&self) -> Result<()> {
        for t in &self.templates {
            let mods = t.matches(MOD).count();
            let starts_img = t.starts_with(IMAGE_MARKER);
            let has_img = t.contains(IMAGE_MARKER);
            let ok = match self.kind {
                TemplateKind::ImageModification | TemplateKind::InferenceModification => {
                    mods == 1 && starts_img && t.matches(IMAGE_MARKER).count() == 1
                }
                TemplateKind::CaptionSummary | TemplateKind::Stage1Summary => mods == 0 && !has_img,
                TemplateKind::InferenceCaption => {
                    mods == 0 && starts_img && t.matches(IMAGE_MARKER).count() == 1
                }
            };
            if !ok {
                return Err(Error::Config(format!(
                    "template {t:?} breaks the placeholder rules of {:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Uniform draw of one template.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&str> {
        if self.templates.is_empty() {
            return Err(Error::Config(format!("empty {:?} template set", self.kind)));
        }
        Ok(&self.templates[rng.random_range(0..self.templates.len())])
    }
}

/// Substitutes `modifier` for the single `{MOD}` placeholder.
pub fn format_modification(template: &str, modifier: &str) -> Result<String> {
    match template.matches(MOD).count() {
        1 => Ok(template.replacen(MOD, modifier, 1)),
        n => Err(Error::Contract(format!(
            "template must contain {MOD} exactly once, found {n}: {template:?}"
        ))),
    }
}

/// Caption text followed by a summary suffix.
pub fn format_caption(caption: &str, suffix: &str) -> String {
    if suffix.is_empty() {
        caption.to_string()
    } else {
        format!("{caption} {suffix}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage1Kind {
    Image,
    Caption,
}

pub fn stage1_prompt(kind: Stage1Kind) -> &'static str {
    match kind {
        Stage1Kind::Image => STAGE1_IMAGE,
        Stage1Kind::Caption => STAGE1_CAPTION,
    }
}

/// Full image-side stage-1 prompt with the image marker.
pub fn stage1_image_prompt() -> String {
    format!("{IMAGE_MARKER} {STAGE1_IMAGE}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    SyntheticCirrLike,
    SyntheticCircoLike,
}

impl BenchmarkKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::SyntheticCirrLike => "synthetic_cirr_like",
            BenchmarkKind::SyntheticCircoLike => "synthetic_circo_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic_cirr_like" => Ok(BenchmarkKind::SyntheticCirrLike),
            "synthetic_circo_like" => Ok(BenchmarkKind::SyntheticCircoLike),
            _ => Err(Error::Config(format!("unknown benchmark {s:?}"))),
        }
    }
}

/// `(target caption template, modification template)` used at retrieval time.
pub fn inference_templates(benchmark: BenchmarkKind) -> (&'static str, &'static str) {
    match benchmark {
        BenchmarkKind::SyntheticCirrLike | BenchmarkKind::SyntheticCircoLike => {
            (INFERENCE_CAPTION, INFERENCE_MODIFICATION)
        }
    }
}

/// Every template string the pipeline can emit, for vocabulary building.
pub fn all_template_strings() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = Vec::new();
    v.extend(IMAGE_MODIFICATION);
    v.extend(CAPTION_SUMMARY);
    v.extend([STAGE1_IMAGE, STAGE1_CAPTION, INFERENCE_CAPTION, INFERENCE_MODIFICATION]);
    v
}

/// The training-time template sets, overridable as a whole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBook {
    pub image_modification: TemplateSet,
    pub caption_summary: TemplateSet,
}

impl Default for TemplateBook {
    fn default() -> Self {
        Self {
            image_modification: TemplateSet::image_modification(),
            caption_summary: TemplateSet::caption_summary(),
        }
    }
}

impl TemplateBook {
    pub fn fixed() -> Self {
        Self {
            image_modification: TemplateSet::from_strs(
                TemplateKind::ImageModification,
                &[FIXED_MODIFICATION],
            ),
            caption_summary: TemplateSet::from_strs(TemplateKind::CaptionSummary, &[FIXED_SUMMARY]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_modification.kind != TemplateKind::ImageModification
            || self.caption_summary.kind != TemplateKind::CaptionSummary
        {
            return Err(Error::Config("template book sets have the wrong kinds".into()));
        }
        self.image_modification.validate()?;
        self.caption_summary.validate()?;
        if self.image_modification.templates.is_empty() || self.caption_summary.templates.is_empty() {
            return Err(Error::Config("template book sets must be nonempty".into()));
        }
        Ok(())
    }
}
