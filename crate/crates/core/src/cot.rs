//! Step-by-step prompt text for an external chat model that would derive
//! (modifier, modified caption) from a caption. Only construction ships;
//! the rule-based generator in [`crate::world`] plays the model's part.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::world::{caption, mutate, sample_scene, SceneSpec, Slot};

const TASK_DEFINITION: &str = "Task: you receive an image caption. Write a short instruction that changes \
some content of the described image, and the caption of the image after the change.";

const REQUIREMENTS: &str = "Requirements:\n\
- First list the key concepts of the caption: object, color, action and background.\n\
- Pick one concept, or occasionally two, and replace each with a different plausible value.\n\
- Phrase the change as an instruction that names only the replaced concepts.\n\
- Write the new caption so it keeps every concept that was not replaced.\n\
- Answer with the instruction and the new caption, nothing else.";

/// Seed of the fixed example stream; examples never depend on the query.
const EXAMPLE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkedExample {
    pub caption: String,
    pub key_concepts: String,
    pub alteration: String,
    pub modifier: String,
    pub modified_caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotPrompt {
    pub task_definition: String,
    pub requirements: String,
    pub fewshot_examples: Vec<WorkedExample>,
    pub query_caption: String,
}

fn concepts(s: &SceneSpec) -> String {
    format!(
        "object={}, color={}, action={}, background={}",
        s.object.word(),
        s.color.word(),
        s.action.word(),
        s.background.word()
    )
}

fn slot_word(s: &SceneSpec, slot: Slot) -> &'static str {
    match slot {
        Slot::Object => s.object.word(),
        Slot::Color => s.color.word(),
        Slot::Action => s.action.word(),
        Slot::Background => s.background.word(),
    }
}

fn worked_example(s: &SceneSpec, t: String, s2: &SceneSpec) -> WorkedExample {
    let alteration: Vec<String> = s
        .differing_slots(s2)
        .into_iter()
        .map(|slot| format!("{} {} -> {}", slot.name(), slot_word(s, slot), slot_word(s2, slot)))
        .collect();
    WorkedExample {
        caption: caption(s),
        key_concepts: concepts(s),
        alteration: alteration.join("; "),
        modifier: t,
        modified_caption: caption(s2),
    }
}

pub fn build_cot_prompt(query_caption: &str, k_examples: usize) -> Result<CotPrompt> {
    if k_examples == 0 {
        return Err(Error::Contract("at least one worked example is required".into()));
    }
    let mut rng = substream(EXAMPLE_SEED, "cot-examples");
    let mut examples = Vec::with_capacity(k_examples);
    while examples.len() < k_examples {
        let s = sample_scene(&mut rng);
        let (t, s2) = mutate(&s, &mut rng);
        let ex = worked_example(&s, t, &s2);
        // keep the query unique in the rendered text
        let clash = !query_caption.is_empty()
            && [&ex.caption, &ex.modified_caption, &ex.modifier]
                .iter()
                .any(|f| f.contains(query_caption));
        if !clash {
            examples.push(ex);
        }
    }
    Ok(CotPrompt {
        task_definition: TASK_DEFINITION.into(),
        requirements: REQUIREMENTS.into(),
        fewshot_examples: examples,
        query_caption: query_caption.into(),
    })
}

impl CotPrompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.task_definition);
        out.push_str("\n\n");
        out.push_str(&self.requirements);
        out.push_str("\n\n");
        for (i, ex) in self.fewshot_examples.iter().enumerate() {
            out.push_str(&format!(
                "Example {}:\nCaption: {}\nKey concepts: {}\nAlteration: {}\nModifier text: {}\nModified caption: {}\n\n",
                i + 1,
                ex.caption,
                ex.key_concepts,
                ex.alteration,
                ex.modifier,
                ex.modified_caption
            ));
        }
        out.push_str(&format!("Input caption: {}\nOutput:\n", self.query_caption));
        out
    }
}
