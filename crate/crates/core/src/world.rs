//! The synthetic scene world: a closed grammar of object, color, action and
//! background, a renderer, captions, and concept-level modifications.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! grammar_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

grammar_enum!(Object {
    Dog => "dog", Cat => "cat", Car => "car", Bus => "bus",
    Bird => "bird", Boat => "boat", Chair => "chair", Tree => "tree",
});
grammar_enum!(Color {
    Red => "red", Orange => "orange", Yellow => "yellow",
    White => "white", Black => "black", Purple => "purple",
});
grammar_enum!(Action {
    Standing => "standing", Running => "running", Lying => "lying", Flying => "flying",
});
grammar_enum!(Background {
    Grass => "grass", Sand => "sand", Road => "road", Water => "water",
});

pub const GRAMMAR_SIZE: usize = 8 * 6 * 4 * 4;

/// One of the four concept slots of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Object,
    Color,
    Action,
    Background,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Object, Slot::Color, Slot::Action, Slot::Background];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Object => "object",
            Slot::Color => "color",
            Slot::Action => "action",
            Slot::Background => "background",
        }
    }

    fn cardinality(self) -> usize {
        match self {
            Slot::Object => Object::ALL.len(),
            Slot::Color => Color::ALL.len(),
            Slot::Action => Action::ALL.len(),
            Slot::Background => Background::ALL.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object: Object,
    pub color: Color,
    pub action: Action,
    pub background: Background,
}

impl SceneSpec {
    /// Dense index in `0..GRAMMAR_SIZE`.
    pub fn index(&self) -> usize {
        ((self.object.index() * 6 + self.color.index()) * 4 + self.action.index()) * 4
            + self.background.index()
    }

    pub fn from_index(i: usize) -> Self {
        let i = i % GRAMMAR_SIZE;
        Self {
            background: Background::ALL[i % 4],
            action: Action::ALL[(i / 4) % 4],
            color: Color::ALL[(i / 16) % 6],
            object: Object::ALL[i / 96],
        }
    }

    pub fn all() -> impl Iterator<Item = SceneSpec> {
        (0..GRAMMAR_SIZE).map(Self::from_index)
    }

    pub fn slot_value(&self, slot: Slot) -> usize {
        match slot {
            Slot::Object => self.object.index(),
            Slot::Color => self.color.index(),
            Slot::Action => self.action.index(),
            Slot::Background => self.background.index(),
        }
    }

    pub fn with_slot(mut self, slot: Slot, value: usize) -> Self {
        match slot {
            Slot::Object => self.object = Object::ALL[value],
            Slot::Color => self.color = Color::ALL[value],
            Slot::Action => self.action = Action::ALL[value],
            Slot::Background => self.background = Background::ALL[value],
        }
        self
    }

    /// Slots on which `self` and `other` differ, in slot order.
    pub fn differing_slots(&self, other: &SceneSpec) -> Vec<Slot> {
        Slot::ALL
            .into_iter()
            .filter(|&s| self.slot_value(s) != other.slot_value(s))
            .collect()
    }

    pub fn shared_slots(&self, other: &SceneSpec) -> usize {
        4 - self.differing_slots(other).len()
    }
}

/// Scene ids encode their scene: `id = serial * GRAMMAR_SIZE + spec.index()`,
/// so images can be regenerated from the id alone.
pub fn scene_for_id(id: u64) -> SceneSpec {
    SceneSpec::from_index((id % GRAMMAR_SIZE as u64) as usize)
}

pub fn scene_id(serial: u64, spec: &SceneSpec) -> u64 {
    serial * GRAMMAR_SIZE as u64 + spec.index() as u64
}

/// Uniform draw over the grammar product.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    SceneSpec::from_index(rng.random_range(0..GRAMMAR_SIZE))
}

/// Every word the grammar and the instruction phrases can produce.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = vec![
        "a", "on", "the", "change", "to", "make", "it", "instead", "move", "and",
    ];
    w.extend(Object::ALL.iter().map(|o| o.word()));
    w.extend(Color::ALL.iter().map(|o| o.word()));
    w.extend(Action::ALL.iter().map(|o| o.word()));
    w.extend(Background::ALL.iter().map(|o| o.word()));
    w
}

// ---------------------------------------------------------------------------
// rendering

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub size: usize,
    /// Row-major `size x size x 3`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.size + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Flattened `patch x patch x 3` blocks in row-major patch order.
    pub fn patches(&self, patch: usize) -> Vec<Vec<f32>> {
        let side = self.size / patch;
        let mut out = Vec::with_capacity(side * side);
        for py in 0..side {
            for px in 0..side {
                let mut v = Vec::with_capacity(patch * patch * 3);
                for y in py * patch..(py + 1) * patch {
                    let o = (y * self.size + px * patch) * 3;
                    v.extend_from_slice(&self.pixels[o..o + patch * 3]);
                }
                out.push(v);
            }
        }
        out
    }
}

pub fn color_rgb(c: Color) -> [f32; 3] {
    match c {
        Color::Red => [0.9, 0.1, 0.1],
        Color::Orange => [1.0, 0.55, 0.0],
        Color::Yellow => [0.95, 0.9, 0.1],
        Color::White => [0.97, 0.97, 0.97],
        Color::Black => [0.05, 0.05, 0.05],
        Color::Purple => [0.55, 0.15, 0.75],
    }
}

pub fn background_rgb(b: Background) -> [f32; 3] {
    match b {
        Background::Grass => [0.25, 0.6, 0.2],
        Background::Sand => [0.85, 0.75, 0.5],
        Background::Road => [0.45, 0.45, 0.45],
        Background::Water => [0.15, 0.35, 0.8],
    }
}

/// Shape silhouette in local coordinates, roughly the unit disc.
fn inside(object: Object, u: f32, v: f32) -> bool {
    let (au, av) = (libm::fabsf(u), libm::fabsf(v));
    let r2 = u * u + v * v;
    match object {
        Object::Dog => au <= 0.75 && av <= 0.75,
        Object::Cat => r2 <= 0.85 * 0.85,
        Object::Car => au <= 1.0 && av <= 0.45,
        Object::Bus => au <= 0.45 && av <= 1.0,
        // v grows downwards: apex at the top
        Object::Bird => (-0.9..=0.8).contains(&v) && au <= (v + 0.9) * 0.6,
        Object::Boat => (-0.8..=0.9).contains(&v) && au <= (0.9 - v) * 0.6,
        Object::Chair => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        Object::Tree => (0.5 * 0.5..=0.95 * 0.95).contains(&r2),
    }
}

/// Centre (fractions of the canvas) and per-axis radius factors.
fn placement(action: Action) -> (f32, f32, f32, f32) {
    match action {
        Action::Standing => (0.32, 0.55, 1.0, 1.0),
        Action::Running => (0.70, 0.50, 1.0, 1.0),
        Action::Lying => (0.50, 0.78, 1.35, 0.6),
        Action::Flying => (0.45, 0.24, 1.0, 1.0),
    }
}

/// Mask of object pixels, row-major.
pub fn object_mask(spec: &SceneSpec, size: usize) -> Vec<bool> {
    let (cx, cy, sx, sy) = placement(spec.action);
    let radius = 0.2 * size as f32;
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f32 + 0.5) - cx * size as f32) / (radius * sx);
            let v = ((y as f32 + 0.5) - cy * size as f32) / (radius * sy);
            mask[y * size + x] = inside(spec.object, u, v);
        }
    }
    mask
}

/// Background colour everywhere, the object's silhouette in the scene
/// colour at the action's placement.
pub fn render_image(spec: &SceneSpec, size: usize, patch_size: usize) -> Result<ImageGrid> {
    if patch_size == 0 || size == 0 || size % patch_size != 0 {
        return Err(Error::Config(format!(
            "image size {size} is not a positive multiple of patch size {patch_size}"
        )));
    }
    let bg = background_rgb(spec.background);
    let fg = color_rgb(spec.color);
    let mask = object_mask(spec, size);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for &m in &mask {
        pixels.extend_from_slice(if m { &fg } else { &bg });
    }
    Ok(ImageGrid { size, pixels })
}

// ---------------------------------------------------------------------------
// captions and modifications

pub fn caption(s: &SceneSpec) -> String {
    format!(
        "a {} {} {} on the {}",
        s.color.word(),
        s.object.word(),
        s.action.word(),
        s.background.word()
    )
}

pub fn parse_caption(text: &str) -> Option<SceneSpec> {
    let w: Vec<&str> = text.split_whitespace().collect();
    match w.as_slice() {
        ["a", color, object, action, "on", "the", background] => Some(SceneSpec {
            object: Object::from_word(object)?,
            color: Color::from_word(color)?,
            action: Action::from_word(action)?,
            background: Background::from_word(background)?,
        }),
        _ => None,
    }
}

/// Phrase naming the new value of one slot, given the scene before the edit.
pub fn slot_phrase(before: &SceneSpec, slot: Slot, value: usize) -> String {
    match slot {
        Slot::Object => format!(
            "change the {} to a {}",
            before.object.word(),
            Object::ALL[value].word()
        ),
        Slot::Color => format!("make it {}", Color::ALL[value].word()),
        Slot::Action => format!("make it {} instead", Action::ALL[value].word()),
        Slot::Background => format!("move it to the {}", Background::ALL[value].word()),
    }
}

/// Instruction turning `before` into `after`; slots listed in slot order.
pub fn instruction_between(before: &SceneSpec, after: &SceneSpec) -> String {
    let phrases: Vec<String> = before
        .differing_slots(after)
        .into_iter()
        .map(|s| slot_phrase(before, s, after.slot_value(s)))
        .collect();
    phrases.join(" and ")
}

/// Parses an instruction into `(slot, new value)` edits.
pub fn parse_instruction(t: &str) -> Option<Vec<(Slot, usize, Option<Object>)>> {
    let mut edits = Vec::new();
    for phrase in t.split(" and ") {
        let w: Vec<&str> = phrase.split_whitespace().collect();
        let edit = match w.as_slice() {
            ["change", "the", old, "to", "a", new] => (
                Slot::Object,
                Object::from_word(new)?.index(),
                Some(Object::from_word(old)?),
            ),
            ["make", "it", action, "instead"] => (Slot::Action, Action::from_word(action)?.index(), None),
            ["make", "it", color] => (Slot::Color, Color::from_word(color)?.index(), None),
            ["move", "it", "to", "the", bg] => {
                (Slot::Background, Background::from_word(bg)?.index(), None)
            }
            _ => return None,
        };
        edits.push(edit);
    }
    Some(edits)
}

/// Applies a parsed instruction; object edits must name the current object.
pub fn apply_instruction(s: &SceneSpec, t: &str) -> Result<SceneSpec> {
    let edits =
        parse_instruction(t).ok_or_else(|| Error::Contract(format!("unparseable instruction {t:?}")))?;
    let mut out = *s;
    for (slot, value, old) in edits {
        if let Some(old) = old {
            if old != s.object {
                return Err(Error::Contract(format!(
                    "instruction names {} but the scene shows {}",
                    old.word(),
                    s.object.word()
                )));
            }
        }
        out = out.with_slot(slot, value);
    }
    Ok(out)
}

/// Probability that a modification touches one slot rather than two.
pub const SINGLE_SLOT_PROB: f64 = 0.8;

/// Identify, alter, derive: picks one slot (p = 0.8) or two, draws new
/// values different from the current ones and phrases the change.
pub fn mutate<R: Rng + ?Sized>(s: &SceneSpec, rng: &mut R) -> (String, SceneSpec) {
    let n = if rng.random::<f64>() < SINGLE_SLOT_PROB { 1 } else { 2 };
    let mut slots = Slot::ALL.to_vec();
    // partial Fisher-Yates
    for i in 0..n {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut chosen = slots[..n].to_vec();
    chosen.sort();
    let mut out = *s;
    for slot in chosen {
        let card = slot.cardinality();
        let old = s.slot_value(slot);
        let mut v = rng.random_range(0..card - 1);
        if v >= old {
            v += 1;
        }
        out = out.with_slot(slot, v);
    }
    (instruction_between(s, &out), out)
}

/// Every scene reachable from `s` by changing exactly `n` slots.
pub fn neighbours(s: &SceneSpec, n: usize) -> Vec<SceneSpec> {
    SceneSpec::all()
        .filter(|o| s.differing_slots(o).len() == n)
        .collect()
}
