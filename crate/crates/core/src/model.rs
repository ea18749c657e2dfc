//! Toy multimodal encoder: patch projection and bidirectional blocks for
//! the image, an adapter into the language width, and a causal decoder whose
//! last (EOS) hidden state, L2-normalized, is the embedding.
//!
//! Linear weights are stored `out x in` and applied as `x . W^T + b`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{normal, StreamRng};
use crate::templates::format_modification;
use crate::tensor::{Shape, Tensor};
use crate::tokenizer::{encode_prompt, TokenSeq, Vocab, IMG};
use crate::world::ImageGrid;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vis: usize,
    pub n_vis_layers: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    /// Hidden width of the feed-forward blocks as a multiple of the input width.
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_vis: 32,
            n_vis_layers: 1,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 64,
            vocab_size,
            mlp_ratio: 4,
        }
    }

    /// Patches per image side.
    pub fn patches_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_side() * self.patches_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if [self.d_vis, self.d_model, self.n_heads, self.max_seq, self.mlp_ratio].contains(&0) {
            return fail("widths, heads, max_seq and mlp_ratio must be positive".into());
        }
        if self.d_model % self.n_heads != 0 || self.d_vis % self.n_heads != 0 {
            return fail(format!(
                "d_model {} and d_vis {} must be divisible by n_heads {}",
                self.d_model, self.d_vis, self.n_heads
            ));
        }
        if self.n_patches() + 1 > self.max_seq {
            return fail(format!(
                "{} image rows leave no room for text in max_seq {}",
                self.n_patches(),
                self.max_seq
            ));
        }
        if self.vocab_size <= IMG as usize {
            return fail("vocab must hold the reserved tokens".into());
        }
        Ok(())
    }
}

/// The three parts of the base model plus the optional low-rank deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Visual,
    Adapter,
    Llm,
    LowRank,
}

impl Component {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "visual" => Some(Component::Visual),
            "adapter" => Some(Component::Adapter),
            "llm" => Some(Component::Llm),
            "lora" => Some(Component::LowRank),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Component::Visual),
            "adapter" => Ok(Component::Adapter),
            "llm" => Ok(Component::Llm),
            "lora" | "low_rank" => Ok(Component::LowRank),
            _ => Err(Error::Config(format!("unknown component {s:?}"))),
        }
    }
}

/// Low-rank settings; the factors themselves live in the parameter map as
/// `lora.<target>.a` (`r x in`) and `lora.<target>.b` (`out x r`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankSpec {
    pub targets: Vec<String>,
    pub r: usize,
    pub alpha: f64,
}

impl LowRankSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

pub fn lora_a_name(target: &str) -> String {
    format!("lora.{target}.a")
}

pub fn lora_b_name(target: &str) -> String {
    format!("lora.{target}.b")
}

/// Attention projections of every decoder block.
pub fn default_low_rank_targets(cfg: &ModelConfig) -> Vec<String> {
    let mut v = Vec::new();
    for l in 0..cfg.n_layers {
        for p in ["q", "k", "v", "o"] {
            v.push(format!("llm.block{l}.attn.{p}.w"));
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    params: BTreeMap<String, Tensor<T>>,
    low_rank: Option<LowRankSpec>,
}

struct Init<'a> {
    rng: &'a mut StreamRng,
    out: Vec<(String, Tensor<f32>)>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: Shape, std: f64) {
        let data = (0..shape.numel())
            .map(|_| (normal(self.rng) * std) as f32)
            .collect();
        self.out.push((name, Tensor::new(shape, data).expect("init shape")));
    }

    fn fill(&mut self, name: String, n: usize, v: f32) {
        self.out.push((name, Tensor::filled(Shape::vector(n), v)));
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize, gain: f64) {
        let std = gain / libm::sqrt(input as f64);
        self.normal(format!("{prefix}.w"), Shape::matrix(output, input), std);
        self.fill(format!("{prefix}.b"), output, 0.0);
    }

    fn norm(&mut self, prefix: &str, n: usize) {
        self.fill(format!("{prefix}.g"), n, 1.0);
        self.fill(format!("{prefix}.b"), n, 0.0);
    }

    fn block(&mut self, prefix: &str, d: usize, mlp: usize, residual_gain: f64) {
        self.norm(&format!("{prefix}.ln1"), d);
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.attn.{p}"), d, d, 1.0);
        }
        self.linear(&format!("{prefix}.attn.o"), d, d, residual_gain);
        self.norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp.up"), d, d * mlp, 1.0);
        self.linear(&format!("{prefix}.mlp.down"), d * mlp, d, residual_gain);
    }
}

pub const TOKEN_EMBED_STD: f64 = 0.5;
pub const POS_EMBED_STD: f64 = 0.2;

impl Model<f32> {
    /// Random initialization from the given stream.
    pub fn init(config: ModelConfig, vocab: Vocab, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab has {} entries but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let c = &config;
        let mut init = Init { rng, out: Vec::new() };
        init.linear("visual.patch", c.patch_dim(), c.d_vis, 1.0);
        let vis_gain = 1.0 / libm::sqrt(2.0 * c.n_vis_layers.max(1) as f64);
        for l in 0..c.n_vis_layers {
            init.block(&format!("visual.block{l}"), c.d_vis, c.mlp_ratio, vis_gain);
        }
        init.norm("visual.norm", c.d_vis);
        init.linear("adapter.fc1", c.d_vis, c.d_model, 1.0);
        init.linear("adapter.fc2", c.d_model, c.d_model, 1.0);
        init.normal("llm.tok_embed".into(), Shape::matrix(c.vocab_size, c.d_model), TOKEN_EMBED_STD);
        init.normal("llm.pos_embed".into(), Shape::matrix(c.max_seq, c.d_model), POS_EMBED_STD);
        let gain = 1.0 / libm::sqrt(2.0 * c.n_layers.max(1) as f64);
        for l in 0..c.n_layers {
            init.block(&format!("llm.block{l}"), c.d_model, c.mlp_ratio, gain);
        }
        init.norm("llm.norm", c.d_model);
        let params = init.out.into_iter().collect();
        Ok(Self {
            config,
            vocab,
            params,
            low_rank: None,
        })
    }
}

impl<T: Real> Model<T> {
    /// Reassembles a model from named tensors, checking names and shapes
    /// against a freshly laid out model of the same config.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        params: BTreeMap<String, Tensor<T>>,
        low_rank: Option<LowRankSpec>,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config("vocab size does not match config".into()));
        }
        let mut expected = layout(&config);
        if let Some(lr) = &low_rank {
            for t in &lr.targets {
                let base = *expected
                    .get(t)
                    .ok_or_else(|| Error::Config(format!("unknown low-rank target {t}")))?;
                let (out, inp) = (base.rows(), base.cols());
                expected.insert(lora_a_name(t), Shape::matrix(lr.r, inp));
                expected.insert(lora_b_name(t), Shape::matrix(out, lr.r));
            }
        }
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == *shape => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "checkpoint tensor",
                        lhs: *shape,
                        rhs: t.shape(),
                    })
                }
                None => return Err(Error::Config(format!("missing tensor {name}"))),
            }
        }
        Ok(Self {
            config,
            vocab,
            params,
            low_rank,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn low_rank(&self) -> Option<&LowRankSpec> {
        self.low_rank.as_ref()
    }

    pub fn names_in(&self, c: Component) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .filter(move |n| Component::of(n) == Some(c))
            .map(String::as_str)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Marks exactly the tensors of the listed components as trainable.
    pub fn set_trainable(&mut self, components: &[Component]) {
        for (name, t) in self.params.iter_mut() {
            t.requires_grad = Component::of(name).is_some_and(|c| components.contains(&c));
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            low_rank: self.low_rank.clone(),
        }
    }

    /// Adds zero-initialized `B` and small random `A` factors to each target.
    pub fn attach_low_rank(
        &mut self,
        targets: &[String],
        r: usize,
        alpha: f64,
        rng: &mut StreamRng,
    ) -> Result<()> {
        if self.low_rank.is_some() {
            return Err(Error::Config("low-rank deltas already attached".into()));
        }
        if r == 0 || targets.is_empty() {
            return Err(Error::Config("low-rank rank and target list must be nonempty".into()));
        }
        let mut new = Vec::new();
        for t in targets {
            let base = self
                .params
                .get(t)
                .ok_or_else(|| Error::Config(format!("unknown low-rank target {t}")))?;
            let s = base.shape();
            if s.rank() != 2 || r > s.rows().min(s.cols()) {
                return Err(Error::Config(format!(
                    "low-rank target {t} of shape {s} cannot take rank {r}"
                )));
            }
            let std = 1.0 / libm::sqrt(s.cols() as f64);
            let a: Vec<T> = (0..r * s.cols())
                .map(|_| T::from_f64(normal(rng) * std))
                .collect();
            new.push((lora_a_name(t), Tensor::new(Shape::matrix(r, s.cols()), a)?));
            new.push((lora_b_name(t), Tensor::zeros(Shape::matrix(s.rows(), r))));
        }
        self.params.extend(new);
        self.low_rank = Some(LowRankSpec {
            targets: targets.to_vec(),
            r,
            alpha,
        });
        Ok(())
    }

    /// Folds `scale * B . A` into each target and drops the factors.
    pub fn merge_low_rank(&self) -> Model<T> {
        let mut out = self.clone();
        let Some(lr) = out.low_rank.take() else {
            return out;
        };
        let scale = T::from_f64(lr.scale());
        for t in &lr.targets {
            let a = out.params.remove(&lora_a_name(t)).expect("attached factor");
            let b = out.params.remove(&lora_b_name(t)).expect("attached factor");
            let w = out.params.get_mut(t).expect("attached target");
            let (rows, cols, r) = (w.shape().rows(), w.shape().cols(), lr.r);
            let wd = w.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    let mut s = T::ZERO;
                    for k in 0..r {
                        s += b.data()[i * r + k] * a.data()[k * cols + j];
                    }
                    wd[i * cols + j] += scale * s;
                }
            }
        }
        out
    }

    /// Tokenizes a prompt, checking that an image is supplied iff the
    /// prompt carries the image marker.
    pub fn tokenize(&self, prompt: &str, image: Option<&ImageGrid>) -> Result<TokenSeq> {
        let seq = encode_prompt(prompt, &self.vocab);
        if seq.has_image_prefix != image.is_some() {
            return Err(Error::Contract(format!(
                "prompt {prompt:?} and image presence disagree"
            )));
        }
        Ok(seq)
    }

    /// Unit embedding of `(image?, prompt)` as plain values.
    pub fn embed_value(&self, image: Option<&ImageGrid>, prompt: &str) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(self);
        let e = embed(&mut tape, &mut b, image, prompt)?;
        Ok(tape.value(e.h).to_vec())
    }

    /// Composed query embedding of an image and an instruction under a
    /// modification template.
    pub fn compose_query(&self, image: &ImageGrid, instruction: &str, template: &str) -> Result<Vec<T>> {
        let prompt = format_modification(template, instruction)?;
        self.embed_value(Some(image), &prompt)
    }
}

/// Names and shapes of the base parameters for `cfg`.
pub fn layout(cfg: &ModelConfig) -> BTreeMap<String, Shape> {
    let mut m = BTreeMap::new();
    let linear = |m: &mut BTreeMap<String, Shape>, p: &str, i: usize, o: usize| {
        m.insert(format!("{p}.w"), Shape::matrix(o, i));
        m.insert(format!("{p}.b"), Shape::vector(o));
    };
    let norm = |m: &mut BTreeMap<String, Shape>, p: &str, n: usize| {
        m.insert(format!("{p}.g"), Shape::vector(n));
        m.insert(format!("{p}.b"), Shape::vector(n));
    };
    let block = |m: &mut BTreeMap<String, Shape>, p: &str, d: usize| {
        norm(m, &format!("{p}.ln1"), d);
        for x in ["q", "k", "v", "o"] {
            linear(m, &format!("{p}.attn.{x}"), d, d);
        }
        norm(m, &format!("{p}.ln2"), d);
        linear(m, &format!("{p}.mlp.up"), d, d * cfg.mlp_ratio);
        linear(m, &format!("{p}.mlp.down"), d * cfg.mlp_ratio, d);
    };
    linear(&mut m, "visual.patch", cfg.patch_dim(), cfg.d_vis);
    for l in 0..cfg.n_vis_layers {
        block(&mut m, &format!("visual.block{l}"), cfg.d_vis);
    }
    norm(&mut m, "visual.norm", cfg.d_vis);
    linear(&mut m, "adapter.fc1", cfg.d_vis, cfg.d_model);
    linear(&mut m, "adapter.fc2", cfg.d_model, cfg.d_model);
    m.insert("llm.tok_embed".into(), Shape::matrix(cfg.vocab_size, cfg.d_model));
    m.insert("llm.pos_embed".into(), Shape::matrix(cfg.max_seq, cfg.d_model));
    for l in 0..cfg.n_layers {
        block(&mut m, &format!("llm.block{l}"), cfg.d_model);
    }
    norm(&mut m, "llm.norm", cfg.d_model);
    m
}

// ---------------------------------------------------------------------------
// graph construction

/// Records parameters on a tape on first use. Trainable parameters become
/// differentiated leaves unless the binder is frozen.
pub struct Binder<'m, T: Real> {
    model: &'m Model<T>,
    vars: BTreeMap<&'m str, Var>,
    frozen: bool,
}

/// Gradients keyed by parameter name.
pub type Grads<T> = BTreeMap<String, Vec<T>>;

impl<'m, T: Real> Binder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            vars: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Binds every parameter as a constant.
    pub fn frozen(model: &'m Model<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(model)
        }
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn param(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .model
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        let v = if self.frozen || !t.requires_grad {
            tape.constant(t.shape(), t.data().to_vec())?
        } else {
            tape.leaf(t)
        };
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Binds `name` to an existing tape node instead of the stored tensor.
    pub fn substitute(&mut self, name: &str, v: Var) -> Result<()> {
        let (key, _) = self
            .model
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        self.vars.insert(key.as_str(), v);
        Ok(())
    }

    pub fn bound(&self) -> impl Iterator<Item = (&'m str, Var)> + '_ {
        self.vars.iter().map(|(&n, &v)| (n, v))
    }

    /// Adds the gradients of the last backward pass into `grads`.
    pub fn collect_grads(&self, tape: &Tape<T>, grads: &mut Grads<T>) {
        for (&name, &v) in &self.vars {
            if let Some(g) = tape.grad(v) {
                match grads.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(name.to_string(), g.to_vec());
                    }
                }
            }
        }
    }

    /// `x . W^T + b`, with the low-rank delta folded into `W` when attached.
    fn linear(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let wname = format!("{prefix}.w");
        let mut w = self.param(tape, &wname)?;
        if let Some(lr) = self.model.low_rank.as_ref() {
            if lr.targets.iter().any(|t| *t == wname) {
                let a = self.param(tape, &lora_a_name(&wname))?;
                let b = self.param(tape, &lora_b_name(&wname))?;
                let ba = tape.matmul(b, a)?;
                let delta = tape.mul_scalar(ba, T::from_f64(lr.scale()));
                w = tape.add(w, delta)?;
            }
        }
        let y = tape.matmul_nt(x, w)?;
        let b = self.param(tape, &format!("{prefix}.b"))?;
        tape.add_row(y, b)
    }

    fn norm(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(tape, &format!("{prefix}.g"))?;
        let b = self.param(tape, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, T::from_f64(LN_EPS))
    }

    /// Pre-norm transformer block.
    fn block(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str, causal: bool) -> Result<Var> {
        let heads = self.model.config.n_heads;
        let h = self.norm(tape, x, &format!("{prefix}.ln1"))?;
        let q = self.linear(tape, h, &format!("{prefix}.attn.q"))?;
        let k = self.linear(tape, h, &format!("{prefix}.attn.k"))?;
        let v = self.linear(tape, h, &format!("{prefix}.attn.v"))?;
        let a = tape.attention(q, k, v, heads, causal)?;
        let o = self.linear(tape, a, &format!("{prefix}.attn.o"))?;
        let x = tape.add(x, o)?;
        let h = self.norm(tape, x, &format!("{prefix}.ln2"))?;
        let u = self.linear(tape, h, &format!("{prefix}.mlp.up"))?;
        let u = tape.gelu(u);
        let d = self.linear(tape, u, &format!("{prefix}.mlp.down"))?;
        tape.add(x, d)
    }
}

/// Image rows in the language width, one per patch in row-major order.
pub fn encode_image<T: Real>(tape: &mut Tape<T>, b: &mut Binder<'_, T>, img: &ImageGrid) -> Result<Var> {
    let cfg = &b.model().config;
    if img.size != cfg.image_size {
        return Err(Error::Config(format!(
            "image of size {} given to a model for size {}",
            img.size, cfg.image_size
        )));
    }
    let n_vis = cfg.n_vis_layers;
    let patches = img.patches(cfg.patch_size);
    let rows = patches.len();
    let data: Vec<T> = patches.concat().into_iter().map(|v| T::from_f64(v as f64)).collect();
    let x = tape.constant(Shape::matrix(rows, cfg.patch_dim()), data)?;
    let mut x = b.linear(tape, x, "visual.patch")?;
    for l in 0..n_vis {
        x = b.block(tape, x, &format!("visual.block{l}"), false)?;
    }
    let x = b.norm(tape, x, "visual.norm")?;
    let x = b.linear(tape, x, "adapter.fc1")?;
    let x = tape.gelu(x);
    b.linear(tape, x, "adapter.fc2")
}

/// Runs the decoder over `tokens`, splicing `image_rows` in place of the
/// leading IMG token. Returns the final-normed hidden states, `L x d_model`.
pub fn forward_sequence<T: Real>(
    tape: &mut Tape<T>,
    b: &mut Binder<'_, T>,
    image_rows: Option<Var>,
    tokens: &TokenSeq,
) -> Result<Var> {
    let cfg = b.model().config.clone();
    if tokens.has_image_prefix != image_rows.is_some() {
        return Err(Error::Contract("image rows and IMG prefix disagree".into()));
    }
    let text: Vec<usize> = tokens
        .ids
        .iter()
        .skip(tokens.has_image_prefix as usize)
        .map(|&i| i as usize)
        .collect();
    if text.is_empty() {
        return Err(Error::Contract("token sequence has no text positions".into()));
    }
    let img_len = image_rows.map_or(0, |r| tape.shape(r).rows());
    let len = img_len + text.len();
    if len > cfg.max_seq {
        return Err(Error::Length {
            len,
            max: cfg.max_seq,
        });
    }
    let table = b.param(tape, "llm.tok_embed")?;
    let emb = tape.embedding_lookup(table, &text)?;
    let x = match image_rows {
        Some(r) => tape.concat_rows(&[r, emb])?,
        None => emb,
    };
    let pos_table = b.param(tape, "llm.pos_embed")?;
    let pos = tape.slice_rows(pos_table, 0, len)?;
    let mut x = tape.add(x, pos)?;
    for l in 0..cfg.n_layers {
        x = b.block(tape, x, &format!("llm.block{l}"), true)?;
    }
    b.norm(tape, x, "llm.norm")
}

/// Nodes of one embedding pass.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    /// Final hidden states, `L x d_model`.
    pub hidden: Var,
    /// Unit EOS-position state, `1 x d_model`.
    pub h: Var,
    /// Leading rows of `hidden` that belong to the image.
    pub image_len: usize,
}

pub fn embed_tokens<T: Real>(
    tape: &mut Tape<T>,
    b: &mut Binder<'_, T>,
    image: Option<&ImageGrid>,
    tokens: &TokenSeq,
) -> Result<Embedded> {
    let rows = match image {
        Some(img) => Some(encode_image(tape, b, img)?),
        None => None,
    };
    let image_len = rows.map_or(0, |r| tape.shape(r).rows());
    let hidden = forward_sequence(tape, b, rows, tokens)?;
    let len = tape.shape(hidden).rows();
    let last = tape.slice_rows(hidden, len - 1, 1)?;
    let h = tape.l2_normalize_rows(last);
    Ok(Embedded {
        hidden,
        h,
        image_len,
    })
}

pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    b: &mut Binder<'_, T>,
    image: Option<&ImageGrid>,
    prompt: &str,
) -> Result<Embedded> {
    let tokens = b.model().tokenize(prompt, image)?;
    embed_tokens(tape, b, image, &tokens)
}

/// Vocabulary over the scene grammar and every shipped template.
pub fn default_vocab() -> Vocab {
    Vocab::build(&crate::world::grammar_words(), &crate::templates::all_template_strings())
}

#[cfg(test)]
mod tests;
