use super::*;
use crate::rng::{streams, substream};
use crate::templates::{INFERENCE_MODIFICATION, STAGE1_IMAGE};
use crate::tokenizer::{decode, encode, EOS};
use crate::world::{caption, render_image, sample_scene, SceneSpec};
use rand::Rng;

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        d_vis: 8,
        n_vis_layers: 1,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq: 64,
        vocab_size: vocab,
        mlp_ratio: 2,
    }
}

fn small_model(seed: u64) -> Model {
    let vocab = default_vocab();
    let cfg = small_config(vocab.len());
    Model::init(cfg, vocab, &mut substream(seed, streams::INIT)).unwrap()
}

fn image(m: &Model, idx: usize) -> ImageGrid {
    render_image(&SceneSpec::from_index(idx), m.config.image_size, m.config.patch_size).unwrap()
}

fn hidden_values(m: &Model, img: Option<&ImageGrid>, tokens: &TokenSeq) -> Vec<f32> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(m);
    let e = embed_tokens(&mut tape, &mut b, img, tokens).unwrap();
    tape.value(e.hidden).to_vec()
}

#[test]
fn default_vocab_snapshot() {
    let v = default_vocab();
    assert_eq!(v.len(), 85);
    assert_eq!(default_vocab(), v);
    let mut rng = substream(4, "roundtrip");
    for _ in 0..1000 {
        let c = caption(&sample_scene(&mut rng));
        let seq = encode(&c, &v, false);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(decode(&seq, &v), c);
    }
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::toy(100);
    c.validate().unwrap();
    c.n_heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig::toy(100);
    c.max_seq = 16;
    assert!(c.validate().is_err());
    assert_eq!(ModelConfig::toy(5).n_patches(), 16);
}

#[test]
fn parameters_partition_into_components() {
    let m = small_model(1);
    let expected = layout(&m.config);
    assert_eq!(m.params().len(), expected.len());
    let mut counts = [0usize; 3];
    for (name, t) in m.params() {
        assert_eq!(expected[name], t.shape());
        let c = Component::of(name).unwrap();
        counts[c as usize] += 1;
        assert!(t.all_finite());
    }
    assert!(counts.iter().all(|&c| c > 0));
    let rebuilt = Model::from_parts(m.config.clone(), m.vocab.clone(), m.params().clone(), None).unwrap();
    assert_eq!(rebuilt, m);
}

#[test]
fn image_encoding_shape_and_determinism() {
    let m = small_model(2);
    let img = image(&m, 5);
    let run = || {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&m);
        let r = encode_image(&mut tape, &mut b, &img).unwrap();
        (tape.shape(r), tape.value(r).to_vec())
    };
    let (s, v) = run();
    assert_eq!(s.dims(), &[m.config.n_patches(), m.config.d_model]);
    assert_eq!(run().1, v);
    let wrong = render_image(&SceneSpec::from_index(5), 32, 8).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(
        encode_image(&mut tape, &mut Binder::frozen(&m), &wrong),
        Err(Error::Config(_))
    ));
}

#[test]
fn patch_locality_without_visual_blocks() {
    let vocab = default_vocab();
    let mut cfg = small_config(vocab.len());
    cfg.n_vis_layers = 0;
    let m = Model::init(cfg, vocab, &mut substream(3, streams::INIT)).unwrap();
    let img = image(&m, 9);
    let mut probe = img.clone();
    // brighten one pixel of patch 3 (bottom-right for a 2x2 grid)
    let o = (12 * probe.size + 12) * 3;
    probe.pixels[o] = 1.0 - probe.pixels[o];
    let rows = |g: &ImageGrid| {
        let mut tape = Tape::new();
        let r = encode_image(&mut tape, &mut Binder::frozen(&m), g).unwrap();
        tape.value(r).to_vec()
    };
    let (a, b) = (rows(&img), rows(&probe));
    let d = m.config.d_model;
    for p in 0..m.config.n_patches() {
        let same = a[p * d..(p + 1) * d] == b[p * d..(p + 1) * d];
        assert_eq!(same, p != 3, "row {p}");
    }
}

#[test]
fn causal_prefix_is_untouched_by_later_edits() {
    let m = small_model(4);
    let img = image(&m, 77);
    let mut rng = substream(4, "causal");
    for _ in 0..30 {
        let prompt = format_modification(INFERENCE_MODIFICATION, "make it red").unwrap();
        let seq = m.tokenize(&prompt, Some(&img)).unwrap();
        let p = rng.random_range(1..seq.len());
        let mut edited = seq.clone();
        edited.ids[p] = rng.random_range(4..m.vocab.len() as u32);
        let a = hidden_values(&m, Some(&img), &seq);
        let b = hidden_values(&m, Some(&img), &edited);
        // token position p sits at hidden row p - 1 + n_patches
        let cut = (p - 1 + m.config.n_patches()) * m.config.d_model;
        assert_eq!(a[..cut], b[..cut]);
    }
}

#[test]
fn text_only_path_skips_visual_parameters() {
    let m = small_model(5);
    let mut tape = Tape::new();
    let mut b = Binder::new(&m);
    embed(&mut tape, &mut b, None, "a red dog Summary:").unwrap();
    assert!(b.bound().all(|(n, _)| Component::of(n) == Some(Component::Llm)));
    let img = image(&m, 1);
    assert!(m.embed_value(Some(&img), "no marker").is_err());
    assert!(m.embed_value(None, "<IMG> marker").is_err());
}

#[test]
fn attention_rows_are_distributions_under_the_mask() {
    let m = small_model(6);
    let img = image(&m, 3);
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&m);
    embed(&mut tape, &mut b, Some(&img), "<IMG> Describe this image in one word:").unwrap();
    let mut n = 0;
    for probe in tape.attention_probes() {
        n += 1;
        for (r, row) in probe.probs.chunks_exact(probe.len).enumerate() {
            let i = r % probe.len;
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            if probe.causal {
                assert!(row[i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }
    assert_eq!(n, m.config.n_layers + m.config.n_vis_layers);
}

#[test]
fn embeddings_are_unit_deterministic_and_sensitive() {
    for seed in 0..100 {
        let m = small_model(seed);
        let img = image(&m, seed as usize * 7);
        let prompt = alloc::format!("<IMG> {STAGE1_IMAGE}");
        let h = m.embed_value(Some(&img), &prompt).unwrap();
        let norm: f64 = h.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(m.embed_value(Some(&img), &prompt).unwrap(), h);
        let longer = m.embed_value(Some(&img), &alloc::format!("{prompt} dog")).unwrap();
        let diff = h.iter().zip(&longer).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff > 1e-6, "seed {seed}");
    }
}

#[test]
fn composed_queries() {
    let m = small_model(7);
    let img = image(&m, 40);
    let t = "make it red";
    let q = m.compose_query(&img, t, INFERENCE_MODIFICATION).unwrap();
    let direct = m
        .embed_value(Some(&img), &format_modification(INFERENCE_MODIFICATION, t).unwrap())
        .unwrap();
    assert_eq!(q, direct);
    let other = m.compose_query(&img, "move it to the sand", INFERENCE_MODIFICATION).unwrap();
    assert_ne!(q, other);
    let empty = m.compose_query(&img, "", "<IMG> {MOD}:").unwrap();
    assert_eq!(empty, m.embed_value(Some(&img), "<IMG> :").unwrap());
}

#[test]
fn trainable_flags_follow_components() {
    let mut m = small_model(8);
    m.set_trainable(&[Component::Llm]);
    for (n, t) in m.params() {
        assert_eq!(t.requires_grad, Component::of(n) == Some(Component::Llm));
    }
    m.set_trainable(&[]);
    assert!(m.trainable_names().is_empty());
}

#[test]
fn sequences_longer_than_max_seq_are_rejected() {
    let m = small_model(9);
    let long = ["dog"; 80].join(" ");
    assert!(matches!(m.embed_value(None, &long), Err(Error::Length { .. })));
}

fn randomize_b(m: &mut Model, rng: &mut StreamRng) {
    let names: Vec<String> = m.names_in(Component::LowRank).filter(|n| n.ends_with(".b")).map(String::from).collect();
    for n in names {
        for v in m.param_mut(&n).unwrap().data_mut() {
            *v = (normal(rng) * 0.1) as f32;
        }
    }
}

#[test]
fn low_rank_attach_and_merge() {
    let base = small_model(10);
    let img = image(&base, 11);
    let prompt = "<IMG> Using this prompt: make it red, describe the conditioned image:";
    let targets = default_low_rank_targets(&base.config);
    let mut rng = substream(10, "lora");
    let mut m = base.clone();
    m.attach_low_rank(&targets, 8, 16.0, &mut rng).unwrap();
    assert_eq!(
        m.embed_value(Some(&img), prompt).unwrap(),
        base.embed_value(Some(&img), prompt).unwrap()
    );
    randomize_b(&mut m, &mut rng);
    let merged = m.merge_low_rank();
    assert!(merged.low_rank().is_none());
    assert_eq!(merged.params().len(), base.params().len());
    let a = m.embed_value(Some(&img), prompt).unwrap();
    let b = merged.embed_value(Some(&img), prompt).unwrap();
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff <= 1e-5, "{diff}");
    assert_ne!(a, base.embed_value(Some(&img), prompt).unwrap());

    let mut bad = base.clone();
    assert!(matches!(
        bad.attach_low_rank(&["llm.nope.w".into()], 4, 16.0, &mut rng),
        Err(Error::Config(_))
    ));
    assert!(bad.attach_low_rank(&["llm.norm.g".into()], 1, 16.0, &mut rng).is_err());
    let rebuilt = Model::from_parts(m.config.clone(), m.vocab.clone(), m.params().clone(), m.low_rank().cloned()).unwrap();
    assert_eq!(rebuilt, m);
}

#[test]
fn paper_rank_is_accepted_at_toy_width() {
    let vocab = default_vocab();
    let cfg = ModelConfig::toy(vocab.len());
    let mut m = Model::init(cfg, vocab, &mut substream(1, streams::INIT)).unwrap();
    let targets = default_low_rank_targets(&m.config);
    m.attach_low_rank(&targets, 64, 16.0, &mut substream(1, "lora")).unwrap();
    assert_eq!(m.low_rank().unwrap().scale(), 0.25);
}
