use super::*;
use crate::model::{encode_image, ModelConfig};
use crate::rng::substream;
use crate::templates::INFERENCE_MODIFICATION;
use crate::train::init_model;
use crate::world::{render_image, SceneSpec};
use proptest::prelude::*;
use rand::Rng;

fn lerp_1d(values: &[f64], anchors: &[f64], x: f64) -> f64 {
    if x <= anchors[0] {
        return values[0];
    }
    let last = anchors.len() - 1;
    if x >= anchors[last] {
        return values[last];
    }
    let mut p = 0;
    while anchors[p + 1] <= x {
        p += 1;
    }
    let t = (x - anchors[p]) / (anchors[p + 1] - anchors[p]);
    values[p] + t * (values[p + 1] - values[p])
}

/// Rows first, then columns, each with a plain 1-D interpolation.
fn two_pass(grid: &Grid, h: usize, w: usize) -> Vec<f64> {
    let p = grid.side;
    let centers = |n: usize| -> Vec<f64> { (0..p).map(|i| libm::floor((i as f64 + 0.5) * n as f64 / p as f64)).collect() };
    let (ay, ax) = (centers(h), centers(w));
    let rows: Vec<Vec<f64>> = (0..p)
        .map(|r| {
            let vals: Vec<f64> = (0..p).map(|c| grid.get(r, c)).collect();
            (0..w).map(|x| lerp_1d(&vals, &ax, x as f64)).collect()
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        let col: Vec<f64> = rows.iter().map(|r| r[x]).collect();
        for y in 0..h {
            out[y * w + x] = lerp_1d(&col, &ay, y as f64);
        }
    }
    out
}

fn random_grid(rng: &mut crate::rng::StreamRng, side: usize) -> Grid {
    Grid {
        side,
        values: (0..side * side).map(|_| rng.random_range(-3.0..3.0)).collect(),
    }
}

#[test]
fn similarity_examples() {
    let rows = [1.0f32, 2.0, 1.0, 2.0, 1.0, 2.0];
    assert_eq!(patch_similarity(&rows, &[0.5, 0.25]).unwrap(), vec![1.0; 3]);
    assert_eq!(patch_similarity(&rows, &[2.0, -1.0]).unwrap(), vec![0.0; 3]);
    assert!(patch_similarity(&rows, &[1.0; 4]).is_err());
    let mut rng = substream(1, "sim");
    let d = 5;
    let rows: Vec<f32> = (0..9 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = patch_similarity(&rows, &h).unwrap();
    for p in 0..9 {
        let mut acc = 0.0f64;
        for j in 0..d {
            acc += rows[p * d + j] as f64 * h[j] as f64;
        }
        assert!((s[p] - acc).abs() < 1e-12);
    }
}

#[test]
fn grid_reshape() {
    let g = to_grid((0..16).map(|v| v as f64).collect()).unwrap();
    assert_eq!(g.side, 4);
    assert_eq!(g.get(1, 2), 6.0);
    assert_eq!(g.values, (0..16).map(|v| v as f64).collect::<Vec<_>>());
    assert!(to_grid(vec![0.0; 15]).is_err());
    assert!(to_grid(Vec::new()).is_err());
}

#[test]
fn grid_cells_follow_image_blocks() {
    let vocab = crate::model::default_vocab();
    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.n_vis_layers = 0;
    let m = crate::model::Model::init(cfg, vocab, &mut substream(2, crate::rng::streams::INIT)).unwrap();
    let base = render_image(&SceneSpec::from_index(100), 32, 8).unwrap();
    let rows = |img: &ImageGrid| {
        let mut tape = Tape::new();
        let r = encode_image(&mut tape, &mut Binder::frozen(&m), img).unwrap();
        tape.value(r).to_vec()
    };
    let d = m.config.d_model;
    let base_rows = rows(&base);
    for (r, c) in [(0, 0), (1, 3), (3, 2)] {
        let mut probe = base.clone();
        let o = ((r * 8 + 3) * 32 + c * 8 + 5) * 3;
        probe.pixels[o + 1] = 1.0 - probe.pixels[o + 1];
        let changed: Vec<f64> = rows(&probe)
            .chunks(d)
            .zip(base_rows.chunks(d))
            .map(|(a, b)| (a != b) as u8 as f64)
            .collect();
        let g = to_grid(changed).unwrap();
        for gr in 0..4 {
            for gc in 0..4 {
                assert_eq!(g.get(gr, gc) == 1.0, (gr, gc) == (r, c));
            }
        }
    }
}

#[test]
fn interpolation_examples() {
    let g = Grid {
        side: 2,
        values: vec![0.0, 1.0, 2.0, 3.0],
    };
    assert!(interpolate(&g, 1, 4).is_err());
    let a = interpolate(&g, 4, 4).unwrap();
    // anchors at pixels 1 and 3
    assert_eq!(a[4 + 1], 0.0);
    assert_eq!(a[4 + 3], 1.0);
    assert_eq!(a[3 * 4 + 1], 2.0);
    assert_eq!(a[4 + 2], 0.5);
    assert_eq!(a[0], 0.0);
    let c = Grid {
        side: 3,
        values: vec![0.25; 9],
    };
    assert!(interpolate(&c, 10, 7).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert_eq!(normalize(&interpolate(&c, 9, 9).unwrap()), vec![0.5; 81]);
}

proptest! {
    #[test]
    fn interpolation_matches_two_pass_oracle(seed in 0u64..1000, side in 1usize..6, extra_h in 0usize..20, extra_w in 0usize..20) {
        let mut rng = substream(seed, "interp");
        let g = random_grid(&mut rng, side);
        let (h, w) = (side + extra_h, side + extra_w);
        let a = interpolate(&g, h, w).unwrap();
        let o = two_pass(&g, h, w);
        for (x, y) in a.iter().zip(&o) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for r in 0..side {
            for c in 0..side {
                let v = a[anchor(r, side, h) * w + anchor(c, side, w)];
                prop_assert!((v - g.get(r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn interpolation_is_linear(seed in 0u64..1000, side in 1usize..5, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = substream(seed, "linear");
        let (g1, g2) = (random_grid(&mut rng, side), random_grid(&mut rng, side));
        let mix = Grid { side, values: g1.values.iter().zip(&g2.values).map(|(x, y)| a * x + b * y).collect() };
        let (m1, m2, mm) = (interpolate(&g1, 17, 13).unwrap(), interpolate(&g2, 17, 13).unwrap(), interpolate(&mix, 17, 13).unwrap());
        for i in 0..mm.len() {
            prop_assert!((mm[i] - (a * m1[i] + b * m2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_map_keeps_anchor_order(seed in 0u64..1000, scale in 0.01f64..50.0) {
        let mut rng = substream(seed, "order");
        let g = random_grid(&mut rng, 4);
        let n = normalize(&interpolate(&g, 32, 32).unwrap());
        let scaled = Grid { side: 4, values: g.values.iter().map(|v| v * scale).collect() };
        let ns = normalize(&interpolate(&scaled, 32, 32).unwrap());
        for (x, y) in n.iter().zip(&ns) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let at = |p: usize| n[anchor(p / 4, 4, 32) * 32 + anchor(p % 4, 4, 32)];
        for p in 0..16 {
            for q in 0..16 {
                if g.values[p] > g.values[q] {
                    prop_assert!(at(p) > at(q));
                }
            }
        }
    }
}

#[test]
fn overlay_extremes() {
    let img = render_image(&SceneSpec::from_index(17), 16, 8).unwrap();
    let plain: Vec<u8> = img.pixels.iter().map(|&v| quantize(v as f64)).collect();
    assert_eq!(render_overlay(&img, &[0.0; 256]).unwrap(), plain);
    let full = render_overlay(&img, &[1.0; 256]).unwrap();
    for (i, px) in full.chunks(3).enumerate() {
        let src = &img.pixels[3 * i..3 * i + 3];
        let expect = [0.3 * src[0] as f64 + 0.7, 0.3 * src[1] as f64, 0.3 * src[2] as f64];
        for ch in 0..3 {
            assert_eq!(px[ch], quantize(expect[ch]));
        }
    }
    assert!(render_overlay(&img, &[0.0; 10]).is_err());
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[test]
fn golden_snapshot() {
    let m = init_model(ModelConfig::toy(crate::model::default_vocab().len()), 42).unwrap();
    let img = render_image(&SceneSpec::from_index(321), 32, 8).unwrap();
    let a = attention_map(&m, &img, "make it red", INFERENCE_MODIFICATION).unwrap();
    assert_eq!(a, attention_map(&m, &img, "make it red", INFERENCE_MODIFICATION).unwrap());
    assert_eq!(a.grid.side, 4);
    assert_eq!(a.overlay.len(), 32 * 32 * 3);
    let head: Vec<f64> = a.grid.values[..4].iter().map(|v| libm::round(v * 1e5) / 1e5).collect();
    assert_eq!((head, fnv(&a.overlay)), (GOLDEN_HEAD.to_vec(), GOLDEN_OVERLAY));
}

const GOLDEN_HEAD: [f64; 4] = [3.18769, 3.22703, 3.06368, 3.107];
const GOLDEN_OVERLAY: u64 = 3016258440300084357;
