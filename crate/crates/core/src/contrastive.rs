//! InfoNCE objectives over scaled cosine similarities.
//!
//! Inputs are `N x d` tapes nodes; rows are re-normalized inside, so any
//! positive row scaling leaves the losses unchanged.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `exp(cos(a, b) / tau)`.
pub fn phi(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain {
            op: "phi",
            detail: "zero vector has no direction".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(libm::exp(dot / (na * nb) / tau))
}

fn check_batch<T: Real>(tape: &Tape<T>, a: Var, b: Var, hard: Option<Var>) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.rank() != 2 {
        return Err(Error::Shape {
            op: "contrastive batch",
            lhs: sa,
            rhs: sb,
        });
    }
    if let Some(h) = hard {
        if tape.shape(h) != sa {
            return Err(Error::Shape {
                op: "contrastive hard negatives",
                lhs: sa,
                rhs: tape.shape(h),
            });
        }
    }
    let n = sa.rows();
    if n < 2 && hard.is_none() {
        return Err(Error::DegenerateBatch(format!(
            "{n} row(s) and no hard negatives leave no negatives"
        )));
    }
    Ok(n)
}

/// Mean over rows of `logsumexp(row) - row[target]`.
fn nce_rows<T: Real>(tape: &mut Tape<T>, logits: Var, n: usize) -> Result<Var> {
    let lse = tape.logsumexp_rows(logits);
    let diag: alloc::vec::Vec<usize> = (0..n).collect();
    let pos = tape.pick_per_row(logits, &diag)?;
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean(per_row))
}

/// Symmetric image/caption loss. `caption_hard`, when present, holds one
/// hard-negative caption per row and enters the image-to-caption direction.
pub fn stage1_loss<T: Real>(
    tape: &mut Tape<T>,
    images: Var,
    captions: Var,
    caption_hard: Option<Var>,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = check_batch(tape, images, captions, caption_hard)?;
    let inv_tau = T::from_f64(1.0 / cfg.tau);
    let hi = tape.l2_normalize_rows(images);
    let hc = tape.l2_normalize_rows(captions);
    let sim = tape.matmul_nt(hi, hc)?;
    let sim = tape.mul_scalar(sim, inv_tau);
    let i2c_logits = match caption_hard {
        Some(h) => {
            let hh = tape.l2_normalize_rows(h);
            let extra = tape.row_dot(hi, hh)?;
            let extra = tape.mul_scalar(extra, inv_tau);
            tape.concat_cols(&[sim, extra])?
        }
        None => sim,
    };
    let i2c = nce_rows(tape, i2c_logits, n)?;
    let sim_t = tape.transpose(sim);
    let c2i = nce_rows(tape, sim_t, n)?;
    let both = tape.add(i2c, c2i)?;
    Ok(tape.mul_scalar(both, T::from_f64(0.5)))
}

/// One-directional composed-to-caption loss; `original` are the unmodified
/// captions, used as one extra negative per row.
pub fn stage2_loss<T: Real>(
    tape: &mut Tape<T>,
    composed: Var,
    modified: Var,
    original: Option<Var>,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = check_batch(tape, composed, modified, original)?;
    let inv_tau = T::from_f64(1.0 / cfg.tau);
    let hq = tape.l2_normalize_rows(composed);
    let hm = tape.l2_normalize_rows(modified);
    let sim = tape.matmul_nt(hq, hm)?;
    let sim = tape.mul_scalar(sim, inv_tau);
    let logits = match original {
        Some(o) => {
            let ho = tape.l2_normalize_rows(o);
            let extra = tape.row_dot(hq, ho)?;
            let extra = tape.mul_scalar(extra, inv_tau);
            tape.concat_cols(&[sim, extra])?
        }
        None => sim,
    };
    nce_rows(tape, logits, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::{Shape, Tensor};
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    /// Direct transcription of the loss definitions over plain vectors.
    fn oracle_stage1(hi: &[Vec<f64>], hc: &[Vec<f64>], hard: Option<&[Vec<f64>]>, tau: f64) -> f64 {
        let n = hi.len();
        let mut i2c = 0.0;
        let mut c2i = 0.0;
        for k in 0..n {
            let pos = phi(&hi[k], &hc[k], tau).unwrap();
            let mut den = 0.0;
            for c in hc {
                den += phi(&hi[k], c, tau).unwrap();
            }
            if let Some(h) = hard {
                den += phi(&hi[k], &h[k], tau).unwrap();
            }
            i2c += -(pos / den).ln();
            let mut den = 0.0;
            for i in hi {
                den += phi(&hc[k], i, tau).unwrap();
            }
            c2i += -(pos / den).ln();
        }
        0.5 * (i2c + c2i) / n as f64
    }

    fn oracle_stage2(hq: &[Vec<f64>], hm: &[Vec<f64>], ho: Option<&[Vec<f64>]>, tau: f64) -> f64 {
        let n = hq.len();
        let mut total = 0.0;
        for k in 0..n {
            let pos = phi(&hq[k], &hm[k], tau).unwrap();
            let mut den: f64 = hm.iter().map(|m| phi(&hq[k], m, tau).unwrap()).sum();
            if let Some(o) = ho {
                den += phi(&hq[k], &o[k], tau).unwrap();
            }
            total += -(pos / den).ln();
        }
        total / n as f64
    }

    fn leaf(t: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        t.leaf(&Tensor::from_rows(rows).unwrap())
    }

    fn s1(rows: (&[Vec<f64>], &[Vec<f64>]), hard: Option<&[Vec<f64>]>, tau: f64) -> f64 {
        let mut t = Tape::new();
        let (a, b) = (leaf(&mut t, rows.0), leaf(&mut t, rows.1));
        let h = hard.map(|h| leaf(&mut t, h));
        let l = stage1_loss(&mut t, a, b, h, &ContrastiveConfig { tau }).unwrap();
        t.value(l)[0]
    }

    fn s2(rows: (&[Vec<f64>], &[Vec<f64>]), hard: Option<&[Vec<f64>]>, tau: f64) -> f64 {
        let mut t = Tape::new();
        let (a, b) = (leaf(&mut t, rows.0), leaf(&mut t, rows.1));
        let h = hard.map(|h| leaf(&mut t, h));
        let l = stage2_loss(&mut t, a, b, h, &ContrastiveConfig { tau }).unwrap();
        t.value(l)[0]
    }

    #[test]
    fn phi_examples() {
        let a = [1.0, 2.0, -0.5];
        assert!((phi(&a, &a, 1.0).unwrap() - core::f64::consts::E).abs() < 1e-12);
        assert!((phi(&[1.0, 0.0], &[0.0, 3.0], 0.5).unwrap() - 1.0).abs() < 1e-12);
        let scaled = [3.0, 6.0, -1.5];
        let b = [0.3, -1.0, 2.0];
        assert!((phi(&scaled, &b, 0.1).unwrap() - phi(&a, &b, 0.1).unwrap()).abs() < 1e-9);
        assert!(phi(&[0.0, 0.0], &b[..2], 1.0).is_err());
    }

    #[test]
    fn uniform_batches_give_log_counts() {
        for n in [2usize, 4, 8] {
            let rows = vec![vec![0.3, -0.2, 0.9]; n];
            assert!((s1((&rows, &rows), None, DEFAULT_TAU) - (n as f64).ln()).abs() < 1e-9);
            assert!((s2((&rows, &rows), Some(&rows), DEFAULT_TAU) - ((n + 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_by_two_identity_hand_value() {
        let hi = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let row = -(core::f64::consts::E / (core::f64::consts::E + 1.0)).ln();
        assert!((row - 0.313262).abs() < 1e-6);
        assert!((s1((&hi, &hi), None, 1.0) - row).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_hard_negative_adds_log_ratio() {
        let hq = vec![vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.0]];
        let hm = vec![vec![0.9, 0.3, 0.0], vec![0.2, 0.8, 0.0]];
        let ho = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 2.0]];
        let tau = 0.5;
        let without = s2((&hq, &hm), None, tau);
        let with = s2((&hq, &hm), Some(&ho), tau);
        let expected: f64 = hq
            .iter()
            .map(|q| {
                let d: f64 = hm.iter().map(|m| phi(q, m, tau).unwrap()).sum();
                ((d + 1.0) / d).ln()
            })
            .sum::<f64>()
            / 2.0;
        assert!((with - without - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_malformed_batches() {
        let one = vec![vec![1.0, 0.0]];
        let mut t = Tape::<f64>::new();
        let (a, b) = (leaf(&mut t, &one), leaf(&mut t, &one));
        let cfg = ContrastiveConfig::default();
        assert!(matches!(stage1_loss(&mut t, a, b, None, &cfg), Err(Error::DegenerateBatch(_))));
        assert!(matches!(stage2_loss(&mut t, a, b, None, &cfg), Err(Error::DegenerateBatch(_))));
        assert!(stage2_loss(&mut t, a, b, Some(b), &cfg).is_ok());
        let two = leaf(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(stage1_loss(&mut t, a, two, None, &cfg), Err(Error::Shape { .. })));
        assert!(stage1_loss(&mut t, two, two, None, &ContrastiveConfig { tau: 0.0 }).is_err());
    }

    fn rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), n)
            .prop_filter("nonzero rows", |r| r.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_match_the_oracle(
            a in rows_strategy(4, 5), b in rows_strategy(4, 5), h in rows_strategy(4, 5),
            tau in 0.05f64..1.0,
        ) {
            prop_assert!((s1((&a, &b), None, tau) - oracle_stage1(&a, &b, None, tau)).abs() < 1e-9);
            prop_assert!((s1((&a, &b), Some(&h), tau) - oracle_stage1(&a, &b, Some(&h), tau)).abs() < 1e-9);
            prop_assert!((s2((&a, &b), Some(&h), tau) - oracle_stage2(&a, &b, Some(&h), tau)).abs() < 1e-9);
            prop_assert!((s2((&a, &b), None, tau) - oracle_stage2(&a, &b, None, tau)).abs() < 1e-9);
        }

        #[test]
        fn losses_are_positive_scale_invariant_and_symmetric(
            a in rows_strategy(3, 4), b in rows_strategy(3, 4), h in rows_strategy(3, 4),
            scale in 0.1f64..10.0, row in 0usize..3,
        ) {
            let l1 = s1((&a, &b), None, 0.2);
            let l2 = s2((&a, &b), Some(&h), 0.2);
            prop_assert!(l1 > 0.0 && l2 > 0.0);
            let mut a2 = a.clone();
            a2[row].iter_mut().for_each(|v| *v *= scale);
            prop_assert!((s1((&a2, &b), None, 0.2) - l1).abs() < 1e-9);
            prop_assert!((s2((&a2, &b), Some(&h), 0.2) - l2).abs() < 1e-9);
            prop_assert!((s1((&b, &a), None, 0.2) - l1).abs() < 1e-9);
        }

        #[test]
        fn raising_a_positive_cosine_lowers_the_loss(row in 0usize..3, t in 0.05f64..0.95) {
            // positives at angle acos(t) from their anchors, negatives fixed
            let anchors: Vec<Vec<f64>> = (0..3).map(|k| {
                let mut v = vec![0.0; 6];
                v[k] = 1.0;
                v
            }).collect();
            let mk = |c: f64| -> Vec<Vec<f64>> {
                (0..3).map(|k| {
                    let mut v = vec![0.0; 6];
                    let ck = if k == row { c } else { 0.5 };
                    v[k] = ck;
                    v[k + 3] = (1.0 - ck * ck).sqrt();
                    v
                }).collect()
            };
            let lo = mk(t);
            let hi = mk((t + 0.04).min(0.999));
            prop_assert!(s2((&anchors, &hi), None, 0.3) < s2((&anchors, &lo), None, 0.3));
            prop_assert!(s1((&anchors, &hi), None, 0.3) < s1((&anchors, &lo), None, 0.3));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::substream(12, "contrastive-grad");
        let mut draw = |n: usize| -> Tensor<f64> {
            let d: Vec<f64> = (0..n * 5).map(|_| crate::rng::normal(&mut rng)).collect();
            Tensor::new(Shape::matrix(n, 5), d).unwrap()
        };
        let (other, hard) = (draw(4), draw(4));
        let x = draw(4);
        let cfg = ContrastiveConfig::default();
        let e1 = finite_diff_check(
            |t, v| {
                let o = t.leaf(&other);
                let h = t.leaf(&hard);
                stage1_loss(t, v, o, Some(h), &cfg)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let e2 = finite_diff_check(
            |t, v| {
                let o = t.leaf(&other);
                let h = t.leaf(&hard);
                stage2_loss(t, v, o, Some(h), &cfg)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e1 < 1e-3 && e2 < 1e-3, "{e1} {e2}");
    }
}
