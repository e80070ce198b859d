//! Edge-map extraction and the sketch-to-reconstruction distillation losses.
//!
//! The teacher distribution comes from the sketch branch (`F^s`, projected by
//! the teacher heads), the student distribution from the decoder output
//! (`F^t`, projected by the student heads). Both losses are cross-entropies
//! `−Σ_k p_k log q_k` between the two softmax distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{log_softmax, softmax, Mat};
use crate::tokenizer::{ImageTensor, MaskPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchSource {
    BuiltinGradient,
    ExternalFile,
}

/// Single-channel edge map in `[0, 1]`, same size as its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchMap<S> {
    pub image: ImageTensor<S>,
    pub source: SketchSource,
}

/// Projection heads `θ′` (teacher, sketch side) and `θ` (student, decoder side).
#[derive(Clone, Debug, PartialEq)]
pub struct DistillHeads<S> {
    /// `[d_enc, K]`
    pub teacher: Mat<S>,
    /// `[d_dec, K]`
    pub student: Mat<S>,
    /// `[d_enc, K]`
    pub teacher_cls: Mat<S>,
    /// `[d_dec, K]`
    pub student_cls: Mat<S>,
}

/// Knobs shared by both distillation losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSettings {
    pub temperature: f64,
    /// Divide the patch loss by the number of masked patches.
    pub normalize_by_masked: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self { temperature: 1.0, normalize_by_masked: true }
    }
}

/// Sobel gradient magnitude of the luma channel, scaled so the strongest edge is 1.
pub fn extract_edges<S: Real>(image: &ImageTensor<S>) -> SketchMap<S> {
    let gray = image.grayscale();
    let (h, w) = (gray.height(), gray.width());
    let at = |r: isize, c: isize| {
        let rr = r.clamp(0, h as isize - 1) as usize;
        let cc = c.clamp(0, w as isize - 1) as usize;
        gray.get(rr, cc, 0)
    };
    let two = S::lit(2.0);
    let mut mag = vec![S::zero(); h * w];
    let mut max = S::zero();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + two * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + two * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + two * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + two * at(r - 1, c) + at(r - 1, c + 1));
            let m = (gx * gx + gy * gy).sqrt();
            mag[r as usize * w + c as usize] = m;
            if m > max {
                max = m;
            }
        }
    }
    if max > S::zero() {
        for m in &mut mag {
            *m = (*m / max).min(S::one());
        }
    }
    let image = ImageTensor::new(h, w, 1, mag).expect("values normalized into [0,1]");
    SketchMap { image, source: SketchSource::BuiltinGradient }
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy<S: Real>(p: &[S]) -> S {
    p.iter().filter(|&&v| v > S::zero()).map(|&v| -v * v.ln()).sum()
}

/// Cross-entropy between teacher and student softmax distributions of one token,
/// with gradients with respect to both logit vectors.
fn token_cross_entropy<S: Real>(teacher_logits: &[S], student_logits: &[S], temp: S) -> (S, Vec<S>, Vec<S>) {
    let zt: Vec<S> = teacher_logits.iter().map(|&z| z / temp).collect();
    let zs: Vec<S> = student_logits.iter().map(|&z| z / temp).collect();
    let p = softmax(&zt);
    let log_q = log_softmax(&zs);
    let loss = -p.iter().zip(&log_q).map(|(&a, &b)| a * b).sum::<S>();
    // d/dz_teacher: p ⊙ (g − ⟨p, g⟩) with g = −log q
    let d_teacher = p.iter().zip(&log_q).map(|(&pk, &lq)| pk * (-lq - loss) / temp).collect();
    let d_student = log_q.iter().zip(&p).map(|(&lq, &pk)| (lq.exp() - pk) / temp).collect();
    (loss, d_teacher, d_student)
}

fn project<S: Real>(feature: &[S], w: &Mat<S>) -> Vec<S> {
    Mat::row_vector(feature).matmul(w).into_vec()
}

fn outer_add<S: Real>(acc: &mut Mat<S>, left: &[S], right: &[S]) {
    for (i, &l) in left.iter().enumerate() {
        for (a, &r) in acc.row_mut(i).iter_mut().zip(right) {
            *a += l * r;
        }
    }
}

/// Gradients of a distillation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillGrad<S> {
    /// Same shape as the sketch features passed in.
    pub d_sketch: Mat<S>,
    /// Same shape as the decoder features passed in.
    pub d_decoded: Mat<S>,
    pub d_teacher: Mat<S>,
    pub d_student: Mat<S>,
}

fn check_heads<S: Real>(fs_width: usize, ft_width: usize, teacher: &Mat<S>, student: &Mat<S>) -> Result<()> {
    if teacher.rows() != fs_width || student.rows() != ft_width || teacher.cols() != student.cols() {
        return Err(Error::Structural(format!(
            "distill heads {:?}/{:?} incompatible with feature widths {fs_width}/{ft_width}",
            teacher.shape(),
            student.shape()
        )));
    }
    if teacher.cols() < 2 {
        return Err(Error::Structural("distillation needs K >= 2".into()));
    }
    Ok(())
}

/// Patch-level loss over the masked indices, with gradients.
///
/// `sketch` is `[N + 1, d_enc]` and `decoded` is `[N + 1, d_dec]`, both CLS-first in original patch order.
pub fn patch_distill_loss_grad<S: Real>(
    sketch: &Mat<S>,
    decoded: &Mat<S>,
    mask: &MaskPlan,
    heads: &DistillHeads<S>,
    settings: &DistillSettings,
) -> Result<(S, DistillGrad<S>)> {
    if sketch.rows() != mask.n_tokens + 1 || decoded.rows() != mask.n_tokens + 1 {
        return Err(Error::Structural(format!(
            "sketch ({}) and decoded ({}) token counts must both be {} (patches + CLS)",
            sketch.rows(),
            decoded.rows(),
            mask.n_tokens + 1
        )));
    }
    check_heads(sketch.cols(), decoded.cols(), &heads.teacher, &heads.student)?;
    let temp = S::lit(settings.temperature);
    let n_masked = mask.n_masked();
    let norm = if settings.normalize_by_masked && n_masked > 0 { S::one() / S::count(n_masked) } else { S::one() };
    let mut grad = DistillGrad {
        d_sketch: sketch.zeros_like(),
        d_decoded: decoded.zeros_like(),
        d_teacher: heads.teacher.zeros_like(),
        d_student: heads.student.zeros_like(),
    };
    let mut total = S::zero();
    for &m in &mask.masked_idx {
        let fs = sketch.row(m + 1);
        let ft = decoded.row(m + 1);
        let (loss, dzt, dzs) = token_cross_entropy(&project(fs, &heads.teacher), &project(ft, &heads.student), temp);
        total += loss;
        let dzt: Vec<S> = dzt.into_iter().map(|v| v * norm).collect();
        let dzs: Vec<S> = dzs.into_iter().map(|v| v * norm).collect();
        outer_add(&mut grad.d_teacher, fs, &dzt);
        outer_add(&mut grad.d_student, ft, &dzs);
        grad.d_sketch.row_mut(m + 1).copy_from_slice(&Mat::row_vector(&dzt).matmul_t(&heads.teacher).into_vec());
        grad.d_decoded.row_mut(m + 1).copy_from_slice(&Mat::row_vector(&dzs).matmul_t(&heads.student).into_vec());
    }
    Ok((total * norm, grad))
}

pub fn patch_distill_loss<S: Real>(
    sketch: &Mat<S>,
    decoded: &Mat<S>,
    mask: &MaskPlan,
    heads: &DistillHeads<S>,
    settings: &DistillSettings,
) -> Result<S> {
    Ok(patch_distill_loss_grad(sketch, decoded, mask, heads, settings)?.0)
}

/// CLS-level loss with gradients; feature gradients are `1 × width`.
pub fn cls_distill_loss_grad<S: Real>(
    sketch_cls: &[S],
    decoded_cls: &[S],
    heads: &DistillHeads<S>,
    settings: &DistillSettings,
) -> Result<(S, DistillGrad<S>)> {
    check_heads(sketch_cls.len(), decoded_cls.len(), &heads.teacher_cls, &heads.student_cls)?;
    let temp = S::lit(settings.temperature);
    let (loss, dzt, dzs) =
        token_cross_entropy(&project(sketch_cls, &heads.teacher_cls), &project(decoded_cls, &heads.student_cls), temp);
    let mut d_teacher = heads.teacher_cls.zeros_like();
    let mut d_student = heads.student_cls.zeros_like();
    outer_add(&mut d_teacher, sketch_cls, &dzt);
    outer_add(&mut d_student, decoded_cls, &dzs);
    let grad = DistillGrad {
        d_sketch: Mat::row_vector(&dzt).matmul_t(&heads.teacher_cls),
        d_decoded: Mat::row_vector(&dzs).matmul_t(&heads.student_cls),
        d_teacher,
        d_student,
    };
    Ok((loss, grad))
}

pub fn cls_distill_loss<S: Real>(
    sketch_cls: &[S],
    decoded_cls: &[S],
    heads: &DistillHeads<S>,
    settings: &DistillSettings,
) -> Result<S> {
    Ok(cls_distill_loss_grad(sketch_cls, decoded_cls, heads, settings)?.0)
}

/// Teacher distribution for one sketch token, exposed for entropy bounds.
pub fn teacher_distribution<S: Real>(feature: &[S], teacher: &Mat<S>, settings: &DistillSettings) -> Vec<S> {
    let t = S::lit(settings.temperature);
    softmax(&project(feature, teacher).into_iter().map(|z| z / t).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{central_difference, relative_error};

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    fn mat(r: usize, c: usize, seed: u64) -> Mat<f64> {
        Mat::from_vec(r, c, lcg(r * c, seed)).unwrap()
    }

    fn heads(de: usize, dd: usize, k: usize, seed: u64) -> DistillHeads<f64> {
        DistillHeads {
            teacher: mat(de, k, seed),
            student: mat(dd, k, seed + 1),
            teacher_cls: mat(de, k, seed + 2),
            student_cls: mat(dd, k, seed + 3),
        }
    }

    /// Plain-loop softmax cross-entropy, independent of the tensor helpers.
    fn brute_ce(fs: &[f64], wt: &Mat<f64>, ft: &[f64], ws: &Mat<f64>) -> f64 {
        let k = wt.cols();
        let logits = |f: &[f64], w: &Mat<f64>| {
            (0..k).map(|j| (0..f.len()).map(|i| f[i] * w[(i, j)]).sum::<f64>()).collect::<Vec<_>>()
        };
        let a = logits(fs, wt);
        let b = logits(ft, ws);
        let za: f64 = a.iter().map(|v| v.exp()).sum();
        let zb: f64 = b.iter().map(|v| v.exp()).sum();
        -(0..k).map(|j| (a[j].exp() / za) * (b[j].exp() / zb).ln()).sum::<f64>()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = ImageTensor::from_fn(16, 16, 3, |_, _, c| 0.2 + 0.1 * c as f64);
        let s = extract_edges(&img);
        assert!(s.image.pixels().iter().all(|&v| v == 0.0));
        assert_eq!(s.image.channels(), 1);
    }

    #[test]
    fn step_edge_response_is_local() {
        let c0 = 7;
        let img = ImageTensor::from_fn(12, 16, 1, |_, c, _| if c < c0 { 0.1 } else { 0.9 });
        let s = extract_edges(&img);
        for r in 0..12 {
            for c in 0..16 {
                let v = s.image.get(r, c, 0);
                if (c0 - 1..=c0 + 1).contains(&c) {
                    continue;
                }
                assert_eq!(v, 0.0, "response at ({r},{c})");
            }
            assert_eq!(s.image.get(r, c0, 0), 1.0);
            assert_eq!(s.image.get(r, c0 - 1, 0), 1.0);
        }
    }

    #[test]
    fn uniform_distributions_give_log_k() {
        let k = 4;
        let mask = MaskPlan::from_masked(5, vec![0, 2, 4]).unwrap();
        let h = DistillHeads {
            teacher: Mat::zeros(3, k),
            student: Mat::zeros(2, k),
            teacher_cls: Mat::zeros(3, 8),
            student_cls: Mat::zeros(2, 8),
        };
        let l = patch_distill_loss(&mat(6, 3, 1), &mat(6, 2, 2), &mask, &h, &DistillSettings::default()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = cls_distill_loss(&[0.3, 0.1, -0.2], &[1.0, 2.0], &h, &DistillSettings::default()).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        let raw = DistillSettings { normalize_by_masked: false, ..Default::default() };
        let l = patch_distill_loss(&mat(6, 3, 1), &mat(6, 2, 2), &mask, &h, &raw).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matched_sharp_distributions_approach_zero() {
        let mut w = Mat::zeros(1, 3);
        w[(0, 0)] = 60.0;
        let h = DistillHeads { teacher: w.clone(), student: w.clone(), teacher_cls: w.clone(), student_cls: w };
        let l = cls_distill_loss(&[1.0], &[1.0], &h, &DistillSettings::default()).unwrap();
        assert!(l > 0.0 && l < 1e-20, "{l}");
    }

    #[test]
    fn matches_brute_force() {
        // random 2-patch, K=3
        let mask = MaskPlan::from_masked(2, vec![0, 1]).unwrap();
        let h = heads(4, 3, 3, 10);
        let fs = mat(3, 4, 20);
        let ft = mat(3, 3, 30);
        let expected = (brute_ce(fs.row(1), &h.teacher, ft.row(1), &h.student)
            + brute_ce(fs.row(2), &h.teacher, ft.row(2), &h.student))
            / 2.0;
        let got = patch_distill_loss(&fs, &ft, &mask, &h, &DistillSettings::default()).unwrap();
        assert!((got - expected).abs() < 1e-9);
        // random K=5 CLS case
        let h = heads(4, 3, 5, 40);
        let (a, b) = (lcg(4, 50), lcg(3, 60));
        let expected = brute_ce(&a, &h.teacher_cls, &b, &h.student_cls);
        assert!((cls_distill_loss(&a, &b, &h, &DistillSettings::default()).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn identical_cls_features_give_entropy() {
        let w = mat(3, 6, 77);
        let h = DistillHeads { teacher: w.clone(), student: w.clone(), teacher_cls: w.clone(), student_cls: w.clone() };
        let f = lcg(3, 78);
        let l = cls_distill_loss(&f, &f, &h, &DistillSettings::default()).unwrap();
        let ent = entropy(&teacher_distribution(&f, &w, &DistillSettings::default()));
        assert!((l - ent).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded_by_teacher_entropy() {
        for seed in 0..50 {
            let h = heads(3, 3, 4, seed);
            let (a, b) = (lcg(3, seed + 100), lcg(3, seed + 200));
            let l = cls_distill_loss(&a, &b, &h, &DistillSettings::default()).unwrap();
            let ent = entropy(&teacher_distribution(&a, &h.teacher_cls, &DistillSettings::default()));
            assert!(l >= ent - 1e-12);
        }
    }

    #[test]
    fn visible_indices_do_not_matter() {
        let mask = MaskPlan::from_masked(6, vec![1, 4]).unwrap();
        let h = heads(3, 2, 4, 5);
        let fs = mat(7, 3, 6);
        let ft = mat(7, 2, 7);
        let base = patch_distill_loss(&fs, &ft, &mask, &h, &DistillSettings::default()).unwrap();
        let mut perturbed = ft.clone();
        for &v in &mask.visible_idx {
            perturbed.row_mut(v + 1).iter_mut().for_each(|x| *x += 3.7);
        }
        perturbed.row_mut(0).iter_mut().for_each(|x| *x -= 1.0);
        assert_eq!(patch_distill_loss(&fs, &perturbed, &mask, &h, &DistillSettings::default()).unwrap(), base);
    }

    #[test]
    fn misaligned_tokens_rejected() {
        let mask = MaskPlan::from_masked(6, vec![1]).unwrap();
        let h = heads(3, 2, 4, 5);
        let r = patch_distill_loss(&mat(7, 3, 1), &mat(6, 2, 1), &mask, &h, &DistillSettings::default());
        assert!(matches!(r, Err(Error::Structural(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mask = MaskPlan::from_masked(4, vec![0, 3]).unwrap();
        let settings = DistillSettings { temperature: 0.7, normalize_by_masked: true };
        let h = heads(3, 2, 5, 90);
        let fs = mat(5, 3, 91);
        let ft = mat(5, 2, 92);
        let (_, g) = patch_distill_loss_grad(&fs, &ft, &mask, &h, &settings).unwrap();
        let check = |analytic: &Mat<f64>, base: &Mat<f64>, f: &dyn Fn(&Mat<f64>) -> f64| {
            let fd = central_difference(base.as_slice(), 1e-5, |v| {
                f(&Mat::from_vec(base.rows(), base.cols(), v.to_vec()).unwrap())
            });
            assert!(relative_error(analytic.as_slice(), &fd, 1e-9) <= 1e-5);
        };
        check(&g.d_sketch, &fs, &|m| patch_distill_loss(m, &ft, &mask, &h, &settings).unwrap());
        check(&g.d_decoded, &ft, &|m| patch_distill_loss(&fs, m, &mask, &h, &settings).unwrap());
        check(&g.d_teacher, &h.teacher, &|m| {
            let hh = DistillHeads { teacher: m.clone(), ..h.clone() };
            patch_distill_loss(&fs, &ft, &mask, &hh, &settings).unwrap()
        });
        check(&g.d_student, &h.student, &|m| {
            let hh = DistillHeads { student: m.clone(), ..h.clone() };
            patch_distill_loss(&fs, &ft, &mask, &hh, &settings).unwrap()
        });
        let (a, b) = (lcg(3, 1), lcg(2, 2));
        let (_, g) = cls_distill_loss_grad(&a, &b, &h, &settings).unwrap();
        check(&g.d_sketch, &Mat::row_vector(&a), &|m| cls_distill_loss(m.row(0), &b, &h, &settings).unwrap());
        check(&g.d_decoded, &Mat::row_vector(&b), &|m| cls_distill_loss(&a, m.row(0), &h, &settings).unwrap());
        check(&g.d_teacher, &h.teacher_cls, &|m| {
            let hh = DistillHeads { teacher_cls: m.clone(), ..h.clone() };
            cls_distill_loss(&a, &b, &hh, &settings).unwrap()
        });
    }

    proptest::proptest! {
        #[test]
        fn edges_stay_in_unit_range(seed in 0u64..10_000, h in 1usize..12, w in 1usize..12) {
            let v = lcg(h * w * 3, seed);
            let img = ImageTensor::from_fn(h, w, 3, |r, c, ch| (v[(r * w + c) * 3 + ch] + 1.0) / 2.0);
            let s = extract_edges(&img);
            proptest::prop_assert!(s.image.pixels().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
