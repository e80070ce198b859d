//! Feature alignment and similarity-distribution consistency losses.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::structural_prior::entropy;
use crate::tensor::{dot, l2_norm, softmax, Mat};

fn normalize<S: Real>(v: &[S], what: &str) -> Result<(Vec<S>, S)> {
    let n = l2_norm(v);
    if !(n > S::zero()) || !n.is_finite() {
        return Err(Error::Numeric(format!("{what} has zero or non-finite norm; normalization undefined")));
    }
    Ok((v.iter().map(|&x| x / n).collect(), n))
}

/// Back-propagates `d_unit` through `u = v / ‖v‖`.
fn normalize_backward<S: Real>(unit: &[S], norm: S, d_unit: &[S]) -> Vec<S> {
    let along = dot(unit, d_unit);
    unit.iter().zip(d_unit).map(|(&u, &d)| (d - u * along) / norm).collect()
}

fn project<S: Real>(decoded: &[S], head: &Mat<S>) -> Result<Vec<S>> {
    if decoded.len() != head.rows() {
        return Err(Error::Structural(format!(
            "semantic head expects width {}, decoded feature has {}",
            head.rows(),
            decoded.len()
        )));
    }
    Ok(Mat::row_vector(decoded).matmul(head).into_vec())
}

/// Squared distance between the L2-normalized projected decoder feature and the frozen visual embedding.
pub fn feature_align_loss<S: Real>(decoded: &[S], visual: &[S], head: &Mat<S>) -> Result<S> {
    Ok(feature_align_loss_grad(decoded, visual, head)?.0)
}

/// Loss, gradient with respect to the decoder feature, and gradient with respect to the head.
pub fn feature_align_loss_grad<S: Real>(decoded: &[S], visual: &[S], head: &Mat<S>) -> Result<(S, Vec<S>, Mat<S>)> {
    let f = project(decoded, head)?;
    if f.len() != visual.len() {
        return Err(Error::Structural(format!("projected width {} vs embedding width {}", f.len(), visual.len())));
    }
    let (fu, fnorm) = normalize(&f, "decoded feature")?;
    let (vu, _) = normalize(visual, "visual embedding")?;
    let diff: Vec<S> = fu.iter().zip(&vu).map(|(&a, &b)| a - b).collect();
    let loss = dot(&diff, &diff);
    let d_unit: Vec<S> = diff.iter().map(|&d| S::lit(2.0) * d).collect();
    let d_f = normalize_backward(&fu, fnorm, &d_unit);
    let (d_decoded, d_head) = project_backward(decoded, head, &d_f);
    Ok((loss, d_decoded, d_head))
}

fn project_backward<S: Real>(decoded: &[S], head: &Mat<S>, d_f: &[S]) -> (Vec<S>, Mat<S>) {
    let d_decoded = Mat::row_vector(d_f).matmul_t(head).into_vec();
    let d_head = Mat::row_vector(decoded).t_matmul(&Mat::row_vector(d_f));
    (d_decoded, d_head)
}

/// `softmax(f · wⱼ / τ)` over the rows of `bank`.
pub fn similarity_distribution<S: Real>(feature: &[S], bank: &Mat<S>, temperature: S) -> Result<Vec<S>> {
    if !(temperature > S::zero()) {
        return Err(Error::Parameter(format!("temperature {temperature} must be positive")));
    }
    if bank.rows() == 0 {
        return Err(Error::Parameter("similarity distribution needs at least one text embedding".into()));
    }
    if bank.cols() != feature.len() {
        return Err(Error::Structural(format!("feature width {} vs bank width {}", feature.len(), bank.cols())));
    }
    let logits: Vec<S> = (0..bank.rows()).map(|j| dot(feature, bank.row(j)) / temperature).collect();
    Ok(softmax(&logits))
}

/// The two sub-terms of the regularized consistency loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyTerms<S> {
    /// `KL(target ‖ predicted)`, `+∞` when `predicted` vanishes where `target` does not.
    pub kl: S,
    /// `H(predicted)`.
    pub entropy: S,
}

impl<S: Real> ConsistencyTerms<S> {
    pub fn total(&self) -> S {
        self.kl + self.entropy
    }

    /// Set when the KL term hit the infinite sentinel.
    pub fn is_fault(&self) -> bool {
        !self.kl.is_finite()
    }
}

/// `KL(S_clip ‖ S_mae) + H(S_mae)` with `0·log 0 = 0`.
pub fn consistency_loss<S: Real>(target: &[S], predicted: &[S]) -> Result<ConsistencyTerms<S>> {
    if target.len() != predicted.len() {
        return Err(Error::Structural(format!("distributions over {} and {} items", target.len(), predicted.len())));
    }
    let mut kl = S::zero();
    for (&p, &q) in target.iter().zip(predicted) {
        if p > S::zero() {
            if q <= S::zero() {
                kl = S::infinity();
                break;
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(ConsistencyTerms { kl, entropy: entropy(predicted) })
}

/// Full semantic loss pair for one captioned sample.
#[derive(Clone, Debug)]
pub struct SemanticTerms<S> {
    pub align: S,
    pub consistency: ConsistencyTerms<S>,
    /// Gradient of `w_align·align + w_cons·(kl + entropy)` with respect to the decoder feature.
    pub d_decoded: Vec<S>,
    pub d_head: Mat<S>,
}

/// Both semantic losses for one sample, with the gradient of their weighted sum.
///
/// `texts` rows are the caption embeddings forming the similarity set; `visual` is the frozen image embedding.
pub fn semantic_terms_grad<S: Real>(
    decoded: &[S],
    visual: &[S],
    texts: &Mat<S>,
    head: &Mat<S>,
    temperature: S,
    weight_align: S,
    weight_consistency: S,
) -> Result<SemanticTerms<S>> {
    let (align, mut d_decoded, mut d_head) = feature_align_loss_grad(decoded, visual, head)?;
    d_decoded.iter_mut().for_each(|v| *v *= weight_align);
    d_head.scale(weight_align);

    let f = project(decoded, head)?;
    let (fu, fnorm) = normalize(&f, "decoded feature")?;
    let (vu, _) = normalize(visual, "visual embedding")?;
    let target = similarity_distribution(&vu, texts, temperature)?;
    let predicted = similarity_distribution(&fu, texts, temperature)?;
    let consistency = consistency_loss(&target, &predicted)?;
    if consistency.is_fault() {
        return Err(Error::Numeric("similarity distribution vanished where the target is positive".into()));
    }
    // d/dz of KL(p‖q) + H(q) for q = softmax(z): q − p − q ⊙ (log q + H)
    let h = consistency.entropy;
    let d_logits: Vec<S> = predicted
        .iter()
        .zip(&target)
        .map(|(&q, &p)| {
            let log_q = if q > S::zero() { q.ln() } else { S::zero() };
            (q - p - q * (log_q + h)) * weight_consistency / temperature
        })
        .collect();
    let mut d_unit = vec![S::zero(); fu.len()];
    for (j, &g) in d_logits.iter().enumerate() {
        for (d, &w) in d_unit.iter_mut().zip(texts.row(j)) {
            *d += g * w;
        }
    }
    let d_f = normalize_backward(&fu, fnorm, &d_unit);
    let (dd, dh) = project_backward(decoded, head, &d_f);
    d_decoded.iter_mut().zip(dd).for_each(|(a, b)| *a += b);
    d_head.add_assign(&dh);
    Ok(SemanticTerms { align, consistency, d_decoded, d_head })
}
