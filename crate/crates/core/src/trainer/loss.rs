//! Training losses: KL divergence against the pseudo-label distribution,
//! and the InfoNCE contrastive baseline. All gradients are analytic and
//! checked against central finite differences in the tests.


use crate::labeler::{softmax_with_temperature, PseudoGtDistribution};
use crate::trainer::projection::ProjectionGradient;
use crate::trainer::TrainError;

/// Retrieval distribution over the sampled candidates: softmax of the
/// dot products between projected query and document vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDistribution {
    pub doc_ids: Vec<String>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Rescore the candidate set against a projected query. `doc_vectors`
/// must align with `doc_ids` row by row.
pub fn retrieval_distribution(
    q_proj: &[f64],
    doc_ids: Vec<String>,
    doc_vectors: &[&[f32]],
) -> Result<RetrievalDistribution, TrainError> {
    if doc_ids.is_empty() {
        return Err(TrainError::Shape("candidate set is empty".into()));
    }
    if doc_ids.len() != doc_vectors.len() {
        return Err(TrainError::Shape(format!(
            "{} ids but {} vectors",
            doc_ids.len(),
            doc_vectors.len()
        )));
    }
    let logits: Vec<f64> = doc_vectors.iter().map(|d| dot_f64_mixed(d, q_proj)).collect();
    let probs = softmax_with_temperature(&logits, 1.0);
    Ok(RetrievalDistribution { doc_ids, logits, probs })
}

fn dot_f64_mixed(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * y;
    }
    acc
}

const PROB_FLOOR: f64 = 1e-300;

/// KL(target || model) = Σ Q (ln Q − ln P). Ids must align pairwise.
pub fn kl_loss(target: &PseudoGtDistribution, model: &RetrievalDistribution) -> Result<f64, TrainError> {
    check_alignment(&target.doc_ids, &model.doc_ids)?;
    let mut loss = 0.0;
    for (q, p) in target.probs.iter().zip(&model.probs) {
        let q = q.max(PROB_FLOOR);
        let p = p.max(PROB_FLOOR);
        loss += q * (q.ln() - p.ln());
    }
    // tiny negatives are f64 noise around matched distributions
    Ok(loss.max(0.0))
}

fn check_alignment(target: &[String], model: &[String]) -> Result<(), TrainError> {
    if target.len() != model.len() || target.iter().zip(model).any(|(a, b)| a != b) {
        return Err(TrainError::Misaligned);
    }
    Ok(())
}

/// Gradient of `kl_loss` w.r.t. the projection, via
/// dL/dq' = Σ_j (P_j − Q_j) d_j chained through q' = W q + b.
pub fn kl_gradient(
    target: &PseudoGtDistribution,
    model: &RetrievalDistribution,
    doc_vectors: &[&[f32]],
    base_query: &[f32],
) -> Result<ProjectionGradient, TrainError> {
    check_alignment(&target.doc_ids, &model.doc_ids)?;
    if doc_vectors.len() != model.probs.len() {
        return Err(TrainError::Shape(format!(
            "{} probs but {} doc vectors",
            model.probs.len(),
            doc_vectors.len()
        )));
    }
    let dim = base_query.len();
    let mut d_query = vec![0.0f64; dim];
    for ((p, q), doc) in model.probs.iter().zip(&target.probs).zip(doc_vectors) {
        if doc.len() != dim {
            return Err(TrainError::Shape(format!(
                "doc vector dim {} vs query dim {dim}",
                doc.len()
            )));
        }
        let coeff = p - q;
        for (slot, d) in d_query.iter_mut().zip(*doc) {
            *slot += coeff * f64::from(*d);
        }
    }
    Ok(ProjectionGradient::from_query_grad(&d_query, base_query))
}

/// InfoNCE over one query: mean over positives p of
/// −ln( e^{q'·p} / (e^{q'·p} + Σ_n e^{q'·n}) ).
/// Returns the loss and its gradient w.r.t. the projected query.
pub fn info_nce_loss(
    q_proj: &[f64],
    positives: &[&[f32]],
    negatives: &[&[f32]],
) -> Result<(f64, Vec<f64>), TrainError> {
    if positives.is_empty() {
        return Err(TrainError::Shape("need at least one positive".into()));
    }
    if negatives.is_empty() {
        return Err(TrainError::Shape("need at least one negative".into()));
    }
    let dim = q_proj.len();
    for v in positives.iter().chain(negatives.iter()) {
        if v.len() != dim {
            return Err(TrainError::Shape(format!("vector dim {} vs query dim {dim}", v.len())));
        }
    }

    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot_f64_mixed(n, q_proj)).collect();
    let mut loss = 0.0;
    let mut d_query = vec![0.0f64; dim];
    for pos in positives {
        let pos_logit = dot_f64_mixed(pos, q_proj);
        // softmax over {positive} ∪ negatives, max-subtracted
        let max = neg_logits.iter().cloned().fold(pos_logit, f64::max);
        let pos_exp = (pos_logit - max).exp();
        let neg_exps: Vec<f64> = neg_logits.iter().map(|l| (l - max).exp()).collect();
        let denom = pos_exp + neg_exps.iter().sum::<f64>();
        let p_pos = pos_exp / denom;
        loss += -(p_pos.max(PROB_FLOOR)).ln();

        // d/dq' of −ln softmax_pos: (p_pos − 1)·pos + Σ_n p_n·n
        for (slot, v) in d_query.iter_mut().zip(*pos) {
            *slot += (p_pos - 1.0) * f64::from(*v);
        }
        for (neg, ne) in negatives.iter().zip(&neg_exps) {
            let p_neg = ne / denom;
            for (slot, v) in d_query.iter_mut().zip(*neg) {
                *slot += p_neg * f64::from(*v);
            }
        }
    }
    let inv = 1.0 / positives.len() as f64;
    loss *= inv;
    for v in &mut d_query {
        *v *= inv;
    }
    Ok((loss, d_query))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::QueryProjection;
    use rand::{Rng, SeedableRng};

    fn dist_from(probs: Vec<f64>, ids: Vec<String>) -> PseudoGtDistribution {
        let log_scores = probs.iter().map(|p| p.ln()).collect();
        PseudoGtDistribution {
            doc_ids: ids,
            log_scores,
            probs,
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let docs: Vec<Vec<f32>> = vec![vec![0.0, 0.0]; 3];
        let doc_refs: Vec<&[f32]> = docs.iter().map(|d| d.as_slice()).collect();
        let dist = retrieval_distribution(&[1.0, 1.0], ids(3), &doc_refs).unwrap();
        for p in &dist.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_123_matches_oracle() {
        // logits [1,2,3] via orthogonal docs scaled by the query
        let docs = [
            &[1.0f32, 0.0, 0.0][..],
            &[0.0, 1.0, 0.0][..],
            &[0.0, 0.0, 1.0][..],
        ];
        let dist = retrieval_distribution(&[1.0, 2.0, 3.0], ids(3), &docs).unwrap();
        assert!((dist.probs[0] - 0.09003).abs() < 5e-6);
        assert!((dist.probs[1] - 0.24473).abs() < 5e-6);
        assert!((dist.probs[2] - 0.66524).abs() < 5e-6);
    }

    #[test]
    fn logit_shift_leaves_probs_unchanged() {
        let docs = [
            &[1.0f32, 0.0, 0.0, 1.0][..],
            &[0.0, 1.0, 0.0, 1.0][..],
            &[0.0, 0.0, 1.0, 1.0][..],
        ];
        // last coordinate adds a constant 7 to every logit
        let base = retrieval_distribution(&[1.0, 2.0, 3.0, 0.0], ids(3), &docs).unwrap();
        let shifted = retrieval_distribution(&[1.0, 2.0, 3.0, 7.0], ids(3), &docs).unwrap();
        for (a, b) in base.probs.iter().zip(&shifted.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_matching_distributions_is_zero() {
        let target = dist_from(vec![0.3, 0.7], ids(2));
        let model = RetrievalDistribution {
            doc_ids: ids(2),
            logits: vec![0.3f64.ln(), 0.7f64.ln()],
            probs: vec![0.3, 0.7],
        };
        assert_eq!(kl_loss(&target, &model).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_direct_formula() {
        let target = dist_from(vec![0.5, 0.5], ids(2));
        let model = RetrievalDistribution {
            doc_ids: ids(2),
            logits: vec![0.0, 0.0],
            probs: vec![0.9, 0.1],
        };
        let loss = kl_loss(&target, &model).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.51083).abs() < 5e-6);
    }

    #[test]
    fn kl_with_near_degenerate_target_stays_finite() {
        let target = dist_from(vec![1.0 - 1e-12, 1e-12], ids(2));
        let model = RetrievalDistribution {
            doc_ids: ids(2),
            logits: vec![0.0, 0.0],
            probs: vec![0.5, 0.5],
        };
        let loss = kl_loss(&target, &model).unwrap();
        assert!(loss.is_finite());
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn misaligned_ids_are_rejected() {
        let target = dist_from(vec![0.5, 0.5], vec!["a".into(), "b".into()]);
        let model = RetrievalDistribution {
            doc_ids: vec!["b".into(), "a".into()],
            logits: vec![0.0, 0.0],
            probs: vec![0.5, 0.5],
        };
        assert!(matches!(kl_loss(&target, &model), Err(TrainError::Misaligned)));
    }

    #[test]
    fn matched_distributions_have_zero_gradient() {
        let docs = [&[1.0f32, 0.0][..], &[0.0, 1.0][..]];
        let q_proj = [0.0, 0.0];
        let model = retrieval_distribution(&q_proj, ids(2), &docs).unwrap();
        let target = dist_from(model.probs.clone(), ids(2));
        let grad = kl_gradient(&target, &model, &docs, &[1.0, 1.0]).unwrap();
        assert!(grad.d_weight.iter().all(|v| v.abs() < 1e-15));
        assert!(grad.d_bias.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn single_candidate_gradient_is_zero() {
        let docs = [&[0.5f32, -0.5][..]];
        let model = retrieval_distribution(&[1.0, 2.0], ids(1), &docs).unwrap();
        let target = dist_from(vec![1.0], ids(1));
        let grad = kl_gradient(&target, &model, &docs, &[1.0, 1.0]).unwrap();
        assert!(grad.d_weight.iter().all(|v| v.abs() < 1e-15));
        assert!(grad.d_bias.iter().all(|v| v.abs() < 1e-15));
    }

    /// Full-pipeline KL loss as a function of the projection, for finite
    /// differences: project, rescore, softmax, KL.
    fn kl_pipeline_loss(
        proj: &QueryProjection,
        base: &[f32],
        docs: &[&[f32]],
        target: &PseudoGtDistribution,
    ) -> f64 {
        let q = proj.apply_f64(base).unwrap();
        let model = retrieval_distribution(&q, target.doc_ids.clone(), docs).unwrap();
        kl_loss(target, &model).unwrap()
    }

    #[test]
    fn kl_gradient_matches_central_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let dim = 4;
        let m = 5;
        let docs: Vec<Vec<f32>> = (0..m)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let doc_refs: Vec<&[f32]> = docs.iter().map(|d| d.as_slice()).collect();
        let base: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(-6.0..0.0)).collect();
        let probs = softmax_with_temperature(&raw, 1.0);
        let target = dist_from(probs, ids(m));

        let weight: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let proj = QueryProjection::from_parts(dim, weight, bias).unwrap();

        let q = proj.apply_f64(&base).unwrap();
        let model = retrieval_distribution(&q, target.doc_ids.clone(), &doc_refs).unwrap();
        let grad = kl_gradient(&target, &model, &doc_refs, &base).unwrap();

        let h = 1e-4;
        let check = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "analytic {analytic} vs finite difference {fd}"
            );
        };
        for idx in 0..dim * dim {
            let mut plus = proj.clone();
            plus.params_mut().0[idx] += h;
            let mut minus = proj.clone();
            minus.params_mut().0[idx] -= h;
            let fd = (kl_pipeline_loss(&plus, &base, &doc_refs, &target)
                - kl_pipeline_loss(&minus, &base, &doc_refs, &target))
                / (2.0 * h);
            check(grad.d_weight[idx], fd);
        }
        for idx in 0..dim {
            let mut plus = proj.clone();
            plus.params_mut().1[idx] += h;
            let mut minus = proj.clone();
            minus.params_mut().1[idx] -= h;
            let fd = (kl_pipeline_loss(&plus, &base, &doc_refs, &target)
                - kl_pipeline_loss(&minus, &base, &doc_refs, &target))
                / (2.0 * h);
            check(grad.d_bias[idx], fd);
        }
    }

    #[test]
    fn saturated_positive_drives_loss_to_zero() {
        let pos = [&[100.0f32, 0.0][..]];
        let neg = [&[0.0f32, 1.0][..]];
        let (loss, _) = info_nce_loss(&[1.0, 0.0], &pos, &neg).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn symmetric_pair_gives_ln_two() {
        let pos = [&[1.0f32, 0.0][..]];
        let neg = [&[0.0f32, 1.0][..]];
        // q'·p == q'·n
        let (loss, _) = info_nce_loss(&[0.5, 0.5], &pos, &neg).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(777);
        let dim = 6;
        let positives: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let negatives: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let pos_refs: Vec<&[f32]> = positives.iter().map(|v| v.as_slice()).collect();
        let neg_refs: Vec<&[f32]> = negatives.iter().map(|v| v.as_slice()).collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, grad) = info_nce_loss(&q, &pos_refs, &neg_refs).unwrap();
        let h = 1e-4;
        for idx in 0..dim {
            let mut plus = q.clone();
            plus[idx] += h;
            let mut minus = q.clone();
            minus[idx] -= h;
            let fd = (info_nce_loss(&plus, &pos_refs, &neg_refs).unwrap().0
                - info_nce_loss(&minus, &pos_refs, &neg_refs).unwrap().0)
                / (2.0 * h);
            let denom = grad[idx].abs().max(fd.abs()).max(1e-3);
            assert!((grad[idx] - fd).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn single_positive_equals_softmax_cross_entropy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let dim = 4;
            let pos: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let negs: Vec<Vec<f32>> = (0..5)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect();
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pos_refs = [pos.as_slice()];
            let neg_refs: Vec<&[f32]> = negs.iter().map(|v| v.as_slice()).collect();
            let (loss, _) = info_nce_loss(&q, &pos_refs, &neg_refs).unwrap();

            // direct cross-entropy of softmax over {positive} ∪ negatives
            let mut logits = vec![dot_f64_mixed(&pos, &q)];
            logits.extend(neg_refs.iter().map(|n| dot_f64_mixed(n, &q)));
            let probs = softmax_with_temperature(&logits, 1.0);
            let expected = -probs[0].ln();
            assert!((loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_positive_or_negative_is_an_error() {
        let v = [&[1.0f32][..]];
        assert!(info_nce_loss(&[1.0], &[], &v).is_err());
        assert!(info_nce_loss(&[1.0], &v, &[]).is_err());
    }
}
