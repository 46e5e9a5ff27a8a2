//! Embedding-space similarity: cosine, mean pooling, the 0-100 query/video
//! score and token-level late-interaction similarity between two texts.

use crate::error::{Error, Result};
use crate::model::{VideoRecord, UNIT_NORM_TOLERANCE};

/// Token embeddings for one text. Every token vector has unit norm and all
/// share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    tokens: Vec<Vec<f64>>,
    source_text: String,
}

impl TokenEmbeddingSequence {
    /// Validates an already normalized sequence.
    pub fn new(source_text: impl Into<String>, tokens: Vec<Vec<f64>>) -> Result<Self> {
        let dim = check_tokens(&tokens)?;
        for (i, t) in tokens.iter().enumerate() {
            let n = norm(t);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!("token {i} has norm {n}, expected 1")));
            }
        }
        debug_assert!(dim > 0);
        Ok(TokenEmbeddingSequence {
            tokens,
            source_text: source_text.into(),
        })
    }

    /// Normalizes every token vector before validating. Zero vectors are
    /// rejected.
    pub fn normalized(source_text: impl Into<String>, mut tokens: Vec<Vec<f64>>) -> Result<Self> {
        for (i, t) in tokens.iter_mut().enumerate() {
            let n = norm(t);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid(format!("token {i} has zero or non-finite norm")));
            }
            t.iter_mut().for_each(|x| *x /= n);
        }
        Self::new(source_text, tokens)
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn check_tokens(tokens: &[Vec<f64>]) -> Result<usize> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::invalid("token sequence is empty"))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::invalid("token vectors have dimension 0"));
    }
    if let Some(i) = tokens.iter().position(|t| t.len() != dim) {
        return Err(Error::invalid(format!(
            "token {i} has dimension {}, expected {dim}",
            tokens[i].len()
        )));
    }
    Ok(dim)
}

/// Source of text embeddings. Frame embeddings are not produced here; they
/// arrive precomputed with the corpus.
///
/// Implementations must be callable from several threads at once.
pub trait EmbeddingProvider: Send + Sync {
    /// Token-level embedding used by [`late_interaction_sim`].
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence>;

    /// Single vector in the video encoder's space, used by
    /// [`query_video_score`].
    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        (**self).embed_text(text)
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_query_sentence(text)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        (**self).embed_text(text)
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_query_sentence(text)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        (**self).embed_text(text)
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_query_sentence(text)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Coordinate-wise arithmetic mean. The result is not re-normalized.
pub fn mean_pool<V: AsRef<[f64]>>(frames: &[V]) -> Result<Vec<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("mean_pool of an empty frame list"))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    for (i, f) in frames.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::invalid(format!(
                "frame {i} has dimension {}, expected {dim}",
                f.len()
            )));
        }
        acc.iter_mut().zip(f).for_each(|(a, x)| *a += x);
    }
    let n = frames.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `100 * cosine(query, mean of the video's frame embeddings)`, in
/// `[-100, 100]`.
pub fn query_video_score(query_embedding: &[f64], video: &VideoRecord) -> Result<f64> {
    let frames: Vec<Vec<f64>> = video
        .frame_embeddings
        .iter()
        .map(|f| f.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let pooled = mean_pool(&frames)
        .map_err(|e| Error::invalid(format!("video {}: {e}", video.id)))?;
    let c = cosine(query_embedding, &pooled)
        .map_err(|e| Error::invalid(format!("video {}: {e}", video.id)))?;
    Ok(100.0 * c)
}

/// Late-interaction similarity: for each query token, the best cosine
/// against any document token, averaged over query tokens.
///
/// Averaging (rather than summing) keeps the result in `[-1, 1]` regardless of
/// query length.
pub fn late_interaction_sim(q: &TokenEmbeddingSequence, d: &TokenEmbeddingSequence) -> Result<f64> {
    if q.dim() != d.dim() {
        return Err(Error::invalid(format!(
            "token dimension mismatch: {} vs {}",
            q.dim(),
            d.dim()
        )));
    }
    let mut total = 0.0;
    for qt in q.tokens() {
        let mut best = f64::NEG_INFINITY;
        for dt in d.tokens() {
            best = best.max(cosine(qt, dt)?);
        }
        total += best;
    }
    Ok(total / q.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn e(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&e(3, 0), &e(3, 0)).unwrap(), 1.0);
        assert_eq!(cosine(&e(3, 0), &e(3, 1)).unwrap(), 0.0);
        let s = 1.0 / 2f64.sqrt();
        // 1/sqrt(2), checked with an independent script
        assert_abs_diff_eq!(cosine(&[s, s], &[1.0, 0.0]).unwrap(), 0.70710678, epsilon = 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mean_pool_cases() {
        assert_eq!(mean_pool(&[vec![0.3, -0.2]]).unwrap(), vec![0.3, -0.2]);
        let a = e(3, 0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let z = mean_pool(&[a.clone(), neg]).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert!(cosine(&z, &a).is_err());
        assert_eq!(mean_pool(&[e(3, 0), e(3, 1)]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert!(mean_pool::<Vec<f64>>(&[]).is_err());
    }

    fn video(frames: Vec<Vec<f32>>) -> VideoRecord {
        VideoRecord {
            id: "v".into(),
            frame_count: frames.len(),
            frame_embeddings: frames,
            has_audio: false,
        }
    }

    #[test]
    fn query_video_identity_and_orthogonal() {
        let v = video(vec![vec![0.6, 0.8, 0.0]; 3]);
        assert_abs_diff_eq!(query_video_score(&[0.6, 0.8, 0.0], &v).unwrap(), 100.0, epsilon = 1e-5);
        assert_eq!(query_video_score(&[0.0, 0.0, 1.0], &v).unwrap(), 0.0);
    }

    #[test]
    fn query_video_three_frame_oracle() {
        // Frames are exact in f32. Oracle: mean = (1/3)[1+0+0.6, 0+1+0.8, 0+0+0]
        // = [1.6/3, 1.8/3, 0]; q = [1, 2, 2] / 3.
        // cos = (1.6 + 3.6) / 3 / 3 / (sqrt(1.6^2 + 1.8^2) / 3) = 5.2 / (3 * sqrt(5.8))
        let v = video(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.6, 0.8, 0.0]]);
        let q = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let frames: [[f64; 3]; 3] = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [f64::from(0.6f32), f64::from(0.8f32), 0.0],
        ];
        let mut mean = [0.0; 3];
        for f in &frames {
            for j in 0..3 {
                mean[j] += f[j] / 3.0;
            }
        }
        let dot: f64 = (0..3).map(|j| q[j] * mean[j]).sum();
        let nm = (mean.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let nq = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let oracle = 100.0 * dot / (nm * nq);
        assert_abs_diff_eq!(query_video_score(&q, &v).unwrap(), oracle, epsilon = 1e-9);
        // closed form with the decimal frame values
        assert_abs_diff_eq!(oracle, 100.0 * 5.2 / (3.0 * 5.8f64.sqrt()), epsilon = 1e-5);
    }

    fn seq(tokens: Vec<Vec<f64>>) -> TokenEmbeddingSequence {
        TokenEmbeddingSequence::normalized("t", tokens).unwrap()
    }

    #[test]
    fn late_interaction_identity_and_degenerate() {
        let q = seq(vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 1.0]]);
        assert_abs_diff_eq!(late_interaction_sim(&q, &q).unwrap(), 1.0, epsilon = 1e-12);
        let a = seq(vec![vec![1.0, 2.0, 0.5]]);
        let b = seq(vec![vec![0.0, 1.0, 3.0]]);
        assert_abs_diff_eq!(
            late_interaction_sim(&a, &b).unwrap(),
            cosine(&a.tokens()[0], &b.tokens()[0]).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn late_interaction_three_by_four_oracle() {
        let qraw = vec![vec![0.3, -0.1, 0.8, 0.2], vec![0.9, 0.4, -0.3, 0.1], vec![-0.2, 0.7, 0.1, 0.6]];
        let draw = vec![
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.1, -0.9, 0.2, 0.3],
            vec![0.7, 0.0, -0.7, 0.1],
            vec![-0.4, 0.6, 0.2, 0.6],
        ];
        // nested-loop oracle on the raw vectors
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut oracle = 0.0;
        for qt in &qraw {
            let mut m = f64::MIN;
            for dt in &draw {
                m = m.max(cos(qt, dt));
            }
            oracle += m;
        }
        oracle /= 3.0;
        let got = late_interaction_sim(&seq(qraw), &seq(draw)).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
    }

    #[test]
    fn late_interaction_dimension_mismatch() {
        let a = seq(vec![vec![1.0, 0.0]]);
        let b = seq(vec![vec![1.0, 0.0, 0.0]]);
        assert!(late_interaction_sim(&a, &b).is_err());
    }

    #[test]
    fn sequence_validation() {
        assert!(TokenEmbeddingSequence::new("x", vec![]).is_err());
        assert!(TokenEmbeddingSequence::new("x", vec![vec![0.5, 0.0]]).is_err());
        assert!(TokenEmbeddingSequence::new("x", vec![vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(TokenEmbeddingSequence::normalized("x", vec![vec![0.0, 0.0]]).is_err());
    }

    fn vecs(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| norm(v) > 1e-3),
            n,
        )
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(u in prop::collection::vec(-1e3f64..1e3, 1..16), seed in 0u64..1000) {
            let v: Vec<f64> = u.iter().enumerate().map(|(i, x)| x * ((i as u64 + seed) % 7) as f64 - 3.0).collect();
            if let Ok(c) = cosine(&u, &v) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
            if let Ok(c) = cosine(&u, &u) {
                prop_assert!(c <= 1.0);
            }
        }

        #[test]
        fn appending_doc_tokens_never_decreases(q in vecs(1..4, 5), d in vecs(1..5, 5), extra in vecs(1..3, 5)) {
            let qs = seq(q);
            let before = late_interaction_sim(&qs, &seq(d.clone())).unwrap();
            let mut bigger = d;
            bigger.extend(extra);
            let after = late_interaction_sim(&qs, &seq(bigger)).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn doc_token_order_is_irrelevant(q in vecs(1..4, 4), d in vecs(2..6, 4)) {
            let qs = seq(q);
            let mut rev = d.clone();
            rev.reverse();
            let a = late_interaction_sim(&qs, &seq(d)).unwrap();
            let b = late_interaction_sim(&qs, &seq(rev)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn frame_order_is_irrelevant(frames in vecs(2..6, 4), q in vecs(1..2, 4)) {
            let to32 = |f: &Vec<f64>| { let n = norm(f); f.iter().map(|x| (x / n) as f32).collect::<Vec<f32>>() };
            let fwd = video(frames.iter().map(to32).collect());
            let mut rev_frames: Vec<Vec<f32>> = frames.iter().map(to32).collect();
            rev_frames.reverse();
            let rev = video(rev_frames);
            match (query_video_score(&q[0], &fwd), query_video_score(&q[0], &rev)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "one ordering failed"),
            }
        }
    }
}
