//! Symmetric contrastive loss over a batch of paired embeddings.
//!
//! Both embedding matrices are row-normalized inside the loss, the pairwise
//! similarity matrix is scaled by a fixed logit scale, and cross entropy is
//! taken along both the image and the text dimension with the diagonal as
//! target; the final loss is the average of the two directions.

use serde::{Deserialize, Serialize};

use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Constant multiplier on cosine similarities before the softmax.
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { logit_scale: 20.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.logit_scale < 0.0 || !self.logit_scale.is_finite() {
            // scale 0 is allowed as a test-only override; negatives are not
            return Err(TensorError::EmptyInput { op: "logit_scale" });
        }
        Ok(())
    }
}

/// Contrastive loss for `n` matched image/text embedding rows.
///
/// Pair `i` of `image_emb` matches row `i` of `text_emb`. Differentiable with
/// respect to both inputs when they carry tape handles.
pub fn clip_loss(
    tape: &mut Tape,
    image_emb: &Tensor,
    text_emb: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor, TensorError> {
    let (n, d) = image_emb.dims2("clip_loss")?;
    let (nt, dt) = text_emb.dims2("clip_loss")?;
    if n != nt || d != dt {
        return Err(TensorError::ShapeMismatch {
            op: "clip_loss",
            left: image_emb.shape().to_vec(),
            right: text_emb.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(TensorError::EmptyInput { op: "clip_loss" });
    }
    let img = tape.l2_normalize_rows(image_emb)?;
    let txt = tape.l2_normalize_rows(text_emb)?;
    let txt_t = tape.transpose(&txt)?;
    let sims = tape.matmul(&img, &txt_t)?;
    let logits = tape.scale(&sims, cfg.logit_scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let loss_image = tape.cross_entropy_rows(&logits, &targets)?;
    let logits_t = tape.transpose(&logits)?;
    let loss_text = tape.cross_entropy_rows(&logits_t, &targets)?;
    let sum = tape.add(&loss_image, &loss_text)?;
    tape.scale(&sum, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn loss_value(img: &Tensor, txt: &Tensor, scale: f64) -> f64 {
        let mut tape = Tape::new();
        clip_loss(&mut tape, img, txt, &LossConfig { logit_scale: scale })
            .unwrap()
            .scalar_value()
            .unwrap()
    }

    #[test]
    fn scale_zero_gives_log_n() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let img = random_matrix(4, 8, -1.0, 1.0, &mut rng);
        let txt = random_matrix(4, 8, -1.0, 1.0, &mut rng);
        let loss = loss_value(&img, &txt, 0.0);
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pairs_at_scale_20() {
        // image rows == text rows == 2-d orthonormal basis: every row of the
        // scaled similarity matrix is [20, 0], so each cross entropy equals
        // log(1 + e^-20).
        let img = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let txt = img.clone();
        let loss = loss_value(&img, &txt, 20.0);
        let expect = (-20.0_f64).exp().ln_1p(); // ln(1 + e^-20)
        assert!((loss - expect).abs() < 1e-15, "loss {loss} expect {expect}");
        assert!(loss < 3e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![0.1; 6]).unwrap();
        let b = Tensor::matrix(3, 3, vec![0.1; 9]).unwrap();
        assert!(clip_loss(&mut tape, &a, &b, &LossConfig::default()).is_err());
        let c = Tensor::matrix(2, 4, vec![0.1; 8]).unwrap();
        assert!(clip_loss(&mut tape, &a, &c, &LossConfig::default()).is_err());
    }

    #[test]
    fn zero_norm_row_rejected() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            clip_loss(&mut tape, &a, &b, &LossConfig::default()),
            Err(TensorError::DegenerateRow { .. })
        ));
    }

    #[test]
    fn modality_symmetry() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let img = random_matrix(3, 5, -1.0, 1.0, &mut rng);
            let txt = random_matrix(3, 5, -1.0, 1.0, &mut rng);
            let a = loss_value(&img, &txt, 20.0);
            let b = loss_value(&txt, &img, 20.0);
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let img = random_matrix(4, 6, -1.0, 1.0, &mut rng);
        let txt = random_matrix(4, 6, -1.0, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let (_, d) = t.dims2("test").unwrap();
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(&t.data()[p * d..(p + 1) * d]);
            }
            Tensor::matrix(4, d, data).unwrap()
        };
        let a = loss_value(&img, &txt, 20.0);
        let b = loss_value(&permute(&img), &permute(&txt), 20.0);
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn loss_nonnegative_and_decreasing_in_scale_at_optimum() {
        // identical matched pairs, orthogonal mismatches
        let img = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let txt = img.clone();
        let mut prev = f64::INFINITY;
        for scale in [0.0, 1.0, 5.0, 20.0, 50.0] {
            let loss = loss_value(&img, &txt, scale);
            assert!(loss >= 0.0);
            assert!(loss <= prev + 1e-15, "non-increasing in scale");
            prev = loss;
        }
    }

    #[test]
    fn single_pair_batch_is_legal() {
        let img = Tensor::matrix(1, 4, vec![0.2, -0.3, 0.9, 0.1]).unwrap();
        let txt = Tensor::matrix(1, 4, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let loss = loss_value(&img, &txt, 20.0);
        assert!((loss - 0.0).abs() < 1e-15, "n=1 softmax over one logit");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let img = random_matrix(3, 4, -1.0, 1.0, &mut rng);
        let txt = random_matrix(3, 4, -1.0, 1.0, &mut rng);
        assert_gradients(
            &[img, txt],
            &|tape, inputs| clip_loss(tape, &inputs[0], &inputs[1], &LossConfig::default()),
            "clip_loss",
        );
    }
}
