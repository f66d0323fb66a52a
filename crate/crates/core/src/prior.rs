//! Vision-language prior branch: temperature-scaled cosine softmax between
//! instance features and per-class text features.
//!
//! The frozen text encoder is not available here, so text features come
//! from one of two parameterizations:
//!
//! * `Prototype`: the class text features are themselves the learnable
//!   parameters, initialized from a prompt-feature file.
//! * `ToyEncoder`: each class prompt is a sequence of fixed base tokens
//!   followed by `D` learnable tokens; the mean token is mapped through a
//!   frozen random linear encoder. Only the learnable tokens train.

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, nll_grad, norm, normalize_in_place, softmax_in_place, Matrix, PROB_FLOOR,
};
use crate::rng;

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_LEARNABLE_TOKENS: usize = 10;
pub const DEFAULT_TOKEN_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    Prototype,
    ToyEncoder,
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorMode::Prototype => "prototype",
            PriorMode::ToyEncoder => "toy-encoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorParams {
    Prototype {
        /// `N×d`, unit rows.
        features: Matrix,
    },
    ToyEncoder {
        /// Fixed token embeddings per class, each `len_c×e`.
        base_tokens: Vec<Matrix>,
        /// Learnable tokens, `(N·D)×e`; class `c` owns rows `c·D..(c+1)·D`.
        prompt_tokens: Matrix,
        tokens_per_class: usize,
        /// Frozen `d×e` map from token space to feature space.
        encoder: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub params: PriorParams,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrads {
    pub loss: f64,
    /// Same layout as [`PriorModel::learnable`].
    pub prompt: Vec<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

impl PriorModel {
    pub fn prototype(features: Matrix, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let mut features = features;
        crate::numerics::normalize_rows_in_place(&mut features)?;
        Ok(Self {
            params: PriorParams::Prototype { features },
            tau,
        })
    }

    /// Toy-encoder prior over `base_tokens` (one `len_c×e` matrix per
    /// class). The encoder and the initial learnable tokens are drawn from
    /// `seed`.
    pub fn toy_encoder(
        base_tokens: Vec<Matrix>,
        dim: usize,
        tokens_per_class: usize,
        seed: u64,
        tau: f64,
    ) -> Result<Self> {
        check_tau(tau)?;
        let width = base_tokens
            .first()
            .map(Matrix::cols)
            .ok_or_else(|| Error::InvalidInput("toy encoder needs at least one class".into()))?;
        if base_tokens.iter().any(|t| t.cols() != width) {
            return Err(Error::InvalidInput(
                "base tokens have inconsistent widths".into(),
            ));
        }
        if width == 0 || dim == 0 {
            return Err(Error::InvalidInput(
                "token width and feature dim must be positive".into(),
            ));
        }
        if tokens_per_class == 0 && base_tokens.iter().any(|t| t.rows() == 0) {
            return Err(Error::InvalidInput("a class prompt has no tokens".into()));
        }
        let n = base_tokens.len();
        let mut enc_rng = rng::stream(seed, 11);
        let enc_dist = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("valid std");
        let encoder_data = (0..dim * width)
            .map(|_| enc_dist.sample(&mut enc_rng))
            .collect();
        let mut tok_rng = rng::stream(seed, 12);
        let tok_dist = Normal::new(0.0, 0.02).expect("valid std");
        let token_data = (0..n * tokens_per_class * width)
            .map(|_| tok_dist.sample(&mut tok_rng))
            .collect();
        Ok(Self {
            params: PriorParams::ToyEncoder {
                base_tokens,
                prompt_tokens: Matrix::new(n * tokens_per_class, width, token_data)?,
                tokens_per_class,
                encoder: Matrix::new(dim, width, encoder_data)?,
            },
            tau,
        })
    }

    pub fn mode(&self) -> PriorMode {
        match self.params {
            PriorParams::Prototype { .. } => PriorMode::Prototype,
            PriorParams::ToyEncoder { .. } => PriorMode::ToyEncoder,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.params {
            PriorParams::Prototype { features } => features.rows(),
            PriorParams::ToyEncoder { base_tokens, .. } => base_tokens.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.params {
            PriorParams::Prototype { features } => features.cols(),
            PriorParams::ToyEncoder { encoder, .. } => encoder.rows(),
        }
    }

    /// Flat view of the trainable parameters.
    pub fn learnable(&self) -> &[f64] {
        match &self.params {
            PriorParams::Prototype { features } => features.as_slice(),
            PriorParams::ToyEncoder { prompt_tokens, .. } => prompt_tokens.as_slice(),
        }
    }

    pub fn learnable_mut(&mut self) -> &mut [f64] {
        match &mut self.params {
            PriorParams::Prototype { features } => features.as_mut_slice(),
            PriorParams::ToyEncoder { prompt_tokens, .. } => prompt_tokens.as_mut_slice(),
        }
    }

    /// Pre-normalization text features `h_c` and, in toy mode, the token
    /// count of each class prompt.
    fn raw_features(&self) -> (Matrix, Vec<usize>) {
        match &self.params {
            PriorParams::Prototype { features } => (features.clone(), vec![]),
            PriorParams::ToyEncoder {
                base_tokens,
                prompt_tokens,
                tokens_per_class,
                encoder,
            } => {
                let width = encoder.cols();
                let mut h = Matrix::zeros(base_tokens.len(), encoder.rows());
                let mut lens = Vec::with_capacity(base_tokens.len());
                for (c, base) in base_tokens.iter().enumerate() {
                    let mut mean = vec![0.0; width];
                    let learn = (c * tokens_per_class..(c + 1) * tokens_per_class)
                        .map(|r| prompt_tokens.row(r));
                    for tok in base.iter_rows().chain(learn) {
                        for (m, &t) in mean.iter_mut().zip(tok) {
                            *m += t;
                        }
                    }
                    let len = base.rows() + tokens_per_class;
                    mean.iter_mut().for_each(|m| *m /= len as f64);
                    for (i, out) in h.row_mut(c).iter_mut().enumerate() {
                        *out = dot(encoder.row(i), &mean);
                    }
                    lens.push(len);
                }
                (h, lens)
            }
        }
    }

    /// Unit-norm class text features, `N×d`.
    pub fn encode_prompts(&self) -> Result<Matrix> {
        let (mut h, _) = self.raw_features();
        crate::numerics::normalize_rows_in_place(&mut h)?;
        Ok(h)
    }

    fn logits(&self, text: &Matrix, queries: &Matrix) -> Result<Matrix> {
        if queries.cols() != text.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("query dimension {}", text.cols()),
                actual: format!("{}", queries.cols()),
            });
        }
        let mut l = queries.matmul_transposed(text)?;
        for i in 0..l.rows() {
            let qn = norm(queries.row(i));
            if qn == 0.0 {
                return Err(Error::DegenerateRow { row: i });
            }
            let s = 1.0 / (qn * self.tau);
            l.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        Ok(l)
    }

    /// Class probabilities `softmax_c(cos(t_c, q) / τ)` for every query.
    pub fn predict(&self, queries: &Matrix) -> Result<Matrix> {
        let text = self.encode_prompts()?;
        let mut p = self.logits(&text, queries)?;
        for i in 0..p.rows() {
            softmax_in_place(p.row_mut(i));
        }
        Ok(p)
    }

    /// Mean cross-entropy on labeled queries and its gradient with respect
    /// to the learnable prompt parameters. Base tokens and the encoder are
    /// frozen and get no gradient.
    pub fn loss_and_grads(&self, queries: &Matrix, labels: &[usize]) -> Result<PriorGrads> {
        if labels.len() != queries.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", queries.rows()),
                actual: format!("{}", labels.len()),
            });
        }
        let n = self.num_classes();
        if let Some(&c) = labels.iter().find(|&&c| c >= n) {
            return Err(Error::InvalidInput(format!("label {c} >= {n} classes")));
        }
        let (h, lens) = self.raw_features();
        let mut text = h.clone();
        crate::numerics::normalize_rows_in_place(&mut text)?;
        let mut probs = self.logits(&text, queries)?;
        let m = queries.rows();
        let mut g_text = Matrix::zeros(n, self.dim());
        let mut loss = 0.0;
        if m > 0 {
            let inv_m = 1.0 / m as f64;
            for (i, &y) in labels.iter().enumerate() {
                let p = probs.row_mut(i);
                softmax_in_place(p);
                let p_y = p[y];
                loss -= p_y.clamp(PROB_FLOOR, 1.0).ln();
                let g = nll_grad(p_y) * inv_m;
                if g == 0.0 {
                    continue;
                }
                let q = queries.row(i);
                let scale = 1.0 / (norm(q) * self.tau);
                for c in 0..n {
                    // d logit_c: g · p_y · (δ_cy − p_c)
                    let dl = g * p_y * (if c == y { 1.0 } else { 0.0 } - p[c]);
                    if dl == 0.0 {
                        continue;
                    }
                    for (gt, &qv) in g_text.row_mut(c).iter_mut().zip(q) {
                        *gt += dl * scale * qv;
                    }
                }
            }
            loss *= inv_m;
        }

        // Back through the row normalization t = h / |h|.
        let mut g_h = g_text;
        for c in 0..n {
            let t = text.row(c);
            let hn = norm(h.row(c));
            let row = g_h.row_mut(c);
            let along = dot(t, row);
            for (g, &tv) in row.iter_mut().zip(t) {
                *g = (*g - along * tv) / hn;
            }
        }

        let prompt = match &self.params {
            PriorParams::Prototype { .. } => g_h.into_vec(),
            PriorParams::ToyEncoder {
                tokens_per_class,
                encoder,
                prompt_tokens,
                ..
            } => {
                let width = encoder.cols();
                let mut out = vec![0.0; prompt_tokens.as_slice().len()];
                for c in 0..n {
                    let mut g_tok = vec![0.0; width];
                    for (i, &gh) in g_h.row(c).iter().enumerate() {
                        for (gt, &e) in g_tok.iter_mut().zip(encoder.row(i)) {
                            *gt += gh * e;
                        }
                    }
                    g_tok.iter_mut().for_each(|v| *v /= lens[c] as f64);
                    for k in 0..*tokens_per_class {
                        let r = c * tokens_per_class + k;
                        out[r * width..(r + 1) * width].copy_from_slice(&g_tok);
                    }
                }
                out
            }
        };
        Ok(PriorGrads { loss, prompt })
    }

    /// Keeps stored prototype rows on the unit sphere after an update.
    pub fn renormalize(&mut self) -> Result<()> {
        if let PriorParams::Prototype { features } = &mut self.params {
            for i in 0..features.rows() {
                normalize_in_place(features.row_mut(i))
                    .map_err(|_| Error::DegenerateRow { row: i })?;
            }
        }
        Ok(())
    }
}

pub fn encode_prompts(model: &PriorModel) -> Result<Matrix> {
    model.encode_prompts()
}

pub fn prior_predict(model: &PriorModel, queries: &Matrix) -> Result<Matrix> {
    model.predict(queries)
}

pub fn prior_loss_and_grads(
    model: &PriorModel,
    queries: &Matrix,
    labels: &[usize],
) -> Result<PriorGrads> {
    model.loss_and_grads(queries, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::Rng;

    fn eye(n: usize, d: usize) -> Matrix {
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn prototype_encode_is_identity_on_unit_rows() {
        let f = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let p = PriorModel::prototype(f.clone(), DEFAULT_TAU).unwrap();
        assert_eq!(p.encode_prompts().unwrap(), f);
    }

    #[test]
    fn toy_encoder_single_basis_token() {
        let mut base = Matrix::zeros(1, 4);
        base.set(0, 2, 1.0);
        let p = PriorModel::toy_encoder(vec![base.clone(), base], 3, 0, 5, 0.1).unwrap();
        let PriorParams::ToyEncoder { encoder, .. } = &p.params else {
            unreachable!()
        };
        let mut col: Vec<f64> = (0..3).map(|i| encoder.get(i, 2)).collect();
        normalize_in_place(&mut col).unwrap();
        let out = p.encode_prompts().unwrap();
        for (a, b) in out.row(0).iter().zip(&col) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_examples() {
        let p = PriorModel::prototype(eye(2, 2), 0.01).unwrap();
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let out = p.predict(&q).unwrap();
        // softmax([100, 0]) = [1, e^-100] ≈ [1, 3.7e-44]
        assert!((out.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((out.get(0, 1) - (-100.0f64).exp()).abs() < 1e-50);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let q = Matrix::from_rows(&[[s, s]]).unwrap();
        assert_eq!(p.predict(&q).unwrap().row(0), &[0.5, 0.5]);

        let p = PriorModel::prototype(eye(3, 4), 1e6).unwrap();
        let q = Matrix::from_rows(&[
            [0.5, 0.5, 0.5, 0.5],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        for r in p.predict(&q).unwrap().iter_rows() {
            for &v in r {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }

        let bad = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(PriorModel::prototype(eye(2, 2), 0.01)
            .unwrap()
            .predict(&bad)
            .is_err());
    }

    #[test]
    fn saturated_prototypes_have_tiny_loss() {
        let p = PriorModel::prototype(eye(2, 2), 0.01).unwrap();
        let q = eye(2, 2);
        let g = p.loss_and_grads(&q, &[0, 1]).unwrap();
        assert!(g.loss < 1e-10);
    }

    #[test]
    fn orthogonal_prototypes_give_identity_confusion() {
        let n = 5;
        for tau in [0.001, 0.01, 0.05] {
            let p = PriorModel::prototype(eye(n, 8), tau).unwrap();
            let probs = p.predict(&eye(n, 8)).unwrap();
            for i in 0..n {
                let arg = (0..n)
                    .max_by(|&a, &b| probs.get(i, a).total_cmp(&probs.get(i, b)))
                    .unwrap();
                assert_eq!(arg, i);
            }
        }
    }

    fn random_queries(rng: &mut impl Rng, m: usize, d: usize) -> Matrix {
        let mut q = Matrix::zeros(m, d);
        q.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        crate::numerics::normalize_rows_in_place(&mut q).unwrap();
        q
    }

    #[test]
    fn argmax_invariant_to_temperature() {
        let mut rng = crate::rng::seeded(4);
        for _ in 0..50 {
            let n = rng.random_range(2..5);
            let d = rng.random_range(n..8);
            let f = random_queries(&mut rng, n, d);
            let q = random_queries(&mut rng, 10, d);
            let argmax = |tau: f64| {
                let p = PriorModel::prototype(f.clone(), tau)
                    .unwrap()
                    .predict(&q)
                    .unwrap();
                (0..q.rows())
                    .map(|i| {
                        (0..n)
                            .max_by(|&a, &b| p.get(i, a).total_cmp(&p.get(i, b)))
                            .unwrap()
                    })
                    .collect::<Vec<_>>()
            };
            let base = argmax(0.01);
            assert_eq!(argmax(0.005), base);
            assert_eq!(argmax(0.1), base);
        }
    }

    fn check_grads(
        model: &PriorModel,
        q: &Matrix,
        labels: &[usize],
    ) -> crate::numerics::GradCheckReport {
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.learnable_mut().copy_from_slice(p);
            let g = m.loss_and_grads(q, labels).unwrap();
            (g.loss, g.prompt)
        };
        finite_difference_check(f, model.learnable(), 1e-5, 1e-4)
    }

    #[test]
    fn prototype_gradients_match_finite_differences() {
        for trial in 0..100 {
            let mut rng = crate::rng::seeded(500 + trial);
            let n = rng.random_range(2..=3);
            let d = rng.random_range(2..=6);
            let mut f = Matrix::zeros(n, d);
            f.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
            let model = PriorModel {
                params: PriorParams::Prototype { features: f },
                tau: rng.random_range(0.2..1.0),
            };
            let m = rng.random_range(1..=5);
            let q = random_queries(&mut rng, m, d);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let r = check_grads(&model, &q, &labels);
            assert!(r.passed, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        for trial in 0..100 {
            let mut rng = crate::rng::seeded(900 + trial);
            let n = rng.random_range(2..=3);
            let d = rng.random_range(2..=6);
            let e = rng.random_range(2..=5);
            let base: Vec<Matrix> = (0..n)
                .map(|_| {
                    let len = rng.random_range(1..4);
                    random_queries(&mut rng, len, e)
                })
                .collect();
            let mut model =
                PriorModel::toy_encoder(base, d, rng.random_range(1..=3), trial, 0.5).unwrap();
            model
                .learnable_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
            let m = rng.random_range(1..=5);
            let q = random_queries(&mut rng, m, d);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let r = check_grads(&model, &q, &labels);
            assert!(r.passed, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(PriorModel::prototype(eye(2, 2), 0.0).is_err());
        assert!(PriorModel::prototype(eye(2, 2), f64::NAN).is_err());
    }
}
