//! Concept bottleneck model bundle and its stochastic extensions.
//!
//! The backbone is three affine maps: an encoder `z = h(x)`, a concept head
//! producing logits `μ = g(z)` and a target head `f` mapping a binary concept
//! vector to class scores. A CBM samples concepts as independent Bernoullis of
//! `σ(μ)`. The stochastic modes additionally carry a [`CovarianceHead`] so that
//! `η ~ N(μ, Σ)` and concepts are Bernoulli draws of `σ(η)`.

mod covariance;
pub mod io;

pub(crate) use covariance::unpack_factor;
pub use covariance::{decode_covariance, tri_index, tri_len, CovarianceHead, CovarianceKind};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid_config, Error, Result};
use crate::gaussian::ConceptDistribution;
use crate::nn::{sigmoid, softmax_in_place, Linear};

/// How a bundle turns concept logits into concept samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Independent Bernoulli concepts.
    Cbm,
    /// Gaussian logits, all heads trainable.
    Scbm,
    /// Gaussian logits on a frozen CBM backbone.
    Pscbm,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Cbm => "cbm",
            Mode::Scbm => "scbm",
            Mode::Pscbm => "pscbm",
        }
    }
}

/// Per-concept 5th/95th percentiles of predicted logits on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileTable {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub(crate) encoder: Linear,
    pub(crate) concept_head: Linear,
    pub(crate) target_head: Linear,
    pub(crate) covariance: Option<CovarianceHead>,
    pub(crate) mode: Mode,
    pub(crate) covariance_enabled: bool,
    pub(crate) percentiles: Option<PercentileTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Mean over samples of `σ(η)` (stochastic modes) or `p` (CBM).
    pub concept_probs: Vec<f64>,
    /// Sample average of `softmax(f(ĉ))`.
    pub class_probs: Vec<f64>,
    /// `(μ, L)` in the stochastic modes.
    pub dist: Option<ConceptDistribution>,
    pub samples_used: usize,
}

impl ModelBundle {
    /// Assembles a bundle, checking that the layer shapes chain.
    pub fn new(
        encoder: Linear,
        concept_head: Linear,
        target_head: Linear,
        covariance: Option<CovarianceHead>,
        mode: Mode,
    ) -> Result<Self> {
        if concept_head.input_dim() != encoder.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "concept head expects {} features, encoder produces {}",
                concept_head.input_dim(),
                encoder.output_dim()
            )));
        }
        let c = concept_head.output_dim();
        if c == 0 {
            return Err(invalid_config("concepts", "need at least one concept"));
        }
        if target_head.input_dim() != c {
            return Err(Error::ShapeMismatch(format!(
                "target head expects {} concepts, concept head produces {c}",
                target_head.input_dim()
            )));
        }
        if target_head.output_dim() < 2 {
            return Err(invalid_config("classes", "need at least two classes"));
        }
        match (&covariance, mode) {
            (None, Mode::Cbm) => {}
            (Some(_), Mode::Cbm) => {
                return Err(invalid_config("covariance", "a CBM carries no covariance head"))
            }
            (None, _) => return Err(invalid_config("covariance", "stochastic modes need a covariance head")),
            (Some(head), _) => {
                if head.concepts() != c {
                    return Err(Error::ShapeMismatch(format!(
                        "covariance head covers {} concepts, model has {c}",
                        head.concepts()
                    )));
                }
                if let CovarianceHead::Amortized { map } = head {
                    if map.input_dim() != encoder.output_dim() {
                        return Err(Error::ShapeMismatch(
                            "amortized covariance map must read encoder features".into(),
                        ));
                    }
                }
            }
        }
        Ok(Self {
            encoder,
            concept_head,
            target_head,
            covariance,
            mode,
            covariance_enabled: mode != Mode::Cbm,
            percentiles: None,
        })
    }

    /// Randomly initialised CBM with the given layer sizes.
    pub fn random_cbm<R: Rng + ?Sized>(
        input_dim: usize,
        feature_dim: usize,
        concepts: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Linear::random(input_dim, feature_dim, rng);
        let concept_head = Linear::random(feature_dim, concepts, rng);
        let target_head = Linear::random(concepts, classes, rng);
        Self::new(encoder, concept_head, target_head, None, Mode::Cbm)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn concepts(&self) -> usize {
        self.concept_head.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.target_head.output_dim()
    }

    pub fn encoder(&self) -> &Linear {
        &self.encoder
    }

    pub fn concept_head(&self) -> &Linear {
        &self.concept_head
    }

    pub fn target_head(&self) -> &Linear {
        &self.target_head
    }

    pub fn covariance_head(&self) -> Option<&CovarianceHead> {
        self.covariance.as_ref()
    }

    pub fn covariance_head_mut(&mut self) -> Option<&mut CovarianceHead> {
        self.covariance.as_mut()
    }

    pub fn percentiles(&self) -> Option<&PercentileTable> {
        self.percentiles.as_ref()
    }

    pub fn set_percentiles(&mut self, table: PercentileTable) -> Result<()> {
        let c = self.concepts();
        if table.low.len() != c || table.high.len() != c {
            return Err(Error::ShapeMismatch(format!("percentile table must have {c} entries")));
        }
        self.percentiles = Some(table);
        Ok(())
    }

    /// True when forward passes draw Gaussian logits.
    pub fn is_stochastic(&self) -> bool {
        self.mode != Mode::Cbm && self.covariance_enabled && self.covariance.is_some()
    }

    pub fn covariance_enabled(&self) -> bool {
        self.covariance_enabled
    }

    /// `z = h(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.encoder.apply(x))
    }

    /// Concept logits `μ = g(h(x))`.
    pub fn concept_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(x)?;
        Ok(self.concept_head.apply(&z))
    }

    /// Writes `softmax(f(concepts))` into `out`.
    pub fn class_probs_into(&self, concepts: &[f64], out: &mut [f64]) {
        self.target_head.apply_into(concepts, out);
        softmax_in_place(out);
    }

    pub fn class_probs(&self, concepts: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes()];
        self.class_probs_into(concepts, &mut out);
        out
    }

    /// Decoded `(μ, L)` for one input. Errors in CBM mode.
    pub fn concept_distribution(&self, x: &[f64]) -> Result<ConceptDistribution> {
        let head = self.covariance.as_ref().ok_or(Error::WrongMode {
            expected: "stochastic",
            got: self.mode.name(),
        })?;
        let z = self.features(x)?;
        let mu = self.concept_head.apply(&z);
        let chol = decode_covariance(head, Some(&z))?;
        ConceptDistribution::new(DVector::from_vec(mu), chol)
    }

    /// Routes to [`forward_stochastic`](Self::forward_stochastic) when the
    /// covariance is active, otherwise to [`forward_cbm`](Self::forward_cbm).
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], samples: usize, rng: &mut R) -> Result<ForwardOutput> {
        if self.is_stochastic() {
            self.forward_stochastic(x, samples, rng)
        } else {
            self.forward_cbm(x, samples, rng)
        }
    }

    /// Bernoulli forward pass on `p = σ(g(h(x)))`.
    ///
    /// Uses only the backbone, so a PSCBM with its covariance disabled takes
    /// exactly this path.
    pub fn forward_cbm<R: Rng + ?Sized>(&self, x: &[f64], samples: usize, rng: &mut R) -> Result<ForwardOutput> {
        check_samples(samples)?;
        let probs: Vec<f64> = self.concept_logits(x)?.into_iter().map(sigmoid).collect();
        let class_probs = self.average_over_bernoulli(&probs, samples, rng);
        Ok(ForwardOutput {
            concept_probs: probs,
            class_probs,
            dist: None,
            samples_used: samples,
        })
    }

    /// Class probabilities averaged over `samples` Bernoulli draws of `probs`.
    pub fn average_over_bernoulli<R: Rng + ?Sized>(&self, probs: &[f64], samples: usize, rng: &mut R) -> Vec<f64> {
        let k = self.classes();
        let mut hard = vec![0.0; probs.len()];
        let mut scratch = vec![0.0; k];
        let mut acc = vec![0.0; k];
        for _ in 0..samples {
            bernoulli_into(probs, rng, &mut hard);
            self.class_probs_into(&hard, &mut scratch);
            for (a, s) in acc.iter_mut().zip(&scratch) {
                *a += s;
            }
        }
        acc.iter_mut().for_each(|a| *a /= samples as f64);
        acc
    }

    /// Gaussian-logit forward pass: `η⁽ᵐ⁾ = μ + L·ε⁽ᵐ⁾`, one Bernoulli draw of
    /// `σ(η⁽ᵐ⁾)` per sample.
    pub fn forward_stochastic<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        samples: usize,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        check_samples(samples)?;
        if !self.is_stochastic() {
            return Err(Error::WrongMode {
                expected: "stochastic",
                got: self.mode.name(),
            });
        }
        let dist = self.concept_distribution(x)?;
        let c = self.concepts();
        let k = self.classes();
        let mut noise = vec![0.0; c];
        let mut eta = vec![0.0; c];
        let mut hard = vec![0.0; c];
        let mut scratch = vec![0.0; k];
        let mut concept_acc = vec![0.0; c];
        let mut class_acc = vec![0.0; k];
        for _ in 0..samples {
            for n in noise.iter_mut() {
                *n = rng.sample(StandardNormal);
            }
            dist.sample_into(&noise, &mut eta);
            for (e, acc) in eta.iter_mut().zip(concept_acc.iter_mut()) {
                *e = sigmoid(*e);
                *acc += *e;
            }
            bernoulli_into(&eta, rng, &mut hard);
            self.class_probs_into(&hard, &mut scratch);
            for (a, s) in class_acc.iter_mut().zip(&scratch) {
                *a += s;
            }
        }
        let m = samples as f64;
        concept_acc.iter_mut().for_each(|a| *a /= m);
        class_acc.iter_mut().for_each(|a| *a /= m);
        Ok(ForwardOutput {
            concept_probs: concept_acc,
            class_probs: class_acc,
            dist: Some(dist),
            samples_used: samples,
        })
    }

    /// Turns a trained CBM into a PSCBM sharing its backbone. The new
    /// covariance head decodes to `L = I`.
    pub fn wrap_pretrained(&self, kind: CovarianceKind) -> Result<ModelBundle> {
        if self.mode != Mode::Cbm {
            return Err(Error::WrongMode {
                expected: "cbm",
                got: self.mode.name(),
            });
        }
        let head = CovarianceHead::identity(kind, self.concepts(), self.feature_dim());
        let mut out = ModelBundle::new(
            self.encoder.clone(),
            self.concept_head.clone(),
            self.target_head.clone(),
            Some(head),
            Mode::Pscbm,
        )?;
        out.percentiles = self.percentiles.clone();
        Ok(out)
    }

    /// PSCBM whose forward passes take the plain CBM route.
    pub fn disable_covariance(&self) -> Result<ModelBundle> {
        if self.mode != Mode::Pscbm {
            return Err(Error::WrongMode {
                expected: "pscbm",
                got: self.mode.name(),
            });
        }
        let mut out = self.clone();
        out.covariance_enabled = false;
        Ok(out)
    }

    pub fn enable_covariance(&self) -> Result<ModelBundle> {
        if self.mode != Mode::Pscbm {
            return Err(Error::WrongMode {
                expected: "pscbm",
                got: self.mode.name(),
            });
        }
        let mut out = self.clone();
        out.covariance_enabled = true;
        Ok(out)
    }

    /// Parameters a training run may update: the covariance head for PSCBM,
    /// every layer otherwise.
    pub fn trainable_parameter_count(&self) -> usize {
        let head = self.covariance.as_ref().map_or(0, CovarianceHead::num_params);
        match self.mode {
            Mode::Pscbm => head,
            _ => self.backbone_parameter_count() + head,
        }
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.encoder.num_params() + self.concept_head.num_params() + self.target_head.num_params()
    }

    /// SHA-256 over the backbone parameters' bit patterns, hex encoded.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for layer in [&self.encoder, &self.concept_head, &self.target_head] {
            h.update((layer.input_dim() as u64).to_le_bytes());
            h.update((layer.output_dim() as u64).to_le_bytes());
            for v in layer.params() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces the backbone. Only used by the CBM trainer.
    pub(crate) fn set_backbone(&mut self, encoder: Linear, concept_head: Linear, target_head: Linear) {
        self.encoder = encoder;
        self.concept_head = concept_head;
        self.target_head = target_head;
    }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(invalid_config("samples", "need at least one Monte Carlo sample"));
    }
    Ok(())
}

/// One Bernoulli draw per coordinate: `out[i] = 1[u < probs[i]]`.
#[inline]
pub fn bernoulli_into<R: Rng + ?Sized>(probs: &[f64], rng: &mut R, out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(probs) {
        let u: f64 = rng.random();
        *o = if u < p { 1.0 } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cbm() -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ModelBundle::random_cbm(5, 4, 3, 2, &mut rng).unwrap()
    }

    #[test]
    fn shape_validation() {
        let e = Linear::zeros(3, 4);
        let g = Linear::zeros(5, 2);
        let f = Linear::zeros(2, 2);
        assert!(matches!(ModelBundle::new(e, g, f, None, Mode::Cbm), Err(Error::ShapeMismatch(_))));
        let e = Linear::zeros(3, 4);
        let g = Linear::zeros(4, 2);
        let f = Linear::zeros(2, 1);
        assert!(ModelBundle::new(e, g, f, None, Mode::Cbm).is_err());
    }

    #[test]
    fn degenerate_bernoulli_is_deterministic() {
        let mut m = toy_cbm();
        // saturate the concept head: logits ±1000 regardless of x
        m.concept_head.weight.fill(0.0);
        m.concept_head.bias = DVector::from_vec(vec![1000.0, -1000.0, 1000.0]);
        let expected = m.class_probs(&[1.0, 0.0, 1.0]);
        let x = [0.3, -0.2, 0.1, 0.0, 1.0];
        for samples in [1, 7, 50] {
            let mut rng = ChaCha8Rng::seed_from_u64(samples as u64);
            let out = m.forward_cbm(&x, samples, &mut rng).unwrap();
            for (a, b) in out.class_probs.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let m = toy_cbm().wrap_pretrained(CovarianceKind::Global).unwrap();
        let x = [0.3, -0.2, 0.1, 0.0, 1.0];
        let a = m.forward(&x, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.forward(&x, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = toy_cbm().forward_cbm(&x, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let d = toy_cbm().forward_cbm(&x, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn parameter_counts() {
        let cbm = toy_cbm();
        let g = cbm.wrap_pretrained(CovarianceKind::Global).unwrap();
        assert_eq!(g.trainable_parameter_count(), 3 * 4 / 2);
        let a = cbm.wrap_pretrained(CovarianceKind::Amortized).unwrap();
        assert_eq!(a.trainable_parameter_count(), (4 + 1) * 3 * 4 / 2);
        assert_eq!(cbm.trainable_parameter_count(), cbm.backbone_parameter_count());
    }

    #[test]
    fn disable_and_enable_round_trip() {
        let cbm = toy_cbm();
        let p = cbm.wrap_pretrained(CovarianceKind::Global).unwrap();
        let off = p.disable_covariance().unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = cbm.forward(&x, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = off.forward(&x, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let on = off.enable_covariance().unwrap();
        assert!(on.forward(&x, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().dist.is_some());
        assert!(cbm.disable_covariance().is_err());
        assert!(p.wrap_pretrained(CovarianceKind::Global).is_err());
    }

    #[test]
    fn forward_rejects_zero_samples_and_wrong_mode() {
        let cbm = toy_cbm();
        let x = [0.0; 5];
        assert!(cbm.forward_cbm(&x, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(matches!(
            cbm.forward_stochastic(&x, 3, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::WrongMode { .. })
        ));
        assert!(cbm.forward(&[0.0; 2], 3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn backbone_checksum_tracks_parameters() {
        let cbm = toy_cbm();
        let p = cbm.wrap_pretrained(CovarianceKind::Amortized).unwrap();
        assert_eq!(cbm.backbone_checksum(), p.backbone_checksum());
        let mut q = p.clone();
        q.target_head.bias[0] += 1e-12;
        assert_ne!(q.backbone_checksum(), p.backbone_checksum());
    }
}
