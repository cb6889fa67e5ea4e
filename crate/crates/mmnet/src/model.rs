//! Model assembly: named parameters, configuration, and the full forward
//! pass from an image pair to per-scale matching scores.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::elem::Element;
use crate::encoder::{self, EncoderConfig};
use crate::enhance::{self, EnhanceConfig};
use crate::error::{Error, Result};
use crate::matching::{self, ScaleScores};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Ordered, named parameter store. Iteration order is creation order, which
/// is fixed by construction and therefore reproducible.
#[derive(Clone, Debug)]
pub struct ParamSet<E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Replaces an existing parameter; the shape must be unchanged.
    pub fn set(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {name} expects shape {:?}, got {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a tracked leaf on the tape.
    pub fn bind(&self, tape: &mut GradientTape<E>, requires_grad: bool) -> BoundParams {
        let mut vars = HashMap::new();
        for (i, name) in self.names.iter().enumerate() {
            vars.insert(name.clone(), tape.leaf(self.tensors[i].clone(), requires_grad));
        }
        BoundParams {
            vars,
            order: self.names.clone(),
        }
    }
}

/// Tape handles for one binding of a [`ParamSet`].
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn ordered_vars(&self) -> Vec<(String, Var)> {
        self.order
            .iter()
            .map(|n| (n.clone(), self.vars[n]))
            .collect()
    }
}

/// Draws a fan-scaled uniform weight tensor: U(-b, b) with
/// b = sqrt(6 / (fan_in + fan_out)). Residual blocks and multi-branch sums
/// compound layer gains, so the symmetric bound (rather than fan-in alone)
/// keeps activations near unit scale through the whole network; every draw
/// stays inside +-sqrt(6 / fan_in).
pub fn uniform_init<E: Element>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Full architecture configuration, including the ablation switches.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub enhance: EnhanceConfig,
    /// Scale used for keypoint transfer when no validation-driven selection
    /// has been run; `None` means "select on validation data".
    pub eval_scale: Option<usize>,
    /// Accumulate coarse scores into finer scales (matching complementation).
    pub complementation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            enhance: EnhanceConfig::default(),
            eval_scale: None,
            complementation: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks: 64x64 input, skeleton widths.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            enhance: EnhanceConfig::toy(),
            eval_scale: None,
            complementation: true,
        }
    }
}

/// The matching model: configuration plus parameter values.
pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub params: ParamSet<E>,
}

impl<E: Element> Model<E> {
    /// Builds a model with reproducible fan-in-scaled uniform parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        encoder::init_params(&config.encoder, &mut rng, &mut params);
        enhance::init_params(&config.encoder, &config.enhance, &mut rng, &mut params);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<E>) -> Self {
        Model { config, params }
    }

    /// Runs both images through encoder and feature enhancement, returning
    /// the per-scale enhanced maps (scales 2..=5) of each image.
    pub fn enhanced_pair(
        &self,
        tape: &mut GradientTape<E>,
        bound: &BoundParams,
        source: &Tensor<E>,
        target: &Tensor<E>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut out = Vec::new();
        for img in [source, target] {
            let iv = tape.constant(img.clone());
            let pyr = encoder::encode(tape, bound, iv, &self.config.encoder)?;
            let enhanced = enhance::enhance_pyramid(tape, bound, &pyr, &self.config.enhance)?;
            out.push(enhanced);
        }
        let tgt = out.pop().expect("two images");
        let src = out.pop().expect("two images");
        Ok((src, tgt))
    }

    /// Accumulated matching scores for an image pair at every scale,
    /// materialized as full 4-D tensors (small inputs only).
    pub fn score_pair_full(
        &self,
        tape: &mut GradientTape<E>,
        bound: &BoundParams,
        source: &Tensor<E>,
        target: &Tensor<E>,
    ) -> Result<Vec<ScaleScores>> {
        let (src, tgt) = self.enhanced_pair(tape, bound, source, target)?;
        matching::accumulate_scores(tape, &src, &tgt, self.config.complementation)
    }
}
