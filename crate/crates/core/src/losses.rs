//! Pixel-wise softmax cross-entropy and main/auxiliary loss combination.

use serde::Deserialize;
use ssseg_nn::{CrossEntropyOptions, CrossEntropyValue, Var};

use crate::datasets::DEFAULT_IGNORE_INDEX;
use crate::error::{ModelError, ModelResult};
use crate::registry::{parse_params, Category, Registry};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
    #[serde(default)]
    pub class_weights: Option<Vec<f32>>,
    #[serde(default = "default_aux_weight")]
    pub aux_weight: f64,
    #[serde(default)]
    pub label_smoothing: f32,
}

fn default_ignore() -> u8 {
    DEFAULT_IGNORE_INDEX
}

fn default_aux_weight() -> f64 {
    0.4
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { ignore_index: DEFAULT_IGNORE_INDEX, class_weights: None, aux_weight: 0.4, label_smoothing: 0.0 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> ModelResult<()> {
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(ModelError::InvalidSpec(format!("aux_weight {} must be non-negative", self.aux_weight)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(ModelError::InvalidSpec(format!("class_weights {w:?} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(ModelError::InvalidSpec(format!("label_smoothing {} not in [0, 1]", self.label_smoothing)));
        }
        Ok(())
    }

    /// Check against the dataset's class count.
    pub fn validate_for(&self, num_classes: usize) -> ModelResult<()> {
        self.validate()?;
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes {
                return Err(ModelError::Config(format!("{} class weights for {num_classes} classes", w.len())));
            }
        }
        if (self.ignore_index as usize) < num_classes {
            return Err(ModelError::Config(format!("ignore_index {} is a class index", self.ignore_index)));
        }
        Ok(())
    }

    fn options(&self) -> CrossEntropyOptions {
        CrossEntropyOptions {
            ignore_index: self.ignore_index,
            class_weights: self.class_weights.clone(),
            label_smoothing: self.label_smoothing,
        }
    }
}

pub type LossRegistry = Registry<(), LossSpec>;

pub fn loss_registry() -> LossRegistry {
    let mut r = Registry::new(Category::Loss);
    r.register("cross_entropy", |_, p| {
        let spec: LossSpec = parse_params(p)?;
        spec.validate()?;
        Ok(spec)
    })
    .unwrap();
    r
}

/// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
pub fn cross_entropy<'g>(logits: Var<'g>, target: &[u8], spec: &LossSpec) -> ModelResult<CrossEntropyValue<'g>> {
    Ok(logits.cross_entropy(target, &spec.options())?)
}

/// Combined loss node and the scalar value of each term.
#[derive(Clone, Debug)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub main: f64,
    pub aux: Vec<f64>,
}

/// `main + aux_weight · Σ aux`.
pub fn combine_losses<'g>(main: Var<'g>, aux: &[Var<'g>], aux_weight: f64) -> ModelResult<LossTerms<'g>> {
    let mut total = main;
    for a in aux {
        total = total.add(a.scale(aux_weight as f32))?;
    }
    Ok(LossTerms {
        total,
        main: main.value().data()[0] as f64,
        aux: aux.iter().map(|a| a.value().data()[0] as f64).collect(),
    })
}

/// Cross-entropy of the main logits and every auxiliary output.
pub fn segmentation_loss<'g>(
    main_logits: Var<'g>,
    aux_logits: &[Var<'g>],
    target: &[u8],
    spec: &LossSpec,
) -> ModelResult<(LossTerms<'g>, CrossEntropyValue<'g>)> {
    let main = cross_entropy(main_logits, target, spec)?;
    let aux = aux_logits.iter().map(|&a| Ok(cross_entropy(a, target, spec)?.loss)).collect::<ModelResult<Vec<_>>>()?;
    Ok((combine_losses(main.loss, &aux, spec.aux_weight)?, main))
}
