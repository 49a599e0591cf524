//! Synthetic image classification data: one Gaussian template per class,
//! samples are the template plus isotropic noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Noise standard deviation relative to the unit-variance templates.
    pub sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 8,
            train_per_class: 64,
            test_per_class: 100,
            sigma: 2.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "train_per_class and test_per_class must be positive".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub templates: Vec<Tensor>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SyntheticDataset {
    /// Templates are drawn first, then train samples class by class, then
    /// test samples; every draw comes from `rng`.
    pub fn generate(config: &DataConfig, image_shape: [usize; 3], rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let templates: Vec<Tensor> = (0..config.num_classes)
            .map(|_| Tensor::randn(&image_shape, 1.0, rng))
            .collect();
        let draw = |per_class: usize, rng: &mut Rng| -> Vec<Sample> {
            let mut out = Vec::with_capacity(per_class * config.num_classes);
            for (label, t) in templates.iter().enumerate() {
                for _ in 0..per_class {
                    let noise = Tensor::randn(&image_shape, config.sigma, rng);
                    let data = t
                        .data()
                        .iter()
                        .zip(noise.data())
                        .map(|(a, b)| a + b)
                        .collect();
                    out.push(Sample {
                        image: Tensor::new(&image_shape, data).expect("image shape"),
                        label,
                    });
                }
            }
            out
        };
        let train = draw(config.train_per_class, rng);
        let test = draw(config.test_per_class, rng);
        Ok(SyntheticDataset {
            num_classes: config.num_classes,
            templates,
            train,
            test,
        })
    }
}
