use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Params, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::invalid(format!("unknown cell kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::invalid(format!("unknown activation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    ConvLstm2d,
    Conv3d,
    BatchNorm,
    Dense,
    Dropout,
    Activation,
    Concat,
    Recurrent(CellKind),
}

/// One layer of an assembled network. `inputs` is the layer's input width
/// (channels or features), `filters` its output width.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub inputs: usize,
    pub filters: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: usize, filters: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel: 1,
            stride: 1,
            inputs,
            filters,
            activation: Activation::Linear,
            dropout: 0.0,
        }
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.filters == 0 {
            return Err(Error::invalid(format!(
                "layer `{}`: kernel, stride and filters must be at least 1",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "layer `{}`: dropout rate {} outside [0, 1)",
                self.name, self.dropout
            )));
        }
        Ok(())
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let (k, i, f) = (self.kernel, self.inputs, self.filters);
        match self.kind {
            LayerKind::Conv2d => k * k * i * f + f,
            LayerKind::ConvLstm2d => 4 * f * (k * k * (i + f) + 1),
            LayerKind::Conv3d => k * k * k * i * f + f,
            LayerKind::BatchNorm => 2 * i,
            LayerKind::Dense => i * f + f,
            LayerKind::Recurrent(CellKind::Rnn) => f * (f + i + 1),
            LayerKind::Recurrent(CellKind::Gru) => 3 * (f * f + f * i + 2 * f),
            LayerKind::Recurrent(CellKind::Lstm) => 4 * f * (f + i + 1),
            LayerKind::Dropout | LayerKind::Activation | LayerKind::Concat => 0,
        }
    }

    /// Layers with weights, excluding normalization.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d | LayerKind::ConvLstm2d | LayerKind::Conv3d | LayerKind::Dense | LayerKind::Recurrent(_)
        )
    }

    /// Creates this layer's parameters (`<name>/kernel`, `<name>/bias`, ...).
    pub fn init(&self, rng: &mut ChaCha8Rng, params: &mut Params) {
        let (k, i, f) = (self.kernel, self.inputs, self.filters);
        let name = &self.name;
        match self.kind {
            LayerKind::Conv2d => {
                params.insert(
                    format!("{name}/kernel"),
                    glorot(rng, &[k, k, i, f], k * k * i, k * k * f),
                );
                params.insert(format!("{name}/bias"), Tensor::zeros(&[f]));
            }
            LayerKind::Conv3d => {
                let r = k * k * k;
                params.insert(format!("{name}/kernel"), glorot(rng, &[k, k, k, i, f], r * i, r * f));
                params.insert(format!("{name}/bias"), Tensor::zeros(&[f]));
            }
            LayerKind::ConvLstm2d => {
                let g = 4 * f;
                params.insert(
                    format!("{name}/kernel"),
                    glorot(rng, &[k, k, i, g], k * k * i, k * k * g),
                );
                params.insert(
                    format!("{name}/recurrent"),
                    glorot(rng, &[k, k, f, g], k * k * f, k * k * g),
                );
                params.insert(format!("{name}/bias"), Tensor::zeros(&[g]));
            }
            LayerKind::Dense => {
                params.insert(format!("{name}/kernel"), glorot(rng, &[i, f], i, f));
                params.insert(format!("{name}/bias"), Tensor::zeros(&[f]));
            }
            LayerKind::Recurrent(cell) => {
                let g = match cell {
                    CellKind::Rnn => f,
                    CellKind::Gru => 3 * f,
                    CellKind::Lstm => 4 * f,
                };
                params.insert(format!("{name}/kernel"), glorot(rng, &[i, g], i, g));
                params.insert(format!("{name}/recurrent"), glorot(rng, &[f, g], f, g));
                params.insert(format!("{name}/bias"), Tensor::zeros(&[g]));
                if cell == CellKind::Gru {
                    params.insert(format!("{name}/bias_rec"), Tensor::zeros(&[g]));
                }
            }
            LayerKind::BatchNorm => {
                params.insert(format!("{name}/gamma"), Tensor::ones(&[i]));
                params.insert(format!("{name}/beta"), Tensor::zeros(&[i]));
            }
            LayerKind::Dropout | LayerKind::Activation | LayerKind::Concat => {}
        }
    }
}

/// Uniform in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-r..=r)).collect();
    Tensor::new(shape, data).expect("length from shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(LayerSpec::new("d", LayerKind::Dense, 24, 1).parameter_count(), 25);
        let cl = LayerSpec::new("c", LayerKind::ConvLstm2d, 1, 16).kernel(3);
        assert_eq!(cl.parameter_count(), 9856);
        let rnn = LayerSpec::new("r", LayerKind::Recurrent(CellKind::Rnn), 24, 24);
        assert_eq!(rnn.parameter_count(), 1176);
    }

    #[test]
    fn init_matches_closed_form() {
        let mut rng = rand::SeedableRng::seed_from_u64(1);
        for kind in [
            LayerKind::Conv2d,
            LayerKind::ConvLstm2d,
            LayerKind::Conv3d,
            LayerKind::BatchNorm,
            LayerKind::Dense,
            LayerKind::Recurrent(CellKind::Rnn),
            LayerKind::Recurrent(CellKind::Gru),
            LayerKind::Recurrent(CellKind::Lstm),
        ] {
            let spec = LayerSpec::new("l", kind, 3, 5).kernel(3);
            let mut p = Params::new();
            spec.init(&mut rng, &mut p);
            assert_eq!(p.scalar_count(), spec.parameter_count(), "{kind:?}");
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(LayerSpec::new("l", LayerKind::Dense, 3, 0).validate().is_err());
        assert!(LayerSpec::new("l", LayerKind::Dense, 3, 1)
            .dropout(1.0)
            .validate()
            .is_err());
        assert!(LayerSpec::new("l", LayerKind::Dense, 3, 1)
            .kernel(0)
            .validate()
            .is_err());
    }
}
