//! Post-LN transformer encoder with a classification head.
//!
//! Row-vector convention throughout: a hidden state is a `1 x d` row and a
//! projection `W` is stored `in x out`, so a layer computes `x W + b`.
//! Everything is `f64`.

mod container;
mod forward;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use container::{read_bundle, write_bundle, FORMAT_MAGIC};
pub use forward::{classify, forward, ForwardTrace, LayerTrace, LnStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Slope at the origin, used where `f(x) / x` is undefined.
    pub fn slope_at_zero(self) -> f64 {
        match self {
            Activation::Gelu => 0.5,
            // symmetric subgradient
            Activation::Relu => 0.5,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_classes: usize,
    pub ln_epsilon: f64,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_classes", self.num_classes),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::HeadDivisibility {
                hidden_dim: self.hidden_dim,
                num_heads: self.num_heads,
            });
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "ln_epsilon must be positive, got {}",
                self.ln_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model header: {0}")]
    MalformedHeader(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("hidden_dim {hidden_dim} is not divisible by num_heads {num_heads}")]
    HeadDivisibility { hidden_dim: usize, num_heads: usize },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} extends past the end of the data section")]
    Truncated { name: String },
    #[error("non-finite weight in {name} at flat index {index}")]
    NonFinite { name: String, index: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ForwardError {
    #[error("empty token sequence")]
    Empty,
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} at position {position} is out of range (vocab size {vocab_size})")]
    IdOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub attn_ln: LayerNorm,
    /// `d x ffn_dim`
    pub w_ffn1: Array2<f64>,
    pub b_ffn1: Array1<f64>,
    /// `ffn_dim x d`
    pub w_ffn2: Array2<f64>,
    pub b_ffn2: Array1<f64>,
    pub ffn_ln: LayerNorm,
}

impl EncoderLayer {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        Self {
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            attn_ln: LayerNorm::identity(d),
            w_ffn1: Array2::zeros((d, f)),
            b_ffn1: Array1::zeros(f),
            w_ffn2: Array2::zeros((f, d)),
            b_ffn2: Array1::zeros(d),
            ffn_ln: LayerNorm::identity(d),
        }
    }
}

/// Encoder weights plus classifier head. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBundle {
    pub config: EncoderConfig,
    /// `vocab_size x d`
    pub token_embeddings: Array2<f64>,
    /// `max_positions x d`
    pub position_embeddings: Array2<f64>,
    pub embedding_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    /// `num_classes x d`, applied to the final hidden state at position 0.
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

impl EncoderBundle {
    /// All-zero projections, identity layer norms.
    pub fn zeros(config: EncoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_dim;
        Ok(Self {
            token_embeddings: Array2::zeros((config.vocab_size, d)),
            position_embeddings: Array2::zeros((config.max_positions, d)),
            embedding_ln: LayerNorm::identity(d),
            layers: (0..config.num_layers).map(|_| EncoderLayer::zeros(&config)).collect(),
            w_cls: Array2::zeros((config.num_classes, d)),
            b_cls: Array1::zeros(config.num_classes),
            config,
        })
    }

    /// Gaussian-initialized bundle, reproducible from `seed`.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        let mut bundle = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn fill<'a>(rng: &mut ChaCha8Rng, values: impl Iterator<Item = &'a mut f64>, mean: f64, std: f64) {
            let dist = Normal::new(mean, std).expect("valid normal");
            values.for_each(|v| *v = dist.sample(rng));
        }
        let proj = 1.0 / (bundle.config.hidden_dim as f64).sqrt();
        let down = 1.0 / (bundle.config.ffn_dim as f64).sqrt();
        fill(&mut rng, bundle.token_embeddings.iter_mut(), 0.0, 1.0);
        fill(&mut rng, bundle.position_embeddings.iter_mut(), 0.0, 0.3);
        fill(&mut rng, bundle.embedding_ln.gamma.iter_mut(), 1.0, 0.1);
        fill(&mut rng, bundle.embedding_ln.beta.iter_mut(), 0.0, 0.1);
        for layer in &mut bundle.layers {
            for w in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v, &mut layer.w_o, &mut layer.w_ffn1] {
                fill(&mut rng, w.iter_mut(), 0.0, proj);
            }
            fill(&mut rng, layer.w_ffn2.iter_mut(), 0.0, down);
            for b in [
                &mut layer.b_q,
                &mut layer.b_k,
                &mut layer.b_v,
                &mut layer.b_o,
                &mut layer.b_ffn1,
                &mut layer.b_ffn2,
            ] {
                fill(&mut rng, b.iter_mut(), 0.0, 0.1);
            }
            for ln in [&mut layer.attn_ln, &mut layer.ffn_ln] {
                fill(&mut rng, ln.gamma.iter_mut(), 1.0, 0.1);
                fill(&mut rng, ln.beta.iter_mut(), 0.0, 0.1);
            }
        }
        fill(&mut rng, bundle.w_cls.iter_mut(), 0.0, proj);
        fill(&mut rng, bundle.b_cls.iter_mut(), 0.0, 0.1);
        Ok(bundle)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        read_bundle(&bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, write_bundle(self))
    }

    /// SHA-256 of the serialized container, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(write_bundle(self)))
    }

    /// Checks every tensor shape against the config and that all values are finite.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        for (name, shape, values) in container::tensors(self) {
            let expected = container::expected_shape(&self.config, &name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if shape != expected {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected,
                    found: shape,
                });
            }
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { name, index });
            }
        }
        if self.layers.len() != self.config.num_layers {
            return Err(ModelError::InvalidConfig(format!(
                "config declares {} layers but bundle has {}",
                self.config.num_layers,
                self.layers.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: 40,
        max_positions: 24,
        num_classes: 2,
        ln_epsilon: 1e-12,
        activation: Activation::Gelu,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_is_checked() {
        let mut c = tiny_config();
        c.hidden_dim = 15;
        assert!(matches!(
            c.validate(),
            Err(ModelError::HeadDivisibility {
                hidden_dim: 15,
                num_heads: 2
            })
        ));
    }

    #[test]
    fn zero_dims_and_bad_epsilon_rejected() {
        let mut c = tiny_config();
        c.num_classes = 0;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny_config();
        c.ln_epsilon = 0.0;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn random_is_seed_deterministic() {
        let a = EncoderBundle::random(tiny_config(), 3).unwrap();
        let b = EncoderBundle::random(tiny_config(), 3).unwrap();
        let c = EncoderBundle::random(tiny_config(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.fingerprint(), b.fingerprint());
        a.validate().unwrap();
    }

    #[test]
    fn gelu_values() {
        let g = Activation::Gelu;
        assert_eq!(g.apply(0.0), 0.0);
        // gelu(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.8413447460685429
        assert!((g.apply(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((g.apply(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn activation_names_round_trip() {
        for a in [Activation::Gelu, Activation::Relu, Activation::Identity] {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
        assert!("tanh".parse::<Activation>().is_err());
    }
}
