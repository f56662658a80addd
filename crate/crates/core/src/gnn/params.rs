//! Named parameter tensors.
//!
//! Names follow the module layout:
//!
//! - `enc/node/{set}/{w,b}`, `enc/edge/{set}/{w,b}`
//! - `proc/{step}/edge/{set}/{l1w,l1b,l2w,l2b,ln_g,ln_b}`
//! - `proc/{step}/node/{set}/{l1w,l1b,l2w,l2b,ln_g,ln_b}`
//! - `dec/{bus,generator}/{l1w,l1b,l2w,l2b,outw,outb}`
//!
//! Every node and edge set owns its parameters; nothing is shared between
//! sets or steps.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{EdgeType, NodeType};

/// Decoder heads and the nodes they read.
pub const DECODED: [NodeType; 2] = [NodeType::Bus, NodeType::Generator];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Weight,
    Zeros,
    Ones,
}

fn mlp_shapes(prefix: &str, d_in: usize, h: usize, out: &mut Vec<(String, (usize, usize), Init)>) {
    out.push((format!("{prefix}/l1w"), (d_in, h), Init::Weight));
    out.push((format!("{prefix}/l1b"), (1, h), Init::Zeros));
    out.push((format!("{prefix}/l2w"), (h, h), Init::Weight));
    out.push((format!("{prefix}/l2b"), (1, h), Init::Zeros));
    out.push((format!("{prefix}/ln_g"), (1, h), Init::Ones));
    out.push((format!("{prefix}/ln_b"), (1, h), Init::Zeros));
}

fn shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let h = cfg.hidden_size;
    let d = cfg.decoder_mlp_size;
    let mut out = Vec::new();
    for t in NodeType::ALL {
        out.push((format!("enc/node/{}/w", t.name()), (t.feature_dim(), h), Init::Weight));
        out.push((format!("enc/node/{}/b", t.name()), (1, h), Init::Zeros));
    }
    for t in EdgeType::ALL {
        out.push((format!("enc/edge/{}/w", t.name()), (t.feature_dim(), h), Init::Weight));
        out.push((format!("enc/edge/{}/b", t.name()), (1, h), Init::Zeros));
    }
    for s in 0..cfg.num_message_passing_steps {
        for t in EdgeType::ALL {
            mlp_shapes(&format!("proc/{s}/edge/{}", t.name()), 3 * h, h, &mut out);
        }
        for t in NodeType::ALL {
            mlp_shapes(&format!("proc/{s}/node/{}", t.name()), 3 * h, h, &mut out);
        }
    }
    for t in DECODED {
        let p = format!("dec/{}", t.name());
        out.push((format!("{p}/l1w"), (h, d), Init::Weight));
        out.push((format!("{p}/l1b"), (1, d), Init::Zeros));
        out.push((format!("{p}/l2w"), (d, d), Init::Weight));
        out.push((format!("{p}/l2b"), (1, d), Init::Zeros));
        out.push((format!("{p}/outw"), (d, 2), Init::Weight));
        out.push((format!("{p}/outb"), (1, 2), Init::Zeros));
    }
    out
}

/// Name and shape of every parameter tensor implied by `cfg`.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    shapes(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Number of scalar parameters implied by `cfg`, without allocating them.
pub fn param_count(cfg: &ModelConfig) -> usize {
    shapes(cfg).iter().map(|(_, (r, c), _)| r * c).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit layer-norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes(&config)
            .into_iter()
            .map(|(name, (r, c), init)| {
                let a = match init {
                    Init::Zeros => Array2::zeros((r, c)),
                    Init::Ones => Array2::ones((r, c)),
                    Init::Weight => {
                        let limit = if r + c > 0 { (6.0 / (r + c) as f64).sqrt() } else { 0.0 };
                        Array2::from_shape_simple_fn((r, c), || rng.random_range(-limit..=limit))
                    }
                };
                (name, a)
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> BTreeMap<String, Array2<f64>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    /// Check names and shapes against the config.
    pub fn check(&self) -> Result<()> {
        let want = param_shapes(&self.config);
        if want.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in want {
            let got = self.get(&name)?.dim();
            if got != shape {
                return Err(Error::ShapeMismatch(format!("{name}: {got:?} != {shape:?}")));
            }
        }
        Ok(())
    }
}
