//! Test-time ensembling: dihedral self-ensemble, multi-model averaging over
//! full images, and weighted top-K fusion.
//!
//! Aggregation is a deterministic fold in fixed index order with 64-bit
//! accumulation; results are snapped to binary32 like every other cube.

use crate::error::{Error, Result};
use crate::synth::{Dihedral, SpectralCube};

/// Convex combination weights for top-K fusion: non-negative, summing to 1
/// within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleWeights {
    alphas: Vec<f64>,
}

impl EnsembleWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::BadEnsembleWeights {
                sum: alphas.iter().sum(),
            });
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadEnsembleWeights { sum });
        }
        Ok(Self { alphas })
    }

    /// Equal weights 1/k.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::BadEnsembleWeights { sum: 0.0 });
        }
        Ok(Self {
            alphas: vec![1.0 / k as f64; k],
        })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

fn mean_of(cubes: &[SpectralCube], op: &'static str) -> Result<SpectralCube> {
    let first = cubes.first().ok_or_else(|| Error::InvalidArgument {
        op,
        message: "no cubes to average".into(),
    })?;
    let mut acc = vec![0.0f64; first.values().len()];
    for cube in cubes {
        if cube.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: first.shape().to_vec(),
                rhs: cube.shape().to_vec(),
            });
        }
        for (slot, &v) in acc.iter_mut().zip(cube.values()) {
            *slot += v as f64;
        }
    }
    let inv = 1.0 / cubes.len() as f64;
    let values = acc.iter().map(|&v| (v * inv) as f32).collect();
    SpectralCube::new(
        first.height(),
        first.width(),
        first.bands(),
        first.wavelengths().to_vec(),
        values,
    )
}

/// Run the model on all eight dihedral transforms of the input, undo each
/// transform on the output, and average.
pub fn self_ensemble<F>(forward: F, rgb: &SpectralCube) -> Result<SpectralCube>
where
    F: Fn(&SpectralCube) -> Result<SpectralCube>,
{
    let mut outputs = Vec::with_capacity(8);
    for op in Dihedral::ALL {
        let transformed = op.apply_cube(rgb);
        let pred = forward(&transformed)?;
        outputs.push(op.inverse().apply_cube(&pred));
    }
    mean_of(&outputs, "self_ensemble")
}

/// Unweighted mean of several models' full-image outputs.
pub fn multiscale_ensemble<F>(models: &[F], rgb: &SpectralCube) -> Result<SpectralCube>
where
    F: Fn(&SpectralCube) -> Result<SpectralCube>,
{
    if models.is_empty() {
        return Err(Error::InvalidArgument {
            op: "multiscale_ensemble",
            message: "no models".into(),
        });
    }
    let outputs: Vec<SpectralCube> = models
        .iter()
        .map(|m| m(rgb))
        .collect::<Result<_>>()?;
    mean_of(&outputs, "multiscale_ensemble")
}

/// Elementwise convex combination of K reconstructions.
pub fn topk_ensemble(cubes: &[SpectralCube], weights: &EnsembleWeights) -> Result<SpectralCube> {
    if cubes.len() != weights.len() {
        return Err(Error::InvalidArgument {
            op: "topk_ensemble",
            message: format!(
                "{} cubes but {} weights",
                cubes.len(),
                weights.len()
            ),
        });
    }
    let first = &cubes[0];
    let mut acc = vec![0.0f64; first.values().len()];
    for (cube, &alpha) in cubes.iter().zip(weights.alphas()) {
        if cube.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "topk_ensemble",
                lhs: first.shape().to_vec(),
                rhs: cube.shape().to_vec(),
            });
        }
        for (slot, &v) in acc.iter_mut().zip(cube.values()) {
            *slot += alpha * v as f64;
        }
    }
    SpectralCube::new(
        first.height(),
        first.width(),
        first.bands(),
        first.wavelengths().to_vec(),
        acc.iter().map(|&v| v as f32).collect(),
    )
}
