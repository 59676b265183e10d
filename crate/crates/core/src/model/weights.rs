use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    fn gaussian(rows: usize, cols: usize, dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row vector times matrix: `x · M`, with `x.len() == rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        out
    }
}

/// One feed-forward expert: `down(relu(x · up))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// d × f
    pub up: Matrix,
    /// f × d
    pub down: Matrix,
}

impl Expert {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = self.up.left_mul(x);
        for h in &mut hidden {
            *h = h.max(0.0);
        }
        self.down.left_mul(&hidden)
    }

    /// Up and down projections concatenated into one flat parameter vector.
    pub fn flattened(&self) -> impl Iterator<Item = f64> + '_ {
        self.up.data.iter().chain(&self.down.data).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBlock {
    /// d × E
    pub gate: Matrix,
    pub gate_bias: Vec<f64>,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FfnBlock {
    Dense(Expert),
    Moe(MoeBlock),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// d × d mixing applied to the causal mean of the prefix states.
    pub mixing: Matrix,
    pub ffn: FfnBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    /// V × d
    pub embeddings: Matrix,
    pub layers: Vec<LayerWeights>,
    /// d × V
    pub head: Matrix,
}

impl ModelWeights {
    /// MoE blocks in model order; the position in this list is the MoE-layer ordinal
    /// used by `ExpertKey`, draft sets and activation records.
    pub fn moe_blocks(&self) -> Vec<&MoeBlock> {
        self.layers
            .iter()
            .filter_map(|l| match &l.ffn {
                FfnBlock::Moe(b) => Some(b),
                FfnBlock::Dense(_) => None,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        let mut all = self.embeddings.data.iter().chain(&self.head.data);
        let layers_ok = self.layers.iter().all(|l| {
            let ffn_ok = match &l.ffn {
                FfnBlock::Dense(e) => e.flattened().all(f64::is_finite),
                FfnBlock::Moe(b) => {
                    b.gate.data.iter().chain(&b.gate_bias).all(|v| v.is_finite())
                        && b.experts.iter().all(|e| e.flattened().all(f64::is_finite))
                }
            };
            ffn_ok && l.mixing.data.iter().all(|v| v.is_finite())
        });
        all.all(|v| v.is_finite()) && layers_ok
    }
}

/// Gate bias `skew · (1 − e/E)` for expert `e`: a linear, monotonically decaying offset.
pub(crate) fn gate_bias(skew: f64, experts: usize) -> Vec<f64> {
    (0..experts)
        .map(|e| skew * (1.0 - e as f64 / experts as f64))
        .collect()
}

/// Synthesize weights for `spec`.
///
/// Every entry is drawn from N(0, 1/√d) using a ChaCha8 stream seeded with
/// `spec.seed`, in a fixed order: embeddings, then per layer (mixing, gate,
/// experts in index order, each up then down), then the output head. ChaCha8 is
/// platform independent, so equal specs give element-wise identical weights.
pub fn build_model(spec: &ModelSpec) -> Result<ModelWeights> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let f = spec.ffn_dim;
    let e = spec.experts_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt())
        .map_err(|err| Error::InvalidSpec(err.to_string()))?;

    let embeddings = Matrix::gaussian(spec.vocab_size, d, &dist, &mut rng);
    let mut layers = Vec::with_capacity(spec.num_layers);
    for &is_moe in &spec.moe_layer_mask {
        let mixing = Matrix::gaussian(d, d, &dist, &mut rng);
        let ffn = if is_moe {
            let gate = Matrix::gaussian(d, e, &dist, &mut rng);
            let experts = (0..e)
                .map(|_| Expert {
                    up: Matrix::gaussian(d, f, &dist, &mut rng),
                    down: Matrix::gaussian(f, d, &dist, &mut rng),
                })
                .collect();
            FfnBlock::Moe(MoeBlock {
                gate,
                gate_bias: gate_bias(spec.gate_skew, e),
                experts,
            })
        } else {
            FfnBlock::Dense(Expert {
                up: Matrix::gaussian(d, f, &dist, &mut rng),
                down: Matrix::gaussian(f, d, &dist, &mut rng),
            })
        };
        layers.push(LayerWeights { mixing, ffn });
    }
    let head = Matrix::gaussian(d, spec.vocab_size, &dist, &mut rng);

    let weights = ModelWeights {
        spec: spec.clone(),
        embeddings,
        layers,
        head,
    };
    if !weights.is_finite() {
        return Err(Error::NonFinite("model weights"));
    }
    Ok(weights)
}
