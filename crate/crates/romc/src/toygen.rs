//! Seeded toy models and synthetic calibration batches for desk-scale
//! runs. Weights are scaled Gaussians from a ChaCha stream, so a seed
//! pins every byte of the generated files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::modelgraph::{
    attn_norm_tensor, mlp_norm_tensor, DecoderWeights, LinearRepr, ModelConfig, ModelState, Slot,
    EMBED_TENSOR, FINAL_NORM_TENSOR, LM_HEAD_TENSOR,
};
use crate::tensorstore::{self, Dtype, Matrix, RawTensor, TokenBatch};

#[derive(Clone, Debug)]
pub struct ToyParams {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub scale: f32,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            hidden: 8,
            heads: 2,
            layers: 2,
            intermediate: 16,
            vocab: 11,
            max_seq: 256,
            seed: 0,
            scale: 0.02,
        }
    }
}

pub fn toy_config(params: &ToyParams) -> ModelConfig {
    ModelConfig {
        hidden_size: params.hidden,
        intermediate_size: params.intermediate,
        num_layers: params.layers,
        num_heads: params.heads,
        vocab_size: params.vocab,
        rms_eps: 1e-6,
        rope_theta: 10000.0,
        max_seq: params.max_seq,
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, dist: &Normal<f32>, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f32> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

/// Deterministic toy model. The weight stream is independent of any token
/// stream drawn from the same seed.
pub fn toy_model(params: &ToyParams) -> Result<(ModelConfig, ModelState)> {
    let config = toy_config(params);
    config.validate()?;
    let dist = Normal::new(0.0f32, params.scale)
        .map_err(|e| Error::Argument(format!("bad weight scale: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(0);

    let d = config.hidden_size;
    let embed = gaussian_matrix(&mut rng, &dist, config.vocab_size, d);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let mut linear = |slot: Slot| {
            let (d_out, d_in) = slot.dims(&config);
            LinearRepr::Dense(gaussian_matrix(&mut rng, &dist, d_out, d_in))
        };
        layers.push(DecoderWeights {
            q: linear(Slot::Q),
            k: linear(Slot::K),
            v: linear(Slot::V),
            o: linear(Slot::O),
            gate: linear(Slot::Gate),
            up: linear(Slot::Up),
            down: linear(Slot::Down),
            attn_norm: vec![1.0; d],
            mlp_norm: vec![1.0; d],
        });
    }
    let final_norm = vec![1.0; d];
    let lm_head = LinearRepr::Dense(gaussian_matrix(&mut rng, &dist, config.vocab_size, d));
    let state = ModelState::new(config.clone(), embed, layers, final_norm, lm_head)?;
    Ok((config, state))
}

/// Synthetic token batch, ids uniform over the vocabulary.
pub fn toy_tokens(batch: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<TokenBatch> {
    if vocab == 0 {
        return Err(Error::Argument("vocabulary must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let ids: Vec<u32> = (0..batch * seq_len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect();
    TokenBatch::new(batch, seq_len, Some(vocab), ids)
}

/// Write a model's weights as a checkpoint archive with the standard
/// tensor names; norm gains are stored 1-D.
pub fn write_model_archive(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors: BTreeMap<String, RawTensor> = BTreeMap::new();
    let insert_linear = |tensors: &mut BTreeMap<String, RawTensor>,
                         name: String,
                         repr: &LinearRepr|
     -> Result<()> {
        match repr {
            LinearRepr::Dense(w) => {
                tensors.insert(name, RawTensor::from_matrix(Dtype::F32, w));
            }
            LinearRepr::LowRank { w1, w2 } => {
                tensors.insert(format!("{name}.rom_w1"), RawTensor::from_matrix(Dtype::F32, w1));
                tensors.insert(format!("{name}.rom_w2"), RawTensor::from_matrix(Dtype::F32, w2));
            }
        }
        Ok(())
    };

    tensors.insert(
        EMBED_TENSOR.to_string(),
        RawTensor::from_matrix(Dtype::F32, state.embed()),
    );
    for (i, layer) in state.layers().iter().enumerate() {
        for slot in Slot::ALL {
            insert_linear(&mut tensors, slot.tensor_name(i), layer.slot(slot))?;
        }
        tensors.insert(
            attn_norm_tensor(i),
            RawTensor::vector(Dtype::F32, &layer.attn_norm),
        );
        tensors.insert(
            mlp_norm_tensor(i),
            RawTensor::vector(Dtype::F32, &layer.mlp_norm),
        );
    }
    tensors.insert(
        FINAL_NORM_TENSOR.to_string(),
        RawTensor::vector(Dtype::F32, state.final_norm()),
    );
    insert_linear(&mut tensors, LM_HEAD_TENSOR.to_string(), state.lm_head())?;
    tensorstore::write_entries(path, &tensors)
}

/// Generate the three files a desk-scale run needs: `model.safetensors`,
/// `config.json` and `calib.jsonl` under `dir`.
pub fn write_toy_dir(
    dir: impl AsRef<Path>,
    params: &ToyParams,
    batch: usize,
    seq_len: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (config, state) = toy_model(params)?;
    if seq_len > config.max_seq {
        return Err(Error::Argument(format!(
            "seq_len {} exceeds max_seq {}",
            seq_len, config.max_seq
        )));
    }
    write_model_archive(&state, dir.join("model.safetensors"))?;
    config.save(dir.join("config.json"))?;
    let tokens = toy_tokens(batch, seq_len, config.vocab_size, params.seed)?;
    tokens.save(dir.join("calib.jsonl"))?;
    Ok(())
}
