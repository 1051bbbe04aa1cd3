//! A minimal LLaMA-style decoder: pre-norm blocks with rotary multi-head
//! attention and a SwiGLU feed-forward, no biases, no KV cache. Every one
//! of the seven projection layers per block can be dense or a low-rank
//! factor pair, so activations can be tapped from a partially compressed
//! model.

mod ops;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{Matrix, TensorArchive, TokenBatch};

fn default_rope_theta() -> f32 {
    10000.0
}

fn default_rms_eps() -> f32 {
    1e-6
}

fn default_max_seq() -> usize {
    2048
}

/// Architecture hyperparameters, stored as UTF-8 JSON next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0
            || self.intermediate_size == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return Err(Error::Argument("all model dimensions must be >= 1".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Argument(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if (self.hidden_size / self.num_heads) % 2 != 0 {
            return Err(Error::Argument(format!(
                "head dimension {} must be even for rotary embedding",
                self.hidden_size / self.num_heads
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Argument("rms_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("config is serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The 7B configuration: 32 decoder modules of hidden size 4096 with an
    /// 11008-wide feed-forward.
    pub fn llama_7b() -> Self {
        ModelConfig {
            hidden_size: 4096,
            intermediate_size: 11008,
            num_layers: 32,
            num_heads: 32,
            vocab_size: 32000,
            rms_eps: 1e-6,
            rope_theta: 10000.0,
            max_seq: 2048,
        }
    }
}

/// The seven decomposable projections of one decoder module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Slot {
    pub const ALL: [Slot; 7] = [
        Slot::Q,
        Slot::K,
        Slot::V,
        Slot::O,
        Slot::Gate,
        Slot::Up,
        Slot::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Q => "q",
            Slot::K => "k",
            Slot::V => "v",
            Slot::O => "o",
            Slot::Gate => "gate",
            Slot::Up => "up",
            Slot::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Slot::Q),
            "k" => Ok(Slot::K),
            "v" => Ok(Slot::V),
            "o" => Ok(Slot::O),
            "gate" => Ok(Slot::Gate),
            "up" => Ok(Slot::Up),
            "down" => Ok(Slot::Down),
            other => Err(Error::Format(format!("unknown slot {other:?}"))),
        }
    }

    /// `(d_out, d_in)` of the dense weight.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let d = config.hidden_size;
        let inter = config.intermediate_size;
        match self {
            Slot::Q | Slot::K | Slot::V | Slot::O => (d, d),
            Slot::Gate | Slot::Up => (inter, d),
            Slot::Down => (d, inter),
        }
    }

    /// Where this slot reads its input from.
    pub fn tap(self) -> Tap {
        match self {
            Slot::Q | Slot::K | Slot::V => Tap::AttnInput,
            Slot::O => Tap::OInput,
            Slot::Gate | Slot::Up => Tap::MlpInput,
            Slot::Down => Tap::DownInput,
        }
    }

    /// Checkpoint tensor name for this slot in module `layer`.
    pub fn tensor_name(self, layer: usize) -> String {
        let suffix = match self {
            Slot::Q => "self_attn.q_proj.weight",
            Slot::K => "self_attn.k_proj.weight",
            Slot::V => "self_attn.v_proj.weight",
            Slot::O => "self_attn.o_proj.weight",
            Slot::Gate => "mlp.gate_proj.weight",
            Slot::Up => "mlp.up_proj.weight",
            Slot::Down => "mlp.down_proj.weight",
        };
        format!("model.layers.{layer}.{suffix}")
    }
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Activation tap points within one decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    /// Post-norm input shared by q, k and v.
    AttnInput,
    /// Concatenated attention context entering the o projection.
    OInput,
    /// Post-norm input shared by gate and up.
    MlpInput,
    /// `silu(gate) ⊙ up` entering the down projection.
    DownInput,
    /// Hidden state after the second residual.
    BlockOutput,
}

/// A projection stored densely or as the pair `(w1, w2)` applied as
/// `x ↦ (x·w2ᵀ)·w1ᵀ` — w2 first, the parameter-saving order.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearRepr {
    Dense(Matrix),
    LowRank { w1: Matrix, w2: Matrix },
}

impl LinearRepr {
    pub fn d_out(&self) -> usize {
        match self {
            LinearRepr::Dense(w) => w.rows(),
            LinearRepr::LowRank { w1, .. } => w1.rows(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            LinearRepr::Dense(w) => w.cols(),
            LinearRepr::LowRank { w2, .. } => w2.cols(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            LinearRepr::Dense(_) => None,
            LinearRepr::LowRank { w1, .. } => Some(w1.cols()),
        }
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self, LinearRepr::LowRank { .. })
    }

    pub fn dense(&self) -> Option<&Matrix> {
        match self {
            LinearRepr::Dense(w) => Some(w),
            LinearRepr::LowRank { .. } => None,
        }
    }

    pub fn low_rank(&self) -> Option<(&Matrix, &Matrix)> {
        match self {
            LinearRepr::Dense(_) => None,
            LinearRepr::LowRank { w1, w2 } => Some((w1, w2)),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            LinearRepr::Dense(w) => (w.rows() * w.cols()) as u64,
            LinearRepr::LowRank { w1, w2 } => {
                (w1.rows() * w1.cols() + w2.rows() * w2.cols()) as u64
            }
        }
    }

    /// Apply to `N x d_in` activations.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            LinearRepr::Dense(w) => x.matmul_nt(w),
            LinearRepr::LowRank { w1, w2 } => x.matmul_nt(w2)?.matmul_nt(w1),
        }
    }
}

/// Weights of one decoder module.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub q: LinearRepr,
    pub k: LinearRepr,
    pub v: LinearRepr,
    pub o: LinearRepr,
    pub gate: LinearRepr,
    pub up: LinearRepr,
    pub down: LinearRepr,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

impl DecoderWeights {
    pub fn slot(&self, slot: Slot) -> &LinearRepr {
        match slot {
            Slot::Q => &self.q,
            Slot::K => &self.k,
            Slot::V => &self.v,
            Slot::O => &self.o,
            Slot::Gate => &self.gate,
            Slot::Up => &self.up,
            Slot::Down => &self.down,
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut LinearRepr {
        match slot {
            Slot::Q => &mut self.q,
            Slot::K => &mut self.k,
            Slot::V => &mut self.v,
            Slot::O => &mut self.o,
            Slot::Gate => &mut self.gate,
            Slot::Up => &mut self.up,
            Slot::Down => &mut self.down,
        }
    }

    pub fn param_count(&self) -> u64 {
        Slot::ALL
            .iter()
            .map(|s| self.slot(*s).param_count())
            .sum::<u64>()
            + self.attn_norm.len() as u64
            + self.mlp_norm.len() as u64
    }
}

pub const EMBED_TENSOR: &str = "model.embed_tokens.weight";
pub const FINAL_NORM_TENSOR: &str = "model.norm.weight";
pub const LM_HEAD_TENSOR: &str = "lm_head.weight";

pub fn attn_norm_tensor(layer: usize) -> String {
    format!("model.layers.{layer}.input_layernorm.weight")
}

pub fn mlp_norm_tensor(layer: usize) -> String {
    format!("model.layers.{layer}.post_attention_layernorm.weight")
}

/// Suffixes appended to the original tensor name when a slot is stored as
/// a factor pair.
pub const ROM_W1_SUFFIX: &str = ".rom_w1";
pub const ROM_W2_SUFFIX: &str = ".rom_w2";

/// Full model weights plus the architecture they instantiate.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<DecoderWeights>,
    final_norm: Vec<f32>,
    lm_head: LinearRepr,
}

impl ModelState {
    pub fn new(
        config: ModelConfig,
        embed: Matrix,
        layers: Vec<DecoderWeights>,
        final_norm: Vec<f32>,
        lm_head: LinearRepr,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        if embed.rows() != config.vocab_size || embed.cols() != d {
            return Err(Error::Dimension(format!(
                "embedding is {}x{}, config wants {}x{}",
                embed.rows(),
                embed.cols(),
                config.vocab_size,
                d
            )));
        }
        if layers.len() != config.num_layers {
            return Err(Error::Dimension(format!(
                "{} decoder modules, config wants {}",
                layers.len(),
                config.num_layers
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            for slot in Slot::ALL {
                let (d_out, d_in) = slot.dims(&config);
                let repr = layer.slot(slot);
                if repr.d_out() != d_out || repr.d_in() != d_in {
                    return Err(Error::Dimension(format!(
                        "module {i} slot {slot}: {}x{}, config wants {}x{}",
                        repr.d_out(),
                        repr.d_in(),
                        d_out,
                        d_in
                    )));
                }
            }
            if layer.attn_norm.len() != d || layer.mlp_norm.len() != d {
                return Err(Error::Dimension(format!(
                    "module {i}: norm gains must have length {d}"
                )));
            }
        }
        if final_norm.len() != d {
            return Err(Error::Dimension(format!(
                "final norm gain must have length {d}"
            )));
        }
        if lm_head.d_out() != config.vocab_size || lm_head.d_in() != d {
            return Err(Error::Dimension(format!(
                "lm head is {}x{}, config wants {}x{}",
                lm_head.d_out(),
                lm_head.d_in(),
                config.vocab_size,
                d
            )));
        }
        Ok(ModelState { config, embed, layers, final_norm, lm_head })
    }

    /// Load from an archive. Each projection may be present either as its
    /// dense tensor or as the `.rom_w1`/`.rom_w2` factor pair.
    pub fn from_archive(archive: &TensorArchive, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let load_linear = |name: &str| -> Result<LinearRepr> {
            if archive.contains(name) {
                Ok(LinearRepr::Dense(archive.load_matrix(name)?))
            } else {
                let w1_name = format!("{name}{ROM_W1_SUFFIX}");
                let w2_name = format!("{name}{ROM_W2_SUFFIX}");
                if archive.contains(&w1_name) && archive.contains(&w2_name) {
                    Ok(LinearRepr::LowRank {
                        w1: archive.load_matrix(&w1_name)?,
                        w2: archive.load_matrix(&w2_name)?,
                    })
                } else {
                    Err(Error::Lookup(format!(
                        "{name} (neither dense nor {w1_name}/{w2_name})"
                    )))
                }
            }
        };
        let load_gain = |name: &str| -> Result<Vec<f32>> {
            Ok(archive.load_matrix(name)?.data().to_vec())
        };

        let embed = archive.load_matrix(EMBED_TENSOR)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            layers.push(DecoderWeights {
                q: load_linear(&Slot::Q.tensor_name(i))?,
                k: load_linear(&Slot::K.tensor_name(i))?,
                v: load_linear(&Slot::V.tensor_name(i))?,
                o: load_linear(&Slot::O.tensor_name(i))?,
                gate: load_linear(&Slot::Gate.tensor_name(i))?,
                up: load_linear(&Slot::Up.tensor_name(i))?,
                down: load_linear(&Slot::Down.tensor_name(i))?,
                attn_norm: load_gain(&attn_norm_tensor(i))?,
                mlp_norm: load_gain(&mlp_norm_tensor(i))?,
            });
        }
        let final_norm = load_gain(FINAL_NORM_TENSOR)?;
        let lm_head = load_linear(LM_HEAD_TENSOR)?;
        ModelState::new(config, embed, layers, final_norm, lm_head)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn layer(&self, i: usize) -> &DecoderWeights {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[DecoderWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &LinearRepr {
        &self.lm_head
    }

    pub fn param_count(&self) -> u64 {
        self.embed.rows() as u64 * self.embed.cols() as u64
            + self.layers.iter().map(DecoderWeights::param_count).sum::<u64>()
            + self.final_norm.len() as u64
            + self.lm_head.param_count()
    }

    /// Token embeddings as flattened `B*S x d` rows; row `b*S + s` holds
    /// batch `b`, position `s`.
    pub fn embed_tokens(&self, tokens: &TokenBatch) -> Result<Matrix> {
        if tokens.seq_len > self.config.max_seq {
            return Err(Error::Argument(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.seq_len, self.config.max_seq
            )));
        }
        let d = self.config.hidden_size;
        let n = tokens.n_tokens();
        let mut data = Vec::with_capacity(n * d);
        for &id in tokens.ids() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Range(format!(
                    "token id {id} >= vocab size {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(self.embed.row(id as usize));
        }
        Ok(Matrix::from_vec_unchecked(n, d, data))
    }

    /// Run block `layer` on `hidden` up to `tap`.
    pub fn tap_in_block(
        &self,
        layer: usize,
        hidden: &Matrix,
        batch: usize,
        seq: usize,
        tap: Tap,
    ) -> Result<Matrix> {
        let weights = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
        let heads = self.config.num_heads;
        let eps = self.config.rms_eps;

        let attn_input = ops::rms_norm(hidden, &weights.attn_norm, eps);
        if tap == Tap::AttnInput {
            return Ok(attn_input);
        }
        let mut q = weights.q.apply(&attn_input)?;
        let mut k = weights.k.apply(&attn_input)?;
        let v = weights.v.apply(&attn_input)?;
        ops::apply_rope(&mut q, seq, heads, self.config.rope_theta);
        ops::apply_rope(&mut k, seq, heads, self.config.rope_theta);
        let context = ops::causal_attention(&q, &k, &v, batch, seq, heads);
        if tap == Tap::OInput {
            return Ok(context);
        }
        let hidden = hidden.add(&weights.o.apply(&context)?)?;

        let mlp_input = ops::rms_norm(&hidden, &weights.mlp_norm, eps);
        if tap == Tap::MlpInput {
            return Ok(mlp_input);
        }
        let gate = weights.gate.apply(&mlp_input)?;
        let up = weights.up.apply(&mlp_input)?;
        let down_input = ops::swiglu(&gate, &up);
        if tap == Tap::DownInput {
            return Ok(down_input);
        }
        hidden.add(&weights.down.apply(&down_input)?)
    }

    /// Activations at `tap` of block `upto_layer`, running the model from
    /// the embeddings with each block's current representation.
    pub fn forward_hidden(
        &self,
        tokens: &TokenBatch,
        upto_layer: usize,
        tap: Tap,
    ) -> Result<Matrix> {
        if upto_layer >= self.config.num_layers {
            return Err(Error::Argument(format!(
                "layer {upto_layer} out of range, model has {}",
                self.config.num_layers
            )));
        }
        let mut hidden = self.embed_tokens(tokens)?;
        for layer in 0..upto_layer {
            hidden = self.tap_in_block(layer, &hidden, tokens.batch, tokens.seq_len, Tap::BlockOutput)?;
        }
        self.tap_in_block(upto_layer, &hidden, tokens.batch, tokens.seq_len, tap)
    }

    /// Full forward through the final norm and the lm head.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Matrix> {
        let mut hidden = self.embed_tokens(tokens)?;
        for layer in 0..self.config.num_layers {
            hidden = self.tap_in_block(layer, &hidden, tokens.batch, tokens.seq_len, Tap::BlockOutput)?;
        }
        let normed = ops::rms_norm(&hidden, &self.final_norm, self.config.rms_eps);
        self.lm_head.apply(&normed)
    }

    /// Swap one slot for a factor pair; later forwards use it.
    pub fn replace_layer(
        &mut self,
        module_index: usize,
        slot: Slot,
        w1: Matrix,
        w2: Matrix,
    ) -> Result<()> {
        if module_index >= self.layers.len() {
            return Err(Error::Argument(format!(
                "module {module_index} out of range"
            )));
        }
        let (d_out, d_in) = slot.dims(&self.config);
        if w1.rows() != d_out || w2.cols() != d_in || w1.cols() != w2.rows() {
            return Err(Error::Dimension(format!(
                "factors {}x{} and {}x{} do not fit slot {slot} ({d_out}x{d_in})",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        *self.layers[module_index].slot_mut(slot) = LinearRepr::LowRank { w1, w2 };
        Ok(())
    }
}
