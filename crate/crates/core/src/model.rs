//! Model parameter containers, the synthetic model generator, and the
//! precomputed embedding-product table.
//!
//! Weight tensors are stored `[input_dim x output_dim]` so a batch of row
//! vectors multiplies them directly; the output projection is the exception
//! and is stored `[vocab x hidden]` with one row per word, which makes
//! gathering a candidate shortlist a contiguous row copy. Each weight can
//! carry an optional 16-bit quantized twin packed for the `gemm_i16` kernel.

use crate::error::{Error, Result};
use crate::quant::{quantize_weights, QuantMatrix};
use crate::tensor::{gemm_f32, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sentence-start token id, fixed by convention in both vocabularies.
pub const BOS_ID: u32 = 0;
/// Sentence-end token id.
pub const EOS_ID: u32 = 1;
/// Unknown-word token id.
pub const UNK_ID: u32 = 2;

/// Top layer of the target stack: a fully-connected tanh projection or a
/// plain (non-attentional) GRU run over timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopLayer {
    #[serde(rename = "fc-tanh")]
    FcTanh,
    #[serde(rename = "gru")]
    Gru,
}

/// Structural hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub src_vocab_size: usize,
    pub trg_vocab_size: usize,
    pub embed_dim: usize,
    pub src_layers: usize,
    /// Width of each bidirectional source layer (forward and backward halves
    /// concatenated), so it must be even.
    pub src_hidden: usize,
    pub trg_hidden: usize,
    pub fc_layers: usize,
    pub fc_dim: usize,
    pub top_layer: TopLayer,
    /// How many of the most frequent words get precomputed embedding
    /// products at decode time. Runtime knob; not persisted in model files.
    #[serde(default)]
    pub precompute_k: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("src_vocab_size", self.src_vocab_size),
            ("trg_vocab_size", self.trg_vocab_size),
            ("embed_dim", self.embed_dim),
            ("src_layers", self.src_layers),
            ("src_hidden", self.src_hidden),
            ("trg_hidden", self.trg_hidden),
            ("fc_dim", self.fc_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be > 0")));
            }
        }
        if self.src_hidden % 2 != 0 {
            return Err(Error::Validation(
                "src_hidden must be even (bidirectional halves)".to_string(),
            ));
        }
        if self.src_vocab_size < 3 || self.trg_vocab_size < 3 {
            return Err(Error::Validation(
                "vocabularies must hold at least the 3 special tokens".to_string(),
            ));
        }
        Ok(())
    }

    /// Input width of the top layer (the last FC width, or the recurrent
    /// width when there is no FC stack).
    pub fn top_input_dim(&self) -> usize {
        if self.fc_layers > 0 {
            self.fc_dim
        } else {
            self.trg_hidden
        }
    }
}

/// One weight matrix plus its optional quantized twin.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    pub float: Tensor,
    pub quant: Option<QuantMatrix>,
}

impl Weight {
    pub fn new(float: Tensor) -> Self {
        Weight { float, quant: None }
    }

    /// Attaches a quantized twin. `transposed` weights (the usual
    /// `[in x out]` orientation) are flipped so the packed matrix has one
    /// output unit per row, which is what the kernel wants.
    pub fn attach_quant(&mut self, frac_bits_w: u8, transpose: bool) {
        let packed = if transpose {
            quantize_weights(&self.float.transpose(), frac_bits_w)
        } else {
            quantize_weights(&self.float, frac_bits_w)
        };
        self.quant = Some(packed);
    }
}

/// Parameters of one GRU layer. The context (`u_*`) weights are present only
/// on the attentional target GRU.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_u: Weight,
    pub w_r: Weight,
    pub w_h: Weight,
    pub v_u: Weight,
    pub v_r: Weight,
    pub v_h: Weight,
    pub u_u: Option<Weight>,
    pub u_r: Option<Weight>,
    pub u_h: Option<Weight>,
    pub b_u: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

/// Attention scoring parameters: the query is `tanh(W_a h + V_a x)` and keys
/// are `tanh(U_a s_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_a: Weight,
    pub v_a: Weight,
    pub u_a: Weight,
}

/// A complete parameter set plus vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub src_embeddings: Tensor,
    pub trg_embeddings: Tensor,
    pub src_fwd: Vec<GruWeights>,
    pub src_bwd: Vec<GruWeights>,
    pub trg_gru: GruWeights,
    pub attention: AttentionWeights,
    pub fc: Vec<Weight>,
    /// `W^T` projection; present iff `top_layer == FcTanh`.
    pub w_top: Option<Weight>,
    /// Plain GRU on top; present iff `top_layer == Gru`.
    pub top_gru: Option<GruWeights>,
    /// Output projection, stored `[trg_vocab x trg_hidden]`, one row per word.
    pub output: Weight,
    pub vocab_src: Vec<String>,
    pub vocab_trg: Vec<String>,
}

impl Model {
    /// Per-direction hidden width of a source layer.
    pub fn src_dir_hidden(&self) -> usize {
        self.spec.src_hidden / 2
    }

    /// Attaches quantized twins to every weight matrix (embeddings and
    /// biases stay in float).
    pub fn attach_quant_twins(&mut self, frac_bits_w: u8) {
        fn gru(g: &mut GruWeights, fb: u8) {
            for w in [&mut g.w_u, &mut g.w_r, &mut g.w_h, &mut g.v_u, &mut g.v_r, &mut g.v_h] {
                w.attach_quant(fb, true);
            }
            for w in [&mut g.u_u, &mut g.u_r, &mut g.u_h].into_iter().flatten() {
                w.attach_quant(fb, true);
            }
        }
        for g in self.src_fwd.iter_mut().chain(self.src_bwd.iter_mut()) {
            gru(g, frac_bits_w);
        }
        gru(&mut self.trg_gru, frac_bits_w);
        for w in [
            &mut self.attention.w_a,
            &mut self.attention.v_a,
            &mut self.attention.u_a,
        ] {
            w.attach_quant(frac_bits_w, true);
        }
        for w in self.fc.iter_mut() {
            w.attach_quant(frac_bits_w, true);
        }
        if let Some(w) = self.w_top.as_mut() {
            w.attach_quant(frac_bits_w, true);
        }
        if let Some(g) = self.top_gru.as_mut() {
            gru(g, frac_bits_w);
        }
        // Output rows are already one word per row = one output unit per row.
        self.output.attach_quant(frac_bits_w, false);
    }

    pub fn has_quant_twins(&self) -> bool {
        self.output.quant.is_some()
    }

    /// Replaces the generated vocabularies with caller-provided token lists.
    pub fn set_vocabs(&mut self, src: Vec<String>, trg: Vec<String>) -> Result<()> {
        if src.len() != self.spec.src_vocab_size || trg.len() != self.spec.trg_vocab_size {
            return Err(Error::Validation(format!(
                "vocab sizes {}/{} do not match spec {}/{}",
                src.len(),
                trg.len(),
                self.spec.src_vocab_size,
                self.spec.trg_vocab_size
            )));
        }
        self.vocab_src = src;
        self.vocab_trg = trg;
        Ok(())
    }

    /// Maps a whitespace-tokenized line to source ids, unknown words to unk.
    pub fn src_ids_for_line(&self, line: &str) -> Vec<u32> {
        let index: std::collections::HashMap<&str, u32> = self
            .vocab_src
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        line.split_whitespace()
            .map(|tok| index.get(tok).copied().unwrap_or(UNK_ID))
            .collect()
    }
}

fn default_vocab(prefix: &str, size: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(size);
    v.push("<s>".to_string());
    v.push("</s>".to_string());
    v.push("<unk>".to_string());
    for i in 3..size {
        v.push(format!("{prefix}{i}"));
    }
    v
}

/// Default uniform weight range of generated models.
const INIT_RANGE: f32 = 0.1;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f32) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-range..=range))
        .collect();
    Tensor { rows, cols, data }
}

fn random_gru(
    rng: &mut ChaCha8Rng,
    input_dim: usize,
    hidden: usize,
    ctx_dim: Option<usize>,
    range: f32,
) -> GruWeights {
    let mut w = |r: usize, c: usize| Weight::new(random_tensor(rng, r, c, range));
    GruWeights {
        w_u: w(hidden, hidden),
        w_r: w(hidden, hidden),
        w_h: w(hidden, hidden),
        v_u: w(input_dim, hidden),
        v_r: w(input_dim, hidden),
        v_h: w(input_dim, hidden),
        u_u: ctx_dim.map(|d| w(d, hidden)),
        u_r: ctx_dim.map(|d| w(d, hidden)),
        u_h: ctx_dim.map(|d| w(d, hidden)),
        b_u: Tensor::zeros(1, hidden),
        b_r: Tensor::zeros(1, hidden),
        b_h: Tensor::zeros(1, hidden),
    }
}

/// Deterministically generates a model with weights drawn uniformly from
/// [-0.1, 0.1] (inside the quantization clipping range) and zero biases.
/// Same `(spec, seed)` always yields a bitwise-identical model.
pub fn generate_random_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    generate_random_model_in_range(spec, seed, INIT_RANGE)
}

/// Like [`generate_random_model`] with an explicit uniform weight range.
/// Any range within the quantization clip (0, 1] keeps the GRUs stable;
/// larger ranges saturate the gates and give peaked, trained-model-like
/// output distributions.
pub fn generate_random_model_in_range(
    spec: &ModelSpec,
    seed: u64,
    weight_range: f32,
) -> Result<Model> {
    if !(weight_range > 0.0 && weight_range <= 1.0) {
        return Err(Error::Validation(format!(
            "weight range {weight_range} outside (0, 1]"
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = weight_range;
    let e = spec.embed_dim;
    let r = spec.trg_hidden;
    let sh = spec.src_hidden;
    let hd = sh / 2;

    // Generation order matches the serialization order in `format`.
    let src_embeddings = random_tensor(&mut rng, spec.src_vocab_size, e, range);
    let trg_embeddings = random_tensor(&mut rng, spec.trg_vocab_size, e, range);

    let mut src_fwd = Vec::with_capacity(spec.src_layers);
    let mut src_bwd = Vec::with_capacity(spec.src_layers);
    for layer in 0..spec.src_layers {
        let input_dim = if layer == 0 { e } else { sh };
        src_fwd.push(random_gru(&mut rng, input_dim, hd, None, range));
        src_bwd.push(random_gru(&mut rng, input_dim, hd, None, range));
    }

    let trg_gru = random_gru(&mut rng, e, r, Some(sh), range);
    let attention = AttentionWeights {
        w_a: Weight::new(random_tensor(&mut rng, r, r, range)),
        v_a: Weight::new(random_tensor(&mut rng, e, r, range)),
        u_a: Weight::new(random_tensor(&mut rng, sh, r, range)),
    };

    let mut fc = Vec::with_capacity(spec.fc_layers);
    for layer in 0..spec.fc_layers {
        let input_dim = if layer == 0 { r } else { spec.fc_dim };
        fc.push(Weight::new(random_tensor(&mut rng, input_dim, spec.fc_dim, range)));
    }

    let top_in = spec.top_input_dim();
    let (w_top, top_gru) = match spec.top_layer {
        TopLayer::FcTanh => (
            Some(Weight::new(random_tensor(&mut rng, top_in, r, range))),
            None,
        ),
        TopLayer::Gru => (None, Some(random_gru(&mut rng, top_in, r, None, range))),
    };

    let output = Weight::new(random_tensor(&mut rng, spec.trg_vocab_size, r, range));

    Ok(Model {
        spec: spec.clone(),
        src_embeddings,
        trg_embeddings,
        src_fwd,
        src_bwd,
        trg_gru,
        attention,
        fc,
        w_top,
        top_gru,
        output,
        vocab_src: default_vocab("s", spec.src_vocab_size),
        vocab_trg: default_vocab("w", spec.trg_vocab_size),
    })
}

// ---------------------------------------------------------------------------
// Precomputed embedding products
// ---------------------------------------------------------------------------

/// Offline `V_g * x` products for the `k` most frequent words on each side
/// (vocabularies are ordered by descending frequency, so "most frequent" is
/// a prefix of the id space). Covered words skip three matrix products per
/// GRU gate at decode time; uncovered words fall back to the online path.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    /// Covered target words; rows hold `V_u x | V_r x | V_h x` (3r floats).
    trg: Tensor,
    /// Covered source words, forward layer-1 products (3 * hd floats).
    src_fwd: Tensor,
    /// Covered source words, backward layer-1 products.
    src_bwd: Tensor,
}

fn concat_gate_products(emb: &Tensor, gates: [&Tensor; 3], k: usize) -> Result<Tensor> {
    let covered = Tensor::new(k, emb.cols(), emb.data()[..k * emb.cols()].to_vec())?;
    let products: Vec<Tensor> = gates
        .iter()
        .map(|g| gemm_f32(&covered, g))
        .collect::<Result<_>>()?;
    let width: usize = products.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(k, width);
    for row in 0..k {
        let dst = out.row_mut(row);
        let mut off = 0;
        for p in &products {
            dst[off..off + p.cols()].copy_from_slice(p.row(row));
            off += p.cols();
        }
    }
    Ok(out)
}

impl PrecomputedEmbeddings {
    /// Builds tables covering word ids `0..k` on both sides (clamped to the
    /// vocabulary sizes). `k = 0` produces empty tables, i.e. pure fallback.
    pub fn build(model: &Model, k: usize) -> Result<Self> {
        let k_trg = k.min(model.spec.trg_vocab_size);
        let k_src = k.min(model.spec.src_vocab_size);
        let g = &model.trg_gru;
        let trg = concat_gate_products(
            &model.trg_embeddings,
            [&g.v_u.float, &g.v_r.float, &g.v_h.float],
            k_trg,
        )?;
        let f = &model.src_fwd[0];
        let src_fwd = concat_gate_products(
            &model.src_embeddings,
            [&f.v_u.float, &f.v_r.float, &f.v_h.float],
            k_src,
        )?;
        let b = &model.src_bwd[0];
        let src_bwd = concat_gate_products(
            &model.src_embeddings,
            [&b.v_u.float, &b.v_r.float, &b.v_h.float],
            k_src,
        )?;
        Ok(PrecomputedEmbeddings { trg, src_fwd, src_bwd })
    }

    pub fn empty() -> Self {
        PrecomputedEmbeddings {
            trg: Tensor::zeros(0, 0),
            src_fwd: Tensor::zeros(0, 0),
            src_bwd: Tensor::zeros(0, 0),
        }
    }

    pub fn covered_trg(&self) -> usize {
        self.trg.rows()
    }

    pub fn covered_src(&self) -> usize {
        self.src_fwd.rows()
    }

    /// Concatenated `V_u x | V_r x | V_h x` row for a covered target word.
    pub fn trg_row(&self, id: u32) -> Option<&[f32]> {
        ((id as usize) < self.trg.rows()).then(|| self.trg.row(id as usize))
    }

    pub fn src_fwd_row(&self, id: u32) -> Option<&[f32]> {
        ((id as usize) < self.src_fwd.rows()).then(|| self.src_fwd.row(id as usize))
    }

    pub fn src_bwd_row(&self, id: u32) -> Option<&[f32]> {
        ((id as usize) < self.src_bwd.rows()).then(|| self.src_bwd.row(id as usize))
    }

    /// Table memory in bytes, (target side, source side).
    pub fn memory_bytes(&self) -> (usize, usize) {
        (
            self.trg.data().len() * 4,
            (self.src_fwd.data().len() + self.src_bwd.data().len()) * 4,
        )
    }
}
