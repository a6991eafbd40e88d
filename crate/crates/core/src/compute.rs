//! The forward computation graph: source encoding, the attentional target
//! GRU step, the residual FC stack, and candidate scoring.
//!
//! Every step routes its matrix products through either the float kernel or
//! the 16-bit quantized kernel, reads gate input products from the
//! precomputed embedding table when available, and takes attention context
//! either directly (`U (sum_j a_j s_j)`) or from per-position projections
//! computed once per sentence (`sum_j a_j (U s_j)`). Gate math uses one
//! canonical accumulation order — recurrent product, then input product,
//! then context, then bias — so toggling a speedup that supplies the same
//! values through a different route cannot perturb the result.

use crate::error::{Error, Result};
use crate::model::{GruWeights, Model, PrecomputedEmbeddings, Weight, EOS_ID};
use crate::quant::{gemm_i16, QuantBatch, DEFAULT_FRAC_BITS_A};
use crate::tensor::{
    activate_in_place, gemm_f32, log_softmax_row_in_place, softmax_row_in_place, ActivationKind,
    ActivationMode, BinaryOp, Tensor,
};

/// Per-speedup toggles. Any combination is legal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepFlags {
    /// Route matrix products through the 16-bit fixed-point kernel (requires
    /// a model with quantized twins).
    pub use_quant16: bool,
    /// Read first-layer `V x` gate products from the offline table.
    pub use_precomputed_embeddings: bool,
    /// Use per-position `U s_j` projections instead of multiplying the
    /// attention context by `U` every step.
    pub use_precomputed_attention: bool,
    /// Evaluate sigmoid/tanh through lookup tables.
    pub use_lut_activations: bool,
    /// Compute recurrent products once per unique predecessor state.
    pub merge_recurrent: bool,
    /// Evaluate the GRU candidate with sigmoid instead of tanh (the literal
    /// printed form of the candidate equation). Off by default.
    pub candidate_sigma: bool,
}

impl StepFlags {
    pub fn all_on() -> Self {
        StepFlags {
            use_quant16: true,
            use_precomputed_embeddings: true,
            use_precomputed_attention: true,
            use_lut_activations: true,
            merge_recurrent: true,
            candidate_sigma: false,
        }
    }

    fn act_mode(&self) -> ActivationMode {
        if self.use_lut_activations {
            ActivationMode::Lut
        } else {
            ActivationMode::Exact
        }
    }

    fn candidate_kind(&self) -> ActivationKind {
        if self.candidate_sigma {
            ActivationKind::Sigmoid
        } else {
            ActivationKind::Tanh
        }
    }
}

/// Everything a forward step needs besides the model: flags, the activation
/// quantization width, and the precomputed embedding table.
#[derive(Debug, Clone, Copy)]
pub struct ComputeOpts<'a> {
    pub flags: StepFlags,
    pub frac_bits_a: u8,
    pub preemb: Option<&'a PrecomputedEmbeddings>,
}

impl<'a> ComputeOpts<'a> {
    pub fn new(flags: StepFlags) -> Self {
        ComputeOpts { flags, frac_bits_a: DEFAULT_FRAC_BITS_A, preemb: None }
    }

    pub fn with_preemb(mut self, table: &'a PrecomputedEmbeddings) -> Self {
        self.preemb = Some(table);
        self
    }
}

/// A batch of activations with its quantized form, built once and multiplied
/// against several weight matrices.
struct Routed {
    rows: Tensor,
    quant: Option<QuantBatch>,
}

impl Routed {
    fn new(rows: Tensor, opts: &ComputeOpts) -> Self {
        let quant = opts
            .flags
            .use_quant16
            .then(|| QuantBatch::from_rows(&rows, opts.frac_bits_a));
        Routed { rows, quant }
    }

    /// `rows * w`, through the quantized kernel when both sides have
    /// quantized forms.
    fn times(&self, w: &Weight) -> Tensor {
        match (&self.quant, &w.quant) {
            (Some(xq), Some(wq)) => {
                // Kernel output is [out x batch]; bring it back to rows.
                gemm_i16(wq, xq).expect("validated shapes").transpose()
            }
            _ => gemm_f32(&self.rows, &w.float).expect("validated shapes"),
        }
    }
}

/// Recurrent states entering a step: the unique predecessor rows plus a map
/// from each beam hypothesis to its row. With merging off the map is the
/// identity and `unique` holds one (possibly duplicated) row per hypothesis.
#[derive(Debug, Clone)]
pub struct StateBatch {
    pub unique: Tensor,
    pub gather: Vec<usize>,
}

impl StateBatch {
    /// One row per hypothesis, identity map (the unmerged layout).
    pub fn dense(rows: Tensor) -> Self {
        let gather = (0..rows.rows()).collect();
        StateBatch { unique: rows, gather }
    }

    pub fn batch_len(&self) -> usize {
        self.gather.len()
    }

    /// Expands per-unique-row values back to one row per hypothesis.
    fn expand(&self, per_unique: &Tensor) -> Tensor {
        per_unique.gather_rows(&self.gather)
    }
}

/// Per-sentence cache of source-side quantities.
#[derive(Debug, Clone)]
pub struct SourceCache {
    /// Top-layer annotations `s_j`, one row per source position.
    pub annotations: Tensor,
    /// `tanh(U_a s_j)` keys, stored transposed `[dim x |S|]` so the query
    /// scores every position with one product.
    pub att_keys_t: Tensor,
    /// Concatenated `U_u s | U_r s | U_h s` per position; present only when
    /// precomputed attention is enabled.
    pub att_proj: Option<Tensor>,
}

impl SourceCache {
    pub fn len(&self) -> usize {
        self.annotations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.rows() == 0
    }
}

fn gru_gate_preact(
    recurrent: Tensor,
    input: Option<&Tensor>,
    context: Option<&Tensor>,
    bias: &Tensor,
) -> Tensor {
    // Canonical accumulation order: W h, + V x, + U c, + b.
    let mut pre = recurrent;
    if let Some(x) = input {
        pre.add_assign(x);
    }
    if let Some(c) = context {
        pre.add_assign(c);
    }
    pre.add_bias(bias.data());
    pre
}

/// One GRU step over a batch of rows.
///
/// `wh_*` are the recurrent products (already expanded to one row per batch
/// item), `vx_*` the input products, `uc_*` the optional context products,
/// `h_full` the full previous state. Gates follow the update/reset/candidate
/// form with the reset gate applied to the recurrent product.
#[allow(clippy::too_many_arguments)]
fn gru_combine(
    g: &GruWeights,
    h_full: &Tensor,
    wh_u: Tensor,
    wh_r: Tensor,
    wh_h: Tensor,
    vx: [&Tensor; 3],
    uc: Option<[&Tensor; 3]>,
    opts: &ComputeOpts,
) -> Tensor {
    let mode = opts.flags.act_mode();
    let ctx = |i: usize| uc.map(|c| c[i]);

    let mut u = gru_gate_preact(wh_u, Some(vx[0]), ctx(0), &g.b_u);
    activate_in_place(ActivationKind::Sigmoid, &mut u, mode);
    let mut r = gru_gate_preact(wh_r, Some(vx[1]), ctx(1), &g.b_r);
    activate_in_place(ActivationKind::Sigmoid, &mut r, mode);

    let gated = crate::tensor::vec_binary(BinaryOp::Mul, &r, &wh_h).expect("same shape");
    let mut cand = gru_gate_preact(gated, Some(vx[2]), ctx(2), &g.b_h);
    activate_in_place(opts.flags.candidate_kind(), &mut cand, mode);

    // h = u * h_prev + (1 - u) * cand
    let mut keep = crate::tensor::vec_binary(BinaryOp::Mul, &u, h_full).expect("same shape");
    let mut one_minus_u = u;
    for v in one_minus_u.data.iter_mut() {
        *v = 1.0 - *v;
    }
    let update = crate::tensor::vec_binary(BinaryOp::Mul, &one_minus_u, &cand).expect("same shape");
    keep.add_assign(&update);
    keep
}

/// Non-attentional GRU step on dense rows (source encoder, top GRU layer).
fn plain_gru_step(
    g: &GruWeights,
    h_prev: &Tensor,
    vx: [&Tensor; 3],
    opts: &ComputeOpts,
) -> Tensor {
    let routed = Routed::new(h_prev.clone(), opts);
    let wh_u = routed.times(&g.w_u);
    let wh_r = routed.times(&g.w_r);
    let wh_h = routed.times(&g.w_h);
    gru_combine(g, h_prev, wh_u, wh_r, wh_h, vx, None, opts)
}

/// Runs the stacked bidirectional source encoder and fills the per-sentence
/// cache: annotations, attention keys, and (when enabled) the per-position
/// context projections.
pub fn encode_source(model: &Model, src_ids: &[u32], opts: &ComputeOpts) -> Result<SourceCache> {
    if src_ids.is_empty() {
        return Err(Error::Input("empty source sentence".to_string()));
    }
    if let Some(&bad) = src_ids.iter().find(|&&id| id as usize >= model.spec.src_vocab_size) {
        return Err(Error::Input(format!(
            "source token id {bad} out of range (vocab {})",
            model.spec.src_vocab_size
        )));
    }
    let s_len = src_ids.len();
    let hd = model.src_dir_hidden();

    let idx: Vec<usize> = src_ids.iter().map(|&i| i as usize).collect();
    let mut layer_input = model.src_embeddings.gather_rows(&idx);

    for layer in 0..model.spec.src_layers {
        let fwd = &model.src_fwd[layer];
        let bwd = &model.src_bwd[layer];

        // Batched input products for the whole sentence, per direction.
        let vx_fwd = source_gate_products(model, layer, src_ids, &layer_input, fwd, false, opts);
        let vx_bwd = source_gate_products(model, layer, src_ids, &layer_input, bwd, true, opts);

        let mut out = Tensor::zeros(s_len, 2 * hd);
        let mut h = Tensor::zeros(1, hd);
        for pos in 0..s_len {
            let vx = [
                &Tensor::vector(vx_fwd[0].row(pos).to_vec()),
                &Tensor::vector(vx_fwd[1].row(pos).to_vec()),
                &Tensor::vector(vx_fwd[2].row(pos).to_vec()),
            ];
            h = plain_gru_step(fwd, &h, vx, opts);
            out.row_mut(pos)[..hd].copy_from_slice(h.row(0));
        }
        let mut h = Tensor::zeros(1, hd);
        for pos in (0..s_len).rev() {
            let vx = [
                &Tensor::vector(vx_bwd[0].row(pos).to_vec()),
                &Tensor::vector(vx_bwd[1].row(pos).to_vec()),
                &Tensor::vector(vx_bwd[2].row(pos).to_vec()),
            ];
            h = plain_gru_step(bwd, &h, vx, opts);
            out.row_mut(pos)[hd..].copy_from_slice(h.row(0));
        }
        layer_input = out;
    }

    build_cache_from_annotations(model, layer_input, opts)
}

/// First-layer products come from the precomputed table when enabled; other
/// layers always compute online from the previous layer's output.
fn source_gate_products(
    model: &Model,
    layer: usize,
    src_ids: &[u32],
    layer_input: &Tensor,
    g: &GruWeights,
    backward: bool,
    opts: &ComputeOpts,
) -> [Tensor; 3] {
    let hd = model.src_dir_hidden();
    let use_table = layer == 0 && opts.flags.use_precomputed_embeddings && opts.preemb.is_some();
    if use_table {
        let table = opts.preemb.unwrap();
        let s_len = src_ids.len();
        let mut out = [
            Tensor::zeros(s_len, hd),
            Tensor::zeros(s_len, hd),
            Tensor::zeros(s_len, hd),
        ];
        for (pos, &id) in src_ids.iter().enumerate() {
            let row = if backward { table.src_bwd_row(id) } else { table.src_fwd_row(id) };
            match row {
                Some(r) => {
                    out[0].row_mut(pos).copy_from_slice(&r[..hd]);
                    out[1].row_mut(pos).copy_from_slice(&r[hd..2 * hd]);
                    out[2].row_mut(pos).copy_from_slice(&r[2 * hd..]);
                }
                None => {
                    // Uncovered word: online product for this row only.
                    let x = Routed::new(Tensor::vector(layer_input.row(pos).to_vec()), opts);
                    out[0].row_mut(pos).copy_from_slice(x.times(&g.v_u).row(0));
                    out[1].row_mut(pos).copy_from_slice(x.times(&g.v_r).row(0));
                    out[2].row_mut(pos).copy_from_slice(x.times(&g.v_h).row(0));
                }
            }
        }
        out
    } else {
        let x = Routed::new(layer_input.clone(), opts);
        [x.times(&g.v_u), x.times(&g.v_r), x.times(&g.v_h)]
    }
}

/// Finishes a cache from top-layer annotations: attention keys (always) and
/// the three per-position context projections (iff precomputed attention).
pub fn build_cache_from_annotations(
    model: &Model,
    annotations: Tensor,
    opts: &ComputeOpts,
) -> Result<SourceCache> {
    let routed = Routed::new(annotations.clone(), opts);
    let mut keys = routed.times(&model.attention.u_a);
    activate_in_place(ActivationKind::Tanh, &mut keys, opts.flags.act_mode());
    let att_keys_t = keys.transpose();

    let att_proj = if opts.flags.use_precomputed_attention {
        let g = &model.trg_gru;
        let pu = routed.times(g.u_u.as_ref().expect("attentional gru"));
        let pr = routed.times(g.u_r.as_ref().expect("attentional gru"));
        let ph = routed.times(g.u_h.as_ref().expect("attentional gru"));
        let r = model.spec.trg_hidden;
        let mut proj = Tensor::zeros(annotations.rows(), 3 * r);
        for row in 0..annotations.rows() {
            let dst = proj.row_mut(row);
            dst[..r].copy_from_slice(pu.row(row));
            dst[r..2 * r].copy_from_slice(pr.row(row));
            dst[2 * r..].copy_from_slice(ph.row(row));
        }
        Some(proj)
    } else {
        None
    };

    Ok(SourceCache { annotations, att_keys_t, att_proj })
}

/// Attention context, either the direct weighted annotation sum or the three
/// pre-projected context products.
#[derive(Debug, Clone)]
pub enum AttentionOutput {
    /// `c_i = sum_j alpha_ij s_j`; the caller multiplies by `U_g`.
    Context(Tensor),
    /// `sum_j alpha_ij (U_g s_j)` for g in {u, r, h}.
    Projected { u: Tensor, r: Tensor, h: Tensor },
}

/// Scores every source position from a ready query batch and returns the
/// attention distribution plus the context in the mode the cache supports.
fn attention_from_query(
    query: &Tensor,
    cache: &SourceCache,
    opts: &ComputeOpts,
) -> (Tensor, AttentionOutput) {
    let mut alpha = gemm_f32(query, &cache.att_keys_t).expect("validated shapes");
    for row in 0..alpha.rows() {
        softmax_row_in_place(alpha.row_mut(row));
    }
    let out = match (&cache.att_proj, opts.flags.use_precomputed_attention) {
        (Some(proj), true) => {
            let p = gemm_f32(&alpha, proj).expect("validated shapes");
            let r = proj.cols() / 3;
            let b = p.rows();
            let mut u = Tensor::zeros(b, r);
            let mut rr = Tensor::zeros(b, r);
            let mut h = Tensor::zeros(b, r);
            for row in 0..b {
                u.row_mut(row).copy_from_slice(&p.row(row)[..r]);
                rr.row_mut(row).copy_from_slice(&p.row(row)[r..2 * r]);
                h.row_mut(row).copy_from_slice(&p.row(row)[2 * r..]);
            }
            AttentionOutput::Projected { u, r: rr, h }
        }
        _ => {
            let c = gemm_f32(&alpha, &cache.annotations).expect("validated shapes");
            AttentionOutput::Context(c)
        }
    };
    (alpha, out)
}

/// One attention evaluation for a dense batch of states: query
/// `tanh(W_a h + V_a x)` scored against the cached keys.
pub fn attention_step(
    h_prev: &Tensor,
    x_embed: &Tensor,
    model: &Model,
    cache: &SourceCache,
    opts: &ComputeOpts,
) -> Result<(Tensor, AttentionOutput)> {
    if cache.is_empty() {
        return Err(Error::Input("empty source cache".to_string()));
    }
    let h = Routed::new(h_prev.clone(), opts);
    let x = Routed::new(x_embed.clone(), opts);
    let mut query = h.times(&model.attention.w_a);
    query.add_assign(&x.times(&model.attention.v_a));
    activate_in_place(ActivationKind::Tanh, &mut query, opts.flags.act_mode());
    Ok(attention_from_query(&query, cache, opts))
}

/// One attentional GRU step over the beam batch.
///
/// Recurrent products (`W_* h`, including the attention query's `W_a h`) are
/// computed once per unique predecessor row and expanded back to the batch;
/// gate input products come from the precomputed table when enabled.
/// Returns the new states and the attention rows, one per hypothesis.
pub fn att_gru_step(
    model: &Model,
    states: &StateBatch,
    prev_ids: &[u32],
    cache: &SourceCache,
    opts: &ComputeOpts,
) -> Result<(Tensor, Tensor)> {
    let b = states.batch_len();
    if prev_ids.len() != b {
        return Err(Error::shape("att_gru_step", "prev_ids vs batch".to_string()));
    }
    if cache.is_empty() {
        return Err(Error::Input("empty source cache".to_string()));
    }
    let g = &model.trg_gru;

    // Recurrent products on unique rows only.
    let routed_unique = Routed::new(states.unique.clone(), opts);
    let wh_u = states.expand(&routed_unique.times(&g.w_u));
    let wh_r = states.expand(&routed_unique.times(&g.w_r));
    let wh_h = states.expand(&routed_unique.times(&g.w_h));
    let wa_h = states.expand(&routed_unique.times(&model.attention.w_a));
    let h_full = states.expand(&states.unique);

    // Input products: embedding gather plus V_a (always online); the three
    // gate products come from the table for covered words.
    let idx: Vec<usize> = prev_ids.iter().map(|&i| i as usize).collect();
    let x_rows = model.trg_embeddings.gather_rows(&idx);
    let x = Routed::new(x_rows, opts);
    let va_x = x.times(&model.attention.v_a);

    let table = opts
        .preemb
        .filter(|_| opts.flags.use_precomputed_embeddings);
    let (vx_u, vx_r, vx_h) = match table {
        Some(t) => {
            let r = model.spec.trg_hidden;
            let mut vu = Tensor::zeros(b, r);
            let mut vr = Tensor::zeros(b, r);
            let mut vh = Tensor::zeros(b, r);
            for (row, &id) in prev_ids.iter().enumerate() {
                match t.trg_row(id) {
                    Some(src) => {
                        vu.row_mut(row).copy_from_slice(&src[..r]);
                        vr.row_mut(row).copy_from_slice(&src[r..2 * r]);
                        vh.row_mut(row).copy_from_slice(&src[2 * r..]);
                    }
                    None => {
                        let xr = Routed::new(Tensor::vector(x.rows.row(row).to_vec()), opts);
                        vu.row_mut(row).copy_from_slice(xr.times(&g.v_u).row(0));
                        vr.row_mut(row).copy_from_slice(xr.times(&g.v_r).row(0));
                        vh.row_mut(row).copy_from_slice(xr.times(&g.v_h).row(0));
                    }
                }
            }
            (vu, vr, vh)
        }
        None => (x.times(&g.v_u), x.times(&g.v_r), x.times(&g.v_h)),
    };

    // Attention.
    let mut query = wa_h;
    query.add_assign(&va_x);
    activate_in_place(ActivationKind::Tanh, &mut query, opts.flags.act_mode());
    let (alpha, att_out) = attention_from_query(&query, cache, opts);

    let (uc_u, uc_r, uc_h) = match att_out {
        AttentionOutput::Projected { u, r, h } => (u, r, h),
        AttentionOutput::Context(c) => {
            let cr = Routed::new(c, opts);
            (
                cr.times(g.u_u.as_ref().expect("attentional gru")),
                cr.times(g.u_r.as_ref().expect("attentional gru")),
                cr.times(g.u_h.as_ref().expect("attentional gru")),
            )
        }
    };

    let h_new = gru_combine(
        g,
        &h_full,
        wh_u,
        wh_r,
        wh_h,
        [&vx_u, &vx_r, &vx_h],
        Some([&uc_u, &uc_r, &uc_h]),
        opts,
    );
    Ok((h_new, alpha))
}

/// Applies the residual FC stack and the top layer.
///
/// Layer 1 is `relu(W^1 h^B)`; deeper layers add a skip connection from two
/// layers below on every other layer. Relu saturates at 10 so activations
/// stay inside the quantization range. When the top layer is a GRU,
/// `top_prev` must carry its previous state and the returned tensor is also
/// the new top state.
pub fn fc_stack_apply(
    model: &Model,
    h_b: &Tensor,
    top_prev: Option<&Tensor>,
    opts: &ComputeOpts,
) -> Result<Tensor> {
    let trace = fc_stack_trace(model, h_b, top_prev, opts)?;
    Ok(trace.into_iter().last().expect("top layer output"))
}

/// Like [`fc_stack_apply`] but returns every intermediate `h^1..h^N` plus the
/// top output, in order.
pub fn fc_stack_trace(
    model: &Model,
    h_b: &Tensor,
    top_prev: Option<&Tensor>,
    opts: &ComputeOpts,
) -> Result<Vec<Tensor>> {
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.fc.len() + 1);
    let mut current = h_b.clone();
    for (i, w) in model.fc.iter().enumerate() {
        let layer = i + 1;
        let routed = Routed::new(current, opts);
        let mut pre = routed.times(w);
        if layer >= 3 && layer % 2 == 1 {
            // Skip connection from two layers below; relu keeps it >= 0, so
            // zeroing W^l makes this layer the identity on its skip input.
            pre.add_assign(&outputs[layer - 3]);
        }
        activate_in_place(ActivationKind::ReluClipped, &mut pre, ActivationMode::Exact);
        outputs.push(pre.clone());
        current = pre;
    }

    let top = match (&model.w_top, &model.top_gru) {
        (Some(w_t), None) => {
            let routed = Routed::new(current, opts);
            let mut t = routed.times(w_t);
            activate_in_place(ActivationKind::Tanh, &mut t, opts.flags.act_mode());
            t
        }
        (None, Some(g)) => {
            let prev = top_prev.ok_or_else(|| {
                Error::Input("top GRU layer requires its previous state".to_string())
            })?;
            let x = Routed::new(current, opts);
            let vx = [x.times(&g.v_u), x.times(&g.v_r), x.times(&g.v_h)];
            plain_gru_step(g, prev, [&vx[0], &vx[1], &vx[2]], opts)
        }
        _ => return Err(Error::Validation("model has no top layer".to_string())),
    };
    outputs.push(top);
    Ok(outputs)
}

/// A per-sentence candidate shortlist with the output rows gathered once:
/// the float rows transposed for the row-batch kernel, and the quantized
/// rows packed for the 16-bit kernel.
#[derive(Debug, Clone)]
pub struct Shortlist {
    ids: Vec<u32>,
    weights_t: Tensor,
    quant: Option<crate::quant::QuantMatrix>,
}

impl Shortlist {
    /// `ids` must be non-empty, strictly ascending, and within the
    /// vocabulary.
    pub fn build(model: &Model, ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty candidate list".to_string()));
        }
        if !ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Input("candidate ids must be sorted and unique".to_string()));
        }
        if *ids.last().unwrap() as usize >= model.spec.trg_vocab_size {
            return Err(Error::Input(format!(
                "candidate id {} out of range (vocab {})",
                ids.last().unwrap(),
                model.spec.trg_vocab_size
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let weights_t = model.output.float.gather_rows(&idx).transpose();
        let quant = model.output.quant.as_ref().map(|q| q.gather_rows(&idx));
        Ok(Shortlist { ids, weights_t, quant })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the sentence-end token in the shortlist, if present.
    pub fn eos_index(&self) -> Option<usize> {
        self.ids.binary_search(&EOS_ID).ok()
    }
}

/// Scores the shortlist: `V h^T` restricted to the candidate rows, then
/// log-softmax over the candidate set. Scores are log-probabilities
/// conditioned on the shortlist.
pub fn output_logits(model: &Model, h_t: &Tensor, shortlist: &Shortlist, opts: &ComputeOpts) -> Tensor {
    let _ = model;
    let routed = Routed::new(h_t.clone(), opts);
    let mut scores = match (&routed.quant, &shortlist.quant) {
        (Some(xq), Some(wq)) => gemm_i16(wq, xq).expect("validated shapes").transpose(),
        _ => gemm_f32(&routed.rows, &shortlist.weights_t).expect("validated shapes"),
    };
    for row in 0..scores.rows() {
        log_softmax_row_in_place(scores.row_mut(row));
    }
    scores
}

/// Convenience form of [`output_logits`] that validates and gathers the
/// candidate ids on the fly.
pub fn output_logits_for_ids(
    model: &Model,
    h_t: &Tensor,
    candidate_ids: &[u32],
    opts: &ComputeOpts,
) -> Result<Tensor> {
    let shortlist = Shortlist::build(model, candidate_ids.to_vec())?;
    Ok(output_logits(model, h_t, &shortlist, opts))
}

/// Output of one full decoder step for a beam batch.
#[derive(Debug, Clone)]
pub struct DecoderStepOut {
    /// New recurrent states, one row per hypothesis.
    pub h: Tensor,
    /// Attention rows, one per hypothesis; each sums to 1.
    pub alpha: Tensor,
    /// Top hidden state after the FC stack (the new top-GRU state when the
    /// top layer is recurrent).
    pub h_top: Tensor,
    /// Log-probabilities over the shortlist, one row per hypothesis.
    pub logits: Tensor,
}

/// Runs GRU step, FC stack, and candidate scoring in one call.
pub fn decoder_full_step(
    model: &Model,
    states: &StateBatch,
    prev_ids: &[u32],
    cache: &SourceCache,
    shortlist: &Shortlist,
    top_prev: Option<&Tensor>,
    opts: &ComputeOpts,
) -> Result<DecoderStepOut> {
    let (h, alpha) = att_gru_step(model, states, prev_ids, cache, opts)?;
    let h_top = fc_stack_apply(model, &h, top_prev, opts)?;
    let logits = output_logits(model, &h_top, shortlist, opts);
    Ok(DecoderStepOut { h, alpha, h_top, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_random_model, ModelSpec, TopLayer};

    fn spec() -> ModelSpec {
        ModelSpec {
            src_vocab_size: 30,
            trg_vocab_size: 32,
            embed_dim: 10,
            src_layers: 2,
            src_hidden: 12,
            trg_hidden: 14,
            fc_layers: 3,
            fc_dim: 16,
            top_layer: TopLayer::FcTanh,
            precompute_k: 0,
        }
    }

    fn model_with(seed: u64) -> Model {
        generate_random_model(&spec(), seed).unwrap()
    }

    fn zero_model() -> Model {
        let mut m = model_with(0);
        fn zero_gru(g: &mut GruWeights) {
            for w in [&mut g.w_u, &mut g.w_r, &mut g.w_h, &mut g.v_u, &mut g.v_r, &mut g.v_h] {
                w.float.data.iter_mut().for_each(|v| *v = 0.0);
            }
            for w in [&mut g.u_u, &mut g.u_r, &mut g.u_h].into_iter().flatten() {
                w.float.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for g in m.src_fwd.iter_mut().chain(m.src_bwd.iter_mut()) {
            zero_gru(g);
        }
        zero_gru(&mut m.trg_gru);
        m
    }

    fn opts_none() -> ComputeOpts<'static> {
        ComputeOpts::new(StepFlags::default())
    }

    #[test]
    fn zero_weights_encode_to_zero_annotations() {
        // u = r = 0.5, candidate = tanh(0) = 0, h = 0.5*0 + 0.5*0 = 0.
        let m = zero_model();
        let cache = encode_source(&m, &[3, 4, 5, 6], &opts_none()).unwrap();
        assert!(cache.annotations.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_source() {
        let m = model_with(1);
        let cache = encode_source(&m, &[7], &opts_none()).unwrap();
        assert_eq!(cache.annotations.rows(), 1);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn encode_rejects_bad_ids() {
        let m = model_with(1);
        assert!(matches!(encode_source(&m, &[], &opts_none()), Err(Error::Input(_))));
        assert!(matches!(encode_source(&m, &[99], &opts_none()), Err(Error::Input(_))));
    }

    #[test]
    fn attention_single_position_is_delta() {
        let m = model_with(2);
        let cache = encode_source(&m, &[5], &opts_none()).unwrap();
        let h = Tensor::zeros(1, m.spec.trg_hidden);
        let x = Tensor::vector(m.trg_embeddings.row(3).to_vec());
        let (alpha, out) = attention_step(&h, &x, &m, &cache, &opts_none()).unwrap();
        assert_eq!(alpha.data(), &[1.0]);
        match out {
            AttentionOutput::Context(c) => assert_eq!(c.data(), cache.annotations.data()),
            _ => panic!("direct mode expected"),
        }
    }

    #[test]
    fn attention_identical_annotations_split_evenly() {
        let m = model_with(3);
        let one = encode_source(&m, &[9], &opts_none()).unwrap();
        let row = one.annotations.row(0).to_vec();
        let two = build_cache_from_annotations(
            &m,
            Tensor::from_rows(&[&row, &row]).unwrap(),
            &opts_none(),
        )
        .unwrap();
        let h = Tensor::zeros(1, m.spec.trg_hidden);
        let x = Tensor::vector(m.trg_embeddings.row(4).to_vec());
        let (alpha, _) = attention_step(&h, &x, &m, &two, &opts_none()).unwrap();
        assert_eq!(alpha.data(), &[0.5, 0.5]);
    }

    #[test]
    fn precompute_attention_matches_direct_mode() {
        let m = model_with(4);
        let src: Vec<u32> = vec![3, 8, 11, 4, 9];
        let direct_cache = encode_source(&m, &src, &opts_none()).unwrap();
        let mut pre_opts = opts_none();
        pre_opts.flags.use_precomputed_attention = true;
        let pre_cache = encode_source(&m, &src, &pre_opts).unwrap();

        let h = Tensor::vector((0..m.spec.trg_hidden).map(|i| 0.01 * i as f32).collect());
        let x = Tensor::vector(m.trg_embeddings.row(6).to_vec());
        let (_, direct) = attention_step(&h, &x, &m, &direct_cache, &opts_none()).unwrap();
        let (_, pre) = attention_step(&h, &x, &m, &pre_cache, &pre_opts).unwrap();
        let c = match direct {
            AttentionOutput::Context(c) => c,
            _ => unreachable!(),
        };
        let g = &m.trg_gru;
        let uc = gemm_f32(&c, &g.u_u.as_ref().unwrap().float).unwrap();
        match pre {
            AttentionOutput::Projected { u, .. } => {
                for (a, b) in uc.data().iter().zip(u.data()) {
                    assert!((a - b).abs() <= 1e-4, "refactoring identity violated: {a} vs {b}");
                }
            }
            _ => panic!("projected mode expected"),
        }
    }

    #[test]
    fn zero_weights_gru_step_keeps_zero_state() {
        let m = zero_model();
        let cache = encode_source(&m, &[3, 4], &opts_none()).unwrap();
        let states = StateBatch::dense(Tensor::zeros(2, m.spec.trg_hidden));
        let (h, alpha) = att_gru_step(&m, &states, &[0, 5], &cache, &opts_none()).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        for r in 0..alpha.rows() {
            let s: f32 = alpha.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_update_gate_passes_state_through() {
        let mut m = model_with(5);
        // Huge update-gate bias drives u to exactly 1.0 in f32.
        m.trg_gru.b_u.data.iter_mut().for_each(|v| *v = 30.0);
        let cache = encode_source(&m, &[3, 7, 2], &opts_none()).unwrap();
        let h0 = Tensor::new(
            2,
            m.spec.trg_hidden,
            (0..2 * m.spec.trg_hidden).map(|i| (i as f32).sin() * 0.2).collect(),
        )
        .unwrap();
        let states = StateBatch::dense(h0.clone());
        let (h, _) = att_gru_step(&m, &states, &[4, 9], &cache, &opts_none()).unwrap();
        assert_eq!(h.data(), h0.data(), "u = 1 must return h_prev bitwise");
    }

    #[test]
    fn merged_and_dense_states_agree_bitwise() {
        let m = model_with(6);
        let cache = encode_source(&m, &[4, 5, 6], &opts_none()).unwrap();
        let r = m.spec.trg_hidden;
        let row_a: Vec<f32> = (0..r).map(|i| 0.01 * i as f32).collect();
        let row_b: Vec<f32> = (0..r).map(|i| -0.02 * i as f32).collect();

        // Three hypotheses, two sharing a parent state.
        let dense = StateBatch::dense(Tensor::from_rows(&[&row_a, &row_a, &row_b]).unwrap());
        let merged = StateBatch {
            unique: Tensor::from_rows(&[&row_a, &row_b]).unwrap(),
            gather: vec![0, 0, 1],
        };
        let ids = [3u32, 8, 3];
        let mut opts = opts_none();
        let (h1, a1) = att_gru_step(&m, &dense, &ids, &cache, &opts).unwrap();
        opts.flags.merge_recurrent = true;
        let (h2, a2) = att_gru_step(&m, &merged, &ids, &cache, &opts).unwrap();
        assert_eq!(h1.data(), h2.data());
        assert_eq!(a1.data(), a2.data());
    }

    #[test]
    fn fc_stack_degenerate_is_plain_tanh_projection() {
        let mut s = spec();
        s.fc_layers = 0;
        let m = generate_random_model(&s, 7).unwrap();
        let h_b = Tensor::vector((0..s.trg_hidden).map(|i| 0.05 * i as f32).collect());
        let h_t = fc_stack_apply(&m, &h_b, None, &opts_none()).unwrap();
        let mut expect = gemm_f32(&h_b, &m.w_top.as_ref().unwrap().float).unwrap();
        activate_in_place(ActivationKind::Tanh, &mut expect, ActivationMode::Exact);
        assert_eq!(h_t.data(), expect.data());
    }

    #[test]
    fn zeroed_skip_layer_is_identity_on_skip_input() {
        let mut s = spec();
        s.fc_layers = 5;
        let mut m = generate_random_model(&s, 8).unwrap();
        m.fc[2].float.data.iter_mut().for_each(|v| *v = 0.0); // W^3 = 0
        let h_b = Tensor::vector((0..s.trg_hidden).map(|i| 0.03 * (i as f32 + 1.0)).collect());
        let trace = fc_stack_trace(&m, &h_b, None, &opts_none()).unwrap();
        // h^3 = relu(0 + h^1) = h^1 bitwise, since h^1 >= 0 already.
        assert_eq!(trace[2].data(), trace[0].data());
    }

    #[test]
    fn top_gru_requires_state() {
        let mut s = spec();
        s.top_layer = TopLayer::Gru;
        let m = generate_random_model(&s, 9).unwrap();
        let h_b = Tensor::zeros(1, s.trg_hidden);
        assert!(fc_stack_apply(&m, &h_b, None, &opts_none()).is_err());
        let prev = Tensor::zeros(1, s.trg_hidden);
        let out = fc_stack_apply(&m, &h_b, Some(&prev), &opts_none()).unwrap();
        assert_eq!(out.cols(), s.trg_hidden);
    }

    #[test]
    fn single_candidate_scores_log_one() {
        let m = model_with(10);
        let h_t = Tensor::vector(vec![0.1; m.spec.trg_hidden]);
        let logits = output_logits_for_ids(&m, &h_t, &[5], &opts_none()).unwrap();
        assert_eq!(logits.data(), &[0.0]);
    }

    #[test]
    fn full_vocab_shortlist_matches_manual_log_softmax() {
        let m = model_with(11);
        let h_t = Tensor::vector((0..m.spec.trg_hidden).map(|i| 0.02 * i as f32).collect());
        let all: Vec<u32> = (0..m.spec.trg_vocab_size as u32).collect();
        let fast = output_logits_for_ids(&m, &h_t, &all, &opts_none()).unwrap();

        let mut manual: Vec<f32> = (0..m.spec.trg_vocab_size)
            .map(|w| {
                m.output
                    .float
                    .row(w)
                    .iter()
                    .zip(h_t.data())
                    .map(|(a, b)| a * b)
                    .sum::<f32>()
            })
            .collect();
        let max = manual.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let lse: f32 = manual.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
        manual.iter_mut().for_each(|v| *v -= lse);
        for (a, b) in fast.data().iter().zip(&manual) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn restricted_argmax_matches_when_covered() {
        let m = model_with(12);
        let h_t = Tensor::vector((0..m.spec.trg_hidden).map(|i| (i as f32 * 0.7).sin() * 0.3).collect());
        let all: Vec<u32> = (0..m.spec.trg_vocab_size as u32).collect();
        let full = output_logits_for_ids(&m, &h_t, &all, &opts_none()).unwrap();
        let full_argmax = full
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
        // A shortlist containing the global argmax must rank it first too.
        let mut ids: Vec<u32> = vec![full_argmax, 0, 1, 2, 9, 17];
        ids.sort_unstable();
        ids.dedup();
        let small = output_logits_for_ids(&m, &h_t, &ids, &opts_none()).unwrap();
        let small_argmax = ids[small
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0];
        assert_eq!(small_argmax, full_argmax);
    }

    #[test]
    fn shortlist_validation() {
        let m = model_with(13);
        assert!(Shortlist::build(&m, vec![]).is_err());
        assert!(Shortlist::build(&m, vec![3, 3]).is_err());
        assert!(Shortlist::build(&m, vec![5, 3]).is_err());
        assert!(Shortlist::build(&m, vec![3, 9999]).is_err());
        let sl = Shortlist::build(&m, vec![0, 1, 2, 7]).unwrap();
        assert_eq!(sl.eos_index(), Some(1));
    }

    #[test]
    fn alpha_rows_are_distributions_under_all_flag_combos() {
        let m = {
            let mut m = model_with(14);
            m.attach_quant_twins(10);
            m
        };
        let table = PrecomputedEmbeddings::build(&m, 16).unwrap();
        let src = [3u32, 4, 19, 8];
        for bits in 0..32u32 {
            let flags = StepFlags {
                use_quant16: bits & 1 != 0,
                use_precomputed_embeddings: bits & 2 != 0,
                use_precomputed_attention: bits & 4 != 0,
                use_lut_activations: bits & 8 != 0,
                merge_recurrent: bits & 16 != 0,
                candidate_sigma: false,
            };
            let opts = ComputeOpts::new(flags).with_preemb(&table);
            let cache = encode_source(&m, &src, &opts).unwrap();
            let states = StateBatch::dense(Tensor::zeros(2, m.spec.trg_hidden));
            let (_, alpha) = att_gru_step(&m, &states, &[0, 6], &cache, &opts).unwrap();
            for r in 0..alpha.rows() {
                let s: f32 = alpha.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "flags {bits:05b}: alpha sums to {s}");
                assert!(alpha.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    use crate::model::PrecomputedEmbeddings;

    #[test]
    fn precomputed_embeddings_do_not_change_the_step() {
        let m = model_with(15);
        let table = PrecomputedEmbeddings::build(&m, m.spec.trg_vocab_size).unwrap();
        let src = [5u32, 9, 12];
        let opts_off = opts_none();
        let mut opts_on = ComputeOpts::new(StepFlags {
            use_precomputed_embeddings: true,
            ..StepFlags::default()
        })
        .with_preemb(&table);
        opts_on.frac_bits_a = opts_off.frac_bits_a;

        let cache = encode_source(&m, &src, &opts_off).unwrap();
        let states = StateBatch::dense(Tensor::zeros(2, m.spec.trg_hidden));
        let (h_off, _) = att_gru_step(&m, &states, &[3, 7], &cache, &opts_off).unwrap();
        let (h_on, _) = att_gru_step(&m, &states, &[3, 7], &cache, &opts_on).unwrap();
        assert_eq!(h_off.data(), h_on.data(), "table lookups must be bit-identical");

        // Source side too: encode with the table on covered + uncovered words.
        let partial = PrecomputedEmbeddings::build(&m, 6).unwrap();
        let opts_part = ComputeOpts::new(StepFlags {
            use_precomputed_embeddings: true,
            ..StepFlags::default()
        })
        .with_preemb(&partial);
        let c2 = encode_source(&m, &[3, 9, 25], &opts_part).unwrap();
        let c2_ref = encode_source(&m, &[3, 9, 25], &opts_off).unwrap();
        assert_eq!(c2.annotations.data(), c2_ref.annotations.data());
    }
}
