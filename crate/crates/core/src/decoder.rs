//! Beam search over the compute graph: candidate shortlists, early stopping,
//! merged recurrent states, ensembles, and unk replacement.
//!
//! One `beam_search` call is strictly single-threaded; distinct sentences may
//! be decoded concurrently against the same immutable model. Completed
//! hypotheses leave the beam into a separate pool, so the beam always holds
//! partials and the early-stopping comparison against the best completed
//! score is well defined. All orderings break score ties lexicographically
//! by token sequence, which makes every run deterministic.

use crate::compute::{
    att_gru_step, encode_source, fc_stack_apply, output_logits, ComputeOpts, DecoderStepOut,
    Shortlist, SourceCache, StateBatch, StepFlags,
};
use crate::error::{Error, Result};
use crate::lex::LexTable;
use crate::model::{Model, PrecomputedEmbeddings, BOS_ID, EOS_ID, UNK_ID};
use crate::quant::DEFAULT_FRAC_BITS_A;
use crate::tensor::{log_softmax_row_in_place, Tensor};
use std::time::Instant;

/// A partial or complete translation.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub token_ids: Vec<u32>,
    /// Sum of per-step candidate log-probabilities; never positive.
    pub logscore: f32,
    /// Row of the previous step's state matrix this hypothesis extends.
    pub state_ref: usize,
    /// One attention row per emitted token.
    pub alpha_history: Vec<Vec<f32>>,
    pub complete: bool,
}

/// Decoding parameters.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Early-stopping margin; `f32::INFINITY` disables early stopping.
    pub delta: f32,
    /// Hypotheses are capped at `max_len_factor * |S| + max_len_extra`
    /// emitted tokens (sentence-end included).
    pub max_len_factor: f32,
    pub max_len_extra: usize,
    pub nbest: usize,
    pub flags: StepFlags,
    /// Lexical-table truncation used when loading shortlists.
    pub cand_per_word: usize,
    /// Fractional bits for activation quantization on the 16-bit path.
    pub frac_bits_a: u8,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 6,
            delta: 3.0,
            max_len_factor: 2.0,
            max_len_extra: 5,
            nbest: 1,
            flags: StepFlags::default(),
            cand_per_word: crate::lex::DEFAULT_TOP_N,
            frac_bits_a: DEFAULT_FRAC_BITS_A,
        }
    }
}

impl DecodeConfig {
    pub fn max_target_len(&self, src_len: usize) -> usize {
        (self.max_len_factor * src_len as f32) as usize + self.max_len_extra
    }
}

/// One returned translation.
#[derive(Debug, Clone)]
pub struct NBestEntry {
    /// Emitted tokens; ends with the sentence-end id when `complete`.
    pub token_ids: Vec<u32>,
    pub logscore: f32,
    /// One attention row per emitted token.
    pub alpha: Vec<Vec<f32>>,
    /// False only for the fallback case where nothing completed in budget.
    pub complete: bool,
}

/// Wall-time and work counters for one decoding run.
#[derive(Debug, Clone, Default)]
pub struct DecodeStats {
    pub sentences: usize,
    /// Emitted target tokens, counting the sentence-end token once.
    pub emitted_tokens: usize,
    pub encode_nanos: u128,
    pub step_nanos: u128,
    pub output_nanos: u128,
    /// Recurrent states entering steps, before and after deduplication.
    pub total_states: usize,
    pub unique_states: usize,
}

impl DecodeStats {
    pub fn unique_state_ratio(&self) -> f64 {
        if self.total_states == 0 {
            1.0
        } else {
            self.unique_states as f64 / self.total_states as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Spec-level helper operations
// ---------------------------------------------------------------------------

/// Builds the per-sentence candidate id list: the union of the lexical
/// translations of every source word, plus the sentence-end and unk ids,
/// sorted ascending. An empty table falls back to the full vocabulary.
pub fn build_candidate_list(lex: &LexTable, src_ids: &[u32], trg_vocab_size: usize) -> Vec<u32> {
    if lex.is_empty() {
        return (0..trg_vocab_size as u32).collect();
    }
    let mut ids: Vec<u32> = vec![EOS_ID, UNK_ID];
    for &s in src_ids {
        if let Some(list) = lex.translations(s) {
            ids.extend(list.iter().map(|&(t, _)| t));
        }
    }
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Deduplicates parent links: returns the unique links in first-occurrence
/// order and, per hypothesis, the index of its unique entry. Identity is the
/// parent link itself, never a float comparison.
pub fn merge_states(parent_links: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut uniques: Vec<usize> = Vec::with_capacity(parent_links.len());
    let mut gather = Vec::with_capacity(parent_links.len());
    for &p in parent_links {
        match uniques.iter().position(|&u| u == p) {
            Some(at) => gather.push(at),
            None => {
                uniques.push(p);
                gather.push(uniques.len() - 1);
            }
        }
    }
    (uniques, gather)
}

/// Early-stopping rule: stop once a completed hypothesis exists and the best
/// partial is more than `delta` log-units worse than it.
pub fn should_stop(beam: &[Hypothesis], best_complete_logscore: Option<f32>, delta: f32) -> bool {
    let Some(best_complete) = best_complete_logscore else {
        return false;
    };
    match beam.first() {
        Some(best_partial) => best_partial.logscore < best_complete - delta,
        None => true,
    }
}

/// Arithmetic mean of per-model log-probabilities, re-normalized over the
/// candidate set. A single distribution passes through unchanged.
pub fn ensemble_combine(step_logprobs: &[Tensor]) -> Result<Tensor> {
    let first = step_logprobs
        .first()
        .ok_or_else(|| Error::shape("ensemble_combine", "no distributions".to_string()))?;
    if step_logprobs.len() == 1 {
        return Ok(first.clone());
    }
    if step_logprobs
        .iter()
        .any(|t| (t.rows(), t.cols()) != (first.rows(), first.cols()))
    {
        return Err(Error::shape("ensemble_combine", "mismatched shapes".to_string()));
    }
    let mut mean = first.clone();
    for t in &step_logprobs[1..] {
        mean.add_assign(t);
    }
    let inv = 1.0 / step_logprobs.len() as f32;
    for v in mean.data.iter_mut() {
        *v *= inv;
    }
    for row in 0..mean.rows() {
        log_softmax_row_in_place(mean.row_mut(row));
    }
    Ok(mean)
}

/// Replaces unk tokens using the attention argmax: the top lexical
/// translation of the aligned source word when one exists, otherwise the
/// source word copied verbatim. Other tokens map through the target vocab.
pub fn unk_replace(
    token_ids: &[u32],
    alpha_history: &[Vec<f32>],
    src_ids: &[u32],
    src_tokens: &[String],
    lex: &LexTable,
    vocab_trg: &[String],
) -> Vec<String> {
    debug_assert_eq!(token_ids.len(), alpha_history.len());
    token_ids
        .iter()
        .zip(alpha_history)
        .map(|(&tok, alpha)| {
            if tok != UNK_ID {
                return vocab_trg[tok as usize].clone();
            }
            // Ties resolve to the first (lowest) source position.
            let mut best = 0usize;
            let mut best_w = f32::NEG_INFINITY;
            for (j, &w) in alpha.iter().enumerate() {
                if w > best_w {
                    best_w = w;
                    best = j;
                }
            }
            match lex.top_translation(src_ids[best]) {
                Some(t) => vocab_trg[t as usize].clone(),
                None => src_tokens[best].clone(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

/// Lexicographic comparison of `(prefix ++ [next])` sequences without
/// materializing them.
fn cmp_extension(
    a_prefix: &[u32],
    a_next: u32,
    b_prefix: &[u32],
    b_next: u32,
) -> std::cmp::Ordering {
    let a = a_prefix.iter().copied().chain(std::iter::once(a_next));
    let b = b_prefix.iter().copied().chain(std::iter::once(b_next));
    a.cmp(b)
}

struct ModelState<'a> {
    model: &'a Model,
    cache: SourceCache,
    shortlist: Shortlist,
    /// Recurrent states of the previous step, one row per then-beam entry.
    prev_h: Tensor,
    /// Top-GRU states, when that layer is recurrent.
    prev_top: Option<Tensor>,
}

/// Shared decoding resources: models, per-model precomputed tables, the
/// lexical table, and the configuration.
pub struct DecodeSession<'a> {
    models: Vec<&'a Model>,
    preemb: Vec<PrecomputedEmbeddings>,
    lex: &'a LexTable,
    config: DecodeConfig,
}

impl<'a> DecodeSession<'a> {
    /// Validates the ensemble and builds the precomputed embedding tables
    /// (covering `precompute_k` words) when that speedup is enabled.
    pub fn new(
        models: Vec<&'a Model>,
        lex: &'a LexTable,
        config: DecodeConfig,
        precompute_k: usize,
    ) -> Result<Self> {
        let first = *models
            .first()
            .ok_or_else(|| Error::Input("no models given".to_string()))?;
        for m in &models[1..] {
            if m.vocab_trg != first.vocab_trg || m.vocab_src != first.vocab_src {
                return Err(Error::Input(
                    "ensemble models must share source and target vocabularies".to_string(),
                ));
            }
        }
        if config.beam_size == 0 {
            return Err(Error::Input("beam size must be >= 1".to_string()));
        }
        if !(config.delta > 0.0) {
            return Err(Error::Input("delta must be positive (or infinite)".to_string()));
        }
        if config.flags.use_quant16 && models.iter().any(|m| !m.has_quant_twins()) {
            return Err(Error::Input(
                "quant16 requested but the model has no quantized twins".to_string(),
            ));
        }
        let preemb = if config.flags.use_precomputed_embeddings {
            models
                .iter()
                .map(|m| PrecomputedEmbeddings::build(m, precompute_k))
                .collect::<Result<_>>()?
        } else {
            models.iter().map(|_| PrecomputedEmbeddings::empty()).collect()
        };
        Ok(DecodeSession { models, preemb, lex, config })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        self.models[0]
    }

    fn opts(&self, model_idx: usize) -> ComputeOpts<'_> {
        let mut opts = ComputeOpts::new(self.config.flags);
        opts.frac_bits_a = self.config.frac_bits_a;
        opts.preemb = Some(&self.preemb[model_idx]);
        opts
    }

    /// Decodes one sentence, returning the n-best list.
    pub fn decode(
        &self,
        src_ids: &[u32],
        mut stats: Option<&mut DecodeStats>,
    ) -> Result<Vec<NBestEntry>> {
        if src_ids.is_empty() {
            return Err(Error::Input("empty source sentence".to_string()));
        }
        let vocab = self.models[0].spec.trg_vocab_size;
        let candidate_ids = build_candidate_list(self.lex, src_ids, vocab);

        let t_encode = Instant::now();
        let mut per_model: Vec<ModelState> = Vec::with_capacity(self.models.len());
        for (i, &model) in self.models.iter().enumerate() {
            let opts = self.opts(i);
            let cache = encode_source(model, src_ids, &opts)?;
            let shortlist = Shortlist::build(model, candidate_ids.clone())?;
            let r = model.spec.trg_hidden;
            per_model.push(ModelState {
                model,
                cache,
                shortlist,
                prev_h: Tensor::zeros(1, r),
                prev_top: model.top_gru.is_some().then(|| Tensor::zeros(1, r)),
            });
        }
        let encode_nanos = t_encode.elapsed().as_nanos();

        let max_len = self.config.max_target_len(src_ids.len());
        let mut beam: Vec<Hypothesis> = vec![Hypothesis {
            token_ids: Vec::new(),
            logscore: 0.0,
            state_ref: 0,
            alpha_history: Vec::new(),
            complete: false,
        }];
        let mut pool: Vec<NBestEntry> = Vec::new();
        let mut step_nanos = 0u128;
        let mut output_nanos = 0u128;
        let mut total_states = 0usize;
        let mut unique_states = 0usize;

        while !beam.is_empty() {
            let b = beam.len();
            let parent_links: Vec<usize> = beam.iter().map(|h| h.state_ref).collect();
            let prev_tokens: Vec<u32> = beam
                .iter()
                .map(|h| h.token_ids.last().copied().unwrap_or(BOS_ID))
                .collect();

            let (uniques, gather) = merge_states(&parent_links);
            total_states += b;
            unique_states += uniques.len();

            let t_step = Instant::now();
            let mut logits_all: Vec<Tensor> = Vec::with_capacity(per_model.len());
            let mut alpha_all: Vec<Tensor> = Vec::with_capacity(per_model.len());
            let mut new_h: Vec<Tensor> = Vec::with_capacity(per_model.len());
            let mut new_top: Vec<Option<Tensor>> = Vec::with_capacity(per_model.len());
            let mut this_output_nanos = 0u128;
            for (i, ms) in per_model.iter().enumerate() {
                let opts = self.opts(i);
                let states = if self.config.flags.merge_recurrent {
                    StateBatch {
                        unique: ms.prev_h.gather_rows(&uniques),
                        gather: gather.clone(),
                    }
                } else {
                    StateBatch::dense(ms.prev_h.gather_rows(&parent_links))
                };
                let (h, alpha) =
                    att_gru_step(ms.model, &states, &prev_tokens, &ms.cache, &opts)?;
                let top_prev = ms
                    .prev_top
                    .as_ref()
                    .map(|t| t.gather_rows(&parent_links));
                let h_top = fc_stack_apply(ms.model, &h, top_prev.as_ref(), &opts)?;
                let t_out = Instant::now();
                let logits = output_logits(ms.model, &h_top, &ms.shortlist, &opts);
                this_output_nanos += t_out.elapsed().as_nanos();
                logits_all.push(logits);
                alpha_all.push(alpha);
                new_top.push(ms.prev_top.as_ref().map(|_| h_top.clone()));
                new_h.push(h);
            }
            let combined = ensemble_combine(&logits_all)?;
            let alpha_mean = mean_alpha(&alpha_all);
            let elapsed = t_step.elapsed().as_nanos();
            step_nanos += elapsed - this_output_nanos.min(elapsed);
            output_nanos += this_output_nanos;

            // Enumerate extensions and keep the global top beam_size.
            let cand_ids = per_model[0].shortlist.ids();
            let mut exts: Vec<(f32, usize, u32)> = Vec::with_capacity(b * cand_ids.len());
            for (i, hyp) in beam.iter().enumerate() {
                let row = combined.row(i);
                let new_len = hyp.token_ids.len() + 1;
                for (j, &cand) in cand_ids.iter().enumerate() {
                    // Length budget: only sentence-end may land exactly on it.
                    if new_len >= max_len && cand != EOS_ID {
                        continue;
                    }
                    exts.push((hyp.logscore + row[j], i, cand));
                }
            }
            // Partition the top beam_size extensions first (O(b*C)), then
            // order just those; the comparator is a total order, so this
            // yields exactly the same prefix as a full sort.
            let cmp = |a: &(f32, usize, u32), b: &(f32, usize, u32)| {
                b.0.total_cmp(&a.0).then_with(|| {
                    cmp_extension(&beam[a.1].token_ids, a.2, &beam[b.1].token_ids, b.2)
                })
            };
            if exts.len() > self.config.beam_size {
                exts.select_nth_unstable_by(self.config.beam_size - 1, cmp);
                exts.truncate(self.config.beam_size);
            }
            exts.sort_unstable_by(cmp);

            let mut next_beam: Vec<Hypothesis> = Vec::with_capacity(self.config.beam_size);
            for &(score, i, cand) in &exts {
                let parent = &beam[i];
                let mut tokens = parent.token_ids.clone();
                tokens.push(cand);
                let mut alphas = parent.alpha_history.clone();
                alphas.push(alpha_mean.row(i).to_vec());
                if cand == EOS_ID {
                    pool.push(NBestEntry {
                        token_ids: tokens,
                        logscore: score,
                        alpha: alphas,
                        complete: true,
                    });
                } else {
                    next_beam.push(Hypothesis {
                        token_ids: tokens,
                        logscore: score,
                        state_ref: i,
                        alpha_history: alphas,
                        complete: false,
                    });
                }
            }

            for (ms, h) in per_model.iter_mut().zip(new_h) {
                ms.prev_h = h;
            }
            for (ms, t) in per_model.iter_mut().zip(new_top) {
                ms.prev_top = t;
            }

            let best_complete = pool
                .iter()
                .map(|e| e.logscore)
                .fold(None, |m: Option<f32>, s| Some(m.map_or(s, |m| m.max(s))));
            if should_stop(&next_beam, best_complete, self.config.delta) {
                beam = next_beam;
                break;
            }
            beam = next_beam;
        }

        if let Some(stats) = stats.as_deref_mut() {
            stats.sentences += 1;
            stats.encode_nanos += encode_nanos;
            stats.step_nanos += step_nanos;
            stats.output_nanos += output_nanos;
            stats.total_states += total_states;
            stats.unique_states += unique_states;
        }

        // Rank the pool; fall back to partials when nothing completed.
        sort_entries(&mut pool);
        if pool.is_empty() {
            pool = beam
                .into_iter()
                .map(|h| NBestEntry {
                    token_ids: h.token_ids,
                    logscore: h.logscore,
                    alpha: h.alpha_history,
                    complete: false,
                })
                .collect();
            sort_entries(&mut pool);
        }
        pool.truncate(self.config.nbest.max(1));
        if let Some(stats) = stats {
            if let Some(best) = pool.first() {
                stats.emitted_tokens += best.token_ids.len();
            }
        }
        Ok(pool)
    }

    /// Replays a forced token sequence with beam width 1, returning the
    /// per-step log-probability rows over the shortlist. Used to compare
    /// per-step logits between two configurations on identical prefixes.
    pub fn replay_logits(&self, src_ids: &[u32], forced: &[u32]) -> Result<Vec<Vec<f32>>> {
        if src_ids.is_empty() {
            return Err(Error::Input("empty source sentence".to_string()));
        }
        let vocab = self.models[0].spec.trg_vocab_size;
        let candidate_ids = build_candidate_list(self.lex, src_ids, vocab);
        let mut per_model: Vec<ModelState> = Vec::with_capacity(self.models.len());
        for (i, &model) in self.models.iter().enumerate() {
            let opts = self.opts(i);
            let cache = encode_source(model, src_ids, &opts)?;
            let shortlist = Shortlist::build(model, candidate_ids.clone())?;
            let r = model.spec.trg_hidden;
            per_model.push(ModelState {
                model,
                cache,
                shortlist,
                prev_h: Tensor::zeros(1, r),
                prev_top: model.top_gru.is_some().then(|| Tensor::zeros(1, r)),
            });
        }
        let mut rows = Vec::with_capacity(forced.len());
        let mut prev_tok = BOS_ID;
        for &tok in forced {
            let mut logits_all = Vec::with_capacity(per_model.len());
            for (i, ms) in per_model.iter_mut().enumerate() {
                let opts = self.opts(i);
                let states = StateBatch::dense(ms.prev_h.clone());
                let DecoderStepOut { h, h_top, logits, .. } = crate::compute::decoder_full_step(
                    ms.model,
                    &states,
                    &[prev_tok],
                    &ms.cache,
                    &ms.shortlist,
                    ms.prev_top.as_ref(),
                    &opts,
                )?;
                ms.prev_h = h;
                if ms.prev_top.is_some() {
                    ms.prev_top = Some(h_top);
                }
                logits_all.push(logits);
            }
            let combined = ensemble_combine(&logits_all)?;
            rows.push(combined.row(0).to_vec());
            prev_tok = tok;
        }
        Ok(rows)
    }
}

fn mean_alpha(alphas: &[Tensor]) -> Tensor {
    if alphas.len() == 1 {
        return alphas[0].clone();
    }
    let mut mean = alphas[0].clone();
    for a in &alphas[1..] {
        mean.add_assign(a);
    }
    let inv = 1.0 / alphas.len() as f32;
    for v in mean.data.iter_mut() {
        *v *= inv;
    }
    mean
}

fn sort_entries(entries: &mut [NBestEntry]) {
    entries.sort_by(|a, b| {
        b.logscore
            .total_cmp(&a.logscore)
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
}

/// Beam search over one or more models sharing a vocabulary. Convenience
/// wrapper building a one-shot session.
pub fn beam_search(
    models: &[&Model],
    src_ids: &[u32],
    lex: &LexTable,
    config: &DecodeConfig,
    precompute_k: usize,
) -> Result<Vec<NBestEntry>> {
    let session = DecodeSession::new(models.to_vec(), lex, config.clone(), precompute_k)?;
    session.decode(src_ids, None)
}
