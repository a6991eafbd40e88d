//! Command-line surface: `decode`, `bench`, `verify`, and `gen-model`.
//!
//! Exit codes: 0 success, 1 usage/input error, 2 model/format error,
//! 3 verify threshold failure. Reports are line-oriented `key=value` text
//! followed by a single machine-readable `json=` line.

use crate::decoder::{unk_replace, DecodeConfig, DecodeSession, DecodeStats, NBestEntry};
use crate::error::{Error, Result};
use crate::format::{load_model, load_vocab_text, save_model};
use crate::lex::{load_lex_table, LexTable};
use crate::model::{generate_random_model_in_range, Model, ModelSpec, EOS_ID};
use crate::compute::StepFlags;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "nmtd", version, about = "CPU beam-search decoder for attentional seq2seq models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Translate a tokenized text file.
    Decode(DecodeArgs),
    /// Measure single-threaded decoding throughput.
    Bench(BenchArgs),
    /// Compare decoder output between two flag configurations.
    Verify(VerifyArgs),
    /// Generate a seeded random model file from a structural spec.
    GenModel(GenModelArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Beam size.
    #[arg(long, default_value_t = 6)]
    beam: usize,
    /// Early-stopping margin in log-units; "inf" disables early stopping.
    #[arg(long, default_value_t = 3.0)]
    delta: f32,
    /// Lexical translation table (TSV). Without it the full vocabulary is
    /// scored and unk replacement copies source words.
    #[arg(long)]
    lex: Option<PathBuf>,
    /// Translations kept per source word when loading the lexical table.
    #[arg(long = "cand-per-word", default_value_t = 20)]
    cand_per_word: usize,
    /// Number of hypotheses to emit per sentence.
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Speedup toggles: "all", "none", or a comma list of
    /// quant16,preemb,preatt,lut,merge.
    #[arg(long, default_value = "none")]
    opts: String,
    /// Words covered by the precomputed embedding table (when preemb is on).
    #[arg(long = "precompute-k", default_value_t = 8000)]
    precompute_k: usize,
    /// Additional ensemble model files (repeatable).
    #[arg(long)]
    ensemble: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input file: one tokenized sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output file: one translation per line.
    #[arg(long)]
    output: PathBuf,
    /// Decode sentences on this many threads (one sentence per thread;
    /// output order is preserved).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    input: PathBuf,
    /// Whole-corpus repetitions inside the timed window.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Also run the cumulative flag ladder
    /// (none, +quant16, +preemb, +preatt, +lut, +merge).
    #[arg(long, default_value_t = false)]
    ladder: bool,
    /// Write the report here as well as stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    input: PathBuf,
    /// Required token-identical fraction; defaults to 0.999, or 0.99 when
    /// quant16 is among the flags.
    #[arg(long = "min-identical")]
    min_identical: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenModelArgs {
    /// TOML file with the structural spec fields.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Embed quantized twins: "frac_bits_w,frac_bits_a"
    /// (weights 8..=14, activations 8..=11).
    #[arg(long)]
    quantize: Option<String>,
    /// Uniform weight range, in (0, 1]. Small ranges give diffuse output
    /// distributions; larger ranges saturate the recurrent gates and give
    /// peaked, trained-model-like outputs.
    #[arg(long = "init-range", default_value_t = 0.1)]
    init_range: f32,
    /// Replace the synthetic source vocabulary (one token per line,
    /// line number = id).
    #[arg(long = "vocab-src")]
    vocab_src: Option<PathBuf>,
    #[arg(long = "vocab-trg")]
    vocab_trg: Option<PathBuf>,
}

/// Parses an `--opts` value into flags.
pub fn parse_opts(s: &str) -> Result<StepFlags> {
    let mut flags = StepFlags::default();
    match s {
        "all" => flags = StepFlags::all_on(),
        "none" | "" => {}
        list => {
            for name in list.split(',') {
                match name.trim() {
                    "quant16" => flags.use_quant16 = true,
                    "preemb" => flags.use_precomputed_embeddings = true,
                    "preatt" => flags.use_precomputed_attention = true,
                    "lut" => flags.use_lut_activations = true,
                    "merge" => flags.merge_recurrent = true,
                    other => {
                        return Err(Error::Input(format!(
                            "unknown option '{other}' (expected quant16, preemb, preatt, lut, merge)"
                        )))
                    }
                }
            }
        }
    }
    Ok(flags)
}

fn flags_label(f: &StepFlags) -> String {
    let mut parts = Vec::new();
    if f.use_quant16 {
        parts.push("quant16");
    }
    if f.use_precomputed_embeddings {
        parts.push("preemb");
    }
    if f.use_precomputed_attention {
        parts.push("preatt");
    }
    if f.use_lut_activations {
        parts.push("lut");
    }
    if f.merge_recurrent {
        parts.push("merge");
    }
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join(",")
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Input(_) | Error::Parse { .. } => 1,
        Error::Io(_)
        | Error::Format(_)
        | Error::Validation(_)
        | Error::Shape { .. }
        | Error::Overflow(_) => 2,
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Decode(a) => cmd_decode(&a),
        Cmd::Bench(a) => cmd_bench(&a),
        Cmd::Verify(a) => cmd_verify(&a),
        Cmd::GenModel(a) => cmd_gen_model(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("nmtd: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared setup
// ---------------------------------------------------------------------------

struct Loaded {
    models: Vec<Model>,
    lex: LexTable,
    config: DecodeConfig,
    precompute_k: usize,
}

fn load_common(args: &CommonArgs) -> Result<Loaded> {
    let mut models = vec![load_model(&args.model)?];
    for p in &args.ensemble {
        models.push(load_model(p)?);
    }
    let lex = match &args.lex {
        Some(p) => {
            let lex = load_lex_table(p, args.cand_per_word, &models[0].vocab_src, &models[0].vocab_trg)?;
            if lex.skipped() > 0 {
                eprintln!("nmtd: lexical table: {} lines skipped (unknown words)", lex.skipped());
            }
            lex
        }
        None => LexTable::empty(),
    };
    let flags = parse_opts(&args.opts)?;
    let config = DecodeConfig {
        beam_size: args.beam,
        delta: args.delta,
        nbest: args.nbest,
        flags,
        cand_per_word: args.cand_per_word,
        ..Default::default()
    };
    Ok(Loaded { models, lex, config, precompute_k: args.precompute_k })
}

fn read_corpus(model: &Model, path: &Path) -> Result<Vec<(String, Vec<u32>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read input '{}': {e}", path.display())))?;
    let mut corpus = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ids = model.src_ids_for_line(line);
        if ids.is_empty() {
            return Err(Error::Input(format!("input line {} is empty", i + 1)));
        }
        corpus.push((line.to_string(), ids));
    }
    if corpus.is_empty() {
        return Err(Error::Input("input file has no sentences".to_string()));
    }
    Ok(corpus)
}

/// Formats one n-best entry as output tokens: the trailing sentence-end
/// token is dropped and unks are replaced through the attention alignment.
fn render_entry(
    entry: &NBestEntry,
    src_line: &str,
    src_ids: &[u32],
    lex: &LexTable,
    model: &Model,
) -> String {
    let mut tokens = entry.token_ids.as_slice();
    let mut alphas = entry.alpha.as_slice();
    if entry.complete && tokens.last() == Some(&EOS_ID) {
        tokens = &tokens[..tokens.len() - 1];
        alphas = &alphas[..alphas.len()];
    }
    let src_tokens: Vec<String> = src_line.split_whitespace().map(|s| s.to_string()).collect();
    let words = unk_replace(tokens, &alphas[..tokens.len()], src_ids, &src_tokens, lex, &model.vocab_trg);
    words.join(" ")
}

fn write_report(path: Option<&PathBuf>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(p) = path {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!("{}-{} {} ({} cpus)", std::env::consts::OS, std::env::consts::ARCH, cpu_model, cpus)
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

fn cmd_decode(args: &DecodeArgs) -> Result<i32> {
    let loaded = load_common(&args.common)?;
    let model_refs: Vec<&Model> = loaded.models.iter().collect();
    let session = DecodeSession::new(model_refs, &loaded.lex, loaded.config, loaded.precompute_k)?;
    let corpus = read_corpus(&loaded.models[0], &args.input)?;

    let nbest = session.config().nbest.max(1);
    let threads = args.threads.max(1).min(corpus.len());
    let mut blocks: Vec<Vec<String>> = vec![Vec::new(); corpus.len()];
    if threads <= 1 {
        for (i, (line, ids)) in corpus.iter().enumerate() {
            let entries = session.decode(ids, None)?;
            blocks[i] = format_entries(&entries, i, nbest, line, ids, &loaded.lex, &loaded.models[0]);
        }
    } else {
        let results: Vec<Result<Vec<String>>> = std::thread::scope(|scope| {
            let session = &session;
            let lex = &loaded.lex;
            let model = &loaded.models[0];
            let mut handles = Vec::new();
            for chunk_start in (0..corpus.len()).step_by(corpus.len().div_ceil(threads)) {
                let chunk_end = (chunk_start + corpus.len().div_ceil(threads)).min(corpus.len());
                let corpus = &corpus;
                handles.push(scope.spawn(move || {
                    (chunk_start..chunk_end)
                        .map(|i| {
                            let (line, ids) = &corpus[i];
                            session
                                .decode(ids, None)
                                .map(|entries| format_entries(&entries, i, nbest, line, ids, lex, model))
                        })
                        .collect::<Vec<_>>()
                }));
            }
            handles.into_iter().flat_map(|h| h.join().expect("decode thread")).collect()
        });
        for (i, r) in results.into_iter().enumerate() {
            blocks[i] = r?;
        }
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.output)?);
    for block in blocks {
        for line in block {
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(0)
}

fn format_entries(
    entries: &[NBestEntry],
    sentence_idx: usize,
    nbest: usize,
    src_line: &str,
    src_ids: &[u32],
    lex: &LexTable,
    model: &Model,
) -> Vec<String> {
    if nbest == 1 {
        let text = entries
            .first()
            .map(|e| render_entry(e, src_line, src_ids, lex, model))
            .unwrap_or_default();
        vec![text]
    } else {
        entries
            .iter()
            .map(|e| {
                format!(
                    "{} ||| {} ||| {:.6}",
                    sentence_idx,
                    render_entry(e, src_line, src_ids, lex, model),
                    e.logscore
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct BenchConfigReport {
    pub label: String,
    pub flags: String,
    pub words_per_sec: f64,
    pub speedup_vs_baseline: f64,
    pub sentences: usize,
    pub tokens: usize,
    pub encode_micros: u128,
    pub step_micros: u128,
    pub output_micros: u128,
    pub total_micros: u128,
    pub unique_state_ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub host: String,
    pub repeat: usize,
    pub configs: Vec<BenchConfigReport>,
}

fn bench_one(
    label: &str,
    models: &[&Model],
    lex: &LexTable,
    config: &DecodeConfig,
    precompute_k: usize,
    corpus: &[(String, Vec<u32>)],
    repeat: usize,
) -> Result<BenchConfigReport> {
    let session = DecodeSession::new(models.to_vec(), lex, config.clone(), precompute_k)?;
    // Warm-up pass: page-in, lookup-table construction, cache warming.
    // Excluded from timing.
    for (_, ids) in corpus {
        session.decode(ids, None)?;
    }
    let mut stats = DecodeStats::default();
    let t0 = Instant::now();
    for _ in 0..repeat {
        for (_, ids) in corpus {
            session.decode(ids, Some(&mut stats))?;
        }
    }
    let wall = t0.elapsed();
    let words_per_sec = stats.emitted_tokens as f64 / wall.as_secs_f64();
    Ok(BenchConfigReport {
        label: label.to_string(),
        flags: flags_label(&config.flags),
        words_per_sec,
        speedup_vs_baseline: 1.0,
        sentences: stats.sentences,
        tokens: stats.emitted_tokens,
        encode_micros: stats.encode_nanos / 1000,
        step_micros: stats.step_nanos / 1000,
        output_micros: stats.output_nanos / 1000,
        total_micros: wall.as_micros(),
        unique_state_ratio: stats.unique_state_ratio(),
    })
}

/// Cumulative flag ladder in the order the speedups stack.
pub fn ladder_flags() -> Vec<(&'static str, StepFlags)> {
    let mut f = StepFlags::default();
    let mut out = vec![("baseline", f)];
    f.use_quant16 = true;
    out.push(("+quant16", f));
    f.use_precomputed_embeddings = true;
    out.push(("+preemb", f));
    f.use_precomputed_attention = true;
    out.push(("+preatt", f));
    f.use_lut_activations = true;
    out.push(("+lut", f));
    f.merge_recurrent = true;
    out.push(("+merge", f));
    out
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let loaded = load_common(&args.common)?;
    let corpus = read_corpus(&loaded.models[0], &args.input)?;
    let model_refs: Vec<&Model> = loaded.models.iter().collect();
    let repeat = args.repeat.max(1);

    let runs: Vec<(String, StepFlags)> = if args.ladder {
        ladder_flags().into_iter().map(|(l, f)| (l.to_string(), f)).collect()
    } else {
        vec![(flags_label(&loaded.config.flags), loaded.config.flags)]
    };

    let mut report = BenchReport { host: host_descriptor(), repeat, configs: Vec::new() };
    for (label, flags) in runs {
        let config = DecodeConfig { flags, ..loaded.config.clone() };
        let one = bench_one(
            &label,
            &model_refs,
            &loaded.lex,
            &config,
            loaded.precompute_k,
            &corpus,
            repeat,
        )?;
        report.configs.push(one);
    }
    let baseline = report.configs[0].words_per_sec;
    for c in report.configs.iter_mut() {
        c.speedup_vs_baseline = c.words_per_sec / baseline;
    }

    let mut text = String::new();
    text.push_str(&format!("host={}\n", report.host));
    text.push_str(&format!("repeat={repeat}\n"));
    for c in &report.configs {
        text.push_str(&format!(
            "config={} flags={} words_per_sec={:.2} speedup={:.3} sentences={} tokens={} \
             encode_us={} step_us={} output_us={} total_us={} unique_ratio={:.3}\n",
            c.label,
            c.flags,
            c.words_per_sec,
            c.speedup_vs_baseline,
            c.sentences,
            c.tokens,
            c.encode_micros,
            c.step_micros,
            c.output_micros,
            c.total_micros,
            c.unique_state_ratio
        ));
    }
    text.push_str(&format!("json={}\n", serde_json::to_string(&report).expect("serializable")));
    write_report(args.report.as_ref(), &text)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct FlagAttribution {
    pub flag: String,
    pub identical_fraction: f64,
    pub max_logit_diff: f32,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub sentences: usize,
    pub identical_fraction: f64,
    pub max_logit_diff: f32,
    pub threshold: f64,
    pub flags: String,
    pub per_flag: Vec<FlagAttribution>,
}

/// Decodes the corpus under `reference` and `test` configs and measures the
/// fraction of identical best hypotheses plus the largest per-step logit
/// difference (test path replayed over the reference tokens).
fn paired_run(
    models: &[&Model],
    lex: &LexTable,
    reference: &DecodeConfig,
    test: &DecodeConfig,
    precompute_k: usize,
    corpus: &[(String, Vec<u32>)],
) -> Result<(f64, f32)> {
    let ref_session = DecodeSession::new(models.to_vec(), lex, reference.clone(), precompute_k)?;
    let test_session = DecodeSession::new(models.to_vec(), lex, test.clone(), precompute_k)?;
    let mut identical = 0usize;
    let mut max_diff = 0.0f32;
    for (_, ids) in corpus {
        let ref_out = ref_session.decode(ids, None)?;
        let test_out = test_session.decode(ids, None)?;
        let ref_best = ref_out.first().ok_or_else(|| Error::Input("no output".into()))?;
        let test_best = test_out.first().ok_or_else(|| Error::Input("no output".into()))?;
        if ref_best.token_ids == test_best.token_ids {
            identical += 1;
        }
        // Lockstep logit comparison over the reference token sequence.
        let ref_rows = ref_session.replay_logits(ids, &ref_best.token_ids)?;
        let test_rows = test_session.replay_logits(ids, &ref_best.token_ids)?;
        for (a, b) in ref_rows.iter().zip(&test_rows) {
            for (x, y) in a.iter().zip(b) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    Ok((identical as f64 / corpus.len() as f64, max_diff))
}

fn individual_flags(flags: &StepFlags) -> Vec<(&'static str, StepFlags)> {
    let mut out = Vec::new();
    let base = StepFlags::default();
    if flags.use_quant16 {
        out.push(("quant16", StepFlags { use_quant16: true, ..base }));
    }
    if flags.use_precomputed_embeddings {
        out.push(("preemb", StepFlags { use_precomputed_embeddings: true, ..base }));
    }
    if flags.use_precomputed_attention {
        out.push(("preatt", StepFlags { use_precomputed_attention: true, ..base }));
    }
    if flags.use_lut_activations {
        out.push(("lut", StepFlags { use_lut_activations: true, ..base }));
    }
    if flags.merge_recurrent {
        out.push(("merge", StepFlags { merge_recurrent: true, ..base }));
    }
    out
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let loaded = load_common(&args.common)?;
    let corpus = read_corpus(&loaded.models[0], &args.input)?;
    let model_refs: Vec<&Model> = loaded.models.iter().collect();

    let reference = DecodeConfig { flags: StepFlags::default(), ..loaded.config.clone() };
    let threshold = args
        .min_identical
        .unwrap_or(if loaded.config.flags.use_quant16 { 0.99 } else { 0.999 });

    let (fraction, max_diff) = paired_run(
        &model_refs,
        &loaded.lex,
        &reference,
        &loaded.config,
        loaded.precompute_k,
        &corpus,
    )?;

    let mut per_flag = Vec::new();
    for (name, flags) in individual_flags(&loaded.config.flags) {
        let test = DecodeConfig { flags, ..loaded.config.clone() };
        let (f, d) = paired_run(
            &model_refs,
            &loaded.lex,
            &reference,
            &test,
            loaded.precompute_k,
            &corpus,
        )?;
        per_flag.push(FlagAttribution {
            flag: name.to_string(),
            identical_fraction: f,
            max_logit_diff: d,
        });
    }

    let report = VerifyReport {
        sentences: corpus.len(),
        identical_fraction: fraction,
        max_logit_diff: max_diff,
        threshold,
        flags: flags_label(&loaded.config.flags),
        per_flag,
    };

    let mut text = String::new();
    text.push_str(&format!("sentences={}\n", report.sentences));
    text.push_str(&format!("flags={}\n", report.flags));
    text.push_str(&format!("identical_fraction={:.6}\n", report.identical_fraction));
    text.push_str(&format!("max_logit_diff={:.3e}\n", report.max_logit_diff));
    text.push_str(&format!("threshold={}\n", report.threshold));
    for f in &report.per_flag {
        text.push_str(&format!(
            "flag={} identical_fraction={:.6} max_logit_diff={:.3e}\n",
            f.flag, f.identical_fraction, f.max_logit_diff
        ));
    }
    text.push_str(&format!("json={}\n", serde_json::to_string(&report).expect("serializable")));
    write_report(args.report.as_ref(), &text)?;

    Ok(if fraction >= threshold { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// gen-model
// ---------------------------------------------------------------------------

fn cmd_gen_model(args: &GenModelArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| Error::Input(format!("cannot read spec '{}': {e}", args.spec.display())))?;
    let spec: ModelSpec = toml::from_str(&text)
        .map_err(|e| Error::Input(format!("invalid spec: {e}")))?;
    spec.validate().map_err(|e| Error::Input(e.to_string()))?;

    let mut model = generate_random_model_in_range(&spec, args.seed, args.init_range)
        .map_err(|e| Error::Input(e.to_string()))?;
    if let (Some(src), Some(trg)) = (&args.vocab_src, &args.vocab_trg) {
        let vs = load_vocab_text(src)?;
        let vt = load_vocab_text(trg)?;
        model.set_vocabs(vs, vt).map_err(|e| Error::Input(e.to_string()))?;
    } else if args.vocab_src.is_some() || args.vocab_trg.is_some() {
        return Err(Error::Input(
            "--vocab-src and --vocab-trg must be given together".to_string(),
        ));
    }

    if let Some(q) = &args.quantize {
        let (fw, fa) = q
            .split_once(',')
            .ok_or_else(|| Error::Input("--quantize expects 'frac_bits_w,frac_bits_a'".into()))?;
        let fw: u8 = fw
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("bad frac_bits_w '{fw}'")))?;
        let fa: u8 = fa
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("bad frac_bits_a '{fa}'")))?;
        if !(8..=14).contains(&fw) {
            return Err(Error::Input(format!("frac_bits_w {fw} outside 8..=14")));
        }
        if !(8..=11).contains(&fa) {
            return Err(Error::Input(format!("frac_bits_a {fa} outside 8..=11")));
        }
        model.attach_quant_twins(fw);
    }

    save_model(&model, &args.out)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opts_parsing() {
        assert_eq!(parse_opts("none").unwrap(), StepFlags::default());
        assert_eq!(parse_opts("all").unwrap(), StepFlags::all_on());
        let f = parse_opts("preatt,lut").unwrap();
        assert!(f.use_precomputed_attention && f.use_lut_activations);
        assert!(!f.use_quant16 && !f.merge_recurrent);
        assert!(parse_opts("bogus").is_err());
    }

    #[test]
    fn flags_roundtrip_label() {
        for s in ["none", "quant16,preemb", "preatt,lut,merge"] {
            let f = parse_opts(s).unwrap();
            assert_eq!(flags_label(&f), s);
        }
        assert_eq!(flags_label(&StepFlags::all_on()), "quant16,preemb,preatt,lut,merge");
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Input("x".into())), 1);
        assert_eq!(exit_code(&Error::Parse { line: 1, msg: "x".into() }), 1);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Validation("x".into())), 2);
    }

    #[test]
    fn ladder_is_cumulative() {
        let l = ladder_flags();
        assert_eq!(l.len(), 6);
        assert_eq!(l[0].1, StepFlags::default());
        assert_eq!(l[5].1, StepFlags::all_on());
        assert!(l[1].1.use_quant16 && !l[1].1.use_precomputed_embeddings);
    }
}
