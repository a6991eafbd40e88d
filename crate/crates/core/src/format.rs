//! Binary model file format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "NMTD" | version u32 = 1 | tensor count u32
//! per tensor:
//!   name length u16 | name UTF-8
//!   tag u8 (0 = float32, 1 = quant16)
//!   ndim u8 | dims u32[ndim]
//!   payload:
//!     tag 0: f32 row-major
//!     tag 1: frac_bits u8 | layout_tag u32 | i16 payload in packed layout
//!             (row-major with the inner dim zero-padded to the block width
//!              encoded in layout_tag)
//! footer: two vocab blocks (source, then target), each:
//!   count u32 | per token: length u16 | UTF-8 bytes
//! ```
//!
//! Tensors are written in a fixed canonical order and a model always
//! serializes to the same bytes, so files are diffable and cacheable.
//! Quantized twins follow their float tensor under the name `<name>.q`.

use crate::error::{Error, Result};
use crate::model::{
    AttentionWeights, GruWeights, Model, ModelSpec, TopLayer, Weight,
};
use crate::quant::QuantMatrix;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NMTD";
const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
    tensor_count: u32,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new(), tensor_count: 0 }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn float_tensor(&mut self, name: &str, t: &Tensor, ndim: u8) {
        self.tensor_count += 1;
        self.name(name);
        self.u8(0);
        self.u8(ndim);
        if ndim == 1 {
            self.u32((t.rows() * t.cols()) as u32);
        } else {
            self.u32(t.rows() as u32);
            self.u32(t.cols() as u32);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn quant_tensor(&mut self, name: &str, q: &QuantMatrix) {
        self.tensor_count += 1;
        self.name(&format!("{name}.q"));
        self.u8(1);
        self.u8(2);
        self.u32(q.rows() as u32);
        self.u32(q.cols() as u32);
        self.u8(q.frac_bits());
        self.u32(q.layout_tag());
        for v in q.packed() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn weight(&mut self, name: &str, w: &Weight) {
        self.float_tensor(name, &w.float, 2);
        if let Some(q) = &w.quant {
            self.quant_tensor(name, q);
        }
    }

    fn gru(&mut self, prefix: &str, g: &GruWeights) {
        self.weight(&format!("{prefix}.w_u"), &g.w_u);
        self.weight(&format!("{prefix}.w_r"), &g.w_r);
        self.weight(&format!("{prefix}.w_h"), &g.w_h);
        self.weight(&format!("{prefix}.v_u"), &g.v_u);
        self.weight(&format!("{prefix}.v_r"), &g.v_r);
        self.weight(&format!("{prefix}.v_h"), &g.v_h);
        for (n, u) in [("u_u", &g.u_u), ("u_r", &g.u_r), ("u_h", &g.u_h)] {
            if let Some(w) = u {
                self.weight(&format!("{prefix}.{n}"), w);
            }
        }
        self.float_tensor(&format!("{prefix}.b_u"), &g.b_u, 1);
        self.float_tensor(&format!("{prefix}.b_r"), &g.b_r, 1);
        self.float_tensor(&format!("{prefix}.b_h"), &g.b_h, 1);
    }

    fn vocab(&mut self, tokens: &[String]) {
        self.u32(tokens.len() as u32);
        for t in tokens {
            self.u16(t.len() as u16);
            self.buf.extend_from_slice(t.as_bytes());
        }
    }
}

/// Serializes `model` to its deterministic byte representation.
pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.float_tensor("src_emb", &model.src_embeddings, 2);
    w.float_tensor("trg_emb", &model.trg_embeddings, 2);
    for (l, g) in model.src_fwd.iter().enumerate() {
        w.gru(&format!("src.fwd.{l}"), g);
    }
    for (l, g) in model.src_bwd.iter().enumerate() {
        w.gru(&format!("src.bwd.{l}"), g);
    }
    w.gru("trg", &model.trg_gru);
    w.weight("att.w_a", &model.attention.w_a);
    w.weight("att.v_a", &model.attention.v_a);
    w.weight("att.u_a", &model.attention.u_a);
    for (l, fw) in model.fc.iter().enumerate() {
        w.weight(&format!("fc.w{}", l + 1), fw);
    }
    if let Some(t) = &model.w_top {
        w.weight("top.w_t", t);
    }
    if let Some(g) = &model.top_gru {
        w.gru("top.gru", g);
    }
    w.weight("out.v", &model.output);

    let mut out = Vec::with_capacity(w.buf.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&w.tensor_count.to_le_bytes());
    out.extend_from_slice(&w.buf);

    let mut tail = Writer::new();
    tail.vocab(&model.vocab_src);
    tail.vocab(&model.vocab_trg);
    out.extend_from_slice(&tail.buf);
    out
}

/// Writes the model file. Same model, same bytes.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Name of the tensor currently being read, for error messages.
    context: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0, context: "header".to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "file truncated while reading {} (need {} bytes at offset {}, file has {})",
                self.context,
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i16_vec(&mut self, n: usize) -> Result<Vec<i16>> {
        let raw = self.take(n * 2)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[derive(Debug)]
enum Record {
    Float(Tensor),
    Quant(QuantMatrix),
}

/// Pads `cols` to the block width encoded in a layout tag (low 16 bits).
fn padded_cols(cols: usize, layout_tag: u32) -> usize {
    let block = (layout_tag & 0xffff) as usize;
    if block == 0 {
        cols
    } else {
        cols.div_ceil(block) * block
    }
}

fn read_records(r: &mut Reader, count: u32) -> Result<BTreeMap<String, Record>> {
    let mut records = BTreeMap::new();
    for _ in 0..count {
        r.context = "tensor name".to_string();
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?
            .to_string();
        r.context = format!("tensor '{name}'");
        let tag = r.u8()?;
        let ndim = r.u8()? as usize;
        if !(1..=2).contains(&ndim) {
            return Err(Error::Format(format!("tensor '{name}' has ndim {ndim}")));
        }
        let mut dims = [1usize; 2];
        for d in dims.iter_mut().take(ndim) {
            *d = r.u32()? as usize;
        }
        let (rows, cols) = if ndim == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let record = match tag {
            0 => Record::Float(Tensor::new(rows, cols, r.f32_vec(rows * cols)?)?),
            1 => {
                let frac_bits = r.u8()?;
                let layout_tag = r.u32()?;
                let payload = r.i16_vec(rows * padded_cols(cols, layout_tag))?;
                Record::Quant(QuantMatrix::from_packed(rows, cols, frac_bits, layout_tag, payload)?)
            }
            t => return Err(Error::Format(format!("tensor '{name}' has unknown tag {t}"))),
        };
        if records.insert(name.clone(), record).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(records)
}

fn read_vocab(r: &mut Reader, which: &str) -> Result<Vec<String>> {
    r.context = format!("{which} vocab");
    let count = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let tok = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format(format!("{which} vocab token is not UTF-8")))?;
        tokens.push(tok.to_string());
    }
    Ok(tokens)
}

struct Assembler {
    records: BTreeMap<String, Record>,
}

impl Assembler {
    fn float(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        match self.records.remove(name) {
            Some(Record::Float(t)) => {
                if (t.rows(), t.cols()) != (rows, cols) {
                    return Err(Error::Validation(format!(
                        "tensor '{name}' has shape {}x{}, expected {rows}x{cols}",
                        t.rows(),
                        t.cols()
                    )));
                }
                Ok(t)
            }
            Some(Record::Quant(_)) => {
                Err(Error::Validation(format!("tensor '{name}' should be float32")))
            }
            None => Err(Error::Validation(format!("missing tensor '{name}'"))),
        }
    }

    fn bias(&mut self, name: &str, dim: usize) -> Result<Tensor> {
        self.float(name, 1, dim)
    }

    /// Reads a weight and, if present, its quantized twin `<name>.q`.
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<Weight> {
        let float = self.float(name, rows, cols)?;
        let quant = match self.records.remove(&format!("{name}.q")) {
            Some(Record::Quant(q)) => {
                // Twins are packed transposed: one output unit per row.
                let (qr, qc) = (q.rows(), q.cols());
                let expected = if name == "out.v" { (rows, cols) } else { (cols, rows) };
                if (qr, qc) != expected {
                    return Err(Error::Validation(format!(
                        "tensor '{name}.q' has shape {qr}x{qc}, expected {}x{}",
                        expected.0, expected.1
                    )));
                }
                Some(q)
            }
            Some(Record::Float(_)) => {
                return Err(Error::Validation(format!("tensor '{name}.q' should be quant16")))
            }
            None => None,
        };
        Ok(Weight { float, quant })
    }

    fn gru(
        &mut self,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        ctx_dim: Option<usize>,
    ) -> Result<GruWeights> {
        Ok(GruWeights {
            w_u: self.weight(&format!("{prefix}.w_u"), hidden, hidden)?,
            w_r: self.weight(&format!("{prefix}.w_r"), hidden, hidden)?,
            w_h: self.weight(&format!("{prefix}.w_h"), hidden, hidden)?,
            v_u: self.weight(&format!("{prefix}.v_u"), input_dim, hidden)?,
            v_r: self.weight(&format!("{prefix}.v_r"), input_dim, hidden)?,
            v_h: self.weight(&format!("{prefix}.v_h"), input_dim, hidden)?,
            u_u: ctx_dim
                .map(|d| self.weight(&format!("{prefix}.u_u"), d, hidden))
                .transpose()?,
            u_r: ctx_dim
                .map(|d| self.weight(&format!("{prefix}.u_r"), d, hidden))
                .transpose()?,
            u_h: ctx_dim
                .map(|d| self.weight(&format!("{prefix}.u_h"), d, hidden))
                .transpose()?,
            b_u: self.bias(&format!("{prefix}.b_u"), hidden)?,
            b_r: self.bias(&format!("{prefix}.b_r"), hidden)?,
            b_h: self.bias(&format!("{prefix}.b_h"), hidden)?,
        })
    }
}

/// Parses a model from bytes, reconstructing the structural spec from tensor
/// names and shapes and cross-checking every tensor against it.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, not a model file",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let records = read_records(&mut r, count)?;
    let vocab_src = read_vocab(&mut r, "source")?;
    let vocab_trg = read_vocab(&mut r, "target")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after vocab blocks",
            bytes.len() - r.pos
        )));
    }

    // Recover the structural spec from shapes before validating everything.
    let mut asm = Assembler { records };
    let probe = |records: &BTreeMap<String, Record>, name: &str| -> Result<(usize, usize)> {
        match records.get(name) {
            Some(Record::Float(t)) => Ok((t.rows(), t.cols())),
            _ => Err(Error::Validation(format!("missing tensor '{name}'"))),
        }
    };
    let (src_vocab_size, embed_dim) = probe(&asm.records, "src_emb")?;
    let (trg_vocab_size, _) = probe(&asm.records, "trg_emb")?;
    let src_layers = (0..)
        .take_while(|l| asm.records.contains_key(&format!("src.fwd.{l}.w_u")))
        .count();
    if src_layers == 0 {
        return Err(Error::Validation("missing tensor 'src.fwd.0.w_u'".to_string()));
    }
    let (hd, _) = probe(&asm.records, "src.fwd.0.w_u")?;
    let (trg_hidden, _) = probe(&asm.records, "trg.w_u")?;
    let fc_layers = (1..)
        .take_while(|l| asm.records.contains_key(&format!("fc.w{l}")))
        .count();
    let fc_dim = if fc_layers > 0 {
        probe(&asm.records, "fc.w1")?.1
    } else {
        trg_hidden
    };
    let top_layer = if asm.records.contains_key("top.w_t") {
        TopLayer::FcTanh
    } else if asm.records.contains_key("top.gru.w_u") {
        TopLayer::Gru
    } else {
        return Err(Error::Validation("missing tensor 'top.w_t' or 'top.gru.w_u'".to_string()));
    };

    let spec = ModelSpec {
        src_vocab_size,
        trg_vocab_size,
        embed_dim,
        src_layers,
        src_hidden: hd * 2,
        trg_hidden,
        fc_layers,
        fc_dim,
        top_layer,
        precompute_k: 0,
    };
    spec.validate()?;

    let e = spec.embed_dim;
    let r_dim = spec.trg_hidden;
    let sh = spec.src_hidden;

    let src_embeddings = asm.float("src_emb", src_vocab_size, e)?;
    let trg_embeddings = asm.float("trg_emb", trg_vocab_size, e)?;
    let mut src_fwd = Vec::with_capacity(src_layers);
    let mut src_bwd = Vec::with_capacity(src_layers);
    for l in 0..src_layers {
        let input_dim = if l == 0 { e } else { sh };
        src_fwd.push(asm.gru(&format!("src.fwd.{l}"), input_dim, hd, None)?);
        src_bwd.push(asm.gru(&format!("src.bwd.{l}"), input_dim, hd, None)?);
    }
    let trg_gru = asm.gru("trg", e, r_dim, Some(sh))?;
    let attention = AttentionWeights {
        w_a: asm.weight("att.w_a", r_dim, r_dim)?,
        v_a: asm.weight("att.v_a", e, r_dim)?,
        u_a: asm.weight("att.u_a", sh, r_dim)?,
    };
    let mut fc = Vec::with_capacity(fc_layers);
    for l in 1..=fc_layers {
        let input_dim = if l == 1 { r_dim } else { spec.fc_dim };
        fc.push(asm.weight(&format!("fc.w{l}"), input_dim, spec.fc_dim)?);
    }
    let top_in = spec.top_input_dim();
    let (w_top, top_gru) = match top_layer {
        TopLayer::FcTanh => (Some(asm.weight("top.w_t", top_in, r_dim)?), None),
        TopLayer::Gru => (None, Some(asm.gru("top.gru", top_in, r_dim, None)?)),
    };
    let output = asm.weight("out.v", trg_vocab_size, r_dim)?;

    if let Some(name) = asm.records.keys().next() {
        return Err(Error::Validation(format!("unexpected tensor '{name}'")));
    }
    if vocab_src.len() != src_vocab_size || vocab_trg.len() != trg_vocab_size {
        return Err(Error::Validation(format!(
            "vocab sizes {}/{} do not match embeddings {}/{}",
            vocab_src.len(),
            vocab_trg.len(),
            src_vocab_size,
            trg_vocab_size
        )));
    }

    Ok(Model {
        spec,
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
        vocab_src,
        vocab_trg,
    })
}

/// Loads and fully validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = std::fs::read(path.as_ref())?;
    model_from_bytes(&bytes)
}

/// Reads a vocabulary text file: one token per line, the line number is the
/// token id.
pub fn load_vocab_text(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_random_model;

    fn spec() -> ModelSpec {
        ModelSpec {
            src_vocab_size: 12,
            trg_vocab_size: 15,
            embed_dim: 6,
            src_layers: 2,
            src_hidden: 8,
            trg_hidden: 10,
            fc_layers: 3,
            fc_dim: 9,
            top_layer: TopLayer::FcTanh,
            precompute_k: 0,
        }
    }

    #[test]
    fn roundtrip_bitwise_identity() {
        let model = generate_random_model(&spec(), 42).unwrap();
        let bytes = model_to_bytes(&model);
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, loaded);
        // Deterministic serialization.
        assert_eq!(bytes, model_to_bytes(&loaded));
    }

    #[test]
    fn roundtrip_with_quant_twins() {
        let mut model = generate_random_model(&spec(), 43).unwrap();
        model.attach_quant_twins(10);
        let bytes = model_to_bytes(&model);
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(model, loaded);
        assert!(loaded.trg_gru.w_u.quant.is_some());
        assert!(loaded.output.quant.is_some());
    }

    #[test]
    fn gru_top_roundtrip() {
        let mut s = spec();
        s.top_layer = TopLayer::Gru;
        let model = generate_random_model(&s, 44).unwrap();
        let loaded = model_from_bytes(&model_to_bytes(&model)).unwrap();
        assert_eq!(model, loaded);
        assert!(loaded.top_gru.is_some());
        assert!(loaded.w_top.is_none());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let model = generate_random_model(&spec(), 1).unwrap();
        let mut bytes = model_to_bytes(&model);
        bytes[..4].copy_from_slice(b"XXXX");
        match model_from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_names_the_tensor() {
        let model = generate_random_model(&spec(), 2).unwrap();
        let bytes = model_to_bytes(&model);
        // Cut the file in the middle of the first source-layer tensor.
        let cut = 4 + 4 + 4 // header
            + (2 + 7 + 1 + 1 + 8 + 12 * 6 * 4) // src_emb record
            + (2 + 7 + 1 + 1 + 8 + 15 * 6 * 4) // trg_emb record
            + 20; // partway into src.fwd.0.w_u
        match model_from_bytes(&bytes[..cut]) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("src.fwd.0.w_u"), "message was: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        // Corrupt fc.w3's column count so the skip-pattern dims disagree.
        let model = generate_random_model(&spec(), 3).unwrap();
        let mut bytes = model_to_bytes(&model);
        let needle = b"fc.w3";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        // name | tag u8 | ndim u8 | rows u32 | cols u32
        let cols_off = at + needle.len() + 1 + 1 + 4;
        bytes[cols_off..cols_off + 4].copy_from_slice(&100u32.to_le_bytes());
        match model_from_bytes(&bytes) {
            Err(Error::Format(_)) => {} // payload length no longer matches
            Err(Error::Validation(msg)) => assert!(msg.contains("fc.w3")),
            other => panic!("expected error, got {other:?}"),
        }
    }

    #[test]
    fn s4_shaped_model_has_all_fc_tensors() {
        // The 7-layer FC configuration, scaled down.
        let s = ModelSpec {
            src_vocab_size: 30,
            trg_vocab_size: 30,
            embed_dim: 8,
            src_layers: 3,
            src_hidden: 16,
            trg_hidden: 24,
            fc_layers: 7,
            fc_dim: 20,
            top_layer: TopLayer::FcTanh,
            precompute_k: 0,
        };
        let model = generate_random_model(&s, 9).unwrap();
        let loaded = model_from_bytes(&model_to_bytes(&model)).unwrap();
        assert_eq!(loaded.fc.len(), 7);
        assert_eq!(loaded.spec, s);
    }

    #[test]
    fn vocab_text_form() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        std::fs::write(&p, "<s>\n</s>\n<unk>\nhello\nworld\n").unwrap();
        let v = load_vocab_text(&p).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v[3], "hello");
    }
}
