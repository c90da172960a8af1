//! On-disk formats.
//!
//! Tensor file: an ASCII header line `L2S1 <kind> <dim>...\n` followed by
//! little-endian `f64` values in row-major order. Kinds and their dims:
//!
//! | kind     | dims        | payload                                   |
//! |----------|-------------|-------------------------------------------|
//! | `matrix` | rows cols   | the matrix                                |
//! | `vector` | len         | the vector                                |
//! | `layer`  | L d+1       | each row is `w_s` followed by `b_s`       |
//! | `tokens` | len         | token ids stored as integral `f64`        |
//!
//! Model file: `L2S1 model 1 <r> <d> <L> <budget>\n`, an embedded `matrix`
//! tensor holding the cluster weights, then `r` candidate lists, each a
//! `u64` LE length followed by that many strictly ascending `u32` LE ids.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::screen::{CandidateSet, ScreeningModel};
use crate::softmax::{ContextSet, SoftmaxLayer};
use crate::tensor::{DenseMatrix, DenseVector};

pub const MAGIC: &str = "L2S1";
pub const MODEL_VERSION: u32 = 1;
const MAX_HEADER: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Matrix,
    Vector,
    Layer,
    Tokens,
}

impl TensorKind {
    pub fn tag(self) -> &'static str {
        match self {
            TensorKind::Matrix => "matrix",
            TensorKind::Vector => "vector",
            TensorKind::Layer => "layer",
            TensorKind::Tokens => "tokens",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "matrix" => TensorKind::Matrix,
            "vector" => TensorKind::Vector,
            "layer" => TensorKind::Layer,
            "tokens" => TensorKind::Tokens,
            _ => return None,
        })
    }

    fn rank(self) -> usize {
        match self {
            TensorKind::Matrix | TensorKind::Layer => 2,
            TensorKind::Vector | TensorKind::Tokens => 1,
        }
    }
}

/// Decoded tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_tensor(kind: TensorKind, dims: &[usize], data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = header_line(&[MAGIC, kind.tag()], dims.iter().map(|d| d.to_string()));
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header_line(fixed: &[&str], rest: impl Iterator<Item = String>) -> Vec<u8> {
    let mut fields: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    fields.extend(rest);
    let mut line = fields.join(" ");
    line.push('\n');
    line.into_bytes()
}

/// Splits the header line at `base` into whitespace-separated fields with their byte offsets.
fn read_header(bytes: &[u8], base: u64) -> Result<(Vec<(u64, &str)>, usize)> {
    let window = &bytes[..bytes.len().min(MAX_HEADER)];
    let end = window
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(base, "header line missing or not newline-terminated"))?;
    let line = std::str::from_utf8(&window[..end])
        .map_err(|e| Error::format(base + e.valid_up_to() as u64, "header is not ASCII"))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    for part in line.split(' ') {
        if part.is_empty() {
            return Err(Error::format(base + pos as u64, "header fields must be separated by single spaces"));
        }
        fields.push((base + pos as u64, part));
        pos += part.len() + 1;
    }
    match fields.first() {
        Some((_, m)) if *m == MAGIC => {}
        _ => return Err(Error::format(base, format!("bad magic, expected {MAGIC}"))),
    }
    Ok((fields, end + 1))
}

fn parse_field<T: std::str::FromStr>(field: (u64, &str), what: &str) -> Result<T> {
    field
        .1
        .parse()
        .map_err(|_| Error::format(field.0, format!("cannot parse {what} from {:?}", field.1)))
}

/// Decodes one tensor starting at `bytes[0]`; returns it and the bytes consumed.
/// `base` is the absolute offset of `bytes[0]` and only affects error messages.
pub fn decode_tensor_at(bytes: &[u8], base: u64, expected: TensorKind) -> Result<(RawTensor, usize)> {
    let (fields, header_len) = read_header(bytes, base)?;
    let (kind_off, kind_tag) = *fields
        .get(1)
        .ok_or_else(|| Error::format(base + MAGIC.len() as u64, "missing kind tag"))?;
    let kind = TensorKind::from_tag(kind_tag)
        .ok_or_else(|| Error::format(kind_off, format!("unknown kind {kind_tag:?}")))?;
    if kind != expected {
        return Err(Error::format(
            kind_off,
            format!("expected kind {}, found {}", expected.tag(), kind.tag()),
        ));
    }
    let dim_fields = &fields[2..];
    if dim_fields.is_empty() {
        return Err(Error::format(base + header_len as u64 - 1, "no dims in header"));
    }
    if dim_fields.len() != kind.rank() {
        return Err(Error::format(
            dim_fields[0].0,
            format!("kind {} takes {} dims, found {}", kind.tag(), kind.rank(), dim_fields.len()),
        ));
    }
    let mut dims = Vec::with_capacity(dim_fields.len());
    for &f in dim_fields {
        let d: usize = parse_field(f, "dimension")?;
        if d == 0 {
            return Err(Error::format(f.0, "zero dimension"));
        }
        dims.push(d);
    }
    let payload_off = base + header_len as u64;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(8).map(|_| c))
        .ok_or_else(|| Error::format(dim_fields[0].0, "dims overflow"))?;
    let need = count * 8;
    let available = bytes.len() - header_len;
    if available < need {
        return Err(Error::format(
            payload_off,
            format!("payload truncated: expected {need} bytes, found {available}"),
        ));
    }
    let data = bytes[header_len..header_len + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((RawTensor { kind, dims, data }, header_len + need))
}

/// Decodes a whole buffer holding exactly one tensor.
pub fn decode_tensor(bytes: &[u8], expected: TensorKind) -> Result<RawTensor> {
    let (t, used) = decode_tensor_at(bytes, 0, expected)?;
    if used != bytes.len() {
        return Err(Error::format(
            used as u64,
            format!("{} trailing bytes after payload", bytes.len() - used),
        ));
    }
    Ok(t)
}

fn matrix_from_raw(raw: RawTensor, offset: u64) -> Result<DenseMatrix> {
    DenseMatrix::new(raw.dims[0], raw.dims[1], raw.data).map_err(|e| Error::format(offset, e.to_string()))
}

pub fn encode_matrix(m: &DenseMatrix) -> Vec<u8> {
    encode_tensor(TensorKind::Matrix, &[m.rows(), m.cols()], m.as_slice())
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    matrix_from_raw(decode_tensor(bytes, TensorKind::Matrix)?, 0)
}

pub fn encode_vector(v: &DenseVector) -> Vec<u8> {
    encode_tensor(TensorKind::Vector, &[v.len()], v)
}

pub fn decode_vector(bytes: &[u8]) -> Result<DenseVector> {
    let raw = decode_tensor(bytes, TensorKind::Vector)?;
    DenseVector::new(raw.data).map_err(|e| Error::format(0, e.to_string()))
}

pub fn encode_layer(layer: &SoftmaxLayer) -> Vec<u8> {
    let (l, d) = layer.weights().shape();
    let mut data = Vec::with_capacity(l * (d + 1));
    for (w, b) in layer.weights().iter_rows().zip(layer.bias().iter()) {
        data.extend_from_slice(w);
        data.push(*b);
    }
    encode_tensor(TensorKind::Layer, &[l, d + 1], &data)
}

pub fn decode_layer(bytes: &[u8]) -> Result<SoftmaxLayer> {
    let raw = decode_tensor(bytes, TensorKind::Layer)?;
    let (l, cols) = (raw.dims[0], raw.dims[1]);
    if cols < 2 {
        return Err(Error::format(0, "layer needs at least one weight column besides the bias"));
    }
    let d = cols - 1;
    let mut w = Vec::with_capacity(l * d);
    let mut b = Vec::with_capacity(l);
    for row in raw.data.chunks_exact(cols) {
        w.extend_from_slice(&row[..d]);
        b.push(row[d]);
    }
    let to_fmt = |e: Error| Error::format(0, e.to_string());
    SoftmaxLayer::new(
        DenseMatrix::new(l, d, w).map_err(to_fmt)?,
        DenseVector::new(b).map_err(to_fmt)?,
    )
    .map_err(to_fmt)
}

pub fn encode_tokens(tokens: &[u32]) -> Vec<u8> {
    let data: Vec<f64> = tokens.iter().map(|&t| f64::from(t)).collect();
    encode_tensor(TensorKind::Tokens, &[tokens.len()], &data)
}

pub fn decode_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    let raw = decode_tensor(bytes, TensorKind::Tokens)?;
    let payload = bytes.len() as u64 - raw.data.len() as u64 * 8;
    raw.data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.fract() == 0.0 && (0.0..=f64::from(u32::MAX)).contains(&v) {
                Ok(v as u32)
            } else {
                Err(Error::format(payload + i as u64 * 8, format!("token {v} is not a u32 id")))
            }
        })
        .collect()
}

pub fn encode_model(model: &ScreeningModel) -> Vec<u8> {
    let mut out = header_line(
        &[MAGIC, "model"],
        [
            MODEL_VERSION.to_string(),
            model.clusters().to_string(),
            model.dim().to_string(),
            model.vocab().to_string(),
            model.budget().to_string(),
        ]
        .into_iter(),
    );
    out.extend(encode_matrix(model.weights()));
    for set in model.sets() {
        out.extend_from_slice(&(set.len() as u64).to_le_bytes());
        for &s in set.indices() {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ScreeningModel> {
    let (fields, header_len) = read_header(bytes, 0)?;
    match fields.get(1) {
        Some((_, "model")) => {}
        Some(&(off, other)) => return Err(Error::format(off, format!("expected kind model, found {other}"))),
        None => return Err(Error::format(MAGIC.len() as u64, "missing kind tag")),
    }
    if fields.len() != 7 {
        return Err(Error::format(0, format!("model header has {} fields, expected 7", fields.len())));
    }
    let version: u32 = parse_field(fields[2], "version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(
            fields[2].0,
            format!("unsupported model version {version}, this build reads {MODEL_VERSION}"),
        ));
    }
    let r: usize = parse_field(fields[3], "cluster count")?;
    let d: usize = parse_field(fields[4], "dim")?;
    let vocab: usize = parse_field(fields[5], "vocab")?;
    let budget: f64 = parse_field(fields[6], "budget")?;
    if vocab > u32::MAX as usize + 1 {
        return Err(Error::format(fields[5].0, "vocab exceeds u32 ids"));
    }

    let mut pos = header_len;
    let (raw, used) = decode_tensor_at(&bytes[pos..], pos as u64, TensorKind::Matrix)?;
    if raw.dims != [r, d] {
        return Err(Error::format(
            pos as u64,
            format!("cluster weights are {}x{}, header says {r}x{d}", raw.dims[0], raw.dims[1]),
        ));
    }
    let weights = matrix_from_raw(raw, pos as u64)?;
    pos += used;

    let mut sets = Vec::with_capacity(r);
    for t in 0..r {
        let len_bytes = take(bytes, pos, 8, || format!("length of candidate list {t}"))?;
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
        if len > vocab as u64 {
            return Err(Error::format(pos as u64, format!("candidate list {t} longer than vocab {vocab}")));
        }
        pos += 8;
        let body = take(bytes, pos, len as usize * 4, || format!("candidate list {t}"))?;
        let mut ids = Vec::with_capacity(len as usize);
        for (j, c) in body.chunks_exact(4).enumerate() {
            let id = u32::from_le_bytes(c.try_into().expect("4 bytes"));
            let off = (pos + j * 4) as u64;
            if id as usize >= vocab {
                return Err(Error::format(off, format!("label {id} out of range for vocab {vocab}")));
            }
            if ids.last().is_some_and(|&prev| prev >= id) {
                return Err(Error::format(off, format!("candidate list {t} not strictly ascending")));
            }
            ids.push(id);
        }
        pos += body.len();
        sets.push(CandidateSet::from_indices(vocab, ids).expect("validated ids"));
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
    }
    if r == 0 {
        return Err(Error::format(fields[3].0, "model needs at least one cluster"));
    }
    ScreeningModel::new(weights, sets, budget).map_err(|e| Error::format(0, e.to_string()))
}

fn take(bytes: &[u8], pos: usize, len: usize, what: impl Fn() -> String) -> Result<&[u8]> {
    bytes.get(pos..pos + len).ok_or_else(|| {
        Error::format(
            pos as u64,
            format!("{} truncated: expected {len} bytes, found {}", what(), bytes.len().saturating_sub(pos)),
        )
    })
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    Ok(fs::write(path, encode_matrix(m))?)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    decode_matrix(&fs::read(path)?)
}

pub fn save_vector(path: impl AsRef<Path>, v: &DenseVector) -> Result<()> {
    Ok(fs::write(path, encode_vector(v))?)
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<DenseVector> {
    decode_vector(&fs::read(path)?)
}

pub fn save_layer(path: impl AsRef<Path>, layer: &SoftmaxLayer) -> Result<()> {
    Ok(fs::write(path, encode_layer(layer))?)
}

pub fn load_layer(path: impl AsRef<Path>) -> Result<SoftmaxLayer> {
    decode_layer(&fs::read(path)?)
}

pub fn save_contexts(path: impl AsRef<Path>, contexts: &ContextSet) -> Result<()> {
    save_matrix(path, contexts.matrix())
}

pub fn load_contexts(path: impl AsRef<Path>) -> Result<ContextSet> {
    Ok(ContextSet::new(load_matrix(path)?))
}

pub fn save_tokens(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    Ok(fs::write(path, encode_tokens(tokens))?)
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    decode_tokens(&fs::read(path)?)
}

pub fn save_model(path: impl AsRef<Path>, model: &ScreeningModel) -> Result<()> {
    Ok(fs::write(path, encode_model(model))?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ScreeningModel> {
    decode_model(&fs::read(path)?)
}
