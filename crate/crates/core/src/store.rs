//! Embedding spaces: validation, the `EMB1` binary layout, word2vec text, and
//! vocabulary matching across two spaces.
//!
//! `EMB1` layout, all integers little-endian:
//!
//! ```text
//! "EMB1" | u32 version = 1 | u64 N | u32 D
//! N x (u32 byte length, UTF-8 token bytes)
//! N*D x f32, row-major
//! ```

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;

/// SentencePiece word-start marker.
pub const SENTENCEPIECE_MARKER: &str = "\u{2581}";
/// Byte-level BPE space marker.
pub const BYTE_BPE_MARKER: &str = "\u{0120}";
/// WordPiece continuation marker.
pub const WORDPIECE_MARKER: &str = "##";

/// A vocabulary with one `D`-dimensional `f32` row per token.
///
/// Immutable once built; every constructor validates that tokens are unique
/// and that every entry is finite.
#[derive(Clone)]
pub struct EmbeddingSpace {
    tokens: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingSpace {
    pub fn new(tokens: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        let n = tokens.len();
        if data.len() != n * dim {
            return Err(Error::Validation(format!(
                "matrix has {} values, expected {n} rows x {dim} columns",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {}, column {}",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (row, token) in tokens.iter().enumerate() {
            match index.entry(token.clone()) {
                Entry::Occupied(first) => {
                    return Err(Error::Validation(format!(
                        "duplicate token {token:?} at rows {} and {row}",
                        first.get()
                    )))
                }
                Entry::Vacant(slot) => {
                    slot.insert(row);
                }
            }
        }
        Ok(Self {
            tokens,
            dim,
            data,
            index,
        })
    }

    /// Builds a space from explicit rows; every row must have length `dim`.
    pub fn from_rows(tokens: Vec<String>, dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.len() != tokens.len() {
            return Err(Error::Validation(format!(
                "{} tokens but {} rows",
                tokens.len(),
                rows.len()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Validation(format!(
                    "row {i} has {} columns, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(tokens, dim, data)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, row: usize) -> &str {
        &self.tokens[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Row-major matrix of all entries.
    pub fn matrix(&self) -> &[f32] {
        &self.data
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Returns a copy of this space with the given rows replaced. Validation is
    /// re-run on the result.
    pub fn with_rows_replaced(&self, replacements: &[(usize, Vec<f32>)]) -> Result<Self> {
        let mut data = self.data.clone();
        for (row, values) in replacements {
            if *row >= self.len() {
                return Err(Error::Validation(format!("row {row} out of range")));
            }
            if values.len() != self.dim {
                return Err(Error::Validation(format!(
                    "replacement for row {row} has {} columns, expected {}",
                    values.len(),
                    self.dim
                )));
            }
            data[row * self.dim..(row + 1) * self.dim].copy_from_slice(values);
        }
        Self::new(self.tokens.clone(), self.dim, data)
    }
}

impl PartialEq for EmbeddingSpace {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.tokens == other.tokens && self.data == other.data
    }
}

impl fmt::Debug for EmbeddingSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingSpace")
            .field("n", &self.len())
            .field("dim", &self.dim)
            .finish()
    }
}

/// On-disk embedding formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Emb1,
    Word2VecText,
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emb1" | "emb1-binary" => Ok(Self::Emb1),
            "word2vec" | "word2vec-text" => Ok(Self::Word2VecText),
            other => Err(Error::Format(format!("unknown embedding format {other:?}"))),
        }
    }
}

impl fmt::Display for EmbeddingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Emb1 => "emb1",
            Self::Word2VecText => "word2vec",
        })
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingSpace> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        EmbeddingFormat::Emb1 => read_emb1(reader),
        EmbeddingFormat::Word2VecText => read_word2vec(reader),
    }
}

/// Writes `space` in `EMB1` layout.
pub fn save_embeddings(space: &EmbeddingSpace, path: impl AsRef<Path>) -> Result<()> {
    save_embeddings_as(space, path, EmbeddingFormat::Emb1)
}

pub fn save_embeddings_as(
    space: &EmbeddingSpace,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    // Serialize fully before touching the filesystem so a failing space never
    // leaves a partial file behind.
    let mut buf = Vec::new();
    match format {
        EmbeddingFormat::Emb1 => write_emb1(space, &mut buf)?,
        EmbeddingFormat::Word2VecText => write_word2vec(space, &mut buf)?,
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn write_emb1<W: Write>(space: &EmbeddingSpace, mut out: W) -> Result<()> {
    out.write_all(EMB1_MAGIC)?;
    out.write_all(&EMB1_VERSION.to_le_bytes())?;
    out.write_all(&(space.len() as u64).to_le_bytes())?;
    let dim = u32::try_from(space.dim())
        .map_err(|_| Error::Validation(format!("dimension {} exceeds u32", space.dim())))?;
    out.write_all(&dim.to_le_bytes())?;
    for token in space.tokens() {
        let len = u32::try_from(token.len())
            .map_err(|_| Error::Validation("token longer than u32::MAX bytes".into()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(token.as_bytes())?;
    }
    for v in space.matrix() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_emb1<R: Read>(mut r: R) -> Result<EmbeddingSpace> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMB1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"EMB1\"")));
    }
    let version = read_u32(&mut r)?;
    if version != EMB1_VERSION {
        return Err(Error::Format(format!("unsupported EMB1 version {version}")));
    }
    let n = usize::try_from(read_u64(&mut r)?)
        .map_err(|_| Error::Format("row count does not fit in memory".into()))?;
    let dim = read_u32(&mut r)? as usize;

    // Header counts are untrusted; cap preallocation and let read_exact fail on
    // truncated payloads.
    let mut tokens = Vec::with_capacity(n.min(1 << 20));
    for row in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        let token = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("token at row {row} is not valid UTF-8")))?;
        tokens.push(token);
    }
    let total = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let mut data = Vec::with_capacity(total.min(1 << 24));
    let mut b = [0u8; 4];
    for _ in 0..total {
        r.read_exact(&mut b)?;
        data.push(f32::from_le_bytes(b));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after matrix payload".into()));
    }
    EmbeddingSpace::new(tokens, dim, data)
}

pub fn read_word2vec<R: BufRead>(r: R) -> Result<EmbeddingSpace> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing \"N D\" header line".into()))??;
    let mut fields = header.split_whitespace();
    let parse_count = |field: Option<&str>, what: &str| -> Result<usize> {
        field
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad {what} in header {header:?}")))
    };
    let n = parse_count(fields.next(), "row count")?;
    let dim = parse_count(fields.next(), "dimension")?;
    if fields.next().is_some() {
        return Err(Error::Format(format!("bad header {header:?}")));
    }

    let mut tokens = Vec::with_capacity(n.min(1 << 20));
    let mut data = Vec::with_capacity((n * dim).min(1 << 24));
    for row in 0..n {
        let line = lines.next().ok_or_else(|| {
            Error::Format(format!("expected {n} rows, file ends after {row}"))
        })??;
        let line = line.trim_end_matches(['\r', '\n']);
        let (token, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("row {row} has no values")))?;
        let mut count = 0;
        for value in rest.split_whitespace() {
            let v: f32 = value.parse().map_err(|_| {
                Error::Format(format!("row {row}: cannot parse {value:?} as a float"))
            })?;
            data.push(v);
            count += 1;
        }
        if count != dim {
            return Err(Error::Format(format!(
                "row {row} has {count} values, expected {dim}"
            )));
        }
        tokens.push(token.to_string());
    }
    for line in lines {
        if !line?.trim().is_empty() {
            return Err(Error::Format(format!("more than {n} rows in file")));
        }
    }
    EmbeddingSpace::new(tokens, dim, data)
}

pub fn write_word2vec<W: Write>(space: &EmbeddingSpace, mut out: W) -> Result<()> {
    writeln!(out, "{} {}", space.len(), space.dim())?;
    for (token, row) in space.tokens().iter().zip(space.rows()) {
        if token.is_empty() || token.contains([' ', '\n', '\r']) {
            return Err(Error::Validation(format!(
                "token {token:?} cannot be written as word2vec text"
            )));
        }
        out.write_all(token.as_bytes())?;
        for v in row {
            // `Display` for f32 is the shortest string that parses back exactly.
            write!(out, " {v}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// How tokens are canonicalized before being compared across vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationMode {
    #[default]
    None,
    StripMarkers,
    StripMarkersLowercase,
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "strip-markers" => Ok(Self::StripMarkers),
            "strip-markers-lowercase" => Ok(Self::StripMarkersLowercase),
            other => Err(Error::Validation(format!(
                "unknown normalization mode {other:?}"
            ))),
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::StripMarkers => "strip-markers",
            Self::StripMarkersLowercase => "strip-markers-lowercase",
        })
    }
}

/// Token canonicalization: optional removal of leading subword markers and
/// optional lowercasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenNormalization {
    pub mode: NormalizationMode,
    pub markers: Vec<String>,
}

impl Default for TokenNormalization {
    fn default() -> Self {
        Self::new(NormalizationMode::None)
    }
}

impl TokenNormalization {
    pub fn new(mode: NormalizationMode) -> Self {
        Self {
            mode,
            markers: vec![
                SENTENCEPIECE_MARKER.to_string(),
                BYTE_BPE_MARKER.to_string(),
                WORDPIECE_MARKER.to_string(),
            ],
        }
    }

    pub fn none() -> Self {
        Self::new(NormalizationMode::None)
    }

    pub fn strip_markers() -> Self {
        Self::new(NormalizationMode::StripMarkers)
    }

    pub fn strip_markers_lowercase() -> Self {
        Self::new(NormalizationMode::StripMarkersLowercase)
    }

    fn strip<'a>(&self, mut t: &'a str) -> &'a str {
        loop {
            let before = t.len();
            for m in self.markers.iter().filter(|m| !m.is_empty()) {
                while let Some(rest) = t.strip_prefix(m.as_str()) {
                    t = rest;
                }
            }
            if t.len() == before {
                return t;
            }
        }
    }

    /// Idempotent: `normalize(normalize(t)) == normalize(t)`.
    pub fn normalize(&self, token: &str) -> String {
        match self.mode {
            NormalizationMode::None => token.to_string(),
            NormalizationMode::StripMarkers => self.strip(token).to_string(),
            NormalizationMode::StripMarkersLowercase => {
                let mut current = self.strip(token).to_string();
                loop {
                    let next = self.strip(&current.to_lowercase()).to_string();
                    if next == current {
                        return current;
                    }
                    current = next;
                }
            }
        }
    }

    /// True when the token carries no leading marker.
    pub fn is_unmarked(&self, token: &str) -> bool {
        self.strip(token).len() == token.len()
    }
}

/// Maps each normalized token to its row, or to `None` when two rows collide.
fn unique_normalized(space: &EmbeddingSpace, norm: &TokenNormalization) -> HashMap<String, Option<usize>> {
    let mut map: HashMap<String, Option<usize>> = HashMap::with_capacity(space.len());
    for (row, token) in space.tokens().iter().enumerate() {
        let key = norm.normalize(token);
        if key.is_empty() {
            continue;
        }
        map.entry(key)
            .and_modify(|slot| *slot = None)
            .or_insert(Some(row));
    }
    map
}

/// Row pairs `(row in a, row in b)` for tokens that normalize to the same
/// string and are unambiguous in both spaces, sorted by the row in `a`.
pub fn shared_vocab(
    a: &EmbeddingSpace,
    b: &EmbeddingSpace,
    norm: &TokenNormalization,
) -> Vec<(usize, usize)> {
    let in_b = unique_normalized(b, norm);
    let mut pairs: Vec<(usize, usize)> = unique_normalized(a, norm)
        .into_iter()
        .filter_map(|(key, ra)| Some((ra?, in_b.get(&key).copied().flatten()?)))
        .collect();
    pairs.sort_unstable();
    pairs
}
