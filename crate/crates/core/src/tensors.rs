//! Typed containers for multi-head token sequences and the binary dump format.
//!
//! A [`TokenTensor`] stores `h × N × d_head` values head-major, so every
//! head's `N × d_head` block is contiguous. The dump layout is:
//!
//! ```text
//! "HTTM" | version u32 | h u32 | N u32 | d_head u32 | frame_len u32 | h·N·d_head f32
//! ```
//!
//! All integers and floats are little-endian.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const DUMP_MAGIC: &[u8; 4] = b"HTTM";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("bad dump format: {0}")]
    Format(String),
    #[error("payload length mismatch: header declares {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("frame_len {frame_len} does not divide sequence length {seq_len}")]
    Geometry { seq_len: usize, frame_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A single broken [`TokenTensor`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroDimension { name: &'static str },
    Geometry { seq_len: usize, frame_len: usize },
    NonFinite { head: usize, token: usize, dim: usize, value: f32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension { name } => write!(f, "dimension {name} must be at least 1"),
            Violation::Geometry { seq_len, frame_len } => {
                write!(f, "geometry: frame_len {frame_len} does not divide N = {seq_len}")
            }
            Violation::NonFinite { head, token, dim, value } => {
                write!(f, "finiteness: value {value} at ({head},{token},{dim})")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f32>, rows: usize, cols: usize) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { data: vec![0.0; rows * cols], rows, cols }
    }

    /// Builds a matrix by stacking equally sized rows.
    pub fn from_rows<'a, I>(rows: I, cols: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            assert_eq!(r.len(), cols, "row width mismatch");
            data.extend_from_slice(r);
            n += 1;
        }
        Self { data, rows: n, cols }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Returns a new matrix whose row `i` is row `index[i]` of `self`.
    pub fn gather_rows(&self, index: &[usize]) -> Matrix {
        Matrix::from_rows(index.iter().map(|&i| self.row(i)), self.cols)
    }

    /// `self · other` with `f64` accumulation.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let mut acc = vec![0f64; other.cols];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(i).iter().enumerate() {
                let a = a as f64;
                for (slot, &b) in acc.iter_mut().zip(other.row(k)) {
                    *slot += a * b as f64;
                }
            }
            for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// TokenTensor
// ---------------------------------------------------------------------------

/// Per-head token embeddings `h × N × d_head` for a multi-frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    data: Vec<f32>,
    num_heads: usize,
    seq_len: usize,
    head_dim: usize,
    frame_len: usize,
}

/// Borrowed view over one head's `N × d_head` rows.
#[derive(Debug, Clone, Copy)]
pub struct HeadSlice<'a> {
    pub head_index: usize,
    data: &'a [f32],
    seq_len: usize,
    head_dim: usize,
}

impl<'a> HeadSlice<'a> {
    /// Wraps a flat row-major slice as a head view.
    pub fn from_slice(head_index: usize, data: &'a [f32], seq_len: usize, head_dim: usize) -> Self {
        assert_eq!(data.len(), seq_len * head_dim);
        Self { head_index, data, seq_len, head_dim }
    }

    pub fn from_matrix(head_index: usize, m: &'a Matrix) -> Self {
        Self::from_slice(head_index, m.as_slice(), m.rows(), m.cols())
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn row(&self, n: usize) -> &'a [f32] {
        &self.data[n * self.head_dim..(n + 1) * self.head_dim]
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { data: self.data.to_vec(), rows: self.seq_len, cols: self.head_dim }
    }
}

impl TokenTensor {
    /// Wraps raw head-major data. Only the data length is checked here; run
    /// [`TokenTensor::validate`] for the remaining invariants.
    pub fn new(
        data: Vec<f32>,
        num_heads: usize,
        seq_len: usize,
        head_dim: usize,
        frame_len: usize,
    ) -> Result<Self, TensorError> {
        let expected = num_heads * seq_len * head_dim;
        if data.len() != expected {
            return Err(TensorError::Shape(format!(
                "expected {num_heads}x{seq_len}x{head_dim} = {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { data, num_heads, seq_len, head_dim, frame_len })
    }

    pub fn zeros(num_heads: usize, seq_len: usize, head_dim: usize, frame_len: usize) -> Self {
        Self {
            data: vec![0.0; num_heads * seq_len * head_dim],
            num_heads,
            seq_len,
            head_dim,
            frame_len,
        }
    }

    /// Stacks per-head `N × d_head` matrices.
    pub fn from_heads(heads: &[Matrix], frame_len: usize) -> Result<Self, TensorError> {
        let first = heads
            .first()
            .ok_or_else(|| TensorError::Shape("at least one head required".into()))?;
        let (n, d) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(heads.len() * n * d);
        for h in heads {
            if h.rows() != n || h.cols() != d {
                return Err(TensorError::Shape("heads differ in shape".into()));
            }
            data.extend_from_slice(h.as_slice());
        }
        Self::new(data, heads.len(), n, d, frame_len)
    }

    /// Splits the columns of an `N × (h·d_head)` matrix into heads.
    pub fn from_concat(m: &Matrix, num_heads: usize, frame_len: usize) -> Result<Self, TensorError> {
        if num_heads == 0 || m.cols() % num_heads != 0 {
            return Err(TensorError::Shape(format!(
                "{} columns cannot be split into {num_heads} heads",
                m.cols()
            )));
        }
        let d = m.cols() / num_heads;
        let n = m.rows();
        let mut data = vec![0.0; num_heads * n * d];
        for t in 0..n {
            let row = m.row(t);
            for h in 0..num_heads {
                data[(h * n + t) * d..(h * n + t + 1) * d].copy_from_slice(&row[h * d..(h + 1) * d]);
            }
        }
        Self::new(data, num_heads, n, d, frame_len)
    }

    /// Concatenates heads along the channel axis into `N × (h·d_head)`.
    pub fn to_concat(&self) -> Matrix {
        let (h, n, d) = (self.num_heads, self.seq_len, self.head_dim);
        let mut out = Matrix::zeros(n, h * d);
        for t in 0..n {
            let row = out.row_mut(t);
            for i in 0..h {
                row[i * d..(i + 1) * d].copy_from_slice(self.row(i, t));
            }
        }
        out
    }

    #[inline]
    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    /// Number of whole frames; only meaningful when the geometry is valid.
    pub fn num_frames(&self) -> usize {
        if self.frame_len == 0 {
            0
        } else {
            self.seq_len / self.frame_len
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn head(&self, i: usize) -> HeadSlice<'_> {
        let len = self.seq_len * self.head_dim;
        HeadSlice {
            head_index: i,
            data: &self.data[i * len..(i + 1) * len],
            seq_len: self.seq_len,
            head_dim: self.head_dim,
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadSlice<'_>> {
        (0..self.num_heads).map(move |i| self.head(i))
    }

    #[inline]
    pub fn row(&self, head: usize, token: usize) -> &[f32] {
        let off = (head * self.seq_len + token) * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    #[inline]
    pub fn row_mut(&mut self, head: usize, token: usize) -> &mut [f32] {
        let off = (head * self.seq_len + token) * self.head_dim;
        &mut self.data[off..off + self.head_dim]
    }

    /// Reports every broken invariant; an empty list means the tensor is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (name, v) in [
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("frame_len", self.frame_len),
        ] {
            if v == 0 {
                out.push(Violation::ZeroDimension { name });
            }
        }
        if self.frame_len != 0 && self.seq_len % self.frame_len != 0 {
            out.push(Violation::Geometry { seq_len: self.seq_len, frame_len: self.frame_len });
        }
        if self.head_dim != 0 && self.seq_len != 0 {
            for (i, &x) in self.data.iter().enumerate() {
                if !x.is_finite() {
                    let dim = i % self.head_dim;
                    let row = i / self.head_dim;
                    out.push(Violation::NonFinite {
                        head: row / self.seq_len,
                        token: row % self.seq_len,
                        dim,
                        value: x,
                    });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), TensorError> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TensorError::Validation(v))
        }
    }
}

// ---------------------------------------------------------------------------
// Dump format
// ---------------------------------------------------------------------------

fn dim_u32(v: usize, name: &str) -> Result<u32, TensorError> {
    u32::try_from(v).map_err(|_| TensorError::Shape(format!("{name} = {v} exceeds u32")))
}

/// Serializes a valid tensor into `w` using the dump layout.
pub fn write_dump<W: Write>(t: &TokenTensor, mut w: W) -> Result<(), TensorError> {
    t.ensure_valid()?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(DUMP_MAGIC);
    header.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    for (v, name) in [
        (t.num_heads, "num_heads"),
        (t.seq_len, "seq_len"),
        (t.head_dim, "head_dim"),
        (t.frame_len, "frame_len"),
    ] {
        header.extend_from_slice(&dim_u32(v, name)?.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(t.data.len() * 4);
    for x in &t.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Parses a dump from `r` and validates the result.
pub fn read_dump<R: Read>(mut r: R) -> Result<TokenTensor, TensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(TensorError::Format(format!("header truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != DUMP_MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let field = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let version = field(0) as u32;
    if version != DUMP_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let (h, n, d, frame_len) = (field(1), field(2), field(3), field(4));
    let expected = h
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| TensorError::Format("declared size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(TensorError::Length { expected, actual: payload.len() });
    }
    if frame_len == 0 || n % frame_len != 0 {
        return Err(TensorError::Geometry { seq_len: n, frame_len });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = TokenTensor::new(data, h, n, d, frame_len)?;
    t.ensure_valid()?;
    Ok(t)
}

pub fn save_dump(t: &TokenTensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    t.ensure_valid()?;
    let f = File::create(path)?;
    write_dump(t, BufWriter::new(f))
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<TokenTensor, TensorError> {
    let f = File::open(path)?;
    read_dump(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(h: usize, n: usize, d: usize, frame_len: usize, seed: u64) -> TokenTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TokenTensor::new(data, h, n, d, frame_len).unwrap()
    }

    fn dump_bytes(t: &TokenTensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dump(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn resave_is_byte_identical() {
        let t = random_tensor(2, 8, 4, 4, 1);
        let first = dump_bytes(&t);
        let back = read_dump(first.as_slice()).unwrap();
        assert_eq!(dump_bytes(&back), first);
    }

    #[test]
    fn nan_is_rejected_on_save() {
        let mut t = random_tensor(1, 4, 2, 2, 0);
        t.row_mut(0, 1)[1] = f32::NAN;
        let err = write_dump(&t, Vec::new()).unwrap_err();
        assert!(matches!(err, TensorError::Validation(_)));
    }

    #[test]
    fn header_fields_read_back_with_independent_parser() {
        let t = random_tensor(3, 12, 16, 6, 2);
        let bytes = dump_bytes(&t);
        assert_eq!(&bytes[0..4], b"HTTM");
        let mut fields = [0u32; 5];
        for (i, f) in fields.iter_mut().enumerate() {
            let o = 4 + 4 * i;
            *f = bytes[o] as u32
                | (bytes[o + 1] as u32) << 8
                | (bytes[o + 2] as u32) << 16
                | (bytes[o + 3] as u32) << 24;
        }
        assert_eq!(fields, [1, 3, 12, 16, 6]);
        assert_eq!(bytes.len(), 24 + 3 * 12 * 16 * 4);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = dump_bytes(&random_tensor(1, 4, 2, 4, 3));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_dump(bytes.as_slice()), Err(TensorError::Format(_))));
    }

    #[test]
    fn bad_version_is_a_format_error() {
        let mut bytes = dump_bytes(&random_tensor(1, 4, 2, 4, 3));
        bytes[4] = 9;
        assert!(matches!(read_dump(bytes.as_slice()), Err(TensorError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = dump_bytes(&random_tensor(1, 4, 2, 4, 3));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_dump(cut), Err(TensorError::Length { .. })));
    }

    #[test]
    fn non_dividing_frame_len_is_a_geometry_error() {
        let mut bytes = dump_bytes(&random_tensor(1, 4, 2, 4, 3));
        bytes[20..24].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_dump(bytes.as_slice()), Err(TensorError::Geometry { .. })));
    }

    #[test]
    fn zero_dump_loads_as_zeros() {
        let t = TokenTensor::zeros(1, 4, 2, 2);
        let back = read_dump(dump_bytes(&t).as_slice()).unwrap();
        assert_eq!(back.num_heads(), 1);
        assert!(back.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn file_round_trip_seed_7() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.httm");
        let t = random_tensor(2, 6, 3, 3, 7);
        save_dump(&t, &path).unwrap();
        let back = load_dump(&path).unwrap();
        let bits = |t: &TokenTensor| t.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back, t);
    }

    #[test]
    fn validate_reports_geometry_and_non_finite() {
        assert!(random_tensor(1, 8, 2, 4, 0).validate().is_empty());

        let t = TokenTensor::zeros(1, 10, 2, 3);
        assert_eq!(t.validate(), vec![Violation::Geometry { seq_len: 10, frame_len: 3 }]);

        let mut t = TokenTensor::zeros(1, 8, 2, 4);
        t.row_mut(0, 5)[1] = f32::INFINITY;
        match t.validate().as_slice() {
            [Violation::NonFinite { head: 0, token: 5, dim: 1, .. }] => {}
            other => panic!("unexpected violations {other:?}"),
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let t = random_tensor(3, 5, 2, 5, 4);
        let back = TokenTensor::from_concat(&t.to_concat(), 3, 5).unwrap();
        assert_eq!(back, t);
    }
}
