//! Binary file formats, both little-endian.
//!
//! Dense matrix ("DNSM"): magic, version u32 = 1, rows u32, cols u32, then
//! rows*cols f32 words row-major.
//!
//! Sparse layer ("SPRN"): magic, version u32 = 1, rows u32, cols u32,
//! pairs_per_row u32, layout tag u8 (0 = as-pruned; 1, 2 or 4 = bank-aware
//! tuned for that vector width), then rows*pairs_per_row records of
//! (index u32, value f32). Values round-trip bit-exactly, including -0.0
//! and NaN payloads. Load errors name the byte offset of the problem.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::sparse::{IndexValuePair, LayoutKind, SparseLayer};

const DENSE_MAGIC: &[u8; 4] = b"DNSM";
const SPARSE_MAGIC: &[u8; 4] = b"SPRN";
const FORMAT_VERSION: u32 = 1;

/// Keeps a byte offset alongside the reader so errors can name the exact
/// position of malformed data.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(at, format!("file truncated while reading {what}"))
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn read_f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.read_u32(what)?))
    }

    /// Asserts the stream is fully consumed.
    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format(self.offset, "trailing bytes after payload")),
        }
    }
}

fn check_magic(cur: &mut Cursor<impl Read>, expect: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    cur.read_exact(&mut m, "magic")?;
    if &m != expect {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(expect)
            ),
        ));
    }
    Ok(())
}

fn check_version(cur: &mut Cursor<impl Read>) -> Result<()> {
    let at = cur.offset;
    let v = cur.read_u32("version")?;
    if v != FORMAT_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported version {v}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

/// Checked dimension read: zero is never valid for rows/cols.
fn read_dim(cur: &mut Cursor<impl Read>, what: &str) -> Result<usize> {
    let at = cur.offset;
    let d = cur.read_u32(what)?;
    if d == 0 {
        return Err(Error::format(at, format!("{what} must be at least 1")));
    }
    Ok(d as usize)
}

pub fn save_dense(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DENSE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let mut cur = Cursor::new(BufReader::new(File::open(path)?));
    check_magic(&mut cur, DENSE_MAGIC)?;
    check_version(&mut cur)?;
    let rows = read_dim(&mut cur, "rows")?;
    let cols = read_dim(&mut cur, "cols")?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(cur.read_f32("matrix data")?);
    }
    cur.expect_eof()?;
    DenseMatrix::new(rows, cols, data)
}

fn layout_to_tag(layout: LayoutKind) -> u8 {
    match layout {
        LayoutKind::AsPruned => 0,
        LayoutKind::BankAware(w) => w,
    }
}

fn tag_to_layout(tag: u8, at: u64) -> Result<LayoutKind> {
    match tag {
        0 => Ok(LayoutKind::AsPruned),
        1 | 2 | 4 => Ok(LayoutKind::BankAware(tag)),
        other => Err(Error::format(
            at,
            format!("unknown layout tag {other} (expected 0, 1, 2 or 4)"),
        )),
    }
}

/// Saves a padded layer. Ragged layers have no uniform pairs_per_row and
/// are rejected.
pub fn save_sparse(path: impl AsRef<Path>, layer: &SparseLayer) -> Result<()> {
    let Some(ppr) = layer.pairs_per_row() else {
        return Err(Error::parameter(
            "layer rows are ragged; pad_rows before saving".to_string(),
        ));
    };
    if ppr == 0 {
        return Err(Error::parameter("layer holds no pairs".to_string()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SPARSE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(layer.rows() as u32).to_le_bytes())?;
    w.write_all(&(layer.cols() as u32).to_le_bytes())?;
    w.write_all(&(ppr as u32).to_le_bytes())?;
    w.write_all(&[layout_to_tag(layer.layout())])?;
    for r in 0..layer.rows() {
        for p in layer.row_pairs(r) {
            w.write_all(&p.index.to_le_bytes())?;
            w.write_all(&p.value.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_sparse(path: impl AsRef<Path>) -> Result<SparseLayer> {
    let mut cur = Cursor::new(BufReader::new(File::open(path)?));
    check_magic(&mut cur, SPARSE_MAGIC)?;
    check_version(&mut cur)?;
    let rows = read_dim(&mut cur, "rows")?;
    let cols = read_dim(&mut cur, "cols")?;
    let ppr_at = cur.offset;
    let ppr = cur.read_u32("pairs_per_row")? as usize;
    if ppr == 0 {
        return Err(Error::format(ppr_at, "pairs_per_row must be at least 1"));
    }
    let tag_at = cur.offset;
    let layout = tag_to_layout(cur.read_u8("layout tag")?, tag_at)?;

    let mut all_rows = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut row = Vec::with_capacity(ppr);
        for _ in 0..ppr {
            let at = cur.offset;
            let index = cur.read_u32("pair index")?;
            let value = cur.read_f32("pair value")?;
            if index as usize >= cols {
                return Err(Error::format(
                    at,
                    format!("row {r}: column index {index} out of range (cols = {cols})"),
                ));
            }
            row.push(IndexValuePair::new(index, value));
        }
        all_rows.push(row);
    }
    cur.expect_eof()?;
    let mut layer = SparseLayer::from_rows(cols, all_rows)?;
    layer.set_layout(layout);
    Ok(layer)
}
