//! Hyperspectral cubes in memory and on disk.
//!
//! On disk a cube is a raw little-endian payload in band-interleaved-by-line
//! order (one acquisition line is one contiguous read) plus a `.hdr` sidecar:
//!
//! ```text
//! lines = 64
//! columns = 64
//! bands = 8
//! dtype = "f32le"
//! scale = 1.0
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lines x columns x bands` cube, stored pixel-major with bands innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCube {
    lines: usize,
    cols: usize,
    bands: usize,
    data: Vec<f64>,
}

impl ImageCube {
    pub fn new(lines: usize, cols: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if lines == 0 || cols == 0 || bands == 0 {
            return Err(Error::Config(format!("empty cube {lines}x{cols}x{bands}")));
        }
        if data.len() != lines * cols * bands {
            return Err(Error::Format(format!(
                "cube {lines}x{cols}x{bands} needs {} values, got {}",
                lines * cols * bands,
                data.len()
            )));
        }
        Ok(ImageCube {
            lines,
            cols,
            bands,
            data,
        })
    }

    pub fn zeros(lines: usize, cols: usize, bands: usize) -> Result<Self> {
        Self::new(lines, cols, bands, vec![0.0; lines * cols * bands])
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [l, c, b] => Self::new(l, c, b, t.into_data()),
            _ => Err(Error::Format(format!("cube tensor must be rank 3, got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.lines, self.cols, self.bands], self.data.clone()).expect("consistent cube")
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.lines, self.cols, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, l: usize, c: usize, b: usize) -> f64 {
        self.data[(l * self.cols + c) * self.bands + b]
    }

    pub fn set(&mut self, l: usize, c: usize, b: usize, v: f64) {
        self.data[(l * self.cols + c) * self.bands + b] = v;
    }

    /// Line `l` as a `[1, cols, bands]` tensor.
    pub fn line(&self, l: usize) -> Tensor {
        let n = self.cols * self.bands;
        Tensor::new(&[1, self.cols, self.bands], self.data[l * n..(l + 1) * n].to_vec()).expect("line shape")
    }

    /// Lines `[start, start + len)`.
    pub fn crop_lines(&self, start: usize, len: usize) -> Result<ImageCube> {
        if start + len > self.lines {
            return Err(Error::Config(format!("lines {start}..{} outside a {}-line cube", start + len, self.lines)));
        }
        let n = self.cols * self.bands;
        Self::new(len, self.cols, self.bands, self.data[start * n..(start + len) * n].to_vec())
    }

    /// Spatial window `[l0, l0 + lines) x [c0, c0 + cols)`.
    pub fn patch(&self, l0: usize, c0: usize, lines: usize, cols: usize) -> Result<ImageCube> {
        if l0 + lines > self.lines || c0 + cols > self.cols {
            return Err(Error::Config(format!(
                "patch {lines}x{cols} at ({l0}, {c0}) outside a {}x{} cube",
                self.lines, self.cols
            )));
        }
        let mut data = Vec::with_capacity(lines * cols * self.bands);
        for l in l0..l0 + lines {
            let row = (l * self.cols + c0) * self.bands;
            data.extend_from_slice(&self.data[row..row + cols * self.bands]);
        }
        Self::new(lines, cols, self.bands, data)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let header = Header {
            lines: self.lines,
            columns: self.cols,
            bands: self.bands,
            dtype,
            scale: 1.0,
        };
        let mut w = CubeWriter::create(path, header)?;
        for l in 0..self.lines {
            w.write_line(&self.line(l))?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<ImageCube> {
        let mut r = CubeReader::open(path)?;
        let h = r.header().clone();
        let mut data = Vec::with_capacity(h.lines * h.columns * h.bands);
        while let Some(line) = r.read_line()? {
            data.extend_from_slice(line.data());
            r.release();
        }
        Self::new(h.lines, h.columns, h.bands, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    F64le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub lines: usize,
    pub columns: usize,
    pub bands: usize,
    pub dtype: Dtype,
    /// Multiplier from stored values to the [0, 1] working range.
    pub scale: f64,
}

pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

impl Header {
    pub fn read(payload: &Path) -> Result<Header> {
        let hp = header_path(payload);
        let text = std::fs::read_to_string(&hp)
            .map_err(|e| Error::Format(format!("cannot read cube header {}: {e}", hp.display())))?;
        let h: Header =
            toml::from_str(&text).map_err(|e| Error::Format(format!("malformed cube header {}: {e}", hp.display())))?;
        if h.lines == 0 || h.columns == 0 || h.bands == 0 {
            return Err(Error::Format(format!("cube header {} has a zero extent", hp.display())));
        }
        if !(h.scale.is_finite() && h.scale > 0.0) {
            return Err(Error::Format(format!("cube header {} has invalid scale {}", hp.display(), h.scale)));
        }
        Ok(h)
    }

    fn line_bytes(&self) -> usize {
        self.columns * self.bands * self.dtype.size()
    }
}

/// Reads a cube one line at a time. Counts lines handed out and not yet
/// released so callers can bound their input buffering.
pub struct CubeReader {
    header: Header,
    inner: BufReader<File>,
    next: usize,
    buf: Vec<u8>,
    resident: usize,
    peak_resident: usize,
}

impl CubeReader {
    pub fn open(path: &Path) -> Result<Self> {
        let header = Header::read(path)?;
        let file = File::open(path)?;
        let want = (header.lines * header.line_bytes()) as u64;
        let got = file.metadata()?.len();
        if got != want {
            return Err(Error::Format(format!(
                "cube payload {} has {got} bytes, header implies {want}",
                path.display()
            )));
        }
        let buf = vec![0; header.line_bytes()];
        Ok(CubeReader {
            header,
            inner: BufReader::new(file),
            next: 0,
            buf,
            resident: 0,
            peak_resident: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Next line as `[1, columns, bands]`, scaled to the working range.
    pub fn read_line(&mut self) -> Result<Option<Tensor>> {
        if self.next == self.header.lines {
            return Ok(None);
        }
        self.inner.read_exact(&mut self.buf)?;
        let (nc, nb) = (self.header.columns, self.header.bands);
        let mut out = vec![0.0; nc * nb];
        let scale = self.header.scale;
        // BIL: band-major within a line on disk, band-innermost in memory.
        for b in 0..nb {
            for c in 0..nc {
                let i = b * nc + c;
                let v = match self.header.dtype {
                    Dtype::F32le => f32::from_le_bytes(self.buf[i * 4..i * 4 + 4].try_into().unwrap()) as f64,
                    Dtype::F64le => f64::from_le_bytes(self.buf[i * 8..i * 8 + 8].try_into().unwrap()),
                };
                out[c * nb + b] = v * scale;
            }
        }
        self.next += 1;
        self.resident += 1;
        self.peak_resident = self.peak_resident.max(self.resident);
        Ok(Some(Tensor::new(&[1, nc, nb], out)?))
    }

    /// Marks the oldest handed-out line as no longer held by the caller.
    pub fn release(&mut self) {
        self.resident = self.resident.saturating_sub(1);
    }

    pub fn peak_resident_lines(&self) -> usize {
        self.peak_resident
    }
}

pub struct CubeWriter {
    header: Header,
    inner: BufWriter<File>,
    written: usize,
    buf: Vec<u8>,
}

impl CubeWriter {
    pub fn create(path: &Path, header: Header) -> Result<Self> {
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(header_path(path), text)?;
        Ok(CubeWriter {
            inner: BufWriter::new(File::create(path)?),
            written: 0,
            buf: Vec::with_capacity(header.line_bytes()),
            header,
        })
    }

    pub fn write_line(&mut self, line: &Tensor) -> Result<()> {
        let (nc, nb) = (self.header.columns, self.header.bands);
        if line.len() != nc * nb {
            return Err(Error::shape("write_line", line.shape(), &[1, nc, nb]));
        }
        if self.written == self.header.lines {
            return Err(Error::Config(format!("cube already holds {} lines", self.header.lines)));
        }
        self.buf.clear();
        let d = line.data();
        let inv = 1.0 / self.header.scale;
        for b in 0..nb {
            for c in 0..nc {
                let v = d[c * nb + b] * inv;
                match self.header.dtype {
                    Dtype::F32le => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64le => self.buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        self.inner.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.lines {
            return Err(Error::Format(format!(
                "cube closed after {} of {} lines",
                self.written, self.header.lines
            )));
        }
        self.inner.flush()?;
        Ok(())
    }
}
