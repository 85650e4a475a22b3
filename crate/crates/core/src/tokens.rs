//! Token grids and the `MIMTOK1` token file format.
//!
//! Layout of one record: the 7 magic bytes `MIMTOK1`, then little-endian `u32`
//! height, width and codebook size `K`, then `height · width` little-endian `u16`
//! indices in row-major order. Index `K` marks a masked cell. A token stream is a
//! concatenation of records.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const TOKEN_MAGIC: &[u8; 7] = b"MIMTOK1";

/// Grid of codebook indices; index `K` (the codebook size) is the mask token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    codebook_size: usize,
    indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, codebook_size: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(invalid!("{} indices for a {height}×{width} grid", indices.len()));
        }
        if codebook_size < 2 {
            return Err(invalid!("codebook size must be at least 2, got {codebook_size}"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize > codebook_size) {
            return Err(invalid!("token index {bad} exceeds mask index {codebook_size}"));
        }
        Ok(Self {
            height,
            width,
            codebook_size,
            indices,
        })
    }

    pub fn fully_masked(height: usize, width: usize, codebook_size: usize) -> Self {
        Self {
            height,
            width,
            codebook_size,
            indices: vec![codebook_size as u32; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn mask_index(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Row-major flattened position of `(row, col)`.
    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, pos: usize) -> u32 {
        self.indices[pos]
    }

    pub fn set(&mut self, pos: usize, index: u32) -> Result<()> {
        if index as usize > self.codebook_size {
            return Err(invalid!("token index {index} exceeds mask index {}", self.codebook_size));
        }
        self.indices[pos] = index;
        Ok(())
    }

    pub fn mask_cell(&mut self, pos: usize) {
        self.indices[pos] = self.codebook_size as u32;
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.indices[pos] as usize == self.codebook_size
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|p| self.is_masked(p)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.indices
            .iter()
            .filter(|&&i| i as usize == self.codebook_size)
            .count()
    }

    /// Copy with every cell where `mask` is true replaced by the mask token.
    pub fn masked_with(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(invalid!("mask of {} cells for a grid of {}", mask.len(), self.len()));
        }
        let mut out = self.clone();
        for (p, &m) in mask.iter().enumerate() {
            if m {
                out.mask_cell(p);
            }
        }
        Ok(out)
    }

    /// Indices as `usize`, for embedding lookups.
    pub fn ids(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| i as usize).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.codebook_size > u16::MAX as usize {
            return Err(invalid!(
                "codebook size {} does not fit the 16-bit token format",
                self.codebook_size
            ));
        }
        w.write_all(TOKEN_MAGIC)?;
        for v in [self.height, self.width, self.codebook_size] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * 2);
        for &i in &self.indices {
            buf.extend_from_slice(&(i as u16).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one record; `Ok(None)` at a clean end of stream.
    pub fn read_from(mut r: impl Read) -> Result<Option<Self>> {
        let mut magic = [0u8; 7];
        let got = read_full(&mut r, &mut magic)?;
        if got == 0 {
            return Ok(None);
        }
        if got < magic.len() {
            return Err(Error::Truncated("token record magic".into()));
        }
        if &magic != TOKEN_MAGIC {
            return Err(Error::Format(format!("bad token magic {magic:?}")));
        }
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|_| Error::Truncated("token record header".into()))?;
        let field = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
        let (height, width, k) = (field(0), field(1), field(2));
        let mut body = vec![0u8; height * width * 2];
        r.read_exact(&mut body)
            .map_err(|_| Error::Truncated("token indices".into()))?;
        let indices = body
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
            .collect();
        Self::new(height, width, k, indices).map(Some)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_stream(path, std::slice::from_ref(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))?
            .ok_or_else(|| Error::Truncated("empty token file".into()))
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

pub fn write_stream(path: impl AsRef<Path>, grids: &[TokenGrid]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in grids {
        g.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<TokenGrid>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    while let Some(g) = TokenGrid::read_from(&mut r)? {
        out.push(g);
    }
    Ok(out)
}
