//! Per-byte transcript conditioning: a frozen seeded toy encoder, a loader
//! for externally precomputed embeddings, and the classifier-free-guidance
//! drop flag.

use crate::params::name_seed;
use crate::tensor::{Dtype, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const EMB_MAGIC: &[u8] = b"SESD-EMB-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingSource {
    Toy,
    External,
}

/// Per-byte conditioning vectors for one transcript.
///
/// When `dropped` is true the encoding is still carried around, but
/// cross-attention masks every text row so only the null embedding is
/// attendable.
#[derive(Clone, Debug)]
pub struct TranscriptEncoding {
    pub vectors: Tensor,
    pub dropped: bool,
    pub source: EncodingSource,
}

impl TranscriptEncoding {
    pub fn byte_count(&self) -> usize {
        self.vectors.dim(0)
    }

    pub fn text_dim(&self) -> usize {
        self.vectors.dim(1)
    }
}

/// Marks the encoding dropped when `u < p_drop`; the vectors are untouched
/// because masking happens inside cross-attention.
pub fn apply_text_dropout(mut enc: TranscriptEncoding, u: f64, p_drop: f64) -> TranscriptEncoding {
    enc.dropped = u < p_drop;
    enc
}

/// Frozen random byte-level encoder standing in for a pretrained character
/// LM. Each output row mixes a window of three byte embeddings through a
/// fixed two-layer projection, so row `i` depends only on bytes `i-1..=i+1`.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub d_text: usize,
    pub max_bytes: usize,
    embed: Tensor,  // [256, d]
    w1: Tensor,     // [3d, d]
    b1: Tensor,     // [d]
    w2: Tensor,     // [d, d]
    b2: Tensor,     // [d]
}

impl ToyTextEncoder {
    pub fn new(d_text: usize, max_bytes: usize, seed: u64) -> Self {
        let mk = |tag: &str, shape: &[usize], std: f64| -> Tensor {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, tag));
            Tensor::randn(shape, &mut rng, Dtype::Double).scale(std)
        };
        let d = d_text;
        ToyTextEncoder {
            d_text,
            max_bytes,
            embed: mk("toy_text.embed", &[256, d], 1.0),
            w1: mk("toy_text.w1", &[3 * d, d], 1.0 / (3.0 * d as f64).sqrt()),
            b1: mk("toy_text.b1", &[d], 0.1),
            w2: mk("toy_text.w2", &[d, d], 1.0 / (d as f64).sqrt()),
            b2: mk("toy_text.b2", &[d], 0.1),
        }
    }

    /// Encodes raw UTF-8 bytes; errors on over-length transcripts.
    pub fn encode(&self, transcript: &str) -> Result<TranscriptEncoding> {
        let bytes = transcript.as_bytes();
        if bytes.is_empty() {
            return Err(Error::User("empty transcript".into()));
        }
        if bytes.len() > self.max_bytes {
            return Err(Error::User(format!(
                "transcript of {} bytes exceeds maximum {}",
                bytes.len(),
                self.max_bytes
            )));
        }
        let d = self.d_text;
        let m = bytes.len();
        let mut out = Vec::with_capacity(m * d);
        let mut window = vec![0.0; 3 * d];
        let mut hidden = vec![0.0; d];
        for i in 0..m {
            window.iter_mut().for_each(|v| *v = 0.0);
            for (off, slot) in [-1isize, 0, 1].into_iter().enumerate() {
                let j = i as isize + slot;
                if j < 0 || j as usize >= m {
                    continue;
                }
                let row = self.embed.row(bytes[j as usize] as usize);
                window[off * d..(off + 1) * d].copy_from_slice(row);
            }
            hidden.iter_mut().for_each(|v| *v = 0.0);
            crate::tensor::matmul_acc(1, 3 * d, d, &window, self.w1.data(), &mut hidden);
            for (h, b) in hidden.iter_mut().zip(self.b1.data()) {
                *h = crate::tape::gelu(*h + b);
            }
            let mut row_out = self.b2.data().to_vec();
            crate::tensor::matmul_acc(1, d, d, &hidden, self.w2.data(), &mut row_out);
            out.extend_from_slice(&row_out);
        }
        Ok(TranscriptEncoding {
            vectors: Tensor::new(vec![m, d], out, Dtype::Double)?,
            dropped: false,
            source: EncodingSource::Toy,
        })
    }

    /// SHA-256 over the frozen tables; must never change during training.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        crate::params::hex_string(&h.finalize())
    }
}

/// Writes an `[m, d]` matrix in the binary tensor exchange format:
/// magic `SESD-EMB-1`, u32 `m`, u32 `d`, then `m*d` little-endian f32 values
/// row-major.
pub fn write_embedding(path: &Path, matrix: &Tensor) -> Result<()> {
    if matrix.rank() != 2 {
        return Err(Error::Shape(format!("embedding must be rank 2, got {:?}", matrix.shape())));
    }
    let mut buf = Vec::with_capacity(EMB_MAGIC.len() + 8 + matrix.len() * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(matrix.dim(0) as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim(1) as u32).to_le_bytes());
    for v in matrix.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a matrix written by [`write_embedding`].
pub fn read_embedding(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::User(format!("cannot open embedding file {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < EMB_MAGIC.len() + 8 || &buf[..EMB_MAGIC.len()] != EMB_MAGIC {
        return Err(Error::Format(format!("{} is not an SESD-EMB-1 file", path.display())));
    }
    let m = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[14..18].try_into().unwrap()) as usize;
    let expect = EMB_MAGIC.len() + 8 + m * d * 4;
    if buf.len() != expect {
        return Err(Error::Format(format!(
            "embedding file {} has {} bytes, expected {}",
            path.display(),
            buf.len(),
            expect
        )));
    }
    let mut data = Vec::with_capacity(m * d);
    for chunk in buf[18..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Tensor::new(vec![m, d], data, Dtype::Double)
}

/// Loads externally precomputed per-byte features for `transcript`,
/// verifying that row count matches the byte count.
pub fn load_external(path: &Path, transcript: &str) -> Result<TranscriptEncoding> {
    let vectors = read_embedding(path)?;
    let m = transcript.as_bytes().len();
    if vectors.dim(0) != m {
        return Err(Error::User(format!(
            "embedding file {} has {} rows but transcript has {} bytes",
            path.display(),
            vectors.dim(0),
            m
        )));
    }
    Ok(TranscriptEncoding { vectors, dropped: false, source: EncodingSource::External })
}

/// File name convention for external per-transcript embeddings.
pub fn external_embedding_filename(transcript: &str) -> String {
    let mut h = Sha256::new();
    h.update(transcript.as_bytes());
    let digest = h.finalize();
    format!("{}.emb", crate::params::hex_string(&digest[..8]))
}
