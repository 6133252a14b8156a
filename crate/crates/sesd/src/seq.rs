//! Latent frame sequences shared by the codec, the trainer and the samplers.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A length-T sequence of D-dimensional continuous latent frames plus
/// per-frame validity and corruption masks.
///
/// `valid[t]` is false for silence padding; `corrupt[t]` distinguishes noisy
/// frames (true) from clean prompt frames (false). Corruption status is only
/// meaningful on valid frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub frames: Tensor,
    pub valid: Vec<bool>,
    pub corrupt: Vec<bool>,
}

impl LatentSequence {
    pub fn new(frames: Tensor, valid: Vec<bool>, corrupt: Vec<bool>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Shape(format!(
                "latent frames must be rank 2, got {:?}",
                frames.shape()
            )));
        }
        let t = frames.dim(0);
        if valid.len() != t || corrupt.len() != t {
            return Err(Error::Shape(format!(
                "mask lengths {}/{} do not match {} frames",
                valid.len(),
                corrupt.len(),
                t
            )));
        }
        if valid.iter().zip(&corrupt).any(|(&v, &c)| c && !v) {
            return Err(Error::Internal(
                "corrupt mask set on an invalid frame".into(),
            ));
        }
        Ok(LatentSequence { frames, valid, corrupt })
    }

    /// All-valid, all-corrupt sequence around raw frames.
    pub fn fully_noisy(frames: Tensor) -> Result<Self> {
        let t = frames.dim(0);
        LatentSequence::new(frames, vec![true; t], vec![true; t])
    }

    /// All-valid clean sequence (corrupt mask zero).
    pub fn clean(frames: Tensor) -> Result<Self> {
        let t = frames.dim(0);
        LatentSequence::new(frames, vec![true; t], vec![false; t])
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn latent_dim(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Copy of the first `n` frames as a clean sequence.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let d = self.latent_dim();
        let mut data = Vec::with_capacity(n * d);
        for t in 0..n {
            data.extend_from_slice(self.frames.row(t));
        }
        LatentSequence::clean(Tensor::new(vec![n, d], data, self.frames.dtype())?)
    }

    /// Copy of frames `from..T` as a clean sequence.
    pub fn suffix(&self, from: usize) -> Result<Self> {
        let t_total = self.num_frames();
        let d = self.latent_dim();
        let mut data = Vec::with_capacity((t_total - from) * d);
        for t in from..t_total {
            data.extend_from_slice(self.frames.row(t));
        }
        LatentSequence::clean(Tensor::new(vec![t_total - from, d], data, self.frames.dtype())?)
    }
}

/// `true` when the sequence should be padded to `target` frames for the
/// network; the pad frames are marked invalid and non-corrupt.
pub fn pad_to(seq: &LatentSequence, target: usize) -> Result<LatentSequence> {
    let t = seq.num_frames();
    if target < t {
        return Err(Error::Shape(format!("pad target {} below length {}", target, t)));
    }
    if target == t {
        return Ok(seq.clone());
    }
    let d = seq.latent_dim();
    let mut data = seq.frames.data().to_vec();
    data.resize(target * d, 0.0);
    let mut valid = seq.valid.clone();
    valid.resize(target, false);
    let mut corrupt = seq.corrupt.clone();
    corrupt.resize(target, false);
    LatentSequence::new(Tensor::new(vec![target, d], data, seq.frames.dtype())?, valid, corrupt)
}

pub fn round_up_to(n: usize, multiple: usize) -> usize {
    if multiple == 0 {
        n
    } else {
        n.div_ceil(multiple) * multiple
    }
}
