//! Sinusoidal spatial and temporal positional encodings.
//!
//! Spatial: the first `C/2` channels encode the row, the last `C/2` the
//! column. Positions are normalized to `(0, 2π]` as `(i + 1) / extent * 2π`.
//! Within a half of width `D`, channel pair `(2j, 2j+1)` holds
//! `(sin, cos)(pos / 10000^(2j/D))`. Temporal: the same scheme over all `C`
//! channels with the raw frame index as position.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPERATURE: f64 = 10000.0;

/// `e_pos^s`, `e_pos^t` and their broadcast sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    /// `[C, 1, H, W]`
    pub spatial: Tensor,
    /// `[C, T, 1, 1]`
    pub temporal: Tensor,
    /// `[C, T, H, W]`
    pub combined: Tensor,
}

impl PositionalEncoding {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize) -> Result<Self> {
        let spatial = spatial_encoding(channels, height, width)?;
        let temporal = temporal_encoding(channels, frames)?;
        let combined = combine(&spatial, &temporal)?;
        Ok(PositionalEncoding {
            spatial,
            temporal,
            combined,
        })
    }

    /// The combined encoding as one row per token, ordered `(t, y, x)`: `[T*H*W, C]`.
    pub fn tokens(&self) -> Tensor {
        channel_major_to_tokens(&self.combined)
    }
}

/// `[C, A, B, D]` -> `[A*B*D, C]`.
pub(crate) fn channel_major_to_tokens(t: &Tensor) -> Tensor {
    let c = t.shape()[0];
    let rest = t.numel() / c.max(1);
    let mut out = vec![0.0; t.numel()];
    for ch in 0..c {
        for p in 0..rest {
            out[p * c + ch] = t.data()[ch * rest + p];
        }
    }
    Tensor::new(vec![rest, c], out).expect("token layout")
}

fn frequency(pair: usize, width: usize) -> f64 {
    TEMPERATURE.powf(2.0 * pair as f64 / width as f64)
}

fn encode_into(dst: &mut [f64], pos: f64) {
    let width = dst.len();
    for (i, v) in dst.iter_mut().enumerate() {
        let arg = pos / frequency(i / 2, width);
        *v = if i % 2 == 0 { arg.sin() } else { arg.cos() };
    }
}

pub fn spatial_encoding(channels: usize, height: usize, width: usize) -> Result<Tensor> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::config(format!(
            "spatial encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let mut out = Tensor::zeros(&[channels, 1, height, width]);
    let mut buf = vec![0.0; half];
    for y in 0..height {
        encode_into(&mut buf, (y + 1) as f64 / height as f64 * TAU);
        for (c, v) in buf.iter().enumerate() {
            for x in 0..width {
                out.set(&[c, 0, y, x], *v);
            }
        }
    }
    for x in 0..width {
        encode_into(&mut buf, (x + 1) as f64 / width as f64 * TAU);
        for (c, v) in buf.iter().enumerate() {
            for y in 0..height {
                out.set(&[half + c, 0, y, x], *v);
            }
        }
    }
    Ok(out)
}

pub fn temporal_encoding(channels: usize, frames: usize) -> Result<Tensor> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::config(format!(
            "temporal encoding needs an even channel count, got {channels}"
        )));
    }
    let mut out = Tensor::zeros(&[channels, frames, 1, 1]);
    let mut buf = vec![0.0; channels];
    for t in 0..frames {
        encode_into(&mut buf, t as f64);
        for (c, v) in buf.iter().enumerate() {
            out.set(&[c, t, 0, 0], *v);
        }
    }
    Ok(out)
}

/// `combined[c,t,h,w] = spatial[c,0,h,w] + temporal[c,t,0,0]`.
pub fn combine(spatial: &Tensor, temporal: &Tensor) -> Result<Tensor> {
    let (s, t) = (spatial.shape(), temporal.shape());
    if s.len() != 4 || t.len() != 4 || s[1] != 1 || t[2] != 1 || t[3] != 1 {
        return Err(Error::input(format!(
            "expected [C,1,H,W] and [C,T,1,1], got {s:?} and {t:?}"
        )));
    }
    if s[0] != t[0] {
        return Err(Error::input(format!(
            "channel mismatch: spatial {} vs temporal {}",
            s[0], t[0]
        )));
    }
    let (c, frames, h, w) = (s[0], t[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[c, frames, h, w]);
    let hw = h * w;
    let dst = out.data_mut();
    for ch in 0..c {
        for f in 0..frames {
            let tv = temporal.data()[ch * frames + f];
            let base = (ch * frames + f) * hw;
            for p in 0..hw {
                dst[base + p] = spatial.data()[ch * hw + p] + tv;
            }
        }
    }
    Ok(out)
}
