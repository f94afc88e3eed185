//! Binary model and optimizer checkpoints.
//!
//! All integers are `u64` and all reals `f64`, little-endian. Matrices are
//! written as `rows, cols` followed by row-major entries.
//!
//! ```text
//! version                         (= 1)
//! activation                      (0 = tanh, 1 = relu)
//! layer count L
//! L × { scale: f64, W0, U, V, bias }
//! section count S
//! S × { name length, name bytes (UTF-8), kind, orientation, t, matrices… }
//! ```
//!
//! Section kinds: 0 AdaFish (`m̂`, `ĥ`), 1 AdamW (`m`, `v`), 2 SGD (`m`),
//! 3 bias-corrected momentum (`m̂`). Orientation is 0 for Gram-on-rows and 1
//! for Gram-on-columns; it is 0 for the non-AdaFish kinds.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::lora::{Activation, LoraLinear, MlpModel};
use crate::optim::{AdaFishState, AdamWState, MomentumState, Orientation, ParamState, SgdState};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Upper bound on any single length field, guarding against corrupt input.
const MAX_LEN: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    /// Optimizer state keyed by parameter name.
    pub optimizer: Vec<(String, ParamState)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        put_u64(&mut w, CHECKPOINT_VERSION);
        put_u64(
            &mut w,
            match self.model.activation() {
                Activation::Tanh => 0,
                Activation::Relu => 1,
            },
        );
        put_u64(&mut w, self.model.layers().len() as u64);
        for (layer, bias) in self.model.layers().iter().zip(self.model.biases()) {
            put_f64(&mut w, layer.scale());
            for m in [layer.base(), layer.u(), layer.v(), bias] {
                put_matrix(&mut w, m);
            }
        }
        put_u64(&mut w, self.optimizer.len() as u64);
        for (name, state) in &self.optimizer {
            put_u64(&mut w, name.len() as u64);
            w.extend_from_slice(name.as_bytes());
            match state {
                ParamState::AdaFish { orientation, state } => {
                    put_u64(&mut w, 0);
                    put_u64(
                        &mut w,
                        match orientation {
                            Orientation::GramOnRows => 0,
                            Orientation::GramOnCols => 1,
                        },
                    );
                    put_u64(&mut w, state.step_count());
                    put_matrix(&mut w, state.m_hat());
                    put_matrix(&mut w, state.h_hat());
                }
                ParamState::AdamW(s) => {
                    put_u64(&mut w, 1);
                    put_u64(&mut w, 0);
                    put_u64(&mut w, s.t);
                    put_matrix(&mut w, &s.m);
                    put_matrix(&mut w, &s.v);
                }
                ParamState::Sgd(s) => {
                    put_u64(&mut w, 2);
                    put_u64(&mut w, 0);
                    put_u64(&mut w, s.t);
                    put_matrix(&mut w, &s.m);
                }
                ParamState::Momentum(s) => {
                    put_u64(&mut w, 3);
                    put_u64(&mut w, 0);
                    put_u64(&mut w, s.t);
                    put_matrix(&mut w, &s.m_hat);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let version = get_u64(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let activation = match get_u64(&mut r)? {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        };
        let n_layers = get_len(&mut r)?;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        let mut biases = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let scale = get_f64(&mut r)?;
            let w0 = get_matrix(&mut r)?;
            let u = get_matrix(&mut r)?;
            let v = get_matrix(&mut r)?;
            biases.push(get_matrix(&mut r)?);
            layers.push(LoraLinear::new(w0, u, v, scale)?);
        }
        let model = MlpModel::new(layers, biases, activation)?;

        let n_sections = get_len(&mut r)?;
        let mut optimizer = Vec::with_capacity(n_sections.min(1024));
        for _ in 0..n_sections {
            let len = get_len(&mut r)?;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("section name: {e}")))?;
            let kind = get_u64(&mut r)?;
            let orient = get_u64(&mut r)?;
            let t = get_u64(&mut r)?;
            let state = match kind {
                0 => {
                    let orientation = match orient {
                        0 => Orientation::GramOnRows,
                        1 => Orientation::GramOnCols,
                        other => return Err(Error::Checkpoint(format!("unknown orientation {other}"))),
                    };
                    let m_hat = get_matrix(&mut r)?;
                    let h_hat = get_matrix(&mut r)?;
                    ParamState::AdaFish {
                        orientation,
                        state: AdaFishState::from_parts(m_hat, h_hat, t)?,
                    }
                }
                1 => {
                    let m = get_matrix(&mut r)?;
                    let v = get_matrix(&mut r)?;
                    if m.shape() != v.shape() {
                        return Err(Error::Checkpoint(format!("AdamW moments differ in shape for {name}")));
                    }
                    ParamState::AdamW(AdamWState { m, v, t })
                }
                2 => ParamState::Sgd(SgdState {
                    m: get_matrix(&mut r)?,
                    t,
                }),
                3 => ParamState::Momentum(MomentumState {
                    m_hat: get_matrix(&mut r)?,
                    t,
                }),
                other => return Err(Error::Checkpoint(format!("unknown section kind {other}"))),
            };
            optimizer.push((name, state));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(w: &mut Vec<u8>, x: u64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, x: f64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_matrix(w: &mut Vec<u8>, m: &DenseMatrix) {
    put_u64(w, m.rows() as u64);
    put_u64(w, m.cols() as u64);
    for &x in m.as_slice() {
        put_f64(w, x);
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_len(r: &mut &[u8]) -> Result<usize> {
    let n = get_u64(r)?;
    if n > MAX_LEN {
        return Err(Error::Checkpoint(format!("length field {n} is implausibly large")));
    }
    Ok(n as usize)
}

fn get_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_matrix(r: &mut &[u8]) -> Result<DenseMatrix> {
    let rows = get_len(r)?;
    let cols = get_len(r)?;
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c.saturating_mul(8) <= r.len())
        .ok_or_else(|| Error::Checkpoint(format!("matrix {rows}x{cols} exceeds remaining input")))?;
    let data = (0..count).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
    DenseMatrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(format!("matrix payload: {e}")))
}
