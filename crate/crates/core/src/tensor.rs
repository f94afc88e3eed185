//! Three-way tensors, Tucker and CP reparameterizations, and a small stack of
//! linear layers whose updates share two factor matrices.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{format_f64, DenseMatrix};
use crate::optim::{adafish_step, AdaFishState, Hyperparams};

/// Dense `d1 × d2 × d3` tensor, last index fastest.
#[derive(Clone, PartialEq)]
pub struct DenseTensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl DenseTensor3 {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::invalid(format!(
                "tensor {dims:?} needs {} entries, got {}",
                dims.0 * dims.1 * dims.2,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseTensor3::new"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Stacks equally shaped matrices along the first index.
    pub fn from_slices(slices: &[DenseMatrix]) -> Result<Self> {
        let (d2, d3) = slices.first().map_or((0, 0), |m| m.shape());
        let mut data = Vec::with_capacity(slices.len() * d2 * d3);
        for m in slices {
            if m.shape() != (d2, d3) {
                return Err(Error::Dimension {
                    op: "DenseTensor3::from_slices",
                    lhs: (d2, d3),
                    rhs: m.shape(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Self {
            dims: (slices.len(), d2, d3),
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = value;
    }

    /// Frontal slice `i` as a `d2 × d3` matrix.
    pub fn slice(&self, i: usize) -> DenseMatrix {
        let len = self.dims.1 * self.dims.2;
        let start = i * len;
        DenseMatrix::new(self.dims.1, self.dims.2, self.data[start..start + len].to_vec())
            .expect("slice of a valid tensor")
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "tensor shapes differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Header `d1 d2 d3`, then one line per `(i, j)` fibre.
    pub fn to_text(&self) -> String {
        let (d1, d2, d3) = self.dims;
        let mut s = format!("{d1} {d2} {d3}\n");
        if d3 > 0 {
            for fibre in self.data.chunks(d3) {
                let line: Vec<String> = fibre.iter().map(|x| format_f64(*x)).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header {header:?}: {e}"),
            })?;
        if dims.len() != 3 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header needs 3 dimensions, got {}", dims.len()),
            });
        }
        let mut data = Vec::new();
        for (lineno, line) in lines {
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("{tok:?}: {e}"),
                })?);
            }
        }
        Self::new((dims[0], dims[1], dims[2]), data)
    }
}

impl fmt::Debug for DenseTensor3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseTensor3{:?} {:?}", self.dims, self.data)
    }
}

impl std::ops::Index<(usize, usize, usize)> for DenseTensor3 {
    type Output = f64;

    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[self.offset(i, j, k)]
    }
}

/// Mode-`mode` product (1-based): contracts index `mode` of `t` with the
/// columns of `m`, so that index is replaced by one of size `m.rows()`.
pub fn mode_product(t: &DenseTensor3, m: &DenseMatrix, mode: usize) -> Result<DenseTensor3> {
    let (d1, d2, d3) = t.dims;
    let contracted = match mode {
        1 => d1,
        2 => d2,
        3 => d3,
        _ => return Err(Error::invalid(format!("mode must be 1, 2 or 3, got {mode}"))),
    };
    if m.cols() != contracted {
        return Err(Error::Dimension {
            op: "mode_product",
            lhs: (contracted, mode),
            rhs: m.shape(),
        });
    }
    let p = m.rows();
    let out = match mode {
        1 => DenseTensor3::from_fn((p, d2, d3), |a, j, k| {
            (0..d1).fold(0.0, |acc, b| acc + t.get(b, j, k) * m[(a, b)])
        }),
        2 => DenseTensor3::from_fn((d1, p, d3), |i, a, k| {
            (0..d2).fold(0.0, |acc, b| acc + t.get(i, b, k) * m[(a, b)])
        }),
        _ => DenseTensor3::from_fn((d1, d2, p), |i, j, a| {
            (0..d3).fold(0.0, |acc, b| acc + t.get(i, j, b) * m[(a, b)])
        }),
    };
    Ok(out)
}

/// `s · C ×₁ Pᵀ ×₂ Aᵀ ×₃ Bᵀ`, with `C` of size `r × r × r` and factors
/// `P: r × d1`, `A: r × d2`, `B: r × d3`.
#[derive(Clone, Debug, PartialEq)]
pub struct TuckerFactors {
    pub s: f64,
    pub core: DenseTensor3,
    pub p: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl TuckerFactors {
    pub fn new(s: f64, core: DenseTensor3, p: DenseMatrix, a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        let r = p.rows();
        if core.dims() != (r, r, r) || a.rows() != r || b.rows() != r {
            return Err(Error::invalid(format!(
                "Tucker rank mismatch: core {:?}, P {:?}, A {:?}, B {:?}",
                core.dims(),
                p.shape(),
                a.shape(),
                b.shape()
            )));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("TuckerFactors::new"));
        }
        Ok(Self { s, core, p, a, b })
    }

    pub fn rank(&self) -> usize {
        self.p.rows()
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        (self.p.cols(), self.a.cols(), self.b.cols())
    }
}

pub fn tucker_reconstruct(f: &TuckerFactors) -> DenseTensor3 {
    let step = |t: &DenseTensor3, m: &DenseMatrix, mode| {
        mode_product(t, &m.transpose(), mode).expect("factor shapes checked at construction")
    };
    let x = step(&f.core, &f.p, 1);
    let x = step(&x, &f.a, 2);
    let x = step(&x, &f.b, 3);
    x.scaled(f.s)
}

/// `Σ_t λ_t · P_t ∘ A_t ∘ B_t` with `P: r × d1`, `A: r × d2`, `B: r × d3`;
/// row `t` of each factor is the `t`-th rank-one component.
#[derive(Clone, Debug, PartialEq)]
pub struct CpFactors {
    pub lambda: Vec<f64>,
    pub p: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl CpFactors {
    pub fn new(lambda: Vec<f64>, p: DenseMatrix, a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        let r = lambda.len();
        if p.rows() != r || a.rows() != r || b.rows() != r {
            return Err(Error::invalid(format!(
                "CP rank mismatch: {r} weights, P {:?}, A {:?}, B {:?}",
                p.shape(),
                a.shape(),
                b.shape()
            )));
        }
        if lambda.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("CpFactors::new"));
        }
        Ok(Self { lambda, p, a, b })
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    /// Equivalent Tucker form with a superdiagonal core.
    pub fn to_tucker(&self) -> TuckerFactors {
        let r = self.rank();
        let core = DenseTensor3::from_fn((r, r, r), |i, j, k| {
            if i == j && j == k {
                self.lambda[i]
            } else {
                0.0
            }
        });
        TuckerFactors {
            s: 1.0,
            core,
            p: self.p.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }
}

pub fn cp_reconstruct(f: &CpFactors) -> DenseTensor3 {
    let dims = (f.p.cols(), f.a.cols(), f.b.cols());
    DenseTensor3::from_fn(dims, |i, j, k| {
        f.lambda
            .iter()
            .enumerate()
            .fold(0.0, |acc, (t, &l)| acc + l * f.p[(t, i)] * f.a[(t, j)] * f.b[(t, k)])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecompositionKind {
    Lora,
    Tucker,
    Cp,
}

impl FromStr for DecompositionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Self::Lora),
            "tucker" => Ok(Self::Tucker),
            "cp" => Ok(Self::Cp),
            other => Err(Error::invalid(format!("unknown decomposition {other:?}"))),
        }
    }
}

/// Trainable parameters for adapting `12·layers` square `d × d` matrices.
///
/// * `Lora`: an independent `(U, V)` pair of `2·d·r` entries per matrix, so
///   `12·layers·2·d·r` in total.
/// * `Tucker`: `r³ + (12·layers + 2d)·r`.
/// * `Cp`: `(12·layers + 2d + 1)·r`.
pub fn param_count(kind: DecompositionKind, layers: u64, d: u64, r: u64) -> u64 {
    let stack = 12 * layers;
    match kind {
        DecompositionKind::Lora => stack * 2 * d * r,
        DecompositionKind::Tucker => r * r * r + (stack + 2 * d) * r,
        DecompositionKind::Cp => (stack + 2 * d + 1) * r,
    }
}

/// Per-iteration Gram cost of the sliced-core scheme next to per-layer LoRA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceCost {
    /// `(n + k + ℓ·r)·r²`
    pub flops: u64,
    /// `(ℓ + 2)·r²`
    pub storage: u64,
    /// `ℓ·(n + k)·r²`
    pub lora_flops: u64,
    /// `2·ℓ·r²`
    pub lora_storage: u64,
}

impl SliceCost {
    pub fn flop_ratio(&self) -> f64 {
        self.flops as f64 / self.lora_flops as f64
    }

    pub fn storage_ratio(&self) -> f64 {
        self.storage as f64 / self.lora_storage as f64
    }
}

pub fn slice_cost_model(l: u64, n: u64, k: u64, r: u64) -> SliceCost {
    let r2 = r * r;
    SliceCost {
        flops: (n + k + l * r) * r2,
        storage: (l + 2) * r2,
        lora_flops: l * (n + k) * r2,
        lora_storage: 2 * l * r2,
    }
}

/// `ℓ` frozen `n × k` weights with updates `ΔW_l = Uᵀ·C_l·V`, where the
/// `r × r` slices `C_l` are per layer and `U: r × n`, `V: r × k` are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorLoraStack {
    pub w0: Vec<DenseMatrix>,
    pub core: DenseTensor3,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

/// Gradients of a [`TensorLoraStack`] loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads {
    pub core: Vec<DenseMatrix>,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

impl TensorLoraStack {
    pub fn new(w0: Vec<DenseMatrix>, core: DenseTensor3, u: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        let (l, r1, r2) = core.dims();
        let r = u.rows();
        if r1 != r || r2 != r || v.rows() != r {
            return Err(Error::invalid(format!(
                "stack rank mismatch: core {:?}, U {:?}, V {:?}",
                core.dims(),
                u.shape(),
                v.shape()
            )));
        }
        if w0.len() != l {
            return Err(Error::invalid(format!("{} base weights for {l} core slices", w0.len())));
        }
        if let Some(w) = w0.iter().find(|w| w.shape() != (u.cols(), v.cols())) {
            return Err(Error::Dimension {
                op: "TensorLoraStack::new",
                lhs: (u.cols(), v.cols()),
                rhs: w.shape(),
            });
        }
        Ok(Self { w0, core, u, v })
    }

    pub fn layers(&self) -> usize {
        self.w0.len()
    }

    pub fn rank(&self) -> usize {
        self.u.rows()
    }

    /// `C ×₂ Uᵀ ×₃ Vᵀ`, an `ℓ × n × k` tensor.
    pub fn delta(&self) -> DenseTensor3 {
        let x = mode_product(&self.core, &self.u.transpose(), 2).expect("checked shapes");
        mode_product(&x, &self.v.transpose(), 3).expect("checked shapes")
    }

    pub fn delta_slice(&self, l: usize) -> DenseMatrix {
        let c = self.core.slice(l);
        self.u
            .t_matmul(&c.matmul(&self.v).expect("checked shapes"))
            .expect("checked shapes")
    }

    pub fn weight(&self, l: usize) -> DenseMatrix {
        self.w0[l].add(&self.delta_slice(l)).expect("checked shapes")
    }

    /// `Σ_l ‖X·W_l − Y_l‖² / (2B)` and its factor gradients.
    pub fn loss_and_grad(&self, x: &DenseMatrix, targets: &[DenseMatrix]) -> Result<(f64, StackGrads)> {
        if targets.len() != self.layers() {
            return Err(Error::invalid(format!(
                "{} targets for {} layers",
                targets.len(),
                self.layers()
            )));
        }
        let b = x.rows().max(1) as f64;
        let mut loss = 0.0;
        let mut core = Vec::with_capacity(self.layers());
        let mut gu = DenseMatrix::zeros(self.u.rows(), self.u.cols());
        let mut gv = DenseMatrix::zeros(self.v.rows(), self.v.cols());
        for (l, y) in targets.iter().enumerate() {
            let resid = x.matmul(&self.weight(l))?.sub(y)?;
            loss += resid.frobenius_norm_sq() / (2.0 * b);
            // n × k gradient of the dense weight
            let gw = x.t_matmul(&resid)?.scaled(1.0 / b);
            let c = self.core.slice(l);
            core.push(self.u.matmul(&gw)?.matmul_t(&self.v)?);
            gu.axpy(1.0, &c.matmul(&self.v)?.matmul_t(&gw)?)?;
            gv.axpy(1.0, &c.t_matmul(&self.u.matmul(&gw)?)?)?;
        }
        Ok((loss, StackGrads { core, u: gu, v: gv }))
    }
}

/// AdaFish state for a [`TensorLoraStack`]: one `r × r` Gram per core slice
/// plus one each for `U` and `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceFisherState {
    pub slices: Vec<AdaFishState>,
    pub u: AdaFishState,
    pub v: AdaFishState,
}

impl SliceFisherState {
    pub fn new(stack: &TensorLoraStack) -> Self {
        let r = stack.rank();
        Self {
            slices: (0..stack.layers()).map(|_| AdaFishState::new(r, r)).collect(),
            u: AdaFishState::new(r, stack.u.cols()),
            v: AdaFishState::new(r, stack.v.cols()),
        }
    }

    /// Number of stored Gram entries, `(ℓ + 2)·r²`.
    pub fn gram_storage(&self) -> usize {
        self.slices
            .iter()
            .chain([&self.u, &self.v])
            .map(|s| s.h_hat().rows() * s.h_hat().cols())
            .sum()
    }

    pub fn step(&mut self, stack: &mut TensorLoraStack, grads: &StackGrads, hp: &Hyperparams, eta_t: f64) -> Result<()> {
        let (l, r, _) = stack.core.dims();
        let mut slices = Vec::with_capacity(l);
        for (i, (state, g)) in self.slices.iter_mut().zip(&grads.core).enumerate() {
            let mut c = stack.core.slice(i);
            adafish_step(&mut c, g, state, hp, eta_t)?;
            slices.push(c);
        }
        stack.core = DenseTensor3::from_slices(&slices)?;
        debug_assert_eq!(stack.core.dims(), (l, r, r));
        adafish_step(&mut stack.u, &grads.u, &mut self.u, hp, eta_t)?;
        adafish_step(&mut stack.v, &grads.v, &mut self.v, hp, eta_t)?;
        Ok(())
    }
}
