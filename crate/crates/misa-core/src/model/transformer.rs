//! Single transformer layer with exact forward/backward flows.
//!
//! Forward: `Q = XWq`, `K = XWk`, `V = XWv`, per-head scores
//! `S = softmax(QK^T / sqrt(dk))`, context `O = SV`, `Attn = OWo`,
//! residual `U = Attn + X`, `Z = LayerNorm(U)`, ReLU feed-forward
//! `Z1 = relu(ZW1 + b1)`, `Z2 = Z1W2 + b2`. The cache holds exactly the
//! tensors the backward pass needs for the requested trainable modules, so
//! its element count can be compared against the symbolic memory accounting.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cost::ArchShape;
use crate::error::ModelError;
use crate::matrix::DenseMatrix;
use crate::partition::ModuleRole;

/// Stabilizer added to the LayerNorm variance before the square root.
pub const LAYERNORM_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl TransformerLayerParams {
    pub fn zeros(h: usize) -> Self {
        Self {
            wq: DenseMatrix::zeros(h, h),
            wk: DenseMatrix::zeros(h, h),
            wv: DenseMatrix::zeros(h, h),
            wo: DenseMatrix::zeros(h, h),
            w1: DenseMatrix::zeros(h, 4 * h),
            w2: DenseMatrix::zeros(4 * h, h),
            b1: vec![0.0; 4 * h],
            b2: vec![0.0; h],
        }
    }

    pub fn random(h: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |rows: usize, cols: usize| {
            DenseMatrix::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        };
        Self {
            wq: mat(h, h),
            wk: mat(h, h),
            wv: mat(h, h),
            wo: mat(h, h),
            w1: mat(h, 4 * h),
            w2: mat(4 * h, h),
            b1: vec![0.0; 4 * h],
            b2: vec![0.0; h],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn module(&self, role: ModuleRole) -> Result<&DenseMatrix, ModelError> {
        match role {
            ModuleRole::Wq => Ok(&self.wq),
            ModuleRole::Wk => Ok(&self.wk),
            ModuleRole::Wv => Ok(&self.wv),
            ModuleRole::Wo => Ok(&self.wo),
            ModuleRole::W1 => Ok(&self.w1),
            ModuleRole::W2 => Ok(&self.w2),
            ModuleRole::Other => Err(ModelError::UnknownRole(role)),
        }
    }

    pub fn module_mut(&mut self, role: ModuleRole) -> Result<&mut DenseMatrix, ModelError> {
        match role {
            ModuleRole::Wq => Ok(&mut self.wq),
            ModuleRole::Wk => Ok(&mut self.wk),
            ModuleRole::Wv => Ok(&mut self.wv),
            ModuleRole::Wo => Ok(&mut self.wo),
            ModuleRole::W1 => Ok(&mut self.w1),
            ModuleRole::W2 => Ok(&mut self.w2),
            ModuleRole::Other => Err(ModelError::UnknownRole(role)),
        }
    }
}

/// Activations retained for backward. `q`, `k`, `v`, `s`, `u` and the ReLU
/// mask are always stored (a frozen layer still propagates `dX`); the rest
/// appear only when a module that needs them is trainable.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Option<DenseMatrix>,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    /// Per-head attention rows, stacked as `(batch * heads * s) x s`.
    pub s: DenseMatrix,
    pub o: Option<DenseMatrix>,
    pub u: DenseMatrix,
    /// Indicator of `ZW1 + b1 > 0`, stored as 0/1 entries.
    pub relu_mask: DenseMatrix,
    pub z: Option<DenseMatrix>,
    pub z1: Option<DenseMatrix>,
}

impl LayerCache {
    pub fn element_count(&self) -> u64 {
        let opt = |m: &Option<DenseMatrix>| m.as_ref().map_or(0, |m| m.len() as u64);
        self.q.len() as u64
            + self.k.len() as u64
            + self.v.len() as u64
            + self.s.len() as u64
            + self.u.len() as u64
            + self.relu_mask.len() as u64
            + opt(&self.x)
            + opt(&self.o)
            + opt(&self.z)
            + opt(&self.z1)
    }
}

fn needs_x(need: &BTreeSet<ModuleRole>) -> bool {
    need.contains(&ModuleRole::Wq)
        || need.contains(&ModuleRole::Wk)
        || need.contains(&ModuleRole::Wv)
}

fn layernorm_rows(u: &DenseMatrix) -> DenseMatrix {
    let h = u.cols() as f64;
    DenseMatrix::from_fn(u.rows(), u.cols(), |i, j| {
        let row = u.row(i);
        let mu = row.iter().sum::<f64>() / h;
        let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / h;
        let sigma = (var + LAYERNORM_DELTA).sqrt();
        (u.get(i, j) - mu) / sigma
    })
}

/// Forward pass. `heads` is the attention head count `a`; `batch` tells how
/// the `(batch * s) x h` input rows group into sequences.
pub fn layer_forward(
    x: &DenseMatrix,
    params: &TransformerLayerParams,
    heads: usize,
    batch: usize,
    need: &BTreeSet<ModuleRole>,
) -> Result<(DenseMatrix, LayerCache), ModelError> {
    let h = params.hidden_dim();
    if x.cols() != h {
        return Err(ModelError::ShapeMismatch {
            expected: format!("input with {h} columns"),
            got: format!("{} columns", x.cols()),
        });
    }
    if batch == 0 || x.rows() % batch != 0 {
        return Err(ModelError::ShapeMismatch {
            expected: format!("row count divisible by batch {batch}"),
            got: format!("{} rows", x.rows()),
        });
    }
    if heads == 0 || h % heads != 0 {
        return Err(ModelError::ShapeMismatch {
            expected: format!("hidden dim {h} divisible by heads"),
            got: format!("{heads} heads"),
        });
    }
    if need.contains(&ModuleRole::Other) {
        return Err(ModelError::UnknownRole(ModuleRole::Other));
    }
    let s_len = x.rows() / batch;
    let dk = h / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = x.matmul(&params.wq);
    let k = x.matmul(&params.wk);
    let v = x.matmul(&params.wv);

    // Per-(batch, head) attention blocks; scores stacked row-blocks of s x s.
    let mut scores = DenseMatrix::zeros(batch * heads * s_len, s_len);
    let mut o = DenseMatrix::zeros(batch * s_len, h);
    for bi in 0..batch {
        for hd in 0..heads {
            let base = (bi * heads + hd) * s_len;
            for i in 0..s_len {
                let qi = &q.row(bi * s_len + i)[hd * dk..(hd + 1) * dk];
                let mut row_max = f64::NEG_INFINITY;
                let mut logits = vec![0.0; s_len];
                for (j, logit) in logits.iter_mut().enumerate() {
                    let kj = &k.row(bi * s_len + j)[hd * dk..(hd + 1) * dk];
                    let mut dot = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        dot += a * b;
                    }
                    *logit = dot * scale;
                    row_max = row_max.max(*logit);
                }
                let mut total = 0.0;
                for logit in &mut logits {
                    *logit = (*logit - row_max).exp();
                    total += *logit;
                }
                for (j, &w) in logits.iter().enumerate() {
                    scores.set(base + i, j, w / total);
                }
            }
            for i in 0..s_len {
                for d in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..s_len {
                        acc += scores.get(base + i, j) * v.get(bi * s_len + j, hd * dk + d);
                    }
                    o.set(bi * s_len + i, hd * dk + d, acc);
                }
            }
        }
    }

    let attn = o.matmul(&params.wo);
    let u = attn.add(x);
    let z = layernorm_rows(&u);

    let mut z1 = z.matmul(&params.w1);
    for i in 0..z1.rows() {
        let row = z1.row_mut(i);
        for (val, &b) in row.iter_mut().zip(&params.b1) {
            *val += b;
        }
    }
    let relu_mask = z1.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    for (val, &mask) in z1.data_mut().iter_mut().zip(relu_mask.data()) {
        *val *= mask;
    }

    let mut z2 = z1.matmul(&params.w2);
    for i in 0..z2.rows() {
        let row = z2.row_mut(i);
        for (val, &b) in row.iter_mut().zip(&params.b2) {
            *val += b;
        }
    }

    let cache = LayerCache {
        x: needs_x(need).then(|| x.clone()),
        q,
        k,
        v,
        s: scores,
        o: need.contains(&ModuleRole::Wo).then_some(o),
        u,
        relu_mask,
        z: need.contains(&ModuleRole::W1).then_some(z),
        z1: need.contains(&ModuleRole::W2).then_some(z1),
    };
    Ok((z2, cache))
}

/// Closed-form LayerNorm backward: recomputes mean and sigma from the cached
/// pre-norm residual and applies
/// `dU = (dZ - mean(dZ) - z * mean(dZ .* z)) / sigma` per row.
pub fn layernorm_backward(d_z: &DenseMatrix, u: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
    if !d_z.same_shape(u) {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{:?}", u.shape()),
            got: format!("{:?}", d_z.shape()),
        });
    }
    let h = u.cols() as f64;
    let mut out = DenseMatrix::zeros(u.rows(), u.cols());
    for i in 0..u.rows() {
        let urow = u.row(i);
        let grow = d_z.row(i);
        let mu = urow.iter().sum::<f64>() / h;
        let var = urow.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / h;
        let sigma = (var + LAYERNORM_DELTA).sqrt();
        let z: Vec<f64> = urow.iter().map(|&x| (x - mu) / sigma).collect();
        let mean_g = grow.iter().sum::<f64>() / h;
        let mean_gz = grow.iter().zip(&z).map(|(&g, &zi)| g * zi).sum::<f64>() / h;
        let orow = out.row_mut(i);
        for ((o, &g), &zi) in orow.iter_mut().zip(grow).zip(&z) {
            *o = (g - mean_g - zi * mean_gz) / sigma;
        }
    }
    Ok(out)
}

/// Rowwise softmax Jacobian-vector product:
/// `dA_ij = S_ij * (dS_ij - sum_k dS_ik S_ik)`.
pub fn softmax_backward(d_s: &DenseMatrix, s: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
    if !d_s.same_shape(s) {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{:?}", s.shape()),
            got: format!("{:?}", d_s.shape()),
        });
    }
    let mut out = DenseMatrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let srow = s.row(i);
        let sum: f64 = srow.iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(ModelError::UnnormalizedSoftmaxRow { row: i, sum });
        }
        let grow = d_s.row(i);
        let dot: f64 = grow.iter().zip(srow).map(|(&g, &p)| g * p).sum();
        let orow = out.row_mut(i);
        for ((o, &g), &p) in orow.iter_mut().zip(grow).zip(srow) {
            *o = p * (g - dot);
        }
    }
    Ok(out)
}

/// Backward pass: gradients for the requested modules plus `dX`.
/// The input gradient accumulates all four paths into `X` (the Q/K/V
/// projections and the residual).
pub fn layer_backward(
    d_out: &DenseMatrix,
    cache: &LayerCache,
    params: &TransformerLayerParams,
    heads: usize,
    batch: usize,
    need: &BTreeSet<ModuleRole>,
) -> Result<(BTreeMap<ModuleRole, DenseMatrix>, DenseMatrix), ModelError> {
    if need.contains(&ModuleRole::Other) {
        return Err(ModelError::UnknownRole(ModuleRole::Other));
    }
    let h = params.hidden_dim();
    let s_len = d_out.rows() / batch;
    if d_out.rows() % batch != 0 || d_out.cols() != h {
        return Err(ModelError::ShapeMismatch {
            expected: format!("({batch}*s) x {h} output gradient"),
            got: format!("{:?}", d_out.shape()),
        });
    }
    let dk = h / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut grads = BTreeMap::new();

    // FFN backward.
    let d_z1_linear = d_out.matmul_a_bt(&params.w2);
    if need.contains(&ModuleRole::W2) {
        let z1 = cache.z1.as_ref().ok_or_else(|| ModelError::CacheMismatch("W2".into()))?;
        grads.insert(ModuleRole::W2, z1.matmul_at_b(d_out));
    }
    let mut d_z1 = d_z1_linear;
    for (g, &mask) in d_z1.data_mut().iter_mut().zip(cache.relu_mask.data()) {
        *g *= mask;
    }
    if need.contains(&ModuleRole::W1) {
        let z = cache.z.as_ref().ok_or_else(|| ModelError::CacheMismatch("W1".into()))?;
        grads.insert(ModuleRole::W1, z.matmul_at_b(&d_z1));
    }
    let d_z = d_z1.matmul_a_bt(&params.w1);

    // LayerNorm and residual.
    let d_u = layernorm_backward(&d_z, &cache.u)?;
    let d_attn = &d_u;

    // Output projection.
    if need.contains(&ModuleRole::Wo) {
        let o = cache.o.as_ref().ok_or_else(|| ModelError::CacheMismatch("Wo".into()))?;
        grads.insert(ModuleRole::Wo, o.matmul_at_b(d_attn));
    }
    let d_o = d_attn.matmul_a_bt(&params.wo);

    // Attention backward per (batch, head).
    let mut d_q = DenseMatrix::zeros(batch * s_len, h);
    let mut d_k = DenseMatrix::zeros(batch * s_len, h);
    let mut d_v = DenseMatrix::zeros(batch * s_len, h);
    for bi in 0..batch {
        for hd in 0..heads {
            let base = (bi * heads + hd) * s_len;
            // dS = dO V^T, dV = S^T dO within the head slice.
            let mut d_s = DenseMatrix::zeros(s_len, s_len);
            for i in 0..s_len {
                for j in 0..s_len {
                    let mut acc = 0.0;
                    for d in 0..dk {
                        acc += d_o.get(bi * s_len + i, hd * dk + d)
                            * cache.v.get(bi * s_len + j, hd * dk + d);
                    }
                    d_s.set(i, j, acc);
                }
            }
            for j in 0..s_len {
                for d in 0..dk {
                    let mut acc = 0.0;
                    for i in 0..s_len {
                        acc += cache.s.get(base + i, j) * d_o.get(bi * s_len + i, hd * dk + d);
                    }
                    d_v.set(bi * s_len + j, hd * dk + d, acc);
                }
            }
            let s_block = DenseMatrix::from_fn(s_len, s_len, |i, j| cache.s.get(base + i, j));
            let d_a = softmax_backward(&d_s, &s_block)?;
            // dQ = dA K / sqrt(dk), dK = dA^T Q / sqrt(dk).
            for i in 0..s_len {
                for d in 0..dk {
                    let mut acc_q = 0.0;
                    let mut acc_k = 0.0;
                    for j in 0..s_len {
                        acc_q += d_a.get(i, j) * cache.k.get(bi * s_len + j, hd * dk + d);
                        acc_k += d_a.get(j, i) * cache.q.get(bi * s_len + j, hd * dk + d);
                    }
                    d_q.set(bi * s_len + i, hd * dk + d, acc_q * scale);
                    d_k.set(bi * s_len + i, hd * dk + d, acc_k * scale);
                }
            }
        }
    }

    if needs_x(need) {
        let x = cache.x.as_ref().ok_or_else(|| ModelError::CacheMismatch("Wq/Wk/Wv".into()))?;
        if need.contains(&ModuleRole::Wq) {
            grads.insert(ModuleRole::Wq, x.matmul_at_b(&d_q));
        }
        if need.contains(&ModuleRole::Wk) {
            grads.insert(ModuleRole::Wk, x.matmul_at_b(&d_k));
        }
        if need.contains(&ModuleRole::Wv) {
            grads.insert(ModuleRole::Wv, x.matmul_at_b(&d_v));
        }
    }

    // dX: projection paths plus the residual path through U.
    let mut d_x = d_q.matmul_a_bt(&params.wq);
    d_x.add_assign(&d_k.matmul_a_bt(&params.wk));
    d_x.add_assign(&d_v.matmul_a_bt(&params.wv));
    d_x.add_assign(&d_u);

    Ok((grads, d_x))
}

/// Symbolic element count of the activations a training step must retain,
/// given each layer's set of trainable roles. A frozen layer stores
/// `abs^2 + 8bsh`; role extras are deduplicated when modules share a tensor.
pub fn count_stored_activation_elems(
    shape: &ArchShape,
    active: &[BTreeSet<ModuleRole>],
) -> Result<u64, ModelError> {
    if active.len() != shape.l as usize {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{} per-layer role sets", shape.l),
            got: format!("{}", active.len()),
        });
    }
    let bsh = shape.b * shape.s * shape.h;
    let abs2 = shape.a * shape.b * shape.s * shape.s;
    let mut total = 0u64;
    for roles in active {
        if roles.contains(&ModuleRole::Other) {
            return Err(ModelError::UnknownRole(ModuleRole::Other));
        }
        let mut layer = abs2 + 8 * bsh;
        if roles.contains(&ModuleRole::Wq)
            || roles.contains(&ModuleRole::Wk)
            || roles.contains(&ModuleRole::Wv)
        {
            layer += bsh; // X, shared by the three projections
        }
        if roles.contains(&ModuleRole::Wo) {
            layer += bsh; // O
        }
        if roles.contains(&ModuleRole::W1) {
            layer += bsh; // Z
        }
        if roles.contains(&ModuleRole::W2) {
            layer += 4 * bsh; // Z1
        }
        total += layer;
    }
    Ok(total)
}
