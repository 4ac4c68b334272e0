//! Forward propagation of affine bounds through the whole network.
//!
//! Every intermediate tensor keeps affine bounds in the perturbed input and
//! is concretized when a relaxation needs its interval. The α values for
//! the attention products come from an [`AlphaPolicy`], which sees the
//! bounded factors of each product before it is relaxed.

use crate::bounds::{
    add_bounds, concretize, input_bounds, propagate_affine, propagate_rowwise, propagate_unary, scale_bounds,
    AffineBoundPair, Interval, PerturbationSpec,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{LayerWeights, Model, ModelConfig, Pooling};
use crate::relaxations::{
    matmul_bounds, matmul_bounds_corrupted, relu_relaxation, softmax_bounds, ProductShape,
};
use crate::scalar::{fmin, Scalar};
use crate::strategies::{BlockKey, MatmulKind};

/// Bounded factors of one attention product `A·Bᵀ`.
pub struct ProductInputs<'a, T> {
    pub a: &'a AffineBoundPair<T>,
    pub b: &'a AffineBoundPair<T>,
    pub a_int: &'a Interval<T>,
    pub b_int: &'a Interval<T>,
    pub shape: ProductShape,
    pub spec: &'a PerturbationSpec,
}

/// Supplies the α block for each attention product.
pub trait AlphaPolicy<T: Scalar> {
    fn block(&mut self, key: BlockKey, inputs: &ProductInputs<'_, T>) -> Result<Vec<T>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PropagationOptions {
    /// Sign-flip a plane coefficient in every attention product. Unsound;
    /// only for demonstrating that the sampling checks catch broken bounds.
    #[doc(hidden)]
    pub corrupt_planes: bool,
}

/// Bounds at the network output.
#[derive(Clone, Debug)]
pub struct NetworkBounds<T> {
    /// Concretized encoder output of every layer.
    pub hidden: Vec<Interval<T>>,
    pub logits: AffineBoundPair<T>,
    pub logit_int: Interval<T>,
    /// One row per wrong class `i`, bounding `logit[label] − logit[i]`.
    pub margins: AffineBoundPair<T>,
    pub margin_int: Interval<T>,
    /// Wrong class index of each margin row.
    pub margin_classes: Vec<usize>,
    pub margin_lb: T,
}

/// Row-wise mean-subtraction norm as a matrix: `M[k][c] = γ_c (δ_kc − 1/m)`.
pub fn norm_matrix<T: Scalar>(gamma: &[T]) -> Matrix<T> {
    let m = gamma.len();
    let inv = T::c(1.0 / m as f64);
    Matrix::from_fn(m, m, |k, c| {
        let d = if k == c { T::one() - inv } else { -inv };
        gamma[c] * d
    })
}

/// Difference rows `e_label − e_i` for every `i ≠ label`.
pub fn margin_matrix<T: Scalar>(num_classes: usize, label: usize) -> (Matrix<T>, Vec<usize>) {
    let others: Vec<usize> = (0..num_classes).filter(|&i| i != label).collect();
    let m = Matrix::from_fn(others.len(), num_classes, |r, c| {
        if c == label {
            T::one()
        } else if c == others[r] {
            -T::one()
        } else {
            T::zero()
        }
    });
    (m, others)
}

pub fn propagate_network<T: Scalar>(
    model: &Model<T>,
    spec: &PerturbationSpec,
    label: usize,
    policy: &mut dyn AlphaPolicy<T>,
    opts: PropagationOptions,
) -> Result<NetworkBounds<T>> {
    let cfg = &model.config;
    if spec.x0.shape() != (cfg.seq_len, cfg.hidden_size) {
        return Err(Error::shape(format!(
            "input has shape {}x{}, model expects {}x{}",
            spec.x0.rows(),
            spec.x0.cols(),
            cfg.seq_len,
            cfg.hidden_size
        )));
    }
    if label >= cfg.num_classes {
        return Err(Error::Config(format!("label {label} out of range for {} classes", cfg.num_classes)));
    }
    let mut x = input_bounds::<T>(spec);
    let mut hidden = Vec::with_capacity(cfg.num_layers);
    for (li, layer) in model.layers.iter().enumerate() {
        x = propagate_layer(layer, cfg, li, &x, spec, policy, opts)?;
        hidden.push(concretize(&x, spec)?);
    }

    let n = cfg.seq_len;
    let m = cfg.hidden_size;
    let pooled = match cfg.pooling {
        Pooling::FirstToken => x.gather(&(0..m).collect::<Vec<_>>()),
        Pooling::Mean => {
            let inv = T::c(1.0 / n as f64);
            let w = Matrix::from_fn(m, n * m, |c, j| if j % m == c { inv } else { T::zero() });
            propagate_affine(&x, &w, &vec![T::zero(); m])?
        }
    };
    let pooled = match &model.pooler {
        Some(p) => propagate_affine(&pooled, &p.w.transpose(), &p.b)?,
        None => pooled,
    };
    let logits = propagate_affine(&pooled, &model.classifier.w.transpose(), &model.classifier.b)?;
    let logit_int = concretize(&logits, spec)?;
    let (diff, margin_classes) = margin_matrix::<T>(cfg.num_classes, label);
    let margins = propagate_affine(&logits, &diff, &vec![T::zero(); diff.rows()])?;
    let margin_int = concretize(&margins, spec)?;
    let margin_lb = margin_int.lo.iter().skip(1).fold(margin_int.lo[0], |a, &b| fmin(b, a));
    Ok(NetworkBounds { hidden, logits, logit_int, margins, margin_int, margin_classes, margin_lb })
}

fn propagate_layer<T: Scalar>(
    layer: &LayerWeights<T>,
    cfg: &ModelConfig,
    li: usize,
    x: &AffineBoundPair<T>,
    spec: &PerturbationSpec,
    policy: &mut dyn AlphaPolicy<T>,
    opts: PropagationOptions,
) -> Result<AffineBoundPair<T>> {
    let n = cfg.seq_len;
    let m = cfg.hidden_size;
    let dk = cfg.head_dim;
    let q = propagate_rowwise(x, n, &layer.w_q, &layer.b_q)?;
    let k = propagate_rowwise(x, n, &layer.w_k, &layer.b_k)?;
    let v = propagate_rowwise(x, n, &layer.w_v, &layer.b_v)?;
    let qi = concretize(&q, spec)?;
    let ki = concretize(&k, spec)?;
    let vi = concretize(&v, spec)?;
    let product = if opts.corrupt_planes { matmul_bounds_corrupted::<T> } else { matmul_bounds::<T> };
    let scale = T::c(1.0 / (dk as f64).sqrt());

    let mut concat = AffineBoundPair::zeros(n * m, x.k());
    for head in 0..cfg.num_heads {
        let off = head * dk;
        let head_idx: Vec<usize> = (0..n).flat_map(|r| (0..dk).map(move |c| r * m + off + c)).collect();
        let (qh, qhi) = (q.gather(&head_idx), qi.gather(&head_idx));
        let (kh, khi) = (k.gather(&head_idx), ki.gather(&head_idx));
        let (vh, vhi) = (v.gather(&head_idx), vi.gather(&head_idx));

        let qk = ProductShape { rows: n, cols: n, inner: dk };
        let inputs = ProductInputs { a: &qh, b: &kh, a_int: &qhi, b_int: &khi, shape: qk, spec };
        let alphas = policy.block(BlockKey { layer: li, head, matmul: MatmulKind::QK }, &inputs)?;
        let scores = scale_bounds(&product(&qh, &kh, &qhi, &khi, qk, &alphas)?, scale);
        let score_int = concretize(&scores, spec)?;
        let probs = softmax_bounds(&scores, &score_int, n, n, spec)?;
        let unit = Interval::new(vec![T::zero(); n * n], vec![T::one(); n * n]);
        let prob_int = concretize(&probs, spec)?.intersect(&unit);

        // B = V_hᵀ: row c, inner index j.
        let vt_idx: Vec<usize> = (0..dk).flat_map(|c| (0..n).map(move |j| j * dk + c)).collect();
        let (vt, vti) = (vh.gather(&vt_idx), vhi.gather(&vt_idx));
        let av = ProductShape { rows: n, cols: dk, inner: n };
        let inputs = ProductInputs { a: &probs, b: &vt, a_int: &prob_int, b_int: &vti, shape: av, spec };
        let alphas = policy.block(BlockKey { layer: li, head, matmul: MatmulKind::AV }, &inputs)?;
        let out = product(&probs, &vt, &prob_int, &vti, av, &alphas)?;
        concat.scatter(&head_idx, &out);
    }
    let attn = if cfg.use_output_projection {
        propagate_rowwise(&concat, n, &layer.w_o, &layer.b_o)?
    } else {
        propagate_rowwise(&concat, n, &Matrix::identity(m), &layer.b_o)?
    };
    let h1 = propagate_rowwise(&add_bounds(x, &attn)?, n, &norm_matrix(&layer.norm1_gamma), &layer.norm1_beta)?;

    let f = propagate_rowwise(&h1, n, &layer.w_1, &layer.b_1)?;
    let fi = concretize(&f, spec)?;
    let relax = (0..fi.len()).map(|j| relu_relaxation(fi.lo[j], fi.hi[j])).collect::<Result<Vec<_>>>()?;
    let f = propagate_unary(&f, &relax)?;
    let f2 = propagate_rowwise(&f, n, &layer.w_2, &layer.b_2)?;
    propagate_rowwise(&add_bounds(&h1, &f2)?, n, &norm_matrix(&layer.norm2_gamma), &layer.norm2_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::norm_rows;

    #[test]
    fn norm_matrix_matches_direct_norm() {
        let gamma = vec![1.5_f64, -0.5, 2.0];
        let beta = vec![0.1, 0.2, 0.3];
        let x = Matrix::from_rows(&[vec![1.0, 4.0, -2.0]]).unwrap();
        let direct = norm_rows(&x, &gamma, &beta);
        let via = crate::model::affine_rows(&x, &norm_matrix(&gamma), &beta).unwrap();
        for c in 0..3 {
            assert!((direct[(0, c)] - via[(0, c)]).abs() < 1e-14);
        }
    }

    #[test]
    fn margin_rows() {
        let (m, others) = margin_matrix::<f64>(3, 1);
        assert_eq!(others, vec![0, 2]);
        assert_eq!(m.to_rows(), vec![vec![-1.0, 1.0, 0.0], vec![0.0, 1.0, -1.0]]);
    }
}
