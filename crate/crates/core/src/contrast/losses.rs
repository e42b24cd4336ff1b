//! InfoNCE, per-prototype concentration estimation, and the ProtoNCE
//! objective.

use ndarray::{Array2, Array3};

use super::PrototypeSet;
use crate::error::{Error, Result};

/// Absolute lower bound for concentrations.
pub const PHI_FLOOR: f64 = 1e-3;

/// InfoNCE at temperature τ: mean over rows of
/// `−log( exp(v·v⁺/τ) / Σ_{j=0..r} exp(v·v⁺_j/τ) )` with the positive at
/// index 0 of the softmax.
pub fn info_nce(v: &Array2<f64>, v_pos: &Array2<f64>, negatives: &Array3<f64>, tau: f64) -> Result<f64> {
    info_nce_with_grad(v, v_pos, negatives, tau).map(|(l, _)| l)
}

/// InfoNCE plus its gradient with respect to `v`.
pub fn info_nce_with_grad(
    v: &Array2<f64>,
    v_pos: &Array2<f64>,
    negatives: &Array3<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if tau <= 0.0 {
        return Err(Error::Validation(format!("temperature must be positive, got {tau}")));
    }
    let (n, d) = v.dim();
    if v_pos.dim() != (n, d) {
        return Err(Error::Shape(format!("positives {:?} do not match v {:?}", v_pos.dim(), v.dim())));
    }
    let (nn, r, dd) = negatives.dim();
    if nn != n || dd != d {
        return Err(Error::Shape(format!(
            "negatives {:?} do not match v {:?}",
            negatives.dim(),
            v.dim()
        )));
    }
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros((n, d));
    let mut logits = vec![0.0f64; r + 1];
    for i in 0..n {
        let vi = v.row(i);
        logits[0] = vi.dot(&v_pos.row(i)) / tau;
        for j in 0..r {
            let mut dot = 0.0;
            for k in 0..d {
                dot += vi[k] * negatives[[i, j, k]];
            }
            logits[j + 1] = dot / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &l in logits.iter() {
            denom += (l - max).exp();
        }
        let log_denom = max + denom.ln();
        total += log_denom - logits[0];

        // ∂loss_i/∂v_i = (1/τ)(Σ_j p_j u_j − u_0), folded by 1/n below.
        let p0 = (logits[0] - log_denom).exp();
        for k in 0..d {
            grad[[i, k]] += (p0 - 1.0) * v_pos[[i, k]];
        }
        for j in 0..r {
            let pj = (logits[j + 1] - log_denom).exp();
            for k in 0..d {
                grad[[i, k]] += pj * negatives[[i, j, k]];
            }
        }
    }
    let scale = 1.0 / (n as f64 * tau);
    grad.mapv_inplace(|g| g * scale);
    Ok((total / n as f64, grad))
}

/// Concentration estimate for one cluster:
/// `φ = Σ_z ‖v′_z − c‖₂ / (Z·ln(Z+α))`, floored at [`PHI_FLOOR`].
pub fn concentration(member_feats: &Array2<f64>, centroid: &[f64], alpha: f64) -> Result<f64> {
    let (z, d) = member_feats.dim();
    if z == 0 {
        return Err(Error::Validation("concentration of an empty cluster".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Validation(format!("alpha must be positive, got {alpha}")));
    }
    if centroid.len() != d {
        return Err(Error::Shape(format!("centroid dim {} vs features dim {d}", centroid.len())));
    }
    let mut sum = 0.0;
    for i in 0..z {
        let mut acc = 0.0;
        let row = member_feats.row(i);
        for k in 0..d {
            let diff = row[k] - centroid[k];
            acc += diff * diff;
        }
        sum += acc.sqrt();
    }
    let phi = sum / (z as f64 * (z as f64 + alpha).ln());
    Ok(phi.max(PHI_FLOOR))
}

/// Per-granularity concentrations with the median clamp: raw values from
/// Eq. φ are confined to `[0.05·median, 5·median]` (and never below
/// [`PHI_FLOOR`]), so singleton or degenerate clusters cannot dominate.
pub fn clamp_concentrations(raw: &mut [f64]) {
    let mut sorted: Vec<f64> = raw.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        PHI_FLOOR
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let lo = (0.05 * median).max(PHI_FLOOR);
    let hi = (5.0 * median).max(lo);
    for phi in raw.iter_mut() {
        *phi = phi.clamp(lo, hi);
    }
}

/// ProtoNCE = InfoNCE + mean over rows of
/// `−(1/M) Σ_m log( exp(v·c_s/φ_s) / Σ_{j∈{s}∪negs} exp(v·c_j/φ_j) )`.
///
/// `batch_assignments[m][i]` is row i's cluster at granularity m;
/// `neg_ids[m][i]` are the sampled negative prototype indices, which must
/// exclude the assigned cluster.
pub fn proto_nce(
    v: &Array2<f64>,
    protos: &PrototypeSet,
    batch_assignments: &[Vec<usize>],
    neg_ids: &[Vec<Vec<usize>>],
    info_loss: f64,
) -> Result<f64> {
    proto_nce_with_grad(v, protos, batch_assignments, neg_ids, info_loss, None)
        .map(|(l, _)| l)
}

/// ProtoNCE with its gradient with respect to `v`. When `info_grad` is
/// given it is added into the returned gradient.
pub fn proto_nce_with_grad(
    v: &Array2<f64>,
    protos: &PrototypeSet,
    batch_assignments: &[Vec<usize>],
    neg_ids: &[Vec<Vec<usize>>],
    info_loss: f64,
    info_grad: Option<&Array2<f64>>,
) -> Result<(f64, Array2<f64>)> {
    let (n, d) = v.dim();
    let m_count = protos.granularities.len();
    if batch_assignments.len() != m_count || neg_ids.len() != m_count {
        return Err(Error::Shape("assignments/negatives do not cover every granularity".into()));
    }
    if m_count == 0 {
        return Err(Error::Validation("prototype set has no granularities".into()));
    }
    let mut grad = match info_grad {
        Some(g) => g.clone(),
        None => Array2::zeros((n, d)),
    };
    let mut proto_total = 0.0;
    for (m, gran) in protos.granularities.iter().enumerate() {
        if gran.phi.iter().any(|&p| p < PHI_FLOOR) {
            return Err(Error::Validation(format!(
                "granularity {m} has a concentration below the floor; clamping must prevent this"
            )));
        }
        let assignments = &batch_assignments[m];
        let negs = &neg_ids[m];
        if assignments.len() != n || negs.len() != n {
            return Err(Error::Shape(format!("granularity {m}: batch rows mismatch")));
        }
        for i in 0..n {
            let vi = v.row(i);
            let s = assignments[i];
            if s >= gran.centroids.dim().0 {
                return Err(Error::Shape(format!("granularity {m}: assignment {s} out of range")));
            }
            let ids = &negs[i];
            if ids.iter().any(|&j| j == s) {
                return Err(Error::Validation(format!(
                    "granularity {m}: negatives for row {i} include its own cluster"
                )));
            }
            let mut logits = Vec::with_capacity(ids.len() + 1);
            logits.push(vi.dot(&gran.centroids.row(s)) / gran.phi[s]);
            for &j in ids {
                logits.push(vi.dot(&gran.centroids.row(j)) / gran.phi[j]);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let log_denom = max + denom.ln();
            proto_total += (log_denom - logits[0]) / m_count as f64;

            let scale = 1.0 / (n as f64 * m_count as f64);
            let p0 = (logits[0] - log_denom).exp();
            for k in 0..d {
                grad[[i, k]] += scale * (p0 - 1.0) * gran.centroids[[s, k]] / gran.phi[s];
            }
            for (jj, &j) in ids.iter().enumerate() {
                let pj = (logits[jj + 1] - log_denom).exp();
                for k in 0..d {
                    grad[[i, k]] += scale * pj * gran.centroids[[j, k]] / gran.phi[j];
                }
            }
        }
    }
    Ok((info_loss + proto_total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::PrototypeGranularity;
    use crate::nn::seeded_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed, "unit-rows");
        let mut m: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        for mut row in m.outer_iter_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / norm);
        }
        m
    }

    #[test]
    fn uniform_dots_give_log_r_plus_one() {
        // All candidates at the same dot product → uniform softmax.
        let d = 4;
        let v = Array2::from_elem((3, d), 0.5);
        let pos = Array2::from_elem((3, d), 0.25);
        for r in [1usize, 4, 9] {
            let negs = Array3::from_elem((3, r, d), 0.25);
            let loss = info_nce(&v, &pos, &negs, 0.7).unwrap();
            assert_abs_diff_eq!(loss, ((r + 1) as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn hand_value_one_negative() {
        // v·v⁺ = 1, one negative with dot 0, τ=1 → log(1+e^{−1}) ≈ 0.31326.
        let v = ndarray::array![[1.0, 0.0]];
        let pos = ndarray::array![[1.0, 0.0]];
        let negs = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        let loss = info_nce(&v, &pos, &negs, 1.0).unwrap();
        assert_abs_diff_eq!(loss, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(loss, 0.31326, epsilon = 1e-5);
    }

    #[test]
    fn raising_positive_dot_lowers_loss() {
        let d = 3;
        let pos_a = ndarray::array![[0.2, 0.0, 0.0]];
        let pos_b = ndarray::array![[0.9, 0.0, 0.0]];
        let v = ndarray::array![[1.0, 0.0, 0.0]];
        let negs = Array3::from_shape_vec((1, 2, d), vec![0.1, 0.3, 0.0, -0.2, 0.5, 0.0]).unwrap();
        let la = info_nce(&v, &pos_a, &negs, 0.3).unwrap();
        let lb = info_nce(&v, &pos_b, &negs, 0.3).unwrap();
        assert!(lb < la);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let v = unit_rows(2, 3, 1);
        let negs = Array3::zeros((2, 2, 3));
        assert!(info_nce(&v, &v, &negs, 0.0).is_err());
        assert!(info_nce(&v, &v, &negs, -1.0).is_err());
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        use crate::nn::gradcheck::max_grad_error;
        let (n, r, d) = (3, 4, 8);
        let v = unit_rows(n, d, 2);
        let pos = unit_rows(n, d, 3);
        let mut rng = seeded_rng(4, "nce-negs");
        let negs = Array3::from_shape_fn((n, r, d), |_| rng.random_range(-0.6..0.6));
        let (_, grad) = info_nce_with_grad(&v, &pos, &negs, 0.25).unwrap();
        let flat: Vec<f64> = v.iter().copied().collect();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let (pos_c, negs_c) = (pos.clone(), negs.clone());
        let mut f = |x: &[f64]| {
            let vv = Array2::from_shape_vec((n, d), x.to_vec()).unwrap();
            info_nce(&vv, &pos_c, &negs_c, 0.25).unwrap()
        };
        assert!(max_grad_error(&mut f, &flat, &analytic, 1e-6) < 1e-4);
    }

    #[test]
    fn concentration_hand_values() {
        // All members on the centroid → raw φ = 0 → floor.
        let members = Array2::from_elem((5, 3), 0.4);
        let c = [0.4, 0.4, 0.4];
        assert_abs_diff_eq!(concentration(&members, &c, 10.0).unwrap(), PHI_FLOOR);

        // Z=10, α=10, all distances 1 → 1/ln(20).
        let mut members = Array2::zeros((10, 2));
        for i in 0..10 {
            members[[i, 0]] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let phi = concentration(&members, &[0.0, 0.0], 10.0).unwrap();
        assert_abs_diff_eq!(phi, 1.0 / 20.0f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(phi, 0.33381, epsilon = 1e-5);
    }

    #[test]
    fn concentration_linear_in_distances() {
        let mut rng = seeded_rng(5, "phi-lin");
        let members = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let c = [0.1, -0.2, 0.3, 0.0];
        let phi1 = concentration(&members, &c, 10.0).unwrap();
        // doubling all distances: scale members away from the centroid
        let doubled = Array2::from_shape_fn((8, 4), |(i, j)| c[j] + 2.0 * (members[[i, j]] - c[j]));
        let phi2 = concentration(&doubled, &c, 10.0).unwrap();
        assert_abs_diff_eq!(phi2, 2.0 * phi1, epsilon = 1e-9);
    }

    #[test]
    fn concentration_errors() {
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(concentration(&empty, &[0.0, 0.0, 0.0], 10.0).is_err());
        let members = Array2::zeros((2, 3));
        assert!(concentration(&members, &[0.0, 0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn median_clamp_bounds() {
        let mut raw = vec![0.0, 0.001, 0.1, 0.1, 0.1, 50.0];
        clamp_concentrations(&mut raw);
        let median = 0.1;
        for &phi in &raw {
            assert!(phi >= 0.05 * median - 1e-12);
            assert!(phi <= 5.0 * median + 1e-12);
            assert!(phi >= PHI_FLOOR);
        }
        // All-degenerate clusters collapse to the floor.
        let mut zeros = vec![0.0f64, 0.0];
        for z in zeros.iter_mut() {
            *z = f64::max(*z, PHI_FLOOR);
        }
        clamp_concentrations(&mut zeros);
        assert!(zeros.iter().all(|&p| p >= PHI_FLOOR));
    }

    #[test]
    fn degenerate_prototypes_reduce_to_twice_info_nce() {
        // M=1, prototypes = the per-instance positives, φ = τ, and the same
        // negatives → ProtoNCE = 2·InfoNCE.
        let (n, r, d) = (4, 3, 6);
        let v = unit_rows(n, d, 6);
        let pos = unit_rows(n, d, 7);
        let mut rng = seeded_rng(8, "proto-negs");
        let negs = Array3::from_shape_fn((n, r, d), |_| rng.random_range(-0.5..0.5));
        let tau = 0.2;
        let (info, info_grad) = info_nce_with_grad(&v, &pos, &negs, tau).unwrap();

        // Prototype bank: rows 0..n are the positives, then all negatives.
        let k = n + n * r;
        let mut centroids = Array2::zeros((k, d));
        for i in 0..n {
            centroids.row_mut(i).assign(&pos.row(i));
        }
        for i in 0..n {
            for j in 0..r {
                let row = n + i * r + j;
                for kk in 0..d {
                    centroids[[row, kk]] = negs[[i, j, kk]];
                }
            }
        }
        let gran = PrototypeGranularity {
            centroids,
            phi: vec![tau; k],
            assignments: (0..n).collect(),
        };
        let protos = PrototypeSet { granularities: vec![gran] };
        let assignments = vec![(0..n).collect::<Vec<_>>()];
        let neg_ids = vec![(0..n)
            .map(|i| (0..r).map(|j| n + i * r + j).collect::<Vec<_>>())
            .collect::<Vec<_>>()];
        let (total, grad) =
            proto_nce_with_grad(&v, &protos, &assignments, &neg_ids, info, Some(&info_grad)).unwrap();
        assert_abs_diff_eq!(total, 2.0 * info, epsilon = 1e-9);
        for (g, gi) in grad.iter().zip(info_grad.iter()) {
            assert_abs_diff_eq!(*g, 2.0 * gi, epsilon = 1e-9);
        }
    }

    #[test]
    fn proto_hand_scalar_case() {
        // N=1, M=1, d=2: assigned prototype c_s=(1,0) φ_s=0.5, one negative
        // c_n=(0,1) φ_n=0.25, v=(1,0).
        let v = ndarray::array![[1.0, 0.0]];
        let gran = PrototypeGranularity {
            centroids: ndarray::array![[1.0, 0.0], [0.0, 1.0]],
            phi: vec![0.5, 0.25],
            assignments: vec![0],
        };
        let protos = PrototypeSet { granularities: vec![gran] };
        let (loss, _) =
            proto_nce_with_grad(&v, &protos, &[vec![0]], &[vec![vec![1]]], 0.0, None).unwrap();
        // logits: s → 1/0.5 = 2, neg → 0/0.25 = 0; loss = ln(e²+1) − 2.
        let expect = ((2.0f64).exp() + 1.0).ln() - 2.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn proto_nce_gradient_matches_finite_differences() {
        use crate::nn::gradcheck::max_grad_error;
        let (n, d) = (3, 5);
        let v = unit_rows(n, d, 9);
        let k = 6;
        let centroids = unit_rows(k, d, 10);
        let gran = PrototypeGranularity {
            centroids: centroids.clone(),
            phi: vec![0.3, 0.2, 0.5, 0.4, 0.25, 0.35],
            assignments: vec![0; n],
        };
        let gran2 = PrototypeGranularity {
            centroids,
            phi: vec![0.6, 0.7, 0.2, 0.3, 0.9, 0.5],
            assignments: vec![0; n],
        };
        let protos = PrototypeSet { granularities: vec![gran, gran2] };
        let assignments = vec![vec![0, 2, 4], vec![1, 3, 5]];
        let neg_ids = vec![
            vec![vec![1, 3], vec![0, 5], vec![2, 1]],
            vec![vec![0, 2], vec![4, 5], vec![0, 1]],
        ];
        let (_, grad) =
            proto_nce_with_grad(&v, &protos, &assignments, &neg_ids, 0.0, None).unwrap();
        let flat: Vec<f64> = v.iter().copied().collect();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let (protos_c, a_c, n_c) = (protos, assignments, neg_ids);
        let mut f = |x: &[f64]| {
            let vv = Array2::from_shape_vec((n, d), x.to_vec()).unwrap();
            proto_nce(&vv, &protos_c, &a_c, &n_c, 0.0).unwrap()
        };
        assert!(max_grad_error(&mut f, &flat, &analytic, 1e-6) < 1e-4);
    }

    #[test]
    fn own_cluster_in_negatives_rejected() {
        let v = unit_rows(1, 3, 11);
        let gran = PrototypeGranularity {
            centroids: unit_rows(3, 3, 12),
            phi: vec![0.5; 3],
            assignments: vec![0],
        };
        let protos = PrototypeSet { granularities: vec![gran] };
        let err = proto_nce(&v, &protos, &[vec![0]], &[vec![vec![0, 1]]], 0.0).unwrap_err();
        assert_eq!(err.category(), "validation");
    }

    #[test]
    fn phi_below_floor_rejected() {
        let v = unit_rows(1, 3, 13);
        let gran = PrototypeGranularity {
            centroids: unit_rows(2, 3, 14),
            phi: vec![1e-9, 0.5],
            assignments: vec![0],
        };
        let protos = PrototypeSet { granularities: vec![gran] };
        let err = proto_nce(&v, &protos, &[vec![0]], &[vec![vec![1]]], 0.0).unwrap_err();
        assert_eq!(err.category(), "validation");
    }

}
