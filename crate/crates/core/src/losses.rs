//! Cosine-similarity objectives for fine-tuning.
//!
//! All three terms compare an online embedding with a target embedding. The
//! target argument is always detached before use, so gradients only ever flow
//! into the online side.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross-instance positive pair term.
    pub lambda_pp: f64,
    /// Weight of the negative pair term.
    pub lambda_np: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pp: 0.8,
            lambda_np: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pp", self.lambda_pp), ("lambda_np", self.lambda_np)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_pp: f64,
    pub l_np: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_con: f64, l_pp: f64, l_np: f64, weights: &LossWeights) -> Self {
        Self {
            l_con,
            l_pp,
            l_np,
            l_total: total_loss(l_con, l_pp, l_np, weights),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_con, self.l_pp, self.l_np, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `l_con + λ_PP·l_pp + λ_NP·l_np`.
pub fn total_loss(l_con: f64, l_pp: f64, l_np: f64, weights: &LossWeights) -> f64 {
    l_con + weights.lambda_pp * l_pp + weights.lambda_np * l_np
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.dims() != b.dims() {
        return Err(Error::Contract(format!(
            "embedding matrices must be equal-shaped N×D, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.dim(0)? == 0 {
        return Err(Error::Contract("empty embedding batch".into()));
    }
    Ok(())
}

fn row_norms(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum(D::Minus1)?.sqrt()?;
    let host: Vec<f64> = norms.detach().to_dtype(DType::F64)?.to_vec1()?;
    if let Some(row) = host.iter().position(|n| *n == 0.0) {
        return Err(Error::ZeroNorm { row });
    }
    Ok(norms)
}

/// Row-wise cosine similarity of two `N×D` matrices.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let dot = (a * b)?.sum(D::Minus1)?;
    Ok(((dot / na)? / nb)?)
}

/// `−mean_i cos(pred_online_i, proj_target_i)`.
pub fn contrastive_loss(pred_online: &Tensor, proj_target: &Tensor) -> Result<Tensor> {
    let cos = cosine_rows(pred_online, &proj_target.detach())?;
    Ok(cos.mean_all()?.neg()?)
}

/// View-swapped average of [`contrastive_loss`]: pairs `(q(view1), g'(view2))`
/// and `(q(view2), g'(view1))`.
pub fn symmetric_contrastive_loss(
    pred_view1: &Tensor,
    proj_target_view2: &Tensor,
    pred_view2: &Tensor,
    proj_target_view1: &Tensor,
) -> Result<Tensor> {
    let a = contrastive_loss(pred_view1, proj_target_view2)?;
    let b = contrastive_loss(pred_view2, proj_target_view1)?;
    Ok(((a + b)? * 0.5)?)
}

/// Checks that `pairing` is a permutation of `0..n`.
pub fn check_pairing(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n {
        return Err(Error::Contract(format!(
            "pairing has {} entries for a batch of {n}",
            pairing.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in pairing {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract("pairing is not a permutation".into()));
        }
    }
    Ok(())
}

/// Cross-instance positive pair loss:
/// `−1/(2N) Σ_i [cos(online_i, target_p(i)) + cos(online_p(i), target_i)]`.
pub fn cross_instance_pp_loss(
    feat_online: &Tensor,
    feat_target: &Tensor,
    pairing: &[usize],
) -> Result<Tensor> {
    check_pair(feat_online, feat_target)?;
    let n = feat_online.dim(0)?;
    check_pairing(pairing, n)?;
    let idx: Vec<u32> = pairing.iter().map(|&p| p as u32).collect();
    let idx = Tensor::from_vec(idx, n, feat_online.device())?;
    let target = feat_target.detach();
    let forward = cosine_rows(feat_online, &target.index_select(&idx, 0)?)?;
    let backward = cosine_rows(&feat_online.index_select(&idx, 0)?, &target)?;
    let sum = (forward.sum_all()? + backward.sum_all()?)?;
    Ok((sum * (-0.5 / n as f64))?)
}

/// Negative pair loss `+mean_i cos(target_orig_i, online_neg_i)`; minimizing it
/// pushes negatively augmented views away from their originals.
pub fn negative_pair_loss(feat_target_orig: &Tensor, feat_online_neg: &Tensor) -> Result<Tensor> {
    let cos = cosine_rows(&feat_target_orig.detach(), feat_online_neg)?;
    Ok(cos.mean_all()?)
}

/// Scalar value of a rank-0 loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn mat(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect()
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        mat(&refs)
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn contrastive_examples() {
        let a = mat(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        assert!((scalar(&contrastive_loss(&a, &a).unwrap()).unwrap() + 1.0).abs() < 1e-12);
        let o = contrastive_loss(&mat(&[&[1.0, 0.0]]), &mat(&[&[0.0, 2.0]])).unwrap();
        assert_eq!(scalar(&o).unwrap(), 0.0);
        let v = contrastive_loss(&mat(&[&[1.0, 0.0]]), &mat(&[&[1.0, 1.0]])).unwrap();
        assert!((scalar(&v).unwrap() + 0.5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn pp_examples() {
        let u = mat(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let l = cross_instance_pp_loss(&u, &u, &[1, 2, 0]).unwrap();
        assert!((scalar(&l).unwrap() + 1.0).abs() < 1e-12);
        let e = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = cross_instance_pp_loss(&e, &e, &[1, 0]).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0);
    }

    #[test]
    fn pp_matches_scalar_loop_oracle() {
        let on = random(5, 7, 1);
        let tg = random(5, 7, 2);
        let p = [3, 0, 4, 1, 2];
        let mut oracle = 0.0;
        for i in 0..5 {
            oracle += cos(&on[i], &tg[p[i]]) + cos(&on[p[i]], &tg[i]);
        }
        oracle *= -1.0 / 10.0;
        let got = scalar(&cross_instance_pp_loss(&to_tensor(&on), &to_tensor(&tg), &p).unwrap())
            .unwrap();
        assert!((got - oracle).abs() < 1e-6);
    }

    #[test]
    fn np_examples_and_oracle() {
        let a = mat(&[&[1.0, 2.0, 3.0]]);
        assert!((scalar(&negative_pair_loss(&a, &a).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let neg = mat(&[&[-2.0, -4.0, -6.0]]);
        assert!((scalar(&negative_pair_loss(&a, &neg).unwrap()).unwrap() + 1.0).abs() < 1e-12);

        let t = random(4, 6, 3);
        let o = random(4, 6, 4);
        let oracle: f64 = (0..4).map(|i| cos(&t[i], &o[i])).sum::<f64>() / 4.0;
        let got = scalar(&negative_pair_loss(&to_tensor(&t), &to_tensor(&o)).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-6);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(-1.0, -1.0, -1.0, &w), -2.4);
        let none = LossWeights {
            lambda_pp: 0.0,
            lambda_np: 0.0,
        };
        assert_eq!(total_loss(-0.3, 0.7, -0.9, &none), -0.3);
        let t = total_loss(-0.5, -0.25, 0.5, &w);
        assert_eq!(t, -0.5 + 0.8 * -0.25 + 0.6 * 0.5);
        assert!((t + 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_rows_are_rejected() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = mat(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(contrastive_loss(&a, &b), Err(Error::ZeroNorm { row: 1 })));
        assert!(matches!(negative_pair_loss(&a, &b), Err(Error::ZeroNorm { row: 1 })));
        assert!(matches!(
            cross_instance_pp_loss(&b, &a, &[1, 0]),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn bad_pairing_is_rejected() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(cross_instance_pp_loss(&a, &a, &[0, 0]).is_err());
        assert!(cross_instance_pp_loss(&a, &a, &[0]).is_err());
    }

    #[test]
    fn target_side_gets_no_gradient() {
        let on = Var::from_tensor(&to_tensor(&random(3, 8, 5))).unwrap();
        let tg = Var::from_tensor(&to_tensor(&random(3, 8, 6))).unwrap();
        for loss in [
            contrastive_loss(on.as_tensor(), tg.as_tensor()).unwrap(),
            cross_instance_pp_loss(on.as_tensor(), tg.as_tensor(), &[2, 0, 1]).unwrap(),
            negative_pair_loss(tg.as_tensor(), on.as_tensor()).unwrap(),
        ] {
            let grads = loss.backward().unwrap();
            assert!(grads.get(tg.as_tensor()).is_none());
            assert!(grads.get(on.as_tensor()).is_some());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn losses_are_scale_invariant(seed in 0u64..10_000, c in 1e-3f64..1e3, row in 0usize..4) {
            let on = random(4, 5, seed);
            let tg = random(4, 5, seed + 1);
            let mut on_s = on.clone();
            for v in &mut on_s[row] { *v *= c; }
            let mut tg_s = tg.clone();
            for v in &mut tg_s[(row + 1) % 4] { *v *= c; }
            let p = [1, 2, 3, 0];
            let (a, b) = (to_tensor(&on), to_tensor(&tg));
            let (as_, bs) = (to_tensor(&on_s), to_tensor(&tg_s));
            let pairs = [
                (contrastive_loss(&a, &b).unwrap(), contrastive_loss(&as_, &bs).unwrap()),
                (cross_instance_pp_loss(&a, &b, &p).unwrap(), cross_instance_pp_loss(&as_, &bs, &p).unwrap()),
                (negative_pair_loss(&b, &a).unwrap(), negative_pair_loss(&bs, &as_).unwrap()),
            ];
            for (x, y) in pairs {
                prop_assert!((scalar(&x).unwrap() - scalar(&y).unwrap()).abs() < 1e-6);
            }
        }

        #[test]
        fn pp_is_invariant_to_relabeling(seed in 0u64..10_000) {
            // relabel batch indices by a permutation s; pairing p becomes s∘p∘s⁻¹
            let on = random(5, 4, seed);
            let tg = random(5, 4, seed + 7);
            let p = [2usize, 4, 0, 1, 3];
            let s = [4usize, 2, 3, 0, 1];
            let mut inv = [0usize; 5];
            for (i, &si) in s.iter().enumerate() { inv[si] = i; }
            let on_r: Vec<Vec<f64>> = (0..5).map(|k| on[inv[k]].clone()).collect();
            let tg_r: Vec<Vec<f64>> = (0..5).map(|k| tg[inv[k]].clone()).collect();
            let p_r: Vec<usize> = (0..5).map(|k| s[p[inv[k]]]).collect();
            let a = scalar(&cross_instance_pp_loss(&to_tensor(&on), &to_tensor(&tg), &p).unwrap()).unwrap();
            let b = scalar(&cross_instance_pp_loss(&to_tensor(&on_r), &to_tensor(&tg_r), &p_r).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
