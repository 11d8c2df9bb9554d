use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::params::{ParamKind, ParamStore};
use super::BN_EPS;
use crate::error::{structural_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Absorbs every batch norm `P.bn` into the convolution `P.w`.
///
/// With `s = gamma / sqrt(var + eps)` the weights become `w * s` and the
/// bias `(b - mean) * s + beta`. Norm channels beyond the convolution's
/// outputs belong to a concatenated pooling branch (see
/// [`super::downsampler`]) and become `P.pool_scale` / `P.pool_shift`.
/// A store without batch norms is returned unchanged.
pub fn fold_batchnorm(store: &ParamStore) -> Result<ParamStore> {
    let prefixes: Vec<String> = store
        .entries()
        .iter()
        .filter_map(|e| e.name.strip_suffix(".bn.gamma").map(String::from))
        .collect();
    let mut out = store.clone();
    for p in prefixes {
        let get = |suffix: &str| -> Result<Vec<f64>> {
            Ok(store
                .get(&format!("{p}.bn.{suffix}"))
                .map_err(|_| structural_err!("batch norm {p} lacks its {suffix}"))?
                .data()
                .to_vec())
        };
        let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("mean")?, get("var")?);
        let wname = format!("{p}.w");
        let w = store
            .get(&wname)
            .map_err(|_| structural_err!("batch norm {p} has no adjacent convolution"))?;
        let [co, ci, kh, kw] = w.shape();
        let cb = gamma.len();
        if cb < co || beta.len() != cb || mean.len() != cb || var.len() != cb {
            return Err(structural_err!("batch norm {p} has {cb} channels for a {co}-filter convolution"));
        }
        let scale: Vec<f64> = (0..cb).map(|c| gamma[c] / math::sqrt(var[c] + BN_EPS)).collect();
        let shift: Vec<f64> = (0..cb).map(|c| beta[c] - mean[c] * scale[c]).collect();

        let per = ci * kh * kw;
        let mut wf = w.clone();
        for o in 0..co {
            for v in &mut wf.data_mut()[o * per..(o + 1) * per] {
                *v *= scale[o];
            }
        }
        let bname = format!("{p}.b");
        let bias: Vec<f64> = match store.get(&bname) {
            Ok(b) => (0..co).map(|o| b.data()[o] * scale[o] + shift[o]).collect(),
            Err(_) => shift[..co].to_vec(),
        };
        out.insert(&wname, ParamKind::Trainable, wf);
        out.insert(&bname, ParamKind::Trainable, Tensor::vector(&bias));
        if cb > co {
            out.insert(&format!("{p}.pool_scale"), ParamKind::Buffer, Tensor::vector(&scale[co..]));
            out.insert(&format!("{p}.pool_shift"), ParamKind::Buffer, Tensor::vector(&shift[co..]));
        }
        for s in ["gamma", "beta", "mean", "var"] {
            out.remove(&format!("{p}.bn.{s}"));
        }
    }
    Ok(out)
}
