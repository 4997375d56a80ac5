//! Incentive inference: behavioral latents per observed entity and an
//! instant latent per observer.

pub mod behavior;
pub mod instant;

use std::collections::BTreeMap;

use crate::numerics::{Graph, NumericsError, Tensor, Var};

/// Latent vectors keyed by entity id; unseen ids read as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Latents {
    map: BTreeMap<u32, Vec<f64>>,
}

impl Latents {
    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    /// Concatenated latents of `ids`, zero for ids never written.
    pub fn gather(&self, ids: &[u32], dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.len() * dim);
        for id in ids {
            match self.map.get(id) {
                Some(v) => out.extend_from_slice(v),
                None => out.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        out
    }

    pub fn scatter(&mut self, ids: &[u32], values: &[f64], dim: usize) {
        for (id, v) in ids.iter().zip(values.chunks(dim)) {
            self.map.insert(*id, v.to_vec());
        }
    }

    /// Latents per slot (`ids[k]` when `present[k]`), zero otherwise.
    pub fn slots(&self, ids: &[u32], present: &[bool], dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.len() * dim);
        for (id, &p) in ids.iter().zip(present) {
            match (p, self.map.get(id)) {
                (true, Some(v)) => out.extend_from_slice(v),
                _ => out.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        out
    }
}

/// `sum |pred - target|` over valid entries divided by the number of valid
/// flags. Each flag in `valid[k]` covers `group` consecutive scalars of the
/// row-major `preds[k]` / `targets[k]`, so a flag stands for one (entity,
/// step) pair whatever the per-entity width.
pub fn masked_l1(
    g: &mut Graph,
    preds: &[Var],
    targets: &[Vec<f64>],
    valid: &[Vec<bool>],
    group: usize,
) -> Result<Var, NumericsError> {
    let count = valid.iter().flatten().filter(|&&v| v).count();
    if count == 0 {
        return Err(NumericsError::Shape("masked_l1 needs at least one valid entry".into()));
    }
    let mut total: Option<Var> = None;
    for ((p, t), v) in preds.iter().zip(targets).zip(valid) {
        let (rows, cols) = (g.value(*p).rows(), g.value(*p).cols());
        if t.len() != rows * cols || v.len() * group != t.len() {
            return Err(NumericsError::Shape("masked_l1 operand sizes".into()));
        }
        let target = g.constant(Tensor::matrix(rows, cols, t.clone()));
        let diff = g.sub(*p, target)?;
        let diff = g.abs(diff);
        let mask: Vec<f64> = v
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { 1.0 } else { 0.0 }, group))
            .collect();
        let masked = g.mul_const(diff, Tensor::matrix(rows, cols, mask))?;
        let s = g.sum(masked);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one step");
    Ok(g.scale(total, 1.0 / count as f64))
}
