use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::Op;
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Gradient of a scalar `output` with respect to every tensor in `wrt`.
///
/// Tensors in `wrt` that do not influence `output` (including untracked
/// constants) receive zeros. With `create_graph` the returned gradients stay
/// linked to the graph, so differentiating them again yields second-order
/// terms; without it they are detached constants.
pub fn grad(output: &Tensor, wrt: &ParamSet, create_graph: bool) -> Result<ParamSet> {
    let tensors: Vec<&Tensor> = wrt.tensors().collect();
    let grads = grad_tensors(output, &tensors, create_graph)?;
    let mut entries = Vec::with_capacity(grads.len());
    for ((name, _), g) in wrt.iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::non_finite(format!("gradient of {name}")));
        }
        entries.push((name.into(), g));
    }
    ParamSet::new(entries)
}

/// Like [`grad`], over a plain list of tensors.
pub fn grad_tensors(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::NotScalar {
            shape: output.shape().to_vec(),
        });
    }
    let wanted: BTreeSet<u64> = wrt.iter().filter_map(|t| t.node_id()).collect();
    let mut found: BTreeMap<u64, Tensor> = BTreeMap::new();

    if let Some(out_id) = output.node_id() {
        // Reachable subgraph; parents always have smaller ids than children,
        // so descending id order is a valid reverse topological order.
        let mut nodes: BTreeMap<u64, Tensor> = BTreeMap::new();
        let mut stack = vec![output.clone()];
        while let Some(t) = stack.pop() {
            let id = t.node_id().expect("tracked");
            if nodes.contains_key(&id) {
                continue;
            }
            for p in t.node().expect("tracked").op.parents() {
                if !nodes.contains_key(&p.node_id().expect("tracked")) {
                    stack.push(p.clone());
                }
            }
            nodes.insert(id, t);
        }

        let mut pending: BTreeMap<u64, Tensor> = BTreeMap::new();
        pending.insert(out_id, Tensor::ones(output.shape())?);
        for (id, t) in nodes.iter().rev() {
            let Some(g) = pending.remove(id) else {
                continue;
            };
            if wanted.contains(id) {
                found.insert(*id, g.clone());
            }
            for (parent, pg) in backward(t, &g)? {
                let pid = parent.node_id().expect("tracked");
                let acc = match pending.remove(&pid) {
                    Some(prev) => prev.add(&pg)?,
                    None => pg,
                };
                pending.insert(pid, acc);
            }
        }
    }

    wrt.iter()
        .map(|t| {
            let g = match t.node_id().and_then(|id| found.get(&id)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape())?,
            };
            Ok(if create_graph { g } else { g.detach() })
        })
        .collect()
}

/// Vector-Jacobian products for the tracked parents of `out`.
fn backward<'a>(out: &'a Tensor, g: &Tensor) -> Result<Vec<(&'a Tensor, Tensor)>> {
    let op = &out.node().expect("tracked").op;
    let mut res = Vec::with_capacity(2);
    let mut push = |p: &'a Tensor, f: &dyn Fn() -> Result<Tensor>| -> Result<()> {
        if p.is_tracked() {
            res.push((p, f()?));
        }
        Ok(())
    };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(a, &|| Ok(g.clone()))?;
            push(b, &|| Ok(g.clone()))?;
        }
        Op::Sub(a, b) => {
            push(a, &|| Ok(g.clone()))?;
            push(b, &|| g.neg())?;
        }
        Op::Mul(a, b) => {
            push(a, &|| g.mul(b))?;
            push(b, &|| g.mul(a))?;
        }
        Op::Affine(a, k) => push(a, &|| g.scale(*k))?,
        Op::MatMul(a, b) => {
            push(a, &|| g.matmul(&b.transpose()?))?;
            push(b, &|| a.transpose()?.matmul(g))?;
        }
        Op::Transpose(a) => push(a, &|| g.transpose())?,
        Op::MaskMul(a, m) => push(a, &|| g.mask_mul(m.clone()))?,
        Op::Sigmoid(a) => push(a, &|| {
            let s = a.sigmoid()?;
            g.mul(&s.mul(&s.affine(-1.0, 1.0)?)?)
        })?,
        Op::Softplus(a) => push(a, &|| g.mul(&a.sigmoid()?))?,
        Op::Sum(a) => push(a, &|| g.expand(a.shape()))?,
        Op::Expand(a) => push(a, &|| g.sum()?.reshape(a.shape()))?,
        Op::AddBias(x, b) => {
            push(x, &|| Ok(g.clone()))?;
            push(b, &|| g.sum_rows())?;
        }
        Op::SumRows(x) => push(x, &|| g.expand_rows(x.shape()[0]))?,
        Op::ExpandRows(x) => push(x, &|| g.sum_rows())?,
        Op::Reshape(a) => push(a, &|| g.reshape(a.shape()))?,
        Op::Im2Col(a, geom) => push(a, &|| g.col2im(*geom))?,
        Op::Col2Im(a, geom) => push(a, &|| g.im2col(*geom))?,
        Op::Gather(a, idx) => push(a, &|| g.scatter(idx.clone(), a.shape()))?,
        Op::Scatter(a, idx) => push(a, &|| g.gather(idx.clone(), a.shape()))?,
    }
    Ok(res)
}
