use crate::tensor::{BinaryKind, Op, Tensor, TensorId, UnaryKind};
use crate::{AdError, Result};
use ndarray::{ArrayD, Axis, Ix2, Slice};
use std::collections::HashMap;

/// Gradients keyed by tensor id, produced by [`backward`].
pub struct GradStore {
    grads: HashMap<TensorId, ArrayD<f64>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.grads.get(&t.id())
    }

    /// Gradient of `t`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> ArrayD<f64> {
        self.grads
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(t.value().raw_dim()))
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }
}

fn op_inputs(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Unary(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::SliceLastDim(a, _, _)
        | Op::GatherRows(a, _)
        | Op::GroupMeanRows(a, _)
        | Op::Softmax(a)
        | Op::LayerNorm(a, _)
        | Op::SumAll(a)
        | Op::WeightedSumAll(a, _)
        | Op::ExpandScalar(a)
        | Op::Scale(a, _)
        | Op::AddConst(a, _)
        | Op::Cast(a) => vec![a.clone()],
        Op::Binary(a, b, _) | Op::AddBias(a, b) | Op::MulBias(a, b) | Op::Matmul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::ConcatLastDim(parts) => parts.clone(),
        Op::Custom(inputs, _) => inputs.clone(),
    }
}

/// Reverse topological order of the graph reachable from `root`, restricted
/// to tensors that require gradients. Iterative so deep rollout graphs do not
/// overflow the stack; input order is the recorded order, so the walk is
/// deterministic for a given program.
fn topological_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashMap<TensorId, ()> = HashMap::new();
    // (tensor, inputs_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if visited.contains_key(&t.id()) || !t.requires_grad() {
            continue;
        }
        visited.insert(t.id(), ());
        stack.push((t.clone(), true));
        for input in op_inputs(t.op()) {
            if input.requires_grad() && !visited.contains_key(&input.id()) {
                stack.push((input, false));
            }
        }
    }
    order
}

/// Reverse-mode sweep from a scalar `root`. Returns gradients for every
/// tensor that requires grad and influences the root; untouched inputs are
/// simply absent (i.e. zero).
pub fn backward(root: &Tensor) -> Result<GradStore> {
    if root.len() != 1 {
        return Err(AdError::NonScalarRoot(root.shape().to_vec()));
    }
    let order = topological_order(root);
    let mut grads: HashMap<TensorId, ArrayD<f64>> = HashMap::new();
    grads.insert(root.id(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0));

    for node in order.iter().rev() {
        let Some(cot) = grads.get(&node.id()).cloned() else {
            continue;
        };
        accumulate_input_grads(node, &cot, &mut grads)?;
    }
    Ok(GradStore { grads })
}

fn add_grad(grads: &mut HashMap<TensorId, ArrayD<f64>>, t: &Tensor, g: ArrayD<f64>) {
    if !t.requires_grad() {
        return;
    }
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            *e.get_mut() += &g;
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn accumulate_input_grads(
    node: &Tensor,
    cot: &ArrayD<f64>,
    grads: &mut HashMap<TensorId, ArrayD<f64>>,
) -> Result<()> {
    match node.op() {
        Op::Leaf => {}
        Op::Unary(a, kind) => {
            let x = a.value();
            let g = match kind {
                UnaryKind::Neg => cot.mapv(|c| -c),
                UnaryKind::Exp => {
                    let y = node.value();
                    let mut g = cot.clone();
                    g.zip_mut_with(&y, |c, &yv| *c *= yv);
                    g
                }
                UnaryKind::Ln => {
                    let mut g = cot.clone();
                    g.zip_mut_with(&x, |c, &xv| *c /= xv);
                    g
                }
                UnaryKind::Tanh => {
                    let y = node.value();
                    let mut g = cot.clone();
                    g.zip_mut_with(&y, |c, &yv| *c *= 1.0 - yv * yv);
                    g
                }
                UnaryKind::Gelu => {
                    let mut g = cot.clone();
                    g.zip_mut_with(&x, |c, &xv| *c *= crate::tensor::gelu_grad(xv));
                    g
                }
                UnaryKind::Softplus => {
                    let mut g = cot.clone();
                    g.zip_mut_with(&x, |c, &xv| *c *= crate::tensor::sigmoid(xv));
                    g
                }
                UnaryKind::Sqrt => {
                    let y = node.value();
                    let mut g = cot.clone();
                    g.zip_mut_with(&y, |c, &yv| *c *= 0.5 / yv);
                    g
                }
                UnaryKind::Recip => {
                    let mut g = cot.clone();
                    g.zip_mut_with(&x, |c, &xv| *c *= -1.0 / (xv * xv));
                    g
                }
            };
            add_grad(grads, a, g);
        }
        Op::Binary(a, b, kind) => match kind {
            BinaryKind::Add => {
                add_grad(grads, a, cot.clone());
                add_grad(grads, b, cot.clone());
            }
            BinaryKind::Sub => {
                add_grad(grads, a, cot.clone());
                add_grad(grads, b, cot.mapv(|c| -c));
            }
            BinaryKind::Mul => {
                let mut ga = cot.clone();
                ga.zip_mut_with(&b.value(), |c, &bv| *c *= bv);
                let mut gb = cot.clone();
                gb.zip_mut_with(&a.value(), |c, &av| *c *= av);
                add_grad(grads, a, ga);
                add_grad(grads, b, gb);
            }
            BinaryKind::Div => {
                let mut ga = cot.clone();
                ga.zip_mut_with(&b.value(), |c, &bv| *c /= bv);
                let mut gb = cot.clone();
                let av = a.value();
                let bv = b.value();
                gb.zip_mut_with(&av, |c, &x| *c *= -x);
                gb.zip_mut_with(&bv, |c, &y| *c /= y * y);
                add_grad(grads, a, ga);
                add_grad(grads, b, gb);
            }
        },
        Op::AddBias(a, bias) => {
            add_grad(grads, a, cot.clone());
            if bias.requires_grad() {
                let mut gb = ndarray::Array1::<f64>::zeros(bias.len());
                let last = Axis(cot.ndim() - 1);
                for lane in cot.lanes(last) {
                    gb += &lane;
                }
                add_grad(grads, bias, gb.into_dyn());
            }
        }
        Op::MulBias(a, gain) => {
            if a.requires_grad() {
                let mut ga = cot.clone();
                let g = gain.value().into_dimensionality::<ndarray::Ix1>().unwrap();
                let last = Axis(ga.ndim() - 1);
                for mut lane in ga.lanes_mut(last) {
                    lane *= &g;
                }
                add_grad(grads, a, ga);
            }
            if gain.requires_grad() {
                let mut prod = cot.clone();
                prod.zip_mut_with(&a.value(), |c, &x| *c *= x);
                let mut gg = ndarray::Array1::<f64>::zeros(gain.len());
                let last = Axis(prod.ndim() - 1);
                for lane in prod.lanes(last) {
                    gg += &lane;
                }
                add_grad(grads, gain, gg.into_dyn());
            }
        }
        Op::Matmul(a, b) => {
            let c = cot.view().into_dimensionality::<Ix2>().unwrap();
            if a.requires_grad() {
                let bv = b.value().into_dimensionality::<Ix2>().unwrap();
                add_grad(grads, a, c.dot(&bv.t()).into_dyn());
            }
            if b.requires_grad() {
                let av = a.value().into_dimensionality::<Ix2>().unwrap();
                add_grad(grads, b, av.t().dot(&c).into_dyn());
            }
        }
        Op::Transpose(a) => {
            let c = cot.view().into_dimensionality::<Ix2>().unwrap();
            add_grad(grads, a, c.t().to_owned().into_dyn());
        }
        Op::Reshape(a) => {
            let g = cot
                .clone()
                .into_shape_clone(a.value().raw_dim())
                .expect("reshape backward");
            add_grad(grads, a, g);
        }
        Op::SliceLastDim(a, start, len) => {
            let mut g = ArrayD::<f64>::zeros(a.value().raw_dim());
            let last = Axis(g.ndim() - 1);
            g.slice_axis_mut(last, Slice::from(*start..*start + *len))
                .assign(cot);
            add_grad(grads, a, g);
        }
        Op::ConcatLastDim(parts) => {
            let last = Axis(cot.ndim() - 1);
            let mut offset = 0usize;
            for p in parts {
                let w = *p.shape().last().unwrap();
                let g = cot
                    .slice_axis(last, Slice::from(offset..offset + w))
                    .to_owned();
                add_grad(grads, p, g);
                offset += w;
            }
        }
        Op::GatherRows(a, idx) => {
            let c = cot.view().into_dimensionality::<Ix2>().unwrap();
            let ashape = a.shape();
            let mut g = ndarray::Array2::<f64>::zeros((ashape[0], ashape[1]));
            for (i, &src) in idx.iter().enumerate() {
                let mut row = g.row_mut(src);
                row += &c.row(i);
            }
            add_grad(grads, a, g.into_dyn());
        }
        Op::GroupMeanRows(a, groups) => {
            let c = cot.view().into_dimensionality::<Ix2>().unwrap();
            let ashape = a.shape();
            let mut g = ndarray::Array2::<f64>::zeros((ashape[0], ashape[1]));
            for (gi, rows) in groups.iter().enumerate() {
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    let mut row = g.row_mut(r);
                    row.scaled_add(inv, &c.row(gi));
                }
            }
            add_grad(grads, a, g.into_dyn());
        }
        Op::Softmax(a) => {
            // dx = y ⊙ (cot − sum(cot ⊙ y)) per lane
            let y = node.value();
            let mut g = cot.clone();
            let last = Axis(g.ndim() - 1);
            let ylanes: Vec<_> = y.lanes(last).into_iter().collect();
            for (mut glane, ylane) in g.lanes_mut(last).into_iter().zip(ylanes) {
                let dot: f64 = glane.iter().zip(ylane.iter()).map(|(c, yv)| c * yv).sum();
                for (c, yv) in glane.iter_mut().zip(ylane.iter()) {
                    *c = yv * (*c - dot);
                }
            }
            add_grad(grads, a, g);
        }
        Op::LayerNorm(a, eps) => {
            let x = a.value();
            let mut g = cot.clone();
            let last = Axis(g.ndim() - 1);
            let xlanes: Vec<_> = x.lanes(last).into_iter().collect();
            for (mut glane, xlane) in g.lanes_mut(last).into_iter().zip(xlanes) {
                let n = xlane.len() as f64;
                let mean = xlane.sum() / n;
                let var = xlane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let rstd = 1.0 / (var + eps).sqrt();
                let yhat: Vec<f64> = xlane.iter().map(|v| (v - mean) * rstd).collect();
                let gmean: f64 = glane.sum() / n;
                let gydot: f64 = glane
                    .iter()
                    .zip(yhat.iter())
                    .map(|(c, yv)| c * yv)
                    .sum::<f64>()
                    / n;
                for (c, yv) in glane.iter_mut().zip(yhat.iter()) {
                    *c = rstd * (*c - gmean - yv * gydot);
                }
            }
            add_grad(grads, a, g);
        }
        Op::SumAll(a) => {
            let c = cot[[0]];
            add_grad(grads, a, ArrayD::from_elem(a.value().raw_dim(), c));
        }
        Op::WeightedSumAll(a, w) => {
            let c = cot[[0]];
            add_grad(grads, a, w.mapv(|wv| wv * c));
        }
        Op::ExpandScalar(a) => {
            let s: f64 = cot.sum();
            add_grad(grads, a, ArrayD::from_elem(ndarray::IxDyn(&[1]), s));
        }
        Op::Scale(a, s) => {
            add_grad(grads, a, cot.mapv(|c| c * s));
        }
        Op::AddConst(a, _) => {
            add_grad(grads, a, cot.clone());
        }
        Op::Cast(a) => {
            add_grad(grads, a, cot.clone());
        }
        Op::Custom(inputs, op) => {
            let out_val = node.value().to_owned();
            let cots = op
                .vjp(inputs, &out_val, cot)
                .map_err(|e| AdError::CustomBackward {
                    op: op.name().to_string(),
                    msg: e.to_string(),
                })?;
            assert_eq!(
                cots.len(),
                inputs.len(),
                "custom op `{}` returned {} cotangents for {} inputs",
                op.name(),
                cots.len(),
                inputs.len()
            );
            for (input, g) in inputs.iter().zip(cots) {
                if let Some(g) = g {
                    assert_eq!(
                        g.shape(),
                        input.shape(),
                        "custom op `{}`: cotangent shape {:?} != input shape {:?}",
                        op.name(),
                        g.shape(),
                        input.shape()
                    );
                    add_grad(grads, input, g);
                }
            }
        }
    }
    Ok(())
}
