//! Reverse-mode differentiation over the recorded graph.
//!
//! [`Graph::trace`] linearises the graph reachable from a root so that every
//! tensor appears exactly once, after all of its parents. [`Tensor::backward`]
//! walks that order in reverse, accumulating cotangents; gradients of
//! intermediates are freed as soon as they have been consumed, so only leaf
//! gradients survive in the returned [`GradStore`].

use super::conv::{conv2d_image, conv_adjoint_image, conv_grad_kernel};
use super::{par_chunks_mut, Op, Tensor};
use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};

/// Gradients keyed by tensor identity.
#[derive(Default)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f32>>,
}

impl GradStore {
    fn slot(&mut self, t: &Tensor) -> &mut Vec<f32> {
        self.grads
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()])
    }

    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, or a usage error if none was produced.
    pub fn grad(&self, t: &Tensor) -> Result<&[f32]> {
        self.get(t).ok_or_else(|| {
            Error::Usage(format!(
                "no gradient recorded for tensor {} (id {})",
                t.shape(),
                t.id()
            ))
        })
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f32>> {
        self.grads.remove(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Topologically ordered view of the differentiable graph under a root.
/// Every node appears once, and always after all of its tracked parents.
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn trace(root: &Tensor) -> Graph {
        let mut nodes = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.op() {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        Graph { nodes }
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `+= sign * g` into the parent's slot, reducing over g if the parent is a
/// broadcast scalar.
fn add_signed(store: &mut GradStore, parent: &Tensor, g: &[f32], sign: f32) {
    if !parent.requires_grad() {
        return;
    }
    let slot = store.slot(parent);
    if slot.len() == g.len() {
        for (s, &gv) in slot.iter_mut().zip(g) {
            *s += sign * gv;
        }
    } else {
        debug_assert_eq!(slot.len(), 1);
        slot[0] += sign * g.iter().sum::<f32>();
    }
}

impl Tensor {
    /// Reverse-mode gradients of a scalar root wrt every tracked leaf.
    pub fn backward(&self) -> Result<GradStore> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor with no tracked gradients".into(),
            ));
        }
        let graph = Graph::trace(self);
        let mut store = GradStore::default();
        store.slot(self)[0] = 1.0;
        for node in graph.nodes().iter().rev() {
            if node.is_leaf() {
                continue;
            }
            let Some(g) = store.grads.remove(&node.id()) else {
                continue;
            };
            backward_step(node, &g, &mut store)?;
        }
        Ok(store)
    }
}

fn backward_step(node: &Tensor, g: &[f32], store: &mut GradStore) -> Result<()> {
    let op = node.op().expect("backward_step on a leaf");
    match op {
        Op::Add(a, b) => {
            add_signed(store, a, g, 1.0);
            add_signed(store, b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_signed(store, a, g, 1.0);
            add_signed(store, b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            if a.requires_grad() {
                let a_scalar = a.numel() == 1;
                let b_scalar = b.numel() == 1;
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    slot[if a_scalar { 0 } else { i }] += gv * bd[if b_scalar { 0 } else { i }];
                }
            }
            if b.requires_grad() {
                let a_scalar = a.numel() == 1;
                let b_scalar = b.numel() == 1;
                let slot = store.slot(b);
                for (i, &gv) in g.iter().enumerate() {
                    slot[if b_scalar { 0 } else { i }] += gv * ad[if a_scalar { 0 } else { i }];
                }
            }
        }
        Op::Div(a, b) => {
            let bd = b.data();
            let y = node.data();
            if a.requires_grad() {
                let a_scalar = a.numel() == 1;
                let b_scalar = b.numel() == 1;
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    slot[if a_scalar { 0 } else { i }] += gv / bd[if b_scalar { 0 } else { i }];
                }
            }
            if b.requires_grad() {
                let b_scalar = b.numel() == 1;
                let slot = store.slot(b);
                for (i, &gv) in g.iter().enumerate() {
                    let bi = if b_scalar { 0 } else { i };
                    slot[bi] -= gv * y[i] / bd[bi];
                }
            }
        }
        Op::AddScalar(a) => add_signed(store, a, g, 1.0),
        Op::MulScalar(a, c) => add_signed(store, a, g, *c),
        Op::Axpy { scale, scaled, added } => {
            add_signed(store, scaled, g, *scale);
            add_signed(store, added, g, 1.0);
        }
        Op::SubScaled {
            minuend,
            subtrahend,
            scale,
        } => {
            add_signed(store, minuend, g, 1.0);
            add_signed(store, subtrahend, g, -scale);
        }
        Op::Clamp { input, lo, hi } => {
            if input.requires_grad() {
                let x = input.data();
                let slot = store.slot(input);
                for (i, &gv) in g.iter().enumerate() {
                    if x[i] > *lo && x[i] < *hi {
                        slot[i] += gv;
                    }
                }
            }
        }
        Op::Abs(a) => {
            if a.requires_grad() {
                let x = a.data();
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    if x[i] > 0.0 {
                        slot[i] += gv;
                    } else if x[i] < 0.0 {
                        slot[i] -= gv;
                    }
                }
            }
        }
        Op::Square(a) => {
            if a.requires_grad() {
                let x = a.data();
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    slot[i] += 2.0 * x[i] * gv;
                }
            }
        }
        Op::Sqrt(a) => {
            if a.requires_grad() {
                let y = node.data();
                if y.iter().any(|&v| v == 0.0) {
                    return Err(Error::Domain("sqrt gradient at zero".into()));
                }
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    slot[i] += gv / (2.0 * y[i]);
                }
            }
        }
        Op::Log(a) => {
            if a.requires_grad() {
                let x = a.data();
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    slot[i] += gv / x[i];
                }
            }
        }
        Op::Softplus(a) => {
            if a.requires_grad() {
                let x = a.data();
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    slot[i] += gv / (1.0 + (-x[i]).exp());
                }
            }
        }
        Op::SumAll(a) => {
            if a.requires_grad() {
                let g0 = g[0];
                for s in store.slot(a).iter_mut() {
                    *s += g0;
                }
            }
        }
        Op::MeanAll(a) => {
            if a.requires_grad() {
                let g0 = g[0] / a.numel() as f32;
                for s in store.slot(a).iter_mut() {
                    *s += g0;
                }
            }
        }
        Op::MaxAll { input, argmax } => {
            if input.requires_grad() {
                store.slot(input)[*argmax] += g[0];
            }
        }
        Op::SumPerImage(a) => {
            if a.requires_grad() {
                let stride = a.numel() / g.len();
                let slot = store.slot(a);
                for (i, &gv) in g.iter().enumerate() {
                    for s in &mut slot[i * stride..(i + 1) * stride] {
                        *s += gv;
                    }
                }
            }
        }
        Op::ExpandPerImage(a) => {
            if a.requires_grad() {
                let n = a.numel();
                let stride = g.len() / n;
                let slot = store.slot(a);
                for i in 0..n {
                    slot[i] += g[i * stride..(i + 1) * stride].iter().sum::<f32>();
                }
            }
        }
        Op::ConcatChannels(a, b) => {
            let (n, c1, h, w) = a.shape().dims4().expect("validated at construction");
            let c2 = b.shape().dims()[1];
            let img = h * w;
            if a.requires_grad() {
                let slot = store.slot(a);
                for i in 0..n {
                    let src = &g[i * (c1 + c2) * img..][..c1 * img];
                    for (s, &gv) in slot[i * c1 * img..(i + 1) * c1 * img].iter_mut().zip(src) {
                        *s += gv;
                    }
                }
            }
            if b.requires_grad() {
                let slot = store.slot(b);
                for i in 0..n {
                    let src = &g[i * (c1 + c2) * img + c1 * img..][..c2 * img];
                    for (s, &gv) in slot[i * c2 * img..(i + 1) * c2 * img].iter_mut().zip(src) {
                        *s += gv;
                    }
                }
            }
        }
        Op::Reshape(a) => add_signed(store, a, g, 1.0),
        Op::DiffH(a) => {
            if a.requires_grad() {
                let (n, c, h, w) = a.shape().dims4().expect("validated at construction");
                let slot = store.slot(a);
                for nc in 0..n * c {
                    let gp = &g[nc * (h - 1) * w..(nc + 1) * (h - 1) * w];
                    let sp = &mut slot[nc * h * w..(nc + 1) * h * w];
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let gv = gp[i * w + j];
                            sp[(i + 1) * w + j] += gv;
                            sp[i * w + j] -= gv;
                        }
                    }
                }
            }
        }
        Op::DiffW(a) => {
            if a.requires_grad() {
                let (n, c, h, w) = a.shape().dims4().expect("validated at construction");
                let slot = store.slot(a);
                for nc in 0..n * c {
                    let gp = &g[nc * h * (w - 1)..(nc + 1) * h * (w - 1)];
                    let sp = &mut slot[nc * h * w..(nc + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w - 1 {
                            let gv = gp[i * (w - 1) + j];
                            sp[i * w + j + 1] += gv;
                            sp[i * w + j] -= gv;
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (n, d) = a.shape().dims2().expect("validated at construction");
            let k = b.shape().dims()[1];
            if a.requires_grad() {
                let bd = b.data();
                let slot = store.slot(a);
                for i in 0..n {
                    let g_row = &g[i * k..(i + 1) * k];
                    let a_row = &mut slot[i * d..(i + 1) * d];
                    for j in 0..d {
                        let b_row = &bd[j * k..(j + 1) * k];
                        let mut acc = 0.0f32;
                        for (gv, bv) in g_row.iter().zip(b_row) {
                            acc += gv * bv;
                        }
                        a_row[j] += acc;
                    }
                }
            }
            if b.requires_grad() {
                let ad = a.data();
                let slot = store.slot(b);
                for i in 0..n {
                    let g_row = &g[i * k..(i + 1) * k];
                    let a_row = &ad[i * d..(i + 1) * d];
                    for (j, &av) in a_row.iter().enumerate() {
                        let b_row = &mut slot[j * k..(j + 1) * k];
                        for (s, &gv) in b_row.iter_mut().zip(g_row) {
                            *s += av * gv;
                        }
                    }
                }
            }
        }
        Op::AddChannelBias { input, bias } => {
            add_signed(store, input, g, 1.0);
            if bias.requires_grad() {
                let (n, c, h, w) = input.shape().dims4().expect("validated at construction");
                let img = h * w;
                let slot = store.slot(bias);
                for ni in 0..n {
                    for (ci, s) in slot.iter_mut().enumerate() {
                        *s += g[(ni * c + ci) * img..(ni * c + ci + 1) * img]
                            .iter()
                            .sum::<f32>();
                    }
                }
            }
        }
        Op::AddRowBias { input, bias } => {
            add_signed(store, input, g, 1.0);
            if bias.requires_grad() {
                let (n, k) = input.shape().dims2().expect("validated at construction");
                let slot = store.slot(bias);
                for i in 0..n {
                    for (s, &gv) in slot.iter_mut().zip(&g[i * k..(i + 1) * k]) {
                        *s += gv;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if logits.requires_grad() {
                let (n, k) = logits.shape().dims2().expect("validated at construction");
                let scale = g[0] / n as f32;
                let slot = store.slot(logits);
                for i in 0..n {
                    for j in 0..k {
                        let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                        slot[i * k + j] += scale * (probs[i * k + j] - indicator);
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (n, c, h, w) = input.shape().dims4().expect("validated at construction");
            let (f, _, kh, kw) = kernel.shape().dims4().expect("validated at construction");
            let (_, _, oh, ow) = node.shape().dims4().expect("conv output is rank 4");
            if input.requires_grad() {
                let ker = kernel.data();
                let slot = store.slot(input);
                par_chunks_mut(slot, c * h * w, |ni, gin_img| {
                    let g_img = &g[ni * f * oh * ow..(ni + 1) * f * oh * ow];
                    conv_adjoint_image(
                        g_img, f, oh, ow, ker, c, kh, kw, *stride, *padding, gin_img, h, w,
                    );
                });
            }
            if kernel.requires_grad() {
                let inp = input.data();
                let slot = store.slot(kernel);
                conv_grad_kernel(
                    g, n, f, oh, ow, inp, c, h, w, kh, kw, *stride, *padding, slot,
                );
            }
        }
        Op::ConvTranspose2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (n, f, h, w) = input.shape().dims4().expect("validated at construction");
            let (_, c, kh, kw) = kernel.shape().dims4().expect("validated at construction");
            let (_, _, oh, ow) = node.shape().dims4().expect("tconv output is rank 4");
            if input.requires_grad() {
                let ker = kernel.data();
                let slot = store.slot(input);
                par_chunks_mut(slot, f * h * w, |ni, gin_img| {
                    let g_img = &g[ni * c * oh * ow..(ni + 1) * c * oh * ow];
                    conv2d_image(
                        g_img, c, oh, ow, ker, f, kh, kw, *stride, *padding, gin_img, h, w,
                    );
                });
            }
            if kernel.requires_grad() {
                let inp = input.data();
                let slot = store.slot(kernel);
                conv_grad_kernel(
                    inp, n, f, h, w, g, c, oh, ow, kh, kw, *stride, *padding, slot,
                );
            }
        }
        Op::AvgPool2d { input, k, stride } => {
            if input.requires_grad() {
                let (_, c, h, w) = input.shape().dims4().expect("validated at construction");
                let (_, _, oh, ow) = node.shape().dims4().expect("pool output is rank 4");
                let inv = 1.0 / (k * k) as f32;
                let slot = store.slot(input);
                par_chunks_mut(slot, c * h * w, |ni, gin_img| {
                    for ci in 0..c {
                        let gp = &g[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                        let sp = &mut gin_img[ci * h * w..(ci + 1) * h * w];
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let gv = gp[ohi * ow + owi] * inv;
                                for di in 0..*k {
                                    let row =
                                        &mut sp[(ohi * stride + di) * w + owi * stride..][..*k];
                                    for s in row {
                                        *s += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::FireLadder {
            membrane,
            levels,
            threshold,
            width,
        } => {
            if membrane.requires_grad() {
                let u = membrane.data();
                let scale = 1.0 / (2.0 * width);
                let slot = store.slot(membrane);
                for (i, &gv) in g.iter().enumerate() {
                    let mut sur = 0.0f32;
                    for kk in 1..=*levels {
                        if (u[i] - kk as f32 * threshold).abs() <= *width {
                            sur += scale;
                        }
                    }
                    if sur != 0.0 {
                        slot[i] += gv * sur;
                    }
                }
            }
        }
    }
    Ok(())
}
