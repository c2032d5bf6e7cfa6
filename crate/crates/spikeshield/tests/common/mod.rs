//! Finite-difference oracles for the reverse-mode engine, shared between the
//! oracle suite and the acceptance gate.
//!
//! Every differentiable op and loss is re-implemented here in plain f64, with
//! no shared code. Engine gradients at random points must match central
//! finite differences of the f64 forward to a relative 1e-3 (h = 1e-4), and
//! the engine forward must agree with the f64 forward to a relative 5e-4.
//! Sampling steers clear of kinks (clamp edges, abs at zero, indicator
//! flips, ladder window boundaries) so both sides differentiate the same
//! branch. Twenty random instances per op.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikeshield::error::Result;
use spikeshield::loss::{
    asymmetric_loss, charbonnier, kl_divergence, total_loss, tv_regularizer, LossWeights,
};
use spikeshield::tensor::Tensor;

const H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const FWD_TOL: f64 = 5e-4;
const INSTANCES: usize = 20;

type Leaf = (Vec<usize>, Vec<f32>);

/// Checks the engine gradient of a scalar objective against central finite
/// differences of `oracle`, one coordinate at a time, for every leaf.
fn fd_case<E, O>(name: &str, leaves: &[Leaf], engine: E, oracle: O)
where
    E: Fn(&[Tensor]) -> Result<Tensor>,
    O: Fn(&[Vec<f64>]) -> f64,
{
    fd_case_inner(name, leaves, engine, oracle, true);
}

/// Gradient-only variant for ops whose engine forward is intentionally not
/// the function being differentiated (surrogate gradients).
fn fd_case_grad_only<E, O>(name: &str, leaves: &[Leaf], engine: E, oracle: O)
where
    E: Fn(&[Tensor]) -> Result<Tensor>,
    O: Fn(&[Vec<f64>]) -> f64,
{
    fd_case_inner(name, leaves, engine, oracle, false);
}

fn fd_case_inner<E, O>(name: &str, leaves: &[Leaf], engine: E, oracle: O, check_forward: bool)
where
    E: Fn(&[Tensor]) -> Result<Tensor>,
    O: Fn(&[Vec<f64>]) -> f64,
{
    let vars: Vec<Tensor> = leaves
        .iter()
        .map(|(s, d)| Tensor::var(s.clone(), d.clone()).expect("leaf"))
        .collect();
    let objective = engine(&vars).unwrap_or_else(|e| panic!("{name}: engine failed: {e}"));
    let grads = objective
        .backward()
        .unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));
    let mut point: Vec<Vec<f64>> = leaves
        .iter()
        .map(|(_, d)| d.iter().map(|&v| v as f64).collect())
        .collect();
    if check_forward {
        let eng = objective.item().expect("scalar objective") as f64;
        let orc = oracle(&point);
        let scale = eng.abs().max(orc.abs()).max(1e-3);
        assert!(
            ((eng - orc) / scale).abs() < FWD_TOL,
            "{name}: forward mismatch: engine {eng}, oracle {orc}"
        );
    }
    for (li, var) in vars.iter().enumerate() {
        let g = grads
            .grad(var)
            .unwrap_or_else(|e| panic!("{name}: missing grad for leaf {li}: {e}"));
        for i in 0..point[li].len() {
            let v0 = point[li][i];
            point[li][i] = v0 + H;
            let up = oracle(&point);
            point[li][i] = v0 - H;
            let down = oracle(&point);
            point[li][i] = v0;
            let fd = (up - down) / (2.0 * H);
            let gi = g[i] as f64;
            let scale = fd.abs().max(gi.abs()).max(1e-3);
            assert!(
                ((gi - fd) / scale).abs() < GRAD_TOL,
                "{name}: leaf {li} coordinate {i}: engine grad {gi}, fd {fd}"
            );
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Sample away from every point in `avoid` by at least `margin`, so finite
/// differences never straddle a kink.
fn sample_away(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32, avoid: &[f32], margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if avoid.iter().all(|&a| (v - a).abs() > margin) {
                break v;
            }
        })
        .collect()
}

/// Random positive weights for collapsing a non-scalar output into a scalar
/// objective; bounded away from zero so every output coordinate is exercised.
fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor, Vec<f64>) {
    let n: usize = shape.iter().product();
    let w = sample(rng, n, 0.5, 1.5);
    let w64 = w.iter().map(|&v| v as f64).collect();
    (Tensor::new(shape.to_vec(), w).expect("weights"), w64)
}

fn wdot(w: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn leaf(shape: &[usize], data: Vec<f32>) -> Leaf {
    (shape.to_vec(), data)
}

// f64 references for the structured ops.

fn o_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oi * stride + ki) as i64 - padding as i64;
                                let iw = (oj * stride + kj) as i64 - padding as i64;
                                if ih < 0 || iw < 0 || ih >= h as i64 || iw >= w as i64 {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + ih as usize) * w + iw as usize;
                                let kidx = ((fi * c + ci) * kh + ki) * kw + kj;
                                acc += x[xi] * k[kidx];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn o_tconv2d(
    x: &[f64],
    (n, f, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (c, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + kh - 2 * padding;
    let ow = (w - 1) * stride + kw - 2 * padding;
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[((ni * f + fi) * h + hi) * w + wi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oi = (hi * stride + ki) as i64 - padding as i64;
                                let oj = (wi * stride + kj) as i64 - padding as i64;
                                if oi < 0 || oj < 0 || oi >= oh as i64 || oj >= ow as i64 {
                                    continue;
                                }
                                let kidx = ((fi * c + ci) * kh + ki) * kw + kj;
                                let oidx = ((ni * c + ci) * oh + oi as usize) * ow + oj as usize;
                                out[oidx] += v * k[kidx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

fn o_avg_pool(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for ki in 0..k {
                    for kj in 0..k {
                        acc += x[(p * h + oi * stride + ki) * w + oj * stride + kj];
                    }
                }
                out[(p * oh + oi) * ow + oj] = acc / (k * k) as f64;
            }
        }
    }
    out
}

fn o_cross_entropy(logits: &[f64], rows: usize, cols: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
    }
    total / rows as f64
}

const KL_FLOOR: f64 = 1e-8;

fn o_charbonnier(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) * (x - y) + eps * eps).sqrt())
        .sum();
    s / a.len() as f64
}

fn o_kl(a: &[f64], b: &[f64], n: usize) -> f64 {
    let plane = a.len() / n;
    let mut total = 0.0;
    for ni in 0..n {
        let ai = &a[ni * plane..(ni + 1) * plane];
        let bi = &b[ni * plane..(ni + 1) * plane];
        let sa: f64 = ai.iter().map(|v| v + KL_FLOOR).sum();
        let sb: f64 = bi.iter().map(|v| v + KL_FLOOR).sum();
        for (x, y) in ai.iter().zip(bi) {
            let p = (x + KL_FLOOR) / sa;
            let q = (y + KL_FLOOR) / sb;
            total += p * (p.ln() - q.ln());
        }
    }
    total / n as f64
}

fn o_asymmetric(sh: &[f64], s: &[f64], gamma: f64) -> f64 {
    let total: f64 = sh
        .iter()
        .zip(s)
        .map(|(a, b)| {
            let under = if a < b { 1.0 } else { 0.0 };
            (gamma - under).abs() * (a - b) * (a - b)
        })
        .sum();
    total / sh.len() as f64
}

fn o_tv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> f64 {
    let mut total = 0.0;
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w - 1 {
                let d = plane[i * w + j + 1] - plane[i * w + j];
                total += d * d;
            }
        }
        for i in 0..h - 1 {
            for j in 0..w {
                let d = plane[(i + 1) * w + j] - plane[i * w + j];
                total += d * d;
            }
        }
    }
    total / (n * c * h * w) as f64
}

pub fn check_binary_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shape = [2usize, 1, 3, 4];
    let n: usize = shape.iter().product();
    for inst in 0..INSTANCES {
        // Rotate through same-shape, scalar rhs, and scalar lhs so the
        // broadcast accumulation paths get checked too.
        let (na, nb) = match inst % 3 {
            0 => (n, n),
            1 => (n, 1),
            _ => (1, n),
        };
        let sa: &[usize] = if na == 1 { &[1] } else { &shape };
        let sb: &[usize] = if nb == 1 { &[1] } else { &shape };
        let out = na.max(nb);
        let oshape: &[usize] = if out == 1 { &[1] } else { &shape };

        let a = sample(&mut rng, na, -1.0, 1.0);
        let b = sample(&mut rng, nb, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, oshape);
        let spread = |v: &[f64], len: usize| -> Vec<f64> {
            if v.len() == len {
                v.to_vec()
            } else {
                vec![v[0]; len]
            }
        };
        for (name, eng, orc) in [
            (
                "add",
                Box::new(|x: &Tensor, y: &Tensor| x.add(y)) as Box<dyn Fn(&Tensor, &Tensor) -> Result<Tensor>>,
                Box::new(|x: f64, y: f64| x + y) as Box<dyn Fn(f64, f64) -> f64>,
            ),
            ("sub", Box::new(|x, y| x.sub(y)), Box::new(|x, y| x - y)),
            ("mul", Box::new(|x, y| x.mul(y)), Box::new(|x, y| x * y)),
        ] {
            fd_case(
                name,
                &[leaf(sa, a.clone()), leaf(sb, b.clone())],
                |vs| eng(&vs[0], &vs[1])?.mul(&w)?.sum_all(),
                |p| {
                    let xa = spread(&p[0], out);
                    let xb = spread(&p[1], out);
                    let y: Vec<f64> = xa.iter().zip(&xb).map(|(&x, &yv)| orc(x, yv)).collect();
                    wdot(&w64, &y)
                },
            );
        }

        // Division gets a denominator bounded away from zero.
        let b: Vec<f32> = (0..nb)
            .map(|_| {
                let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                sign * rng.random_range(0.5..1.5f32)
            })
            .collect();
        fd_case(
            "div",
            &[leaf(sa, a.clone()), leaf(sb, b)],
            |vs| vs[0].div(&vs[1])?.mul(&w)?.sum_all(),
            |p| {
                let xa = spread(&p[0], out);
                let xb = spread(&p[1], out);
                let y: Vec<f64> = xa.iter().zip(&xb).map(|(x, yv)| x / yv).collect();
                wdot(&w64, &y)
            },
        );
    }
}

pub fn check_scalar_parameter_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let shape = [3usize, 4];
    let n = 12;
    for _ in 0..INSTANCES {
        let a = sample(&mut rng, n, -1.0, 1.0);
        let b = sample(&mut rng, n, -1.0, 1.0);
        let c = rng.random_range(-1.0..1.0f32);
        let s = rng.random_range(-2.0..2.0f32);
        let (w, w64) = weights(&mut rng, &shape);

        fd_case(
            "add_scalar",
            &[leaf(&shape, a.clone())],
            |vs| vs[0].add_scalar(c)?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x + c as f64).collect::<Vec<_>>()),
        );
        fd_case(
            "mul_scalar",
            &[leaf(&shape, a.clone())],
            |vs| vs[0].mul_scalar(c)?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x * c as f64).collect::<Vec<_>>()),
        );
        fd_case(
            "axpy",
            &[leaf(&shape, a.clone()), leaf(&shape, b.clone())],
            |vs| vs[0].axpy(s, &vs[1])?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = p[0]
                    .iter()
                    .zip(&p[1])
                    .map(|(x, v)| s as f64 * x + v)
                    .collect();
                wdot(&w64, &y)
            },
        );
        fd_case(
            "sub_scaled",
            &[leaf(&shape, a.clone()), leaf(&shape, b.clone())],
            |vs| vs[0].sub_scaled(&vs[1], s)?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = p[0]
                    .iter()
                    .zip(&p[1])
                    .map(|(x, v)| x - s as f64 * v)
                    .collect();
                wdot(&w64, &y)
            },
        );
    }
}

pub fn check_pointwise_nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let shape = [2usize, 1, 3, 3];
    let n = 18;
    for _ in 0..INSTANCES {
        let (w, w64) = weights(&mut rng, &shape);

        let x = sample_away(&mut rng, n, -0.3, 1.3, &[0.2, 0.8], 0.01);
        fd_case(
            "clamp",
            &[leaf(&shape, x)],
            |vs| vs[0].clamp(0.2, 0.8)?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x.clamp(0.2, 0.8)).collect::<Vec<_>>()),
        );

        let x = sample_away(&mut rng, n, -1.0, 1.0, &[0.0], 0.01);
        fd_case(
            "abs",
            &[leaf(&shape, x)],
            |vs| vs[0].abs()?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x.abs()).collect::<Vec<_>>()),
        );

        let x = sample(&mut rng, n, -1.5, 1.5);
        fd_case(
            "square",
            &[leaf(&shape, x)],
            |vs| vs[0].square()?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x * x).collect::<Vec<_>>()),
        );

        let x = sample(&mut rng, n, 0.3, 2.0);
        fd_case(
            "sqrt",
            &[leaf(&shape, x)],
            |vs| vs[0].sqrt()?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x.sqrt()).collect::<Vec<_>>()),
        );

        let x = sample(&mut rng, n, 0.3, 3.0);
        fd_case(
            "log",
            &[leaf(&shape, x)],
            |vs| vs[0].log()?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x.ln()).collect::<Vec<_>>()),
        );

        let x = sample(&mut rng, n, -3.0, 3.0);
        fd_case(
            "softplus",
            &[leaf(&shape, x)],
            |vs| vs[0].softplus()?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0].iter().map(|x| x.exp().ln_1p()).collect::<Vec<_>>()),
        );
    }
}

pub fn check_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..INSTANCES {
        let shape = [2usize, 3, 2, 2];
        let n = 24;
        let x = sample(&mut rng, n, -1.0, 1.0);
        fd_case(
            "sum_all",
            &[leaf(&shape, x.clone())],
            |vs| vs[0].sum_all(),
            |p| p[0].iter().sum(),
        );
        fd_case(
            "mean_all",
            &[leaf(&shape, x.clone())],
            |vs| vs[0].mean_all(),
            |p| p[0].iter().sum::<f64>() / n as f64,
        );

        // A clear gap at the maximum keeps the argmax stable under h.
        let mut x = sample(&mut rng, n, -1.0, 1.0);
        let j = rng.random_range(0..n);
        let mx = x.iter().cloned().fold(f32::MIN, f32::max);
        x[j] = mx + 0.5;
        fd_case(
            "max_all",
            &[leaf(&shape, x)],
            |vs| vs[0].max_all(),
            |p| p[0].iter().cloned().fold(f64::MIN, f64::max),
        );

        let x = sample(&mut rng, n, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[2]);
        fd_case(
            "sum_per_image",
            &[leaf(&shape, x.clone())],
            |vs| vs[0].sum_per_image()?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = p[0].chunks(12).map(|img| img.iter().sum()).collect();
                wdot(&w64, &y)
            },
        );

        let v = sample(&mut rng, 3, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[3, 2, 2, 2]);
        fd_case(
            "expand_per_image",
            &[leaf(&[3], v)],
            |vs| vs[0].expand_per_image(2, 2, 2)?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = p[0].iter().flat_map(|&v| std::iter::repeat_n(v, 8)).collect();
                wdot(&w64, &y)
            },
        );
    }
}

pub fn check_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..INSTANCES {
        let a = sample(&mut rng, 2 * 9, -1.0, 1.0);
        let b = sample(&mut rng, 2 * 2 * 9, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[2, 3, 3, 3]);
        fd_case(
            "concat_channels",
            &[leaf(&[2, 1, 3, 3], a.clone()), leaf(&[2, 2, 3, 3], b.clone())],
            |vs| vs[0].concat_channels(&vs[1])?.mul(&w)?.sum_all(),
            |p| {
                let mut y = Vec::with_capacity(54);
                for ni in 0..2 {
                    y.extend_from_slice(&p[0][ni * 9..(ni + 1) * 9]);
                    y.extend_from_slice(&p[1][ni * 18..(ni + 1) * 18]);
                }
                wdot(&w64, &y)
            },
        );

        let x = sample(&mut rng, 24, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[4, 6]);
        fd_case(
            "reshape",
            &[leaf(&[2, 3, 4], x)],
            |vs| vs[0].reshape([4, 6])?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &p[0]),
        );

        let x = sample(&mut rng, 2 * 16, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[2, 1, 3, 4]);
        fd_case(
            "diff_h",
            &[leaf(&[2, 1, 4, 4], x.clone())],
            |vs| vs[0].diff_h()?.mul(&w)?.sum_all(),
            |p| {
                let mut y = Vec::with_capacity(24);
                for img in p[0].chunks(16) {
                    for i in 0..3 {
                        for j in 0..4 {
                            y.push(img[(i + 1) * 4 + j] - img[i * 4 + j]);
                        }
                    }
                }
                wdot(&w64, &y)
            },
        );
        let (w, w64) = weights(&mut rng, &[2, 1, 4, 3]);
        fd_case(
            "diff_w",
            &[leaf(&[2, 1, 4, 4], x)],
            |vs| vs[0].diff_w()?.mul(&w)?.sum_all(),
            |p| {
                let mut y = Vec::with_capacity(24);
                for img in p[0].chunks(16) {
                    for i in 0..4 {
                        for j in 0..3 {
                            y.push(img[i * 4 + j + 1] - img[i * 4 + j]);
                        }
                    }
                }
                wdot(&w64, &y)
            },
        );
    }
}

pub fn check_dense_layer_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..INSTANCES {
        let a = sample(&mut rng, 12, -1.0, 1.0);
        let b = sample(&mut rng, 8, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[3, 2]);
        fd_case(
            "matmul",
            &[leaf(&[3, 4], a), leaf(&[4, 2], b)],
            |vs| vs[0].matmul(&vs[1])?.mul(&w)?.sum_all(),
            |p| {
                let mut y = vec![0.0; 6];
                for r in 0..3 {
                    for cc in 0..2 {
                        for kk in 0..4 {
                            y[r * 2 + cc] += p[0][r * 4 + kk] * p[1][kk * 2 + cc];
                        }
                    }
                }
                wdot(&w64, &y)
            },
        );

        let x = sample(&mut rng, 2 * 3 * 4, -1.0, 1.0);
        let bias = sample(&mut rng, 3, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[2, 3, 2, 2]);
        fd_case(
            "add_channel_bias",
            &[leaf(&[2, 3, 2, 2], x), leaf(&[3], bias)],
            |vs| vs[0].add_channel_bias(&vs[1])?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = (0..24)
                    .map(|i| p[0][i] + p[1][(i / 4) % 3])
                    .collect();
                wdot(&w64, &y)
            },
        );

        let x = sample(&mut rng, 12, -1.0, 1.0);
        let bias = sample(&mut rng, 4, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[3, 4]);
        fd_case(
            "add_row_bias",
            &[leaf(&[3, 4], x), leaf(&[4], bias)],
            |vs| vs[0].add_row_bias(&vs[1])?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = (0..12).map(|i| p[0][i] + p[1][i % 4]).collect();
                wdot(&w64, &y)
            },
        );

        let logits = sample(&mut rng, 15, -2.0, 2.0);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        fd_case(
            "cross_entropy_logits",
            &[leaf(&[3, 5], logits)],
            |vs| vs[0].cross_entropy_logits(&labels),
            |p| o_cross_entropy(&p[0], 3, 5, &labels),
        );
    }
}

pub fn check_conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for inst in 0..INSTANCES {
        let (stride, padding) = [(1, 1), (2, 1), (1, 0)][inst % 3];
        let dims = (2usize, 2usize, 4usize, 4usize);
        let x = sample(&mut rng, 64, -1.0, 1.0);
        let k = sample(&mut rng, 3 * 2 * 9, -1.0, 1.0);
        let (y0, oh, ow) = o_conv2d(
            &x.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            dims,
            &k.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            (3, 3, 3),
            stride,
            padding,
        );
        let (w, w64) = weights(&mut rng, &[2, 3, oh, ow]);
        assert_eq!(y0.len(), w64.len());
        fd_case(
            "conv2d",
            &[leaf(&[2, 2, 4, 4], x), leaf(&[3, 2, 3, 3], k)],
            |vs| vs[0].conv2d(&vs[1], stride, padding)?.mul(&w)?.sum_all(),
            |p| {
                let (y, _, _) = o_conv2d(&p[0], dims, &p[1], (3, 3, 3), stride, padding);
                wdot(&w64, &y)
            },
        );

        let (stride, padding) = [(2, 1), (1, 1), (2, 0)][inst % 3];
        let dims = (2usize, 3usize, 3usize, 3usize);
        let x = sample(&mut rng, 2 * 3 * 9, -1.0, 1.0);
        let k = sample(&mut rng, 3 * 2 * 9, -1.0, 1.0);
        let (y0, oh, ow) = o_tconv2d(
            &x.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            dims,
            &k.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            (2, 3, 3),
            stride,
            padding,
        );
        let (w, w64) = weights(&mut rng, &[2, 2, oh, ow]);
        assert_eq!(y0.len(), w64.len());
        fd_case(
            "conv_transpose2d",
            &[leaf(&[2, 3, 3, 3], x), leaf(&[3, 2, 3, 3], k)],
            |vs| {
                vs[0]
                    .conv_transpose2d(&vs[1], stride, padding)?
                    .mul(&w)?
                    .sum_all()
            },
            |p| {
                let (y, _, _) = o_tconv2d(&p[0], dims, &p[1], (2, 3, 3), stride, padding);
                wdot(&w64, &y)
            },
        );

        let (k, stride) = [(2, 2), (2, 1), (3, 1)][inst % 3];
        let dims = (2usize, 2usize, 4usize, 4usize);
        let oh = (4 - k) / stride + 1;
        let x = sample(&mut rng, 64, -1.0, 1.0);
        let (w, w64) = weights(&mut rng, &[2, 2, oh, oh]);
        fd_case(
            "avg_pool2d",
            &[leaf(&[2, 2, 4, 4], x)],
            |vs| vs[0].avg_pool2d(k, stride)?.mul(&w)?.sum_all(),
            |p| wdot(&w64, &o_avg_pool(&p[0], dims, k, stride)),
        );
    }
}

/// The ladder forward counts crossed thresholds, which is piecewise constant;
/// its backward is the rectangular surrogate. The surrogate is exactly the
/// derivative of the clamped-ramp relaxation
/// `sum_k clamp((u - (k*theta - w)) / 2w, 0, 1)`, so the engine gradient is
/// checked against finite differences of that relaxation. Forward values are
/// excluded from the comparison on purpose.
pub fn check_fire_ladder() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let theta = 1.0f32;
    let width = 0.5f32;
    for inst in 0..INSTANCES {
        let levels = inst % 3 + 1;
        let kinks: Vec<f32> = (1..=levels)
            .flat_map(|k| [k as f32 * theta - width, k as f32 * theta + width])
            .collect();
        let shape = [2usize, 1, 3, 3];
        let u = sample_away(&mut rng, 18, -0.5, levels as f32 + 1.0, &kinks, 0.01);
        let (w, w64) = weights(&mut rng, &shape);
        fd_case_grad_only(
            "fire_ladder",
            &[leaf(&shape, u)],
            |vs| vs[0].fire_ladder(levels, theta, width)?.mul(&w)?.sum_all(),
            |p| {
                let y: Vec<f64> = p[0]
                    .iter()
                    .map(|&u| {
                        (1..=levels)
                            .map(|k| {
                                let lo = k as f64 * theta as f64 - width as f64;
                                ((u - lo) / (2.0 * width as f64)).clamp(0.0, 1.0)
                            })
                            .sum()
                    })
                    .collect();
                wdot(&w64, &y)
            },
        );
    }
}

pub fn check_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let shape = [2usize, 1, 3, 3];
    let n = 18;
    for inst in 0..INSTANCES {
        // Alternate between the production epsilon with residuals kept out of
        // the high-curvature region, and a large epsilon with free residuals.
        let (eps, x, x_hat) = if inst % 2 == 0 {
            let x = sample(&mut rng, n, 0.2, 0.8);
            let x_hat: Vec<f32> = x
                .iter()
                .map(|&v| {
                    let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                    v + sign * rng.random_range(0.05..0.2f32)
                })
                .collect();
            (1e-3f32, x, x_hat)
        } else {
            let x = sample(&mut rng, n, 0.2, 0.8);
            let x_hat: Vec<f32> = x
                .iter()
                .map(|&v| v + rng.random_range(-0.3..0.3f32))
                .collect();
            (0.1f32, x, x_hat)
        };
        fd_case(
            "charbonnier",
            &[leaf(&shape, x_hat), leaf(&shape, x)],
            |vs| charbonnier(&vs[0], &vs[1], eps),
            |p| o_charbonnier(&p[0], &p[1], eps as f64),
        );

        let a = sample(&mut rng, n, 0.05, 1.0);
        let b = sample(&mut rng, n, 0.05, 1.0);
        fd_case(
            "kl_divergence",
            &[leaf(&shape, a), leaf(&shape, b)],
            |vs| kl_divergence(&vs[0], &vs[1]),
            |p| o_kl(&p[0], &p[1], 2),
        );

        // Residuals stay above 0.05 in magnitude so the FD step cannot flip
        // the under/over indicator.
        let sigma = sample(&mut rng, n, 0.1, 0.4);
        let sigma_hat: Vec<f32> = sigma
            .iter()
            .map(|&v| {
                let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                v + sign * rng.random_range(0.05..0.2f32)
            })
            .collect();
        fd_case(
            "asymmetric_loss",
            &[leaf(&shape, sigma_hat.clone()), leaf(&shape, sigma.clone())],
            |vs| asymmetric_loss(&vs[0], &vs[1], 0.3),
            |p| o_asymmetric(&p[0], &p[1], 0.3),
        );

        let dims = (2usize, 1usize, 4usize, 4usize);
        let t = sample(&mut rng, 32, 0.0, 1.0);
        fd_case(
            "tv_regularizer",
            &[leaf(&[2, 1, 4, 4], t)],
            |vs| tv_regularizer(&vs[0]),
            |p| o_tv(&p[0], dims),
        );

        // The combined objective runs at the production epsilon, so its
        // reconstruction inputs keep residuals out of the high-curvature
        // region and stay well away from zero for the KL logs.
        let xt = sample(&mut rng, n, 0.3, 0.7);
        let xt_hat: Vec<f32> = xt
            .iter()
            .map(|&v| {
                let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                v + sign * rng.random_range(0.05..0.2f32)
            })
            .collect();
        let lw = LossWeights {
            lambda_asymm: 0.5,
            lambda_tv: 0.05,
            gamma: 0.3,
            eps_char: 1e-3,
        };
        fd_case(
            "total_loss",
            &[
                leaf(&shape, xt_hat),
                leaf(&shape, xt),
                leaf(&shape, sigma_hat),
                leaf(&shape, sigma),
            ],
            |vs| total_loss(&vs[0], &vs[1], &vs[2], &vs[3], &lw),
            |p| {
                o_charbonnier(&p[0], &p[1], lw.eps_char as f64)
                    + o_kl(&p[0], &p[1], 2)
                    + lw.lambda_asymm as f64 * o_asymmetric(&p[2], &p[3], lw.gamma as f64)
                    + lw.lambda_tv as f64 * o_tv(&p[2], (2, 1, 3, 3))
            },
        );
    }
}

/// `<conv(x,k), v> == <x, tconv(v,k)>` for shapes where the stride tiles the
/// padded input exactly; inner products accumulate in f64, tolerance is a
/// relative 1e-5.
pub fn check_conv_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for inst in 0..INSTANCES {
        let (stride, padding) = [(1, 1), (2, 1), (1, 0), (2, 0)][inst % 4];
        let (n, c, f) = (2usize, 2usize, 3usize);
        let x = Tensor::new([n, c, 5, 5], sample(&mut rng, n * c * 25, -1.0, 1.0)).unwrap();
        let k = Tensor::new([f, c, 3, 3], sample(&mut rng, f * c * 9, -1.0, 1.0)).unwrap();
        let y = x.conv2d(&k, stride, padding).unwrap();
        let (_, _, oh, ow) = y.shape().dims4().unwrap();
        let v = Tensor::new([n, f, oh, ow], sample(&mut rng, n * f * oh * ow, -1.0, 1.0)).unwrap();
        let back = v.conv_transpose2d(&k, stride, padding).unwrap();
        assert_eq!(back.shape(), x.shape(), "adjoint output shape");

        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data().iter())
                .map(|(&p, &q)| p as f64 * q as f64)
                .sum()
        };
        let lhs = dot(&y, &v);
        let rhs = dot(&back, &x);
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        assert!(
            ((lhs - rhs) / scale).abs() < 1e-5,
            "adjoint identity: <conv(x,k),v> = {lhs}, <x,tconv(v,k)> = {rhs}"
        );
    }
}
