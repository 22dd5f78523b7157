//! Independent f64 reference implementations and the finite-difference
//! gradient check built on them.

use cfdr::contrastive::{contrastive_loss_on, LossConfig, LossVariant, Reduction};
use cfdr::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], d: Vec<f64>) -> Arr {
        assert_eq!(shape.iter().product::<usize>(), d.len());
        Arr { shape: shape.to_vec(), d }
    }

    fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.d.iter().map(|&v| v as f32).collect()).unwrap()
    }
}

/// Values are drawn as f32 so the tape and the oracle see the same inputs.
fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Arr {
    let n = shape.iter().product();
    Arr::new(shape, (0..n).map(|_| r.gen_range(lo..hi) as f64).collect())
}

/// Magnitudes bounded away from zero, random sign (keeps relu off its kink).
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m: f32 = r.gen_range(0.05..1.0);
            (if r.gen_bool(0.5) { m } else { -m }) as f64
        })
        .collect();
    Arr::new(shape, d)
}

/// Distinct values at least 0.05 apart, so no pooling window is near a tie.
fn spread(r: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(r);
    let d = ranks
        .into_iter()
        .map(|k| (k as f32 * 0.05 - 1.0 + r.gen_range(0.0..0.01)) as f64)
        .collect();
    Arr::new(shape, d)
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

// ---- reference implementations -------------------------------------------

pub fn matmul(a: &Arr, b: &Arr) -> Arr {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.d[i * k + t] * b.d[t * n + j]).sum();
        }
    }
    Arr::new(&[m, n], out)
}

pub fn transpose(a: &Arr) -> Arr {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.d[i * n + j];
        }
    }
    Arr::new(&[n, m], out)
}

fn map(a: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr::new(&a.shape, a.d.iter().map(|&v| f(v)).collect())
}

fn zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    Arr::new(&a.shape, a.d.iter().zip(&b.d).map(|(&x, &y)| f(x, y)).collect())
}

pub fn conv2d(x: &Arr, w: &Arr, b: &Arr, pad: usize) -> Arr {
    let (bs, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = vec![0.0; bs * o * oh * ow];
    for n in 0..bs {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.d[oc];
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = (i + di, j + dj);
                                if y < pad || xx < pad || y - pad >= h || xx - pad >= wd {
                                    continue;
                                }
                                let xi = ((n * c + ic) * h + y - pad) * wd + xx - pad;
                                let wi = ((oc * c + ic) * k + di) * k + dj;
                                s += x.d[xi] * w.d[wi];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    Arr::new(&[bs, o, oh, ow], out)
}

pub fn max_pool2(x: &Arr) -> Arr {
    let (bs, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::new();
    for p in 0..bs * c {
        for i in 0..oh {
            for j in 0..ow {
                let at = |di: usize, dj: usize| x.d[p * h * w + (2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    Arr::new(&[bs, c, oh, ow], out)
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let hw = x.shape[2] * x.shape[3];
    let out = x.d.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Arr::new(&[x.shape[0], x.shape[1]], out)
}

fn rows(a: &Arr, f: impl Fn(&[f64]) -> Vec<f64>) -> Arr {
    let n = a.shape[1];
    Arr::new(&a.shape, a.d.chunks(n).flat_map(f).collect())
}

pub fn softmax(a: &Arr) -> Arr {
    rows(a, |r| {
        let s: f64 = r.iter().map(|v| v.exp()).sum();
        r.iter().map(|v| v.exp() / s).collect()
    })
}

pub fn log_softmax(a: &Arr) -> Arr {
    rows(a, |r| {
        let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
        r.iter().map(|v| v - lse).collect()
    })
}

pub fn l2_normalize(a: &Arr) -> Arr {
    rows(a, |r| {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / n).collect()
    })
}

pub fn cross_entropy(logits: &Arr, labels: &[usize]) -> f64 {
    let lsm = log_softmax(logits);
    let c = logits.shape[1];
    -labels.iter().enumerate().map(|(i, &l)| lsm.d[i * c + l]).sum::<f64>() / labels.len() as f64
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Double loop over pairs: the positive similarity in the numerator and,
/// in the denominator, the cross-view terms sim(z̃_n, ẑ_k) and sim(ẑ_n, z̃_k)
/// for every k != n.
pub fn naive_cross_view(za: &Arr, zb: &Arr, tau: f64) -> f64 {
    let d = za.shape[1];
    let n = za.shape[0];
    let a = |i: usize| &za.d[i * d..(i + 1) * d];
    let b = |i: usize| &zb.d[i * d..(i + 1) * d];
    let mut total = 0.0;
    for i in 0..n {
        let num = (cos(a(i), b(i)) / tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (cos(a(i), b(k)) / tau).exp() + (cos(b(i), a(k)) / tau).exp();
            }
        }
        total -= (num / den).ln();
    }
    total
}

/// Textbook NT-Xent over 2N anchors, summed.
pub fn naive_nt_xent(za: &Arr, zb: &Arr, tau: f64) -> f64 {
    let d = za.shape[1];
    let n = za.shape[0];
    let all: Vec<&[f64]> = (0..n)
        .map(|i| &za.d[i * d..(i + 1) * d])
        .chain((0..n).map(|i| &zb.d[i * d..(i + 1) * d]))
        .collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let p = (i + n) % (2 * n);
        let den: f64 = (0..2 * n).filter(|&j| j != i).map(|j| (cos(all[i], all[j]) / tau).exp()).sum();
        total -= ((cos(all[i], all[p]) / tau).exp() / den).ln();
    }
    total
}

// ---- gradient check --------------------------------------------------------

type Gen = fn(&mut ChaCha8Rng) -> (Vec<Arr>, Vec<usize>);
type TapeFn = fn(&mut Graph, &[Var], &[usize]) -> Var;
type OracleFn = fn(&[Arr], &[usize]) -> Arr;

pub struct OpCase {
    pub name: &'static str,
    gen: Gen,
    tape: TapeFn,
    oracle: OracleFn,
}

fn scalar(v: f64) -> Arr {
    Arr::new(&[1], vec![v])
}

fn loss_case(variant: LossVariant, reduction: Reduction) -> LossConfig {
    LossConfig {
        temperature: 0.5,
        reduction,
        variant,
    }
}

fn loss_oracle(inp: &[Arr], cfg: &LossConfig) -> Arr {
    let t = cfg.temperature as f64;
    let n = inp[0].shape[0] as f64;
    let (v, count) = match cfg.variant {
        LossVariant::CrossViewNegatives => (naive_cross_view(&inp[0], &inp[1], t), n),
        LossVariant::NtXent => (naive_nt_xent(&inp[0], &inp[1], t), 2.0 * n),
    };
    scalar(match cfg.reduction {
        Reduction::Sum => v,
        Reduction::Mean => v / count,
    })
}

fn pair_gen(r: &mut ChaCha8Rng) -> (Vec<Arr>, Vec<usize>) {
    let (n, d) = (dim(r, 2, 6), dim(r, 2, 8));
    (vec![uniform(r, &[n, d], -1.0, 1.0), uniform(r, &[n, d], -1.0, 1.0)], vec![])
}

macro_rules! loss_cases {
    ($($name:literal => $variant:expr, $red:expr;)*) => {
        vec![$(OpCase {
            name: $name,
            gen: pair_gen,
            tape: |g, v, _| contrastive_loss_on(g, v[0], v[1], &loss_case($variant, $red)).unwrap(),
            oracle: |a, _| loss_oracle(a, &loss_case($variant, $red)),
        },)*]
    };
}

pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        OpCase {
            name: "matmul",
            gen: |r| {
                let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
                (vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.matmul(v[0], v[1]).unwrap(),
            oracle: |a, _| matmul(&a[0], &a[1]),
        },
        OpCase {
            name: "transpose",
            gen: |r| {
                let (m, n) = (dim(r, 1, 6), dim(r, 1, 6));
                (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.transpose(v[0]).unwrap(),
            oracle: |a, _| transpose(&a[0]),
        },
        OpCase {
            name: "linear",
            gen: |r| {
                let (b, i, o) = (dim(r, 1, 4), dim(r, 1, 6), dim(r, 1, 5));
                (
                    vec![uniform(r, &[b, i], -1.0, 1.0), uniform(r, &[o, i], -1.0, 1.0), uniform(r, &[o], -1.0, 1.0)],
                    vec![],
                )
            },
            tape: |g, v, _| g.linear(v[0], v[1], Some(v[2])).unwrap(),
            oracle: |a, _| {
                let y = matmul(&a[0], &transpose(&a[1]));
                let o = a[2].d.len();
                Arr::new(&y.shape, y.d.iter().enumerate().map(|(i, v)| v + a[2].d[i % o]).collect())
            },
        },
        OpCase {
            name: "add",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 6)];
                (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.add(v[0], v[1]).unwrap(),
            oracle: |a, _| zip(&a[0], &a[1], |x, y| x + y),
        },
        OpCase {
            name: "mul",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 6)];
                (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.mul(v[0], v[1]).unwrap(),
            oracle: |a, _| zip(&a[0], &a[1], |x, y| x * y),
        },
        OpCase {
            name: "scale",
            gen: |r| {
                let s = [dim(r, 1, 8)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.scale(v[0], -1.75).unwrap(),
            oracle: |a, _| map(&a[0], |x| -1.75 * x),
        },
        OpCase {
            name: "add_scalar",
            gen: |r| {
                let s = [dim(r, 1, 8)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.add_scalar(v[0], 0.3).unwrap(),
            oracle: |a, _| map(&a[0], |x| x + 0.3),
        },
        OpCase {
            name: "relu",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                (vec![away_from_zero(r, &s)], vec![])
            },
            tape: |g, v, _| g.relu(v[0]).unwrap(),
            oracle: |a, _| map(&a[0], |x| x.max(0.0)),
        },
        OpCase {
            name: "exp",
            gen: |r| {
                let s = [dim(r, 1, 8)];
                (vec![uniform(r, &s, -2.0, 2.0)], vec![])
            },
            tape: |g, v, _| g.exp(v[0]).unwrap(),
            oracle: |a, _| map(&a[0], f64::exp),
        },
        OpCase {
            name: "log",
            gen: |r| {
                let s = [dim(r, 1, 8)];
                (vec![uniform(r, &s, 0.2, 3.0)], vec![])
            },
            tape: |g, v, _| g.log(v[0]).unwrap(),
            oracle: |a, _| map(&a[0], f64::ln),
        },
        OpCase {
            name: "sum",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.sum(v[0]).unwrap(),
            oracle: |a, _| scalar(a[0].d.iter().sum()),
        },
        OpCase {
            name: "mean",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.mean(v[0]).unwrap(),
            oracle: |a, _| scalar(a[0].d.iter().sum::<f64>() / a[0].d.len() as f64),
        },
        OpCase {
            name: "sum_axis0",
            gen: |r| {
                let s = [dim(r, 1, 5), dim(r, 1, 6)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.sum_axis(v[0], 0).unwrap(),
            oracle: |a, _| {
                let t = transpose(&a[0]);
                let n = t.shape[1];
                Arr::new(&[t.shape[0]], t.d.chunks(n).map(|r| r.iter().sum()).collect())
            },
        },
        OpCase {
            name: "sum_axis1",
            gen: |r| {
                let s = [dim(r, 1, 5), dim(r, 1, 6)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.sum_axis(v[0], 1).unwrap(),
            oracle: |a, _| {
                let n = a[0].shape[1];
                Arr::new(&[a[0].shape[0]], a[0].d.chunks(n).map(|r| r.iter().sum()).collect())
            },
        },
        OpCase {
            name: "conv2d",
            gen: |r| {
                let (b, c, h, o) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 3, 4), dim(r, 1, 3));
                let pad = dim(r, 0, 1);
                (
                    vec![
                        uniform(r, &[b, c, h, h], -1.0, 1.0),
                        uniform(r, &[o, c, 3, 3], -1.0, 1.0),
                        uniform(r, &[o], -1.0, 1.0),
                    ],
                    vec![pad],
                )
            },
            tape: |g, v, aux| g.conv2d(v[0], v[1], Some(v[2]), aux[0]).unwrap(),
            oracle: |a, aux| conv2d(&a[0], &a[1], &a[2], aux[0]),
        },
        OpCase {
            name: "max_pool2",
            gen: |r| {
                let (b, c, h, w) = (dim(r, 1, 2), dim(r, 1, 2), 2 * dim(r, 1, 2), 2 * dim(r, 1, 2));
                (vec![spread(r, &[b, c, h, w])], vec![])
            },
            tape: |g, v, _| g.max_pool2(v[0]).unwrap(),
            oracle: |a, _| max_pool2(&a[0]),
        },
        OpCase {
            name: "global_avg_pool",
            gen: |r| {
                let s = [dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
                (vec![uniform(r, &s, -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.global_avg_pool(v[0]).unwrap(),
            oracle: |a, _| global_avg_pool(&a[0]),
        },
        OpCase {
            name: "softmax",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 2, 6)];
                (vec![uniform(r, &s, -2.0, 2.0)], vec![])
            },
            tape: |g, v, _| g.softmax(v[0]).unwrap(),
            oracle: |a, _| softmax(&a[0]),
        },
        OpCase {
            name: "log_softmax",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 2, 6)];
                (vec![uniform(r, &s, -2.0, 2.0)], vec![])
            },
            tape: |g, v, _| g.log_softmax(v[0]).unwrap(),
            oracle: |a, _| log_softmax(&a[0]),
        },
        OpCase {
            name: "l2_normalize",
            gen: |r| {
                let s = [dim(r, 1, 4), dim(r, 2, 6)];
                (vec![away_from_zero(r, &s)], vec![])
            },
            tape: |g, v, _| g.l2_normalize(v[0]).unwrap(),
            oracle: |a, _| l2_normalize(&a[0]),
        },
        OpCase {
            name: "concat",
            gen: |r| {
                let (n, m0, m1) = (dim(r, 1, 4), dim(r, 1, 3), dim(r, 1, 3));
                (vec![uniform(r, &[m0, n], -1.0, 1.0), uniform(r, &[m1, n], -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| g.concat(&[v[0], v[1]]).unwrap(),
            oracle: |a, _| {
                let mut d = a[0].d.clone();
                d.extend(&a[1].d);
                Arr::new(&[a[0].shape[0] + a[1].shape[0], a[0].shape[1]], d)
            },
        },
        OpCase {
            name: "slice_rows",
            gen: |r| {
                let m = dim(r, 2, 6);
                let start = dim(r, 0, m - 1);
                let end = dim(r, start + 1, m);
                let n = dim(r, 1, 4);
                (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![start, end])
            },
            tape: |g, v, aux| g.slice_rows(v[0], aux[0], aux[1]).unwrap(),
            oracle: |a, aux| {
                let n = a[0].shape[1];
                Arr::new(&[aux[1] - aux[0], n], a[0].d[aux[0] * n..aux[1] * n].to_vec())
            },
        },
        OpCase {
            name: "reshape",
            gen: |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
                (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![])
            },
            tape: |g, v, _| {
                let n = g.value(v[0]).numel();
                g.reshape(v[0], vec![n]).unwrap()
            },
            oracle: |a, _| Arr::new(&[a[0].d.len()], a[0].d.clone()),
        },
        OpCase {
            name: "cross_entropy",
            gen: |r| {
                let (b, c) = (dim(r, 1, 5), dim(r, 2, 6));
                let labels = (0..b).map(|_| r.gen_range(0..c)).collect();
                (vec![uniform(r, &[b, c], -2.0, 2.0)], labels)
            },
            tape: |g, v, labels| g.cross_entropy(v[0], labels).unwrap(),
            oracle: |a, labels| scalar(cross_entropy(&a[0], labels)),
        },
    ];
    cases.extend(loss_cases! {
        "contrastive_loss(cross_view, sum)" => LossVariant::CrossViewNegatives, Reduction::Sum;
        "contrastive_loss(cross_view, mean)" => LossVariant::CrossViewNegatives, Reduction::Mean;
        "contrastive_loss(nt_xent, sum)" => LossVariant::NtXent, Reduction::Sum;
    });
    cases
}

pub const FD_EPS: f64 = 1e-3;

fn weighted(out: &Arr, w: &[f64]) -> f64 {
    out.d.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Relative error ‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖) for one random
/// instance. The scalar objective is Σ out ⊙ R with a fixed random R.
pub fn check_instance(case: &OpCase, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, aux) = (case.gen)(&mut r);
    let out = (case.oracle)(&inputs, &aux);
    let w: Vec<f64> = (0..out.d.len()).map(|_| r.gen_range(-1.0f32..1.0) as f64).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.tensor(), true)).collect();
    let y = (case.tape)(&mut g, &vars, &aux);
    assert_eq!(g.value(y).shape(), &out.shape[..], "{}: output shape", case.name);
    let wt = g.constant(Tensor::new(out.shape.clone(), w.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = g.mul(y, wt).unwrap();
    let obj = g.sum(prod).unwrap();
    g.backward(obj).unwrap();

    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf gradient");
        for i in 0..inputs[k].d.len() {
            let mut plus = inputs.clone();
            plus[k].d[i] += FD_EPS;
            let mut minus = inputs.clone();
            minus[k].d[i] -= FD_EPS;
            let fd = (weighted(&(case.oracle)(&plus, &aux), &w) - weighted(&(case.oracle)(&minus, &aux), &w)) / (2.0 * FD_EPS);
            let a = analytic[i] as f64;
            diff += (a - fd).powi(2);
            na += a * a;
            nf += fd * fd;
        }
    }
    let denom = na.sqrt().max(nf.sqrt());
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Worst relative error per op over `seeds` instances.
pub fn gradcheck_all(seeds: u64) -> Vec<(&'static str, f64)> {
    op_cases()
        .iter()
        .map(|c| {
            let worst = (0..seeds).map(|s| check_instance(c, s)).fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// Largest absolute and relative (to max(1, |naive|)) gap between the
/// implementation and the double loop for the cross-view loss, N in 2..=8.
pub fn loss_oracle_gap(seeds: u64) -> (f64, f64) {
    let cfg = LossConfig::default();
    let (mut abs, mut rel) = (0.0f64, 0.0f64);
    for s in 0..seeds {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + s);
        for n in 2..=8 {
            let d = dim(&mut r, 2, 16);
            let za = uniform(&mut r, &[n, d], -1.0, 1.0);
            let zb = uniform(&mut r, &[n, d], -1.0, 1.0);
            let got = cfdr::contrastive::contrastive_loss(&za.tensor(), &zb.tensor(), &cfg).unwrap() as f64;
            let want = naive_cross_view(&za, &zb, cfg.temperature as f64);
            abs = abs.max((got - want).abs());
            rel = rel.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    (abs, rel)
}
