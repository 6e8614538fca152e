//! Finite-difference checks of tape gradients against the f64 references.

use mosdistill::autograd::{Tape, Var};
use mosdistill::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const H: f64 = 1e-3;
pub const INSTANCES: usize = 20;

type TapeFn = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> mosdistill::error::Result<Var>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub tape: TapeFn,
    pub reference: RefFn,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Values are rounded through f32 so both sides see identical inputs.
    (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect()
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), uniform(rng, shape.iter().product()))
}

/// Largest relative error over all inputs of `case`, together with the
/// forward mismatch between tape and reference.
pub fn check(case: &Case, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let vals: Vec<Vec<f64>> = case.inputs.iter().map(|i| i.1.clone()).collect();
    let y_ref = (case.reference)(&vals);
    let r: Vec<f64> = uniform(rng, y_ref.len());

    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|(s, d)| {
            let t = Tensor::new(s.clone(), d.iter().map(|&v| v as f32).collect()).unwrap();
            tape.leaf(t.with_requires_grad(true))
        })
        .collect();
    let y = (case.tape)(&mut tape, &vars).unwrap();
    let forward = rel_err(&tape.value(y).iter().map(|&v| v as f64).collect::<Vec<_>>(), &y_ref);
    let shape = tape.shape(y).to_vec();
    let rc = tape.constant(Tensor::new(shape, r.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = tape.mul(y, rc).unwrap();
    let loss = tape.mean(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let n = y_ref.len() as f64;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.wrt(*v).unwrap().iter().map(|&g| g as f64).collect();
        let numeric = numeric_grad(&vals[i], H, |xi| {
            let mut all = vals.clone();
            all[i] = xi.to_vec();
            (case.reference)(&all).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / n
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    (worst, forward)
}

pub const OPS: [&str; 16] = [
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "add_scalar",
    "layer_norm",
    "softmax",
    "leaky_relu",
    "sigmoid",
    "mean",
    "transpose",
    "reshape",
    "attention",
];

/// Random instance `i` of `op`.
pub fn make_case(op: &str, i: usize, rng: &mut ChaCha8Rng) -> Case {
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b) = (dim(1, 5), dim(1, 6));
    match op {
        "matmul" => {
            let (m, k, n) = (a, b, dim(1, 5));
            Case {
                inputs: vec![input(rng, &[m, k]), input(rng, &[k, n])],
                tape: Box::new(|t, v| t.matmul(v[0], v[1])),
                reference: Box::new(move |x| matmul(&x[0], &x[1], m, k, n)),
            }
        }
        "conv2d" => {
            let wide = i % 4 == 3;
            let (cin, cout) = if wide { (dim(10, 13), dim(11, 14)) } else { (dim(1, 3), dim(1, 4)) };
            let (kh, kw) = (dim(1, 3), dim(1, 3));
            let stride = (dim(1, 2), if i % 3 == 0 { 2 } else { 1 });
            let pad = (dim(0, 1), dim(0, 1));
            let (h, w) = (dim(kh.max(3), 6), dim(kw.max(3), 6));
            let g = Conv { cin, h, w, cout, kh, kw, stride, pad };
            let bias = i % 2 == 0;
            let mut inputs = vec![input(rng, &[cin, h, w]), input(rng, &[cout, cin, kh, kw])];
            if bias {
                inputs.push(input(rng, &[cout]));
            }
            Case {
                inputs,
                tape: Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
                reference: Box::new(move |x| conv2d(&x[0], &x[1], x.get(2).map(|b| b.as_slice()), g)),
            }
        }
        "add" | "sub" | "mul" => {
            let op = op.to_string();
            Case {
                inputs: vec![input(rng, &[a, b]), input(rng, &[a, b])],
                tape: {
                    let op = op.clone();
                    Box::new(move |t, v| match op.as_str() {
                        "add" => t.add(v[0], v[1]),
                        "sub" => t.sub(v[0], v[1]),
                        _ => t.mul(v[0], v[1]),
                    })
                },
                reference: Box::new(move |x| {
                    x[0].iter()
                        .zip(&x[1])
                        .map(|(p, q)| match op.as_str() {
                            "add" => p + q,
                            "sub" => p - q,
                            _ => p * q,
                        })
                        .collect()
                }),
            }
        }
        "add_bias" => Case {
            inputs: vec![input(rng, &[a, b]), input(rng, &[b])],
            tape: Box::new(|t, v| t.add_bias(v[0], v[1])),
            reference: Box::new(move |x| x[0].iter().enumerate().map(|(j, v)| v + x[1][j % b]).collect()),
        },
        "scale" => {
            let c = rng.random_range(-3.0f32..3.0);
            Case {
                inputs: vec![input(rng, &[a, b])],
                tape: Box::new(move |t, v| t.scale(v[0], c)),
                reference: Box::new(move |x| x[0].iter().map(|v| v * c as f64).collect()),
            }
        }
        "add_scalar" => {
            let c = rng.random_range(-3.0f32..3.0);
            Case {
                inputs: vec![input(rng, &[a, b])],
                tape: Box::new(move |t, v| t.add_scalar(v[0], c)),
                reference: Box::new(move |x| x[0].iter().map(|v| v + c as f64).collect()),
            }
        }
        "layer_norm" => {
            let d = dim(4, 8);
            Case {
                inputs: vec![input(rng, &[a, d]), input(rng, &[d]), input(rng, &[d])],
                tape: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
                reference: Box::new(|x| layer_norm(&x[0], &x[1], &x[2])),
            }
        }
        "softmax" => Case {
            inputs: vec![input(rng, &[a, b])],
            tape: Box::new(|t, v| t.softmax(v[0])),
            reference: Box::new(move |x| softmax(&x[0], b)),
        },
        "leaky_relu" => {
            let mut inp = input(rng, &[a, b]);
            // Keep clear of the kink so central differences stay one-sided.
            for v in inp.1.iter_mut() {
                if v.abs() < 0.05 {
                    *v = 0.05f32.copysign(*v as f32) as f64;
                }
            }
            Case {
                inputs: vec![inp],
                tape: Box::new(|t, v| t.leaky_relu(v[0], 0.2)),
                reference: Box::new(|x| x[0].iter().map(|&v| if v >= 0.0 { v } else { 0.2f32 as f64 * v }).collect()),
            }
        }
        "sigmoid" => Case {
            inputs: vec![(vec![a, b], uniform(rng, a * b).iter().map(|v| ((v * 4.0) as f32) as f64).collect())],
            tape: Box::new(|t, v| t.sigmoid(v[0])),
            reference: Box::new(|x| x[0].iter().map(|&v| sigmoid(v)).collect()),
        },
        "mean" => Case {
            inputs: vec![input(rng, &[a, b])],
            tape: Box::new(|t, v| t.mean(v[0])),
            reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
        },
        "transpose" => Case {
            inputs: vec![input(rng, &[a, b])],
            tape: Box::new(|t, v| t.transpose(v[0])),
            reference: Box::new(move |x| transpose(&x[0], a, b)),
        },
        "reshape" => Case {
            inputs: vec![input(rng, &[a, b])],
            tape: Box::new(move |t, v| {
                let flat = t.reshape(v[0], &[a * b])?;
                let back = t.reshape(flat, &[b, a])?;
                // A non-trivial consumer so the reshaped layout matters.
                t.transpose(back)
            }),
            reference: Box::new(move |x| transpose(&x[0], b, a)),
        },
        "attention" => {
            let heads = dim(1, 3);
            let d = heads * dim(1, 4);
            let (tq, s) = (dim(1, 5), dim(1, 5));
            Case {
                inputs: vec![input(rng, &[tq, d]), input(rng, &[s, d]), input(rng, &[s, d])],
                tape: Box::new(move |t, v| t.attention(v[0], v[1], v[2], heads)),
                reference: Box::new(move |x| attention(&x[0], &x[1], &x[2], tq, s, d, heads)),
            }
        }
        other => panic!("no gradcheck case for `{other}`"),
    }
}

/// Worst gradient and forward errors for `op` over the standard instances.
pub fn sweep(op: &str, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..INSTANCES {
        let case = make_case(op, i, &mut rng);
        let (g, f) = check(&case, &mut rng);
        worst = (worst.0.max(g), worst.1.max(f));
    }
    worst
}
