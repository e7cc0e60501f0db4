//! Central finite-difference gradient checking.

use rand::Rng as _;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::losses;
use crate::masking::{init_masks, Aspect, InitPolicy, MaskMode};
use crate::params::Bound;
use crate::seed;
use crate::tensor::Tensor;
use crate::train;

/// Relative error between an analytic and a numeric derivative. The
/// denominator is floored at 1e-6: some derivatives are exactly zero (an
/// attention key bias shifts every score of a row equally) and their
/// central difference is pure round-off of order 1e-11.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Max relative error between the backward-pass gradient of scalar `f` at
/// `x` and central differences with the given `step`, over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor, grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let v = g.leaf(t.with_requires_grad(grad));
        let out = f(&mut g, v)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Precondition(
                "grad_check needs a scalar function".into(),
            ));
        }
        let value = g.value(out).item();
        if !grad {
            return Ok((value, None));
        }
        g.backward(out)?;
        let analytic = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((value, Some(analytic)))
    };
    let (_, analytic) = eval(x.clone(), true)?;
    let analytic = analytic.expect("requested gradient");
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus, false)?.0 - eval(minus, false)?.0) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Worst relative error of one checked function.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

type Case = (String, Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

fn random(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // Magnitudes stay away from zero so ReLU kinks are never straddled.
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Reduces `v` to a scalar with fixed random weights, so every output
/// coordinate contributes a distinct amount.
fn project(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.hadamard(v, w)?;
    g.sum(p)
}

/// One scalar test function per differentiable operation and operand.
fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = seed::rng(seed);
    let mut cases: Vec<Case> = Vec::new();
    let mut case = |name: &str, x: Tensor, f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>>| {
        cases.push((name.to_string(), x, f));
    };
    let (r, c) = (4, 6);
    let a = random(&mut rng, &[r, c]);
    let b = random(&mut rng, &[c, 3]);
    let w43 = random(&mut rng, &[r, 3]);
    let wrc = random(&mut rng, &[r, c]);
    let row = random(&mut rng, &[c]);

    let (b1, w1) = (b.clone(), w43.clone());
    case(
        "matmul.left",
        a.clone(),
        Box::new(move |g, x| {
            let k = g.constant(b1.clone());
            let y = g.matmul(x, k)?;
            project(g, y, &w1)
        }),
    );
    let (a1, w1) = (a.clone(), w43.clone());
    case(
        "matmul.right",
        b.clone(),
        Box::new(move |g, x| {
            let k = g.constant(a1.clone());
            let y = g.matmul(k, x)?;
            project(g, y, &w1)
        }),
    );
    let (r1, w1) = (row.clone(), wrc.clone());
    case(
        "add",
        a.clone(),
        Box::new(move |g, x| {
            let k = g.constant(r1.clone());
            let y = g.add(x, k)?;
            let y = g.hadamard(y, y)?;
            project(g, y, &w1)
        }),
    );
    let (a1, w1) = (a.clone(), wrc.clone());
    case(
        "add.broadcast",
        row.clone(),
        Box::new(move |g, x| {
            let k = g.constant(a1.clone());
            let y = g.add(k, x)?;
            let y = g.hadamard(y, y)?;
            project(g, y, &w1)
        }),
    );
    let (b2, w1) = (random(&mut rng, &[r, c]), wrc.clone());
    case(
        "sub",
        a.clone(),
        Box::new(move |g, x| {
            let k = g.constant(b2.clone());
            let y = g.sub(k, x)?;
            let y = g.hadamard(y, y)?;
            project(g, y, &w1)
        }),
    );
    let (b2, w1) = (random(&mut rng, &[r, c]), wrc.clone());
    case(
        "hadamard",
        a.clone(),
        Box::new(move |g, x| {
            let k = g.constant(b2.clone());
            let y = g.hadamard(x, k)?;
            let y = g.hadamard(y, x)?;
            project(g, y, &w1)
        }),
    );
    let w1 = wrc.clone();
    case(
        "relu",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.relu(x)?;
            project(g, y, &w1)
        }),
    );
    let w1 = wrc.clone();
    case(
        "gelu",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.gelu(x)?;
            project(g, y, &w1)
        }),
    );
    let w1 = wrc.clone();
    case(
        "scale.add_scalar",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.scale(x, -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            let y = g.hadamard(y, y)?;
            project(g, y, &w1)
        }),
    );
    let w1 = wrc.clone();
    case(
        "softmax_rows",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.softmax_rows(x)?;
            project(g, y, &w1)
        }),
    );
    let (gain, bias, w1) = (random(&mut rng, &[c]), random(&mut rng, &[c]), wrc.clone());
    {
        let (gn, bs, w) = (gain.clone(), bias.clone(), w1.clone());
        case(
            "layer_norm.input",
            a.clone(),
            Box::new(move |g, x| {
                let (gv, bv) = (g.constant(gn.clone()), g.constant(bs.clone()));
                let y = g.layer_norm(x, gv, bv)?;
                project(g, y, &w)
            }),
        );
        let (a1, bs, w) = (a.clone(), bias.clone(), w1.clone());
        case(
            "layer_norm.gain",
            gain.clone(),
            Box::new(move |g, x| {
                let (av, bv) = (g.constant(a1.clone()), g.constant(bs.clone()));
                let y = g.layer_norm(av, x, bv)?;
                project(g, y, &w)
            }),
        );
        let (a1, gn, w) = (a.clone(), gain.clone(), w1.clone());
        case(
            "layer_norm.bias",
            bias.clone(),
            Box::new(move |g, x| {
                let (av, gv) = (g.constant(a1.clone()), g.constant(gn.clone()));
                let y = g.layer_norm(av, gv, x)?;
                project(g, y, &w)
            }),
        );
    }
    let w1 = row.clone();
    case(
        "mean_pool",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.mean_pool(x)?;
            project(g, y, &w1)
        }),
    );
    let w1 = random(&mut rng, &[2, c]);
    case(
        "mean_pool_blocks",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.mean_pool_blocks(x, 2)?;
            project(g, y, &w1)
        }),
    );
    case(
        "sum.mean",
        a.clone(),
        Box::new(|g, x| {
            let sq = g.hadamard(x, x)?;
            let s = g.sum(sq)?;
            let m = g.mean(x)?;
            let m2 = g.hadamard(m, m)?;
            g.add(s, m2)
        }),
    );
    let w1 = random(&mut rng, &[r]);
    case(
        "row_norms",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.row_norms(x)?;
            project(g, y, &w1)
        }),
    );
    let w1 = random(&mut rng, &[5, c]);
    case(
        "gather_rows",
        a.clone(),
        Box::new(move |g, x| {
            let y = g.gather_rows(x, &[3, 0, 3, 1, 3])?;
            project(g, y, &w1)
        }),
    );
    // Two sequences of length 3, model width 4, two heads.
    let qkv: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[6, 4])).collect();
    let watt = random(&mut rng, &[6, 4]);
    for (slot, label) in ["attention.query", "attention.key", "attention.value"]
        .into_iter()
        .enumerate()
    {
        let (others, w) = (qkv.clone(), watt.clone());
        case(
            label,
            qkv[slot].clone(),
            Box::new(move |g, x| {
                let mut vars: Vec<Var> = others.iter().map(|t| g.constant(t.clone())).collect();
                vars[slot] = x;
                let y = g.attention(vars[0], vars[1], vars[2], 3, 2)?;
                project(g, y, &w)
            }),
        );
    }
    case(
        "cross_entropy",
        a.clone(),
        Box::new(|g, x| g.cross_entropy(x, &[0, 5, 2, 2])),
    );
    cases
}

/// Gradient checks of every differentiable graph operation, with respect to
/// each differentiable operand, on random inputs.
pub fn check_ops(step: f64, seed: u64) -> Result<Vec<CheckResult>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, x, f)| {
            Ok(CheckResult {
                max_rel_error: grad_check(f, &x, step)?,
                coords: x.numel(),
                name,
            })
        })
        .collect()
}

/// Triplet plus classification loss of a small masked encoder (weights
/// mode, both aspects) checked against every coordinate of every encoder
/// and head parameter. `n_layers` sets the depth.
pub fn check_encoder(n_layers: usize, step: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = EncoderConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers,
        d_ff: 16,
        max_seq_len: 6,
        mask_last_layers: n_layers.min(2),
        seed,
        // GELU keeps the loss smooth at every weight perturbation.
        activation: Activation::Gelu,
        mask_qkv: true,
    };
    let enc = Encoder::new(cfg)?;
    let mut rng = seed::rng(seed ^ 0x5eed);
    let mut masks = init_masks(
        &enc.mask_shapes(MaskMode::Weights),
        MaskMode::Weights,
        0.5,
        &InitPolicy::AllOn,
        seed,
    )?;
    for slot in &mut masks.slots {
        for aspect in [Aspect::A, Aspect::B] {
            for m in slot.get_mut(aspect).data_mut() {
                if rng.gen_bool(0.3) {
                    *m = 0.0;
                }
            }
        }
    }
    let mut all = enc.params().clone();
    for (name, t) in train::init_heads(8, seed).iter() {
        all.insert(name, t.clone());
    }
    let b = 2;
    let tokens: Vec<Vec<usize>> = (0..3 * b)
        .map(|_| (0..5).map(|_| rng.gen_range(0..16)).collect())
        .collect();
    let ya: Vec<u8> = (0..3 * b).map(|i| (i % 2) as u8).collect();
    let yb: Vec<u8> = (0..3 * b).map(|i| (i / 2 % 2) as u8).collect();
    let loss = |g: &mut Graph, p: &Bound| -> Result<Var> {
        let ma = masks.bind(g, Aspect::A, false);
        let mb = masks.bind(g, Aspect::B, false);
        let za = enc.forward(g, p, &tokens, Some(&ma))?;
        let zb = enc.forward(g, p, &tokens, Some(&mb))?;
        let pick = |g: &mut Graph, z: Var, k: usize| {
            g.gather_rows(z, &(k * b..(k + 1) * b).collect::<Vec<_>>())
        };
        let (z0a, z1a, z2a) = (pick(g, za, 0)?, pick(g, za, 1)?, pick(g, za, 2)?);
        let (z0b, z1b, z2b) = (pick(g, zb, 0)?, pick(g, zb, 1)?, pick(g, zb, 2)?);
        let (_, _, trp) = losses::triplet_loss(g, z0a, z1a, z2a, z0b, z1b, z2b, 2.0)?;
        let (_, _, cls) = losses::classification_loss(g, p, za, zb, &ya, &yb)?;
        g.add(trp, cls)
    };
    let names: Vec<String> = all.names().map(str::to_string).collect();
    names
        .into_iter()
        .map(|name| {
            let x = all.get(&name)?.clone();
            let err = grad_check(
                |g, x| {
                    let mut p = all.bind(g, false);
                    p.replace(&name, x)?;
                    loss(g, &p)
                },
                &x,
                step,
            )?;
            Ok(CheckResult {
                coords: x.numel(),
                max_rel_error: err,
                name,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn squared_norm_is_exact_to_step_squared() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.hadamard(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn every_op_passes() {
        for r in check_ops(1e-5, 11).unwrap() {
            assert!(r.max_rel_error <= 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn two_layer_encoder_passes() {
        for r in check_encoder(2, 1e-5, 5).unwrap() {
            assert!(r.max_rel_error <= 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
