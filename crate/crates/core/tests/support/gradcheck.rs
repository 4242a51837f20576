//! Central finite differences against the tape's analytic gradients.

use dgst_core::autodiff::{Tape, Var, DEFAULT_NORM_EPS};
use dgst_core::loss::ce_dice_loss;
use dgst_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalarizes `f` with fixed random weights so every output entry matters.
fn scalar_loss(
    inputs: &[Tensor],
    weights: Option<&Tensor>,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = match weights {
        Some(w) => {
            let w = tape.leaf(w.clone()).unwrap();
            let p = tape.mul(out, w).unwrap();
            tape.sum(p).unwrap()
        }
        None => out,
    };
    (tape, vars, loss)
}

fn out_shape(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).shape().to_vec()
}

/// Largest relative error over every input, using the norm-based measure
/// ‖a − n‖ / max(‖a‖, ‖n‖).
fn check(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    scalar_out: bool,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let weights = (!scalar_out).then(|| random(rng, &out_shape(&inputs, f)));
    let (tape, vars, loss) = scalar_loss(&inputs, weights.as_ref(), f);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let (t, _, l) = scalar_loss(xs, weights.as_ref(), f);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            *n = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        // a bias feeding a norm has an exactly zero gradient; compare absolutely there
        let rel = if denom < 1e-8 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

/// Largest error over `INSTANCES` random instances.
fn worst(seed: u64, mut make: impl FnMut(&mut ChaCha8Rng, u64) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES).map(|i| make(&mut rng, i)).fold(0.0, f64::max)
}

pub fn conv2d() -> f64 {
    worst(1, |rng, i| {
        let (n, cin, cout) = (1 + (i % 2) as usize, rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 2, 3][(i % 3) as usize];
        let stride = 1 + (i % 2) as usize;
        let pad = (i as usize) % k;
        // the kernel requires (H + 2p - k) to be a multiple of the stride
        let fit = |m: usize| k + stride * m - 2 * pad;
        let (h, w) = (fit(rng.gen_range(2..4)), fit(rng.gen_range(2..4)));
        let inputs = vec![
            random(rng, &[n, cin, h, w]),
            random(rng, &[cout, cin, k, k]),
            random(rng, &[cout]),
        ];
        check(rng, inputs, false, &move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        })
    })
}

pub fn conv_transpose2d() -> f64 {
    worst(2, |rng, i| {
        let (n, cin, cout) = (1 + (i % 2) as usize, rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [2, 3, 1][(i % 3) as usize];
        let stride = [2, 1][(i % 2) as usize];
        let pad = if k == 3 && i % 4 == 0 { 1 } else { 0 };
        let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let inputs = vec![
            random(rng, &[n, cin, h, w]),
            random(rng, &[cin, cout, k, k]),
            random(rng, &[cout]),
        ];
        check(rng, inputs, false, &move |t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)
        })
    })
}

pub fn instance_norm2d() -> f64 {
    worst(3, |rng, _| {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let inputs = vec![random(rng, &[n, c, h, w]), random(rng, &[c]), random(rng, &[c])];
        check(rng, inputs, false, &|t, v| {
            t.instance_norm2d(v[0], v[1], v[2], DEFAULT_NORM_EPS)
        })
    })
}

pub fn leaky_relu() -> f64 {
    worst(4, |rng, _| {
        // keep away from the kink, where central differences are invalid
        let x = Tensor::from_fn(&[2, 3, 4], |_| {
            let m = rng.gen_range(0.01..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
        check(rng, vec![x], false, &|t, v| t.leaky_relu(v[0], 0.01))
    })
}

pub fn max_pool2d() -> f64 {
    worst(5, |rng, _| {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
        // distinct values spaced well beyond the step so no window has a near-tie
        let total = n * c * h * w;
        let mut vals: Vec<f64> = (0..total).map(|i| i as f64 * 0.01).collect();
        for i in (1..total).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(vec![n, c, h, w], vals).unwrap();
        check(rng, vec![x], false, &|t, v| t.max_pool2d(v[0]))
    })
}

pub fn concat() -> f64 {
    worst(6, |rng, _| {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..4), rng.gen_range(1..4));
        let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let inputs = vec![random(rng, &[n, ca, h, w]), random(rng, &[n, cb, h, w])];
        check(rng, inputs, false, &|t, v| t.concat(v[0], v[1]))
    })
}

pub fn softmax() -> f64 {
    worst(7, |rng, _| {
        let shape = [
            rng.gen_range(1..=2),
            rng.gen_range(2..=4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        ];
        let x = random(rng, &shape).map(|v| 3.0 * v);
        check(rng, vec![x], false, &|t, v| t.softmax(v[0]))
    })
}

pub fn ce_dice() -> f64 {
    worst(8, |rng, _| {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(2..=3));
        let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let x = random(rng, &[n, c, h, w]).map(|v| 2.0 * v);
        let labels: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..c as u8)).collect();
        check(rng, vec![x], true, &move |t, v| ce_dice_loss(t, v[0], &labels))
    })
}

pub fn composite_unet_block() -> f64 {
    // conv -> norm -> leaky relu -> pool -> transposed conv -> concat, end to end
    worst(9, |rng, _| {
        let inputs = vec![
            random(rng, &[1, 2, 4, 4]),
            random(rng, &[3, 2, 3, 3]),
            random(rng, &[3]),
            random(rng, &[3]),
            random(rng, &[3]),
            random(rng, &[3, 2, 2, 2]),
        ];
        check(rng, inputs, false, &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let y = t.instance_norm2d(y, v[3], v[4], DEFAULT_NORM_EPS)?;
            let y = t.leaky_relu(y, 0.01)?;
            let p = t.max_pool2d(y)?;
            let u = t.conv_transpose2d(p, v[5], None, 2, 0)?;
            t.concat(v[0], u)
        })
    })
}

/// Every checked operation with its worst relative error.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d()),
        ("conv_transpose2d", conv_transpose2d()),
        ("instance_norm2d", instance_norm2d()),
        ("leaky_relu", leaky_relu()),
        ("max_pool2d", max_pool2d()),
        ("concat", concat()),
        ("softmax", softmax()),
        ("ce_dice_loss", ce_dice()),
        ("composite", composite_unet_block()),
    ]
}
