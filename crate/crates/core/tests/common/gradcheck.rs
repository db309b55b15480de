//! Central finite-difference gradient checks.

use cardioseg::seed;
use cardioseg::{NetworkConfig, NetworkInstance, Tape, Tensor, Var};
use rand::Rng as _;

pub const STEP: f64 = 1e-4;
pub const MAX_RELATIVE_ERROR: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
/// Gradients smaller than this are compared absolutely against it.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: u64,
    pub coordinates: usize,
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst <= MAX_RELATIVE_ERROR && self.instances == INSTANCES
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn random_tensor(rng: &mut seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[-hi,-gap] ∪ [gap,hi]`, away from ReLU's kink.
fn away_from_zero(rng: &mut seed::Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values so max-pool windows never tie.
fn distinct(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 / n as f64).collect();
    use rand::seq::SliceRandom;
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Checks every coordinate of every input of `f`, where `f` builds a
/// scalar on a fresh tape from leaves holding `inputs`.
fn check<F>(inputs: &[Tensor], f: F) -> (usize, f64)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
            coordinates += 1;
        }
    }
    (coordinates, worst)
}

/// Projects a tensor-valued output onto a fixed random direction.
fn project(tape: &mut Tape, out: Var, direction: &Tensor) -> Var {
    let d = tape.leaf(direction.clone(), false);
    let prod = tape.mul(out, d).unwrap();
    tape.sum(prod)
}

fn run(op: &'static str, mut instance: impl FnMut(&mut seed::Rng) -> (usize, f64)) -> OpReport {
    let mut report = OpReport {
        op,
        instances: 0,
        coordinates: 0,
        worst: 0.0,
    };
    for i in 0..INSTANCES {
        let mut rng = seed::rng_for(i, &[b"gradcheck", op.as_bytes()]);
        let (n, worst) = instance(&mut rng);
        report.instances += 1;
        report.coordinates += n;
        report.worst = report.worst.max(worst);
    }
    report
}

pub fn conv2d() -> OpReport {
    run("conv2d", |rng| {
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let k = [1, 3][rng.random_range(0..2)];
        let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let x = random_tensor(rng, &[2, cin, 5, 5], -1.0, 1.0);
        let w = random_tensor(rng, &[cout, cin, k, k], -1.0, 1.0);
        let b = random_tensor(rng, &[cout], -1.0, 1.0);
        let out = (5 + 2 * pad - k) / stride + 1;
        let d = random_tensor(rng, &[2, cout, out, out], -1.0, 1.0);
        check(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            project(t, y, &d)
        })
    })
}

pub fn conv_transpose2d() -> OpReport {
    run("conv_transpose2d", |rng| {
        let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let x = random_tensor(rng, &[2, cin, 3, 3], -1.0, 1.0);
        let w = random_tensor(rng, &[cin, cout, 2, 2], -1.0, 1.0);
        let b = random_tensor(rng, &[cout], -1.0, 1.0);
        let d = random_tensor(rng, &[2, cout, 6, 6], -1.0, 1.0);
        check(&[x, w, b], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2).unwrap();
            project(t, y, &d)
        })
    })
}

pub fn max_pool2d() -> OpReport {
    run("max_pool2d", |rng| {
        let x = distinct(rng, &[2, 2, 4, 6]);
        let d = random_tensor(rng, &[2, 2, 2, 3], -1.0, 1.0);
        check(&[x], |t, v| {
            let y = t.max_pool2d(v[0]).unwrap();
            project(t, y, &d)
        })
    })
}

pub fn relu() -> OpReport {
    run("relu", |rng| {
        let x = away_from_zero(rng, &[2, 3, 3, 3], 1e-2, 1.0);
        let d = random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0);
        check(&[x], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &d)
        })
    })
}

pub fn softmax() -> OpReport {
    run("softmax", |rng| {
        let x = random_tensor(rng, &[2, 4, 3, 3], -3.0, 3.0);
        let d = random_tensor(rng, &[2, 4, 3, 3], -1.0, 1.0);
        check(&[x], |t, v| {
            let y = t.softmax_channels(v[0]).unwrap();
            project(t, y, &d)
        })
    })
}

fn random_labels(rng: &mut seed::Rng, n: usize, classes: u8) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

pub fn cross_entropy() -> OpReport {
    run("cross_entropy", |rng| {
        let x = random_tensor(rng, &[2, 4, 3, 3], -3.0, 3.0);
        let labels = random_labels(rng, 2 * 9, 4);
        check(&[x], |t, v| t.cross_entropy(v[0], &labels).unwrap())
    })
}

pub fn soft_dice() -> OpReport {
    run("soft_dice", |rng| {
        let x = random_tensor(rng, &[2, 4, 3, 3], -3.0, 3.0);
        let labels = random_labels(rng, 2 * 9, 4);
        let target = Tensor::from_fn(&[2, 4, 3, 3], |i| {
            let (b, c, p) = (i / 36, (i / 9) % 4, i % 9);
            f64::from(labels[b * 9 + p] as usize == c)
        });
        // Probabilities come from a softmax so they stay normalised under
        // perturbation; the composite is checked against the logits.
        check(&[x], |t, v| {
            let p = t.softmax_channels(v[0]).unwrap();
            t.soft_dice(p, &target).unwrap()
        })
    })
}

pub fn residual_unet() -> OpReport {
    run("residual_unet", |rng| {
        let cfg = NetworkConfig {
            depth: 2,
            base_filters: 2,
            in_channels: 1,
            num_classes: 3,
            residual: true,
            ..Default::default()
        };
        let mut net = NetworkInstance::build(cfg, rng.random()).unwrap();
        for p in net.params_mut() {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let x = random_tensor(rng, &[1, 1, 4, 4], 0.0, 1.0);
        let labels = random_labels(rng, 16, 3);
        let target = Tensor::from_fn(&[1, 3, 4, 4], |i| f64::from(labels[i % 16] as usize == i / 16));
        let loss = |tape: &mut Tape, net: &NetworkInstance, x: Var, grad: bool| {
            let bindings = net.bind(tape, grad);
            let logits = net.forward_on(tape, &bindings, x).unwrap();
            let ce = tape.cross_entropy(logits, &labels).unwrap();
            let p = tape.softmax_channels(logits).unwrap();
            let dice = tape.soft_dice(p, &target).unwrap();
            (tape.add(ce, dice).unwrap(), bindings)
        };
        let value = |net: &NetworkInstance, x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let (l, _) = loss(&mut tape, net, xv, false);
            tape.value(l).item().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let (l, bindings) = loss(&mut tape, &net, xv, true);
        let grads = tape.backward(l).unwrap();

        let mut worst = 0.0f64;
        let mut n = 0;
        let gx = grads.get(xv).unwrap().to_vec();
        for (i, &g) in gx.iter().enumerate() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += STEP;
            xm.data_mut()[i] -= STEP;
            let numeric = (value(&net, &xp) - value(&net, &xm)) / (2.0 * STEP);
            worst = worst.max(relative_error(g, numeric));
            n += 1;
        }
        for (k, &var) in bindings.vars().iter().enumerate() {
            let analytic = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; net.params()[k].tensor.len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let original = net.params()[k].tensor.data()[i];
                net.params_mut()[k].tensor.data_mut()[i] = original + STEP;
                let up = value(&net, &x);
                net.params_mut()[k].tensor.data_mut()[i] = original - STEP;
                let down = value(&net, &x);
                net.params_mut()[k].tensor.data_mut()[i] = original;
                worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
                n += 1;
            }
        }
        (n, worst)
    })
}

pub fn all() -> Vec<OpReport> {
    vec![
        conv2d(),
        conv_transpose2d(),
        max_pool2d(),
        relu(),
        softmax(),
        cross_entropy(),
        soft_dice(),
        residual_unet(),
    ]
}
