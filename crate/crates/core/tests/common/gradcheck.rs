//! Central finite-difference checks of every differentiable tape operation. Each
//! check draws `POINTS` random instances and returns the worst relative error over
//! every input coordinate of every instance.

use flowcond::condition::{modulate, ModulationParams};
use flowcond::detector::{multibox_loss_var, AnchorMatch, MatchAssignment};
use flowcond::numerics::{Tape, Tensor, Var};
use flowcond::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, fd_max_error, uniform_vec};

pub const POINTS: usize = 20;

/// Reduce `y` to a scalar with fixed random weights so every output coordinate
/// contributes a distinct amount to the checked gradient.
fn readout(tape: &mut Tape, y: Var, weights: &[f64]) -> Result<Var> {
    if tape.value(y).numel() == 1 {
        return Ok(y);
    }
    let w = tape.input(Tensor::new(tape.shape(y).to_vec(), weights.to_vec())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error of the tape gradients of `build` with respect to every
/// input, against central differences.
pub fn check_tape<F>(inputs: &[Tensor], readout_seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval =
        |values: &[Tensor], weights: Option<&[f64]>| -> Result<(Tape, Var, Vec<Var>, Vec<f64>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
            let y = build(&mut tape, &vars)?;
            let w = match weights {
                Some(w) => w.to_vec(),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(readout_seed);
                    uniform_vec(&mut rng, tape.value(y).numel(), -1.0, 1.0)
                }
            };
            let loss = readout(&mut tape, y, &w)?;
            Ok((tape, loss, vars, w))
        };

    let (tape, loss, vars, weights) = eval(inputs, None)?;
    let grads = tape.gradients(loss)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic = grads
            .get(*var)
            .map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let err = fd_max_error(inputs[k].data(), &analytic, |x| {
            let mut probe = inputs.to_vec();
            probe[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).unwrap();
            let (t, l, _, _) = eval(&probe, Some(&weights)).unwrap();
            t.value(l).item()
        });
        worst = worst.max(err);
    }
    Ok(worst)
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn conv2d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let (c, o, h, w) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(3..=6),
            rng.gen_range(3..=6),
        );
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = rng.gen_range(1..=2);
        let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
        let inputs = [
            tensor(&[c, h, w], uniform_vec(&mut rng, c * h * w, -1.0, 1.0)),
            tensor(
                &[o, c, k, k],
                uniform_vec(&mut rng, o * c * k * k, -1.0, 1.0),
            ),
            tensor(&[o], uniform_vec(&mut rng, o, -1.0, 1.0)),
        ];
        worst = worst.max(check_tape(&inputs, seed ^ i as u64, |t, v| {
            t.conv2d(v[0], v[1], v[2], stride, pad)
        })?);
    }
    Ok(worst)
}

pub fn relu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        // Keep inputs off the kink so the central difference is well defined.
        let x = tensor(&[2, 3, 4], away_from_zero(&mut rng, 24, 1e-3));
        worst = worst.max(check_tape(&[x], seed ^ i as u64, |t, v| Ok(t.relu(v[0])))?);
    }
    Ok(worst)
}

pub fn softmax(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let axis = i % 2;
        let x = tensor(&[4, 5], uniform_vec(&mut rng, 20, -3.0, 3.0));
        worst = worst.max(check_tape(&[x], seed ^ i as u64, |t, v| {
            t.softmax(v[0], axis)
        })?);
    }
    Ok(worst)
}

pub fn modulation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let shape = [rng.gen_range(1..=4), 3, 3];
        let n: usize = shape.iter().product();
        let inputs = [
            tensor(&shape, uniform_vec(&mut rng, n, -2.0, 2.0)),
            tensor(&shape, uniform_vec(&mut rng, n, -2.0, 2.0)),
            tensor(&shape, uniform_vec(&mut rng, n, -2.0, 2.0)),
        ];
        worst = worst.max(check_tape(&inputs, seed ^ i as u64, |t, v| {
            modulate(
                t,
                v[0],
                &ModulationParams {
                    beta: v[1],
                    gamma: v[2],
                },
            )
        })?);
    }
    Ok(worst)
}

pub fn multibox(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let q = 12;
        let p = 3;
        let k = if i % 3 == 2 { 2 } else { 1 };
        // Every fifth instance has no positives.
        let pos_rate = if i % 5 == 4 { 0.0 } else { 0.3 };
        let labels: Vec<Option<AnchorMatch>> = (0..q)
            .map(|_| {
                rng.gen_bool(pos_rate).then(|| AnchorMatch {
                    gt_index: 0,
                    class_id: rng.gen_range(1..=p),
                })
            })
            .collect();
        let targets: Vec<f64> = labels
            .iter()
            .flat_map(|l| {
                let v = uniform_vec(&mut rng, 4 * k, -1.5, 1.5);
                if l.is_some() {
                    v
                } else {
                    vec![0.0; 4 * k]
                }
            })
            .collect();
        let assignment = MatchAssignment { labels };
        let inputs = [
            tensor(&[q, p + 1], uniform_vec(&mut rng, q * (p + 1), -2.0, 2.0)),
            tensor(&[q, 4 * k], uniform_vec(&mut rng, q * 4 * k, -2.0, 2.0)),
        ];
        worst = worst.max(check_tape(&inputs, seed ^ i as u64, |t, v| {
            Ok(multibox_loss_var(t, v[0], v[1], &assignment, &targets, p, 3)?.0)
        })?);
    }
    Ok(worst)
}

/// Every check by name.
pub fn all(seed: u64) -> Vec<(&'static str, Result<f64>)> {
    vec![
        ("conv2d", conv2d(seed)),
        ("relu", relu(seed + 1)),
        ("softmax", softmax(seed + 2)),
        ("modulation", modulation(seed + 3)),
        ("multibox_loss", multibox(seed + 4)),
    ]
}
