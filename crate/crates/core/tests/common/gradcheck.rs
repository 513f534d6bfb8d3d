//! Central-difference gradient oracle shared by the gradient test target and
//! the acceptance suite.

use aver_core::losses::{cross_entropy, neg_ccc_loss, rkd_loss, triplet_loss, RkdWeights, TripletBatch, TripletLabel};
use aver_core::tensor::{ConvGeom, LstmLayer, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 10;
/// Denominator floor. Central differences of an O(1) loss carry about
/// `ε_mach / STEP ≈ 1e-11` of round-off, so below this magnitude the
/// comparison becomes absolute (`|a − n| < TOLERANCE · FLOOR = 1e-10`).
const FLOOR: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Reduce any output to a scalar through a fixed random projection so that
/// every output element contributes a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, tape.shape(out), 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.item(loss)
}

/// Largest elementwise relative error between autodiff and central
/// differences over every input element.
pub fn max_relative_error(inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").data().to_vec();
        for k in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn case_dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[4, 5], 1.0), random(&mut rng, &[5, 3], 1.0), random(&mut rng, &[3], 1.0)];
    max_relative_error(inputs, &move |t, v| {
        let y = t.dense(v[0], v[1], Some(v[2]))?;
        project(t, y, seed)
    })
}

fn case_conv1d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[2, 3, 11], 1.0), random(&mut rng, &[4, 3, 3], 1.0), random(&mut rng, &[4], 1.0)];
    max_relative_error(inputs, &move |t, v| {
        let y = t.conv1d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(t, y, seed)
    })
}

fn case_conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[2, 2, 6, 5], 1.0), random(&mut rng, &[3, 2, 3, 3], 1.0), random(&mut rng, &[3], 1.0)];
    max_relative_error(inputs, &move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::square(3, 2, 1))?;
        project(t, y, seed)
    })
}

fn case_batch_norm_train(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[3, 2, 2, 3], 1.0), random(&mut rng, &[2], 1.0), random(&mut rng, &[2], 1.0)];
    max_relative_error(inputs, &move |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(t, y, seed)
    })
}

fn case_batch_norm_eval(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[2, 3, 4], 1.0), random(&mut rng, &[3], 1.0), random(&mut rng, &[3], 1.0)];
    let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    max_relative_error(inputs, &move |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        project(t, y, seed)
    })
}

fn case_max_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    max_relative_error(vec![random(&mut rng, &[2, 2, 6, 6], 1.0)], &move |t, v| {
        let y = t.max_pool2d(v[0], 2, 2)?;
        project(t, y, seed)
    })
}

fn case_global_avg_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    max_relative_error(vec![random(&mut rng, &[2, 3, 4, 5], 1.0)], &move |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, seed)
    })
}

fn case_adaptive_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    max_relative_error(vec![random(&mut rng, &[2, 3, 23], 1.0)], &move |t, v| {
        let y = t.adaptive_avg_pool1d(v[0], 9)?;
        project(t, y, seed)
    })
}

fn case_lstm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (i, h) = (3, 4);
    let inputs = vec![
        random(&mut rng, &[2, 4, i], 1.0),
        random(&mut rng, &[i, 4 * h], 0.6),
        random(&mut rng, &[h, 4 * h], 0.6),
        random(&mut rng, &[4 * h], 0.3),
        random(&mut rng, &[h, 4 * h], 0.6),
        random(&mut rng, &[h, 4 * h], 0.6),
        random(&mut rng, &[4 * h], 0.3),
    ];
    max_relative_error(inputs, &move |t, v| {
        let layers = [
            LstmLayer { w_ih: v[1], w_hh: v[2], bias: v[3] },
            LstmLayer { w_ih: v[4], w_hh: v[5], bias: v[6] },
        ];
        let out = t.lstm(v[0], &layers)?;
        let a = project(t, out.outputs, seed)?;
        let b = t.sum(out.last);
        t.add(a, b)
    })
}

fn case_l2_normalize(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    max_relative_error(vec![random(&mut rng, &[3, 5], 1.0)], &move |t, v| {
        let y = t.l2_normalize(v[0])?;
        project(t, y, seed)
    })
}

fn case_elementwise(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[3, 4], 2.0), random(&mut rng, &[3, 4], 2.0)];
    max_relative_error(inputs, &move |t, v| {
        let r = t.relu(v[0]);
        let th = t.tanh(v[1]);
        let s = t.sigmoid(v[0]);
        let m = t.mul(r, th)?;
        let d = t.sub(m, s)?;
        let e = t.scale(d, 1.5);
        let y = t.add(e, v[1])?;
        let p = project(t, y, seed)?;
        let q = t.mean(th);
        t.add(p, q)
    })
}

fn case_shape_ops(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random(&mut rng, &[2, 3, 4], 1.0), random(&mut rng, &[2, 2, 4], 1.0)];
    max_relative_error(inputs, &move |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let n = t.narrow(c, 1, 1, 3)?;
        let p = t.permute(n, &[2, 0, 1])?;
        let m = t.mean_axis(p, 1)?;
        let r = t.reshape(m, &[12])?;
        project(t, r, seed)
    })
}

fn case_neg_ccc(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random(&mut rng, &[8, 2], 1.0);
    max_relative_error(vec![random(&mut rng, &[8, 2], 1.0)], &move |t, v| neg_ccc_loss(t, v[0], &target))
}

fn case_neg_ccc_at_truth(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random(&mut rng, &[10], 1.0);
    max_relative_error(vec![target.clone()], &move |t, v| neg_ccc_loss(t, v[0], &target))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut t = random(rng, &[n, d], 1.0);
    for row in t.data_mut().chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn case_triplet(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let inputs = vec![unit_rows(&mut rng, n, 5), unit_rows(&mut rng, n, 5), unit_rows(&mut rng, n, 5)];
    let labels: Vec<TripletLabel> = (0..n).map(|_| TripletLabel::new(rng.random_range(1..=3)).unwrap()).collect();
    max_relative_error(inputs, &move |t, v| {
        let batch = TripletBatch { images: [v[0], v[1], v[2]], labels: labels.clone() };
        triplet_loss(t, &batch, 1.0)
    })
}

fn case_cross_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..8)).collect();
    max_relative_error(vec![random(&mut rng, &[5, 8], 3.0)], &move |t, v| cross_entropy(t, v[0], &labels))
}

fn case_rkd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = random(&mut rng, &[6, 7], 1.0);
    max_relative_error(vec![random(&mut rng, &[6, 5], 1.0)], &move |t, v| {
        rkd_loss(t, v[0], &teacher, RkdWeights::default())
    })
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "dense", run: case_dense },
        Case { name: "conv1d", run: case_conv1d },
        Case { name: "conv2d", run: case_conv2d },
        Case { name: "batch_norm_train", run: case_batch_norm_train },
        Case { name: "batch_norm_eval", run: case_batch_norm_eval },
        Case { name: "max_pool2d", run: case_max_pool },
        Case { name: "global_avg_pool", run: case_global_avg_pool },
        Case { name: "adaptive_avg_pool1d", run: case_adaptive_pool },
        Case { name: "lstm", run: case_lstm },
        Case { name: "l2_normalize", run: case_l2_normalize },
        Case { name: "elementwise", run: case_elementwise },
        Case { name: "shape_ops", run: case_shape_ops },
        Case { name: "neg_ccc", run: case_neg_ccc },
        Case { name: "neg_ccc_at_truth", run: case_neg_ccc_at_truth },
        Case { name: "triplet", run: case_triplet },
        Case { name: "cross_entropy", run: case_cross_entropy },
        Case { name: "rkd", run: case_rkd },
    ]
}

/// Worst error of a case over all seeds.
pub fn worst_over_seeds(case: &Case) -> f64 {
    (0..SEEDS).map(|s| (case.run)(s)).fold(0.0, f64::max)
}
