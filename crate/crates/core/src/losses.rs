//! Objectives and evaluation metrics.
//!
//! Differentiable losses are recorded on a [`Tape`] with hand-written
//! backward rules; metrics work on plain values.

use serde::{Deserialize, Serialize};

use crate::tensor::{contract_err, shape_err, Backward, GradSink, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Concordance correlation coefficient of two series plus the moments it was
/// built from. Statistics use the population (1/N) convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CccReport {
    pub ccc: f64,
    pub mean_true: f64,
    pub mean_pred: f64,
    pub std_true: f64,
    pub std_pred: f64,
    pub covariance: f64,
}

struct Moments {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn moments<T: Scalar>(a: &[T], b: &[T], op: &'static str) -> Result<Moments> {
    if a.len() != b.len() {
        return Err(contract_err(op, format!("series lengths differ ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(contract_err(op, format!("need at least 2 points, got {}", a.len())));
    }
    let n = a.len() as f64;
    let a: Vec<f64> = a.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let b: Vec<f64> = b.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
        cov += (x - mean_a) * (y - mean_b);
    }
    Ok(Moments {
        mean_a,
        mean_b,
        var_a: var_a / n,
        var_b: var_b / n,
        cov: cov / n,
    })
}

/// CCC in covariance form `2·cov / (σ_T² + σ_P² + (μ_T − μ_P)²)`. Two constant,
/// identical series agree perfectly and score 1.
pub fn ccc<T: Scalar>(truth: &[T], pred: &[T]) -> Result<CccReport> {
    let m = moments(truth, pred, "ccc")?;
    let denom = m.var_a + m.var_b + (m.mean_a - m.mean_b).powi(2);
    let ccc = if denom > 0.0 { 2.0 * m.cov / denom } else { 1.0 };
    Ok(CccReport {
        ccc,
        mean_true: m.mean_a,
        mean_pred: m.mean_b,
        std_true: m.var_a.sqrt(),
        std_pred: m.var_b.sqrt(),
        covariance: m.cov,
    })
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    let m = moments(a, b, "pearson")?;
    let d = (m.var_a * m.var_b).sqrt();
    Ok(if d > 0.0 { m.cov / d } else { 0.0 })
}

struct NegCccRule<T> {
    target: Vec<T>,
    cols: usize,
}

fn column_stats<T: Scalar>(p: &[T], t: &[T], cols: usize, k: usize) -> (T, T, T, T, T) {
    let n = p.len() / cols;
    let nf = T::from_usize(n).unwrap();
    let (mut mp, mut mt) = (T::zero(), T::zero());
    for r in 0..n {
        mp += p[r * cols + k];
        mt += t[r * cols + k];
    }
    mp = mp / nf;
    mt = mt / nf;
    let (mut vp, mut vt, mut cov) = (T::zero(), T::zero(), T::zero());
    for r in 0..n {
        let (dp, dt) = (p[r * cols + k] - mp, t[r * cols + k] - mt);
        vp += dp * dp;
        vt += dt * dt;
        cov += dp * dt;
    }
    (mp, mt, vp / nf, vt / nf, cov / nf)
}

impl<T: Scalar> Backward<T> for NegCccRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let p = inputs[0].data();
        let cols = self.cols;
        let n = p.len() / cols;
        let nf = T::from_usize(n).unwrap();
        let two = T::lit(2.0);
        let up = grad[0];
        sink.accumulate(0, |g| {
            for k in 0..cols {
                let (mp, mt, vp, vt, cov) = column_stats(p, &self.target, cols, k);
                let d = vp + vt + (mp - mt) * (mp - mt);
                if d <= T::zero() {
                    continue;
                }
                for r in 0..n {
                    let i = r * cols + k;
                    let dcov = (self.target[i] - mt) / nf;
                    let dd = two * ((p[i] - mp) + (mp - mt)) / nf;
                    let dccc = two * dcov / d - two * cov * dd / (d * d);
                    g[i] -= up * dccc;
                }
            }
        });
    }
}

/// Negative CCC between predictions `[N]` or `[N, K]` and targets of the
/// same shape, summed over the K columns. Fully differentiable in `pred`.
pub fn neg_ccc_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let ps = tape.shape(pred).to_vec();
    if ps.iter().product::<usize>() != target.len() || ps[0] != target.shape()[0] {
        return Err(contract_err(
            "neg_ccc_loss",
            format!("prediction {ps:?} and target {:?} differ", target.shape()),
        ));
    }
    if ps[0] < 2 {
        return Err(contract_err("neg_ccc_loss", format!("need at least 2 samples, got {}", ps[0])));
    }
    let cols = if ps.len() == 1 { 1 } else { ps[1..].iter().product() };
    let p = tape.data(pred);
    let t = target.data();
    let mut loss = T::zero();
    for k in 0..cols {
        let (mp, mt, vp, vt, cov) = column_stats(p, t, cols, k);
        let d = vp + vt + (mp - mt) * (mp - mt);
        let c = if d > T::zero() { T::lit(2.0) * cov / d } else { T::one() };
        loss -= c;
    }
    let rule = NegCccRule {
        target: t.to_vec(),
        cols,
    };
    Ok(tape.push(Tensor::scalar(loss), &[pred], Box::new(rule)))
}

/// Odd-one-out triplet annotation: the 1-based index of the image that is
/// *not* part of the most similar pair. Label 3 means images 1 and 2 form
/// the similar pair, label 1 means images 2 and 3, label 2 means 1 and 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TripletLabel(u8);

impl TripletLabel {
    pub fn new(v: u8) -> Result<Self> {
        if (1..=3).contains(&v) {
            Ok(Self(v))
        } else {
            Err(contract_err("triplet_label", format!("label must be 1, 2 or 3, got {v}")))
        }
    }

    /// Label whose similar pair is the given two (0-based, distinct) positions.
    pub fn for_pair(a: usize, b: usize) -> Self {
        debug_assert!(a != b && a < 3 && b < 3);
        Self((3 - a - b) as u8 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// `(a, b, odd)` as 0-based positions, `(a, b)` the similar pair.
    pub fn positions(self) -> (usize, usize, usize) {
        match self.0 {
            1 => (1, 2, 0),
            2 => (0, 2, 1),
            _ => (0, 1, 2),
        }
    }
}

impl TryFrom<u8> for TripletLabel {
    type Error = TensorError;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TripletLabel> for u8 {
    fn from(l: TripletLabel) -> u8 {
        l.0
    }
}

/// Three `[N, D]` embedding matrices (image 1, 2, 3 of each triplet) and
/// their annotations.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub images: [Var; 3],
    pub labels: Vec<TripletLabel>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

struct TripletRule<T> {
    labels: Vec<TripletLabel>,
    margin: T,
}

impl<T: Scalar> Backward<T> for TripletRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let d = inputs[0].shape()[1];
        let n = self.labels.len();
        let w = grad[0] * T::lit(2.0) / T::from_usize(2 * n).unwrap();
        let mut g: [Vec<T>; 3] = std::array::from_fn(|_| vec![T::zero(); n * d]);
        for (r, label) in self.labels.iter().enumerate() {
            let (ia, ib, ic) = label.positions();
            let row = |i: usize| inputs[i].row(r);
            let (x, y, z) = (row(ia), row(ib), row(ic));
            let dxy = sq_dist(x, y);
            let h1 = dxy - sq_dist(x, z) + self.margin > T::zero();
            let h2 = dxy - sq_dist(y, z) + self.margin > T::zero();
            for k in 0..d {
                let (xv, yv, zv) = (x[k], y[k], z[k]);
                let (mut gx, mut gy, mut gz) = (T::zero(), T::zero(), T::zero());
                if h1 {
                    gx += zv - yv;
                    gy += yv - xv;
                    gz += xv - zv;
                }
                if h2 {
                    gx += xv - yv;
                    gy += zv - xv;
                    gz += yv - zv;
                }
                g[ia][r * d + k] += w * gx;
                g[ib][r * d + k] += w * gy;
                g[ic][r * d + k] += w * gz;
            }
        }
        for (i, gi) in g.iter().enumerate() {
            sink.add(i, gi);
        }
    }
}

/// Mean over triplets of the two hinge terms
/// `max(0, ‖a−b‖² − ‖a−c‖² + m)` and `max(0, ‖a−b‖² − ‖b−c‖² + m)`, where
/// `(a, b)` is the annotated similar pair. Rows must be unit-norm.
pub fn triplet_loss<T: Scalar>(tape: &mut Tape<T>, batch: &TripletBatch, margin: T) -> Result<Var> {
    let shape = tape.shape(batch.images[0]).to_vec();
    if shape.len() != 2 || batch.images.iter().any(|&v| tape.shape(v) != shape.as_slice()) {
        return Err(shape_err("triplet_loss", "the three embedding matrices must share one [N, D] shape"));
    }
    if shape[0] != batch.labels.len() {
        return Err(shape_err(
            "triplet_loss",
            format!("{} labels for {} triplets", batch.labels.len(), shape[0]),
        ));
    }
    for &img in &batch.images {
        for (r, row) in tape.value(img).data().chunks_exact(shape[1]).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if (norm - T::one()).abs() > T::lit(1e-3) {
                return Err(contract_err(
                    "triplet_loss",
                    format!("row {r} has norm {norm}, embeddings must be L2-normalised"),
                ));
            }
        }
    }
    let mut total = T::zero();
    for (r, label) in batch.labels.iter().enumerate() {
        let (ia, ib, ic) = label.positions();
        let row = |i: usize| tape.value(batch.images[i]).row(r);
        let (x, y, z) = (row(ia), row(ib), row(ic));
        let dxy = sq_dist(x, y);
        total += (dxy - sq_dist(x, z) + margin).max(T::zero());
        total += (dxy - sq_dist(y, z) + margin).max(T::zero());
    }
    let loss = total / T::from_usize(2 * shape[0]).unwrap();
    let rule = TripletRule {
        labels: batch.labels.clone(),
        margin,
    };
    Ok(tape.push(Tensor::scalar(loss), &batch.images, Box::new(rule)))
}

struct CrossEntropyRule<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyRule<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let b = self.labels.len();
        let c = self.probs.len() / b;
        let w = grad[0] / T::from_usize(b).unwrap();
        sink.accumulate(0, |g| {
            for (r, &y) in self.labels.iter().enumerate() {
                for k in 0..c {
                    let onehot = if k == y { T::one() } else { T::zero() };
                    g[r * c + k] += w * (self.probs[r * c + k] - onehot);
                }
            }
        });
    }
}

/// Softmax cross-entropy averaged over the batch, with max subtraction.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "cross_entropy",
            format!("logits {s:?} do not match {} labels", labels.len()),
        ));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(contract_err("cross_entropy", format!("label {bad} out of range for {c} classes")));
    }
    let mut probs = Vec::with_capacity(s[0] * c);
    let mut total = T::zero();
    for (row, &y) in tape.data(logits).chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        total += log_z - row[y];
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    let loss = total / T::from_usize(s[0]).unwrap();
    let rule = CrossEntropyRule {
        probs,
        labels: labels.to_vec(),
    };
    Ok(tape.push(Tensor::scalar(loss), &[logits], Box::new(rule)))
}

/// Weights of the relational distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RkdWeights {
    pub distance: f64,
    pub angle: f64,
    /// Huber transition point.
    pub delta: f64,
}

impl Default for RkdWeights {
    fn default() -> Self {
        Self {
            distance: 1.0,
            angle: 2.0,
            delta: 1.0,
        }
    }
}

const LEG_EPS: f64 = 1e-12;

fn huber<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::lit(0.5) * r * r
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

fn huber_grad<T: Scalar>(r: T, delta: T) -> T {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Pairwise geometry of a batch: distances for `i < j` and unit difference
/// vectors `x_j − x_i` for every ordered pair.
struct Relations<T> {
    b: usize,
    d: usize,
    dist: Vec<T>,
    units: Vec<T>,
    mean: T,
    nonzero: usize,
}

impl<T: Scalar> Relations<T> {
    fn new(x: &[T], b: usize, d: usize) -> Self {
        let eps = T::lit(LEG_EPS);
        let mut dist = vec![T::zero(); b * b];
        let mut units = vec![T::zero(); b * b * d];
        let (mut sum, mut nonzero) = (T::zero(), 0);
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let (xi, xj) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                let dij = sq_dist(xi, xj).sqrt();
                dist[i * b + j] = dij;
                if dij > eps {
                    for k in 0..d {
                        units[(i * b + j) * d + k] = (xj[k] - xi[k]) / dij;
                    }
                    if i < j {
                        sum += dij;
                        nonzero += 1;
                    }
                }
            }
        }
        let mean = if nonzero > 0 { sum / T::from_usize(nonzero).unwrap() } else { T::one() };
        Self { b, d, dist, units, mean, nonzero }
    }

    fn unit(&self, i: usize, j: usize) -> &[T] {
        &self.units[(i * self.b + j) * self.d..(i * self.b + j + 1) * self.d]
    }

    fn leg_ok(&self, i: usize, j: usize) -> bool {
        self.dist[i * self.b + j] > T::lit(LEG_EPS)
    }

    fn cos(&self, i: usize, j: usize, k: usize) -> T {
        self.unit(i, j).iter().zip(self.unit(i, k)).map(|(&a, &b)| a * b).sum()
    }
}

/// Triples `(vertex i, j, k)` with `j < k`, all distinct, both legs non-degenerate in both batches.
fn angle_triples<T: Scalar>(s: &Relations<T>, t: &Relations<T>) -> Vec<(usize, usize, usize)> {
    let b = s.b;
    let mut out = Vec::new();
    for i in 0..b {
        for j in 0..b {
            for k in j + 1..b {
                if i == j || i == k {
                    continue;
                }
                if s.leg_ok(i, j) && s.leg_ok(i, k) && t.leg_ok(i, j) && t.leg_ok(i, k) {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

struct RkdRule<T> {
    teacher: Vec<T>,
    teacher_dim: usize,
    weights: RkdWeights,
}

impl<T: Scalar> Backward<T> for RkdRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let x = inputs[0].data();
        let (b, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let s = Relations::new(x, b, d);
        let t = Relations::new(&self.teacher, b, self.teacher_dim);
        let delta = T::lit(self.weights.delta);
        let mut g = vec![T::zero(); b * d];

        // distance term
        let pairs = T::from_usize(b * (b - 1) / 2).unwrap();
        let wd = grad[0] * T::lit(self.weights.distance) / pairs;
        let mut dl_dd = vec![T::zero(); b * b];
        let mut through_mean = T::zero();
        for i in 0..b {
            for j in i + 1..b {
                let r = s.dist[i * b + j] / s.mean - t.dist[i * b + j] / t.mean;
                let gij = wd * huber_grad(r, delta);
                if s.leg_ok(i, j) {
                    dl_dd[i * b + j] = gij / s.mean;
                    through_mean += gij * s.dist[i * b + j] / (s.mean * s.mean);
                }
            }
        }
        if s.nonzero > 0 {
            let share = through_mean / T::from_usize(s.nonzero).unwrap();
            for i in 0..b {
                for j in i + 1..b {
                    if s.leg_ok(i, j) {
                        dl_dd[i * b + j] -= share;
                    }
                }
            }
        }
        for i in 0..b {
            for j in i + 1..b {
                let w = dl_dd[i * b + j];
                if w == T::zero() {
                    continue;
                }
                // d dist / d x_j = unit(i, j)
                let u = s.unit(i, j);
                for k in 0..d {
                    g[j * d + k] += w * u[k];
                    g[i * d + k] -= w * u[k];
                }
            }
        }

        // angle term
        let triples = angle_triples(&s, &t);
        if !triples.is_empty() {
            let wa = grad[0] * T::lit(self.weights.angle) / T::from_usize(triples.len()).unwrap();
            for &(i, j, k) in &triples {
                let cs = s.cos(i, j, k);
                let h = wa * huber_grad(cs - t.cos(i, j, k), delta);
                let (u, v) = (s.unit(i, j), s.unit(i, k));
                let (la, lb) = (s.dist[i * b + j], s.dist[i * b + k]);
                for m in 0..d {
                    let da = h * (v[m] - cs * u[m]) / la;
                    let db = h * (u[m] - cs * v[m]) / lb;
                    g[j * d + m] += da;
                    g[k * d + m] += db;
                    g[i * d + m] -= da + db;
                }
            }
        }
        sink.add(0, &g);
    }
}

/// Relational knowledge distillation: Huber loss between mean-normalised
/// pairwise distances plus Huber loss between the cosines of all angles
/// formed by triples, weighted `λ_d·L_dist + λ_a·L_angle`. Zero distances
/// are left out of the normalising mean and degenerate angles are skipped.
pub fn rkd_loss<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: &Tensor<T>, weights: RkdWeights) -> Result<Var> {
    let ss = tape.shape(student).to_vec();
    let ts = teacher.shape();
    if ss.len() != 2 || ts.len() != 2 || ss[0] != ts[0] {
        return Err(shape_err(
            "rkd_loss",
            format!("student {ss:?} and teacher {ts:?} must be [B, D] with equal B"),
        ));
    }
    let b = ss[0];
    if b < 3 {
        return Err(contract_err("rkd_loss", format!("angle term needs a batch of at least 3, got {b}")));
    }
    let s = Relations::new(tape.data(student), b, ss[1]);
    let t = Relations::new(teacher.data(), b, ts[1]);
    let delta = T::lit(weights.delta);
    let mut dist_loss = T::zero();
    for i in 0..b {
        for j in i + 1..b {
            dist_loss += huber(s.dist[i * b + j] / s.mean - t.dist[i * b + j] / t.mean, delta);
        }
    }
    dist_loss = dist_loss / T::from_usize(b * (b - 1) / 2).unwrap();
    let triples = angle_triples(&s, &t);
    let mut angle_loss = T::zero();
    for &(i, j, k) in &triples {
        angle_loss += huber(s.cos(i, j, k) - t.cos(i, j, k), delta);
    }
    if !triples.is_empty() {
        angle_loss = angle_loss / T::from_usize(triples.len()).unwrap();
    }
    let loss = T::lit(weights.distance) * dist_loss + T::lit(weights.angle) * angle_loss;
    let rule = RkdRule {
        teacher: teacher.data().to_vec(),
        teacher_dim: ts[1],
        weights,
    };
    Ok(tape.push(Tensor::scalar(loss), &[student], Box::new(rule)))
}

/// Fraction of triplets whose annotated pair is strictly the closest of the
/// three pairs. Ties count as wrong.
pub fn triplet_accuracy<T: Scalar>(images: [&Tensor<T>; 3], labels: &[TripletLabel]) -> Result<f64> {
    let n = labels.len();
    if n == 0 || images.iter().any(|m| m.rank() != 2 || m.shape()[0] != n || m.shape() != images[0].shape()) {
        return Err(shape_err("triplet_accuracy", "need three [N, D] matrices matching the label count"));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, label)| {
            let (a, b, c) = label.positions();
            let row = |i: usize| images[i].row(*r);
            let pair = sq_dist(row(a), row(b));
            pair < sq_dist(row(a), row(c)) && pair < sq_dist(row(b), row(c))
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Argmax accuracy. With `balanced`, the mean of per-class recalls over the
/// classes present in `labels`.
pub fn classification_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], balanced: bool) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(shape_err(
            "classification_accuracy",
            format!("logits {:?} do not match {} labels", logits.shape(), labels.len()),
        ));
    }
    let c = logits.shape()[1];
    let preds: Vec<usize> = (0..labels.len())
        .map(|r| {
            let row = logits.row(r);
            (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect();
    if !balanced {
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        return Ok(hits as f64 / labels.len() as f64);
    }
    let classes = labels.iter().copied().max().unwrap_or(0).max(c - 1) + 1;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let present: Vec<f64> = totals
        .iter()
        .zip(&hits)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccc_of_identical_series_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ccc(&x, &x).unwrap().ccc, 1.0);
    }

    #[test]
    fn ccc_worked_value() {
        let r = ccc(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r.ccc - 5.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.covariance, 1.25);
    }

    #[test]
    fn ccc_zero_covariance() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap().ccc, 0.0);
    }

    #[test]
    fn ccc_constant_equal_series_defined_as_one() {
        assert_eq!(ccc(&[0.3, 0.3], &[0.3, 0.3]).unwrap().ccc, 1.0);
    }

    #[test]
    fn ccc_contract_errors() {
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn neg_ccc_of_perfect_prediction() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(vec![0.1, -0.4, 0.7, 0.2]));
        let target = Tensor::from_vec(vec![0.1, -0.4, 0.7, 0.2]);
        let loss = neg_ccc_loss(&mut tape, p, &target).unwrap();
        assert!((tape.item(loss) + 1.0).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).unwrap().all_finite());
    }

    #[test]
    fn neg_ccc_grows_when_prediction_is_stretched() {
        let target = Tensor::from_vec(vec![0.1, -0.4, 0.7, 0.2, -0.1]);
        let loss_at = |a: f64| {
            let mut tape = Tape::<f64>::new();
            let p = tape.leaf(target.map(|v| a * v));
            let l = neg_ccc_loss(&mut tape, p, &target).unwrap();
            tape.item(l)
        };
        let mut prev = loss_at(1.0);
        for a in [1.1, 1.5, 2.0, 4.0] {
            let cur = loss_at(a);
            assert!(cur > prev);
            prev = cur;
        }
    }

    fn unit_rows(tape: &mut Tape<f64>, rows: &[[f64; 2]]) -> Var {
        let data = rows.iter().flatten().copied().collect();
        tape.constant(Tensor::new(vec![rows.len(), 2], data).unwrap())
    }

    #[test]
    fn triplet_loss_orthogonal_odd_one_is_zero() {
        let mut tape = Tape::<f64>::new();
        let a = unit_rows(&mut tape, &[[1.0, 0.0]]);
        let b = unit_rows(&mut tape, &[[1.0, 0.0]]);
        let c = unit_rows(&mut tape, &[[0.0, 1.0]]);
        let batch = TripletBatch { images: [a, b, c], labels: vec![TripletLabel::new(3).unwrap()] };
        let loss = triplet_loss(&mut tape, &batch, 0.2).unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn triplet_loss_all_equal_is_margin() {
        let mut tape = Tape::<f64>::new();
        let v = [[0.6, 0.8]];
        let (a, b, c) = (unit_rows(&mut tape, &v), unit_rows(&mut tape, &v), unit_rows(&mut tape, &v));
        for l in 1..=3 {
            let batch = TripletBatch { images: [a, b, c], labels: vec![TripletLabel::new(l).unwrap()] };
            let loss = triplet_loss(&mut tape, &batch, 0.2).unwrap();
            assert!((tape.item(loss) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn triplet_loss_rejects_unnormalised_rows() {
        let mut tape = Tape::<f64>::new();
        let a = unit_rows(&mut tape, &[[2.0, 0.0]]);
        let batch = TripletBatch { images: [a, a, a], labels: vec![TripletLabel::new(1).unwrap()] };
        assert!(triplet_loss(&mut tape, &batch, 0.2).is_err());
    }

    #[test]
    fn label_positions_round_trip() {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let (x, y, _) = TripletLabel::for_pair(a, b).positions();
            assert_eq!((x, y), (a, b));
        }
        assert!(TripletLabel::new(0).is_err());
        assert!(TripletLabel::new(4).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 8]));
        let loss = cross_entropy(&mut tape, logits, &[0, 3, 7]).unwrap();
        assert!((tape.item(loss) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut tape = Tape::<f64>::new();
        let mut v = vec![0.0; 8];
        v[5] = 1000.0;
        let logits = tape.leaf(Tensor::new(vec![1, 8], v).unwrap());
        let loss = cross_entropy(&mut tape, logits, &[5]).unwrap();
        assert!(tape.item(loss).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let raw = vec![0.5, -1.0, 2.0];
        let logits = tape.leaf(Tensor::new(vec![1, 3], raw.clone()).unwrap());
        let loss = cross_entropy(&mut tape, logits, &[1]).unwrap();
        let g = tape.backward(loss).unwrap();
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        for (k, &gv) in g.get(logits).unwrap().data().iter().enumerate() {
            let expect = raw[k].exp() / z - if k == 1 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    fn teacher_batch() -> Tensor<f64> {
        let data = (0..5 * 4).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        Tensor::new(vec![5, 4], data).unwrap()
    }

    fn rkd_value(student: Tensor<f64>, teacher: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let s = tape.leaf(student);
        let l = rkd_loss(&mut tape, s, teacher, RkdWeights::default()).unwrap();
        tape.item(l)
    }

    #[test]
    fn rkd_identical_batches() {
        let t = teacher_batch();
        assert_eq!(rkd_value(t.clone(), &t), 0.0);
    }

    #[test]
    fn rkd_scaled_student() {
        let t = teacher_batch();
        assert!(rkd_value(t.map(|v| 2.0 * v), &t) < 1e-24);
    }

    #[test]
    fn rkd_rotated_student() {
        let t = teacher_batch();
        // rotate in the (0, 1) plane and the (2, 3) plane
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut rot = t.clone();
        for r in 0..5 {
            let row = t.row(r).to_vec();
            let out = &mut rot.data_mut()[r * 4..(r + 1) * 4];
            out[0] = c * row[0] - s * row[1];
            out[1] = s * row[0] + c * row[1];
            out[2] = c * row[2] + s * row[3];
            out[3] = -s * row[2] + c * row[3];
        }
        assert!(rkd_value(rot, &t) < 1e-24);
    }

    #[test]
    fn rkd_needs_three_rows() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(rkd_loss(&mut tape, s, &Tensor::zeros(&[2, 4]), RkdWeights::default()).is_err());
    }

    #[test]
    fn rkd_tolerates_duplicate_teacher_rows() {
        let mut t = teacher_batch();
        let first = t.row(0).to_vec();
        t.data_mut()[4..8].copy_from_slice(&first);
        let v = rkd_value(teacher_batch(), &t);
        assert!(v.is_finite());
    }

    #[test]
    fn triplet_accuracy_tie_counts_as_wrong() {
        let m = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(triplet_accuracy([&m, &m, &m], &[TripletLabel::new(3).unwrap()]).unwrap(), 0.0);
    }

    #[test]
    fn triplet_accuracy_perfect() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.9, 0.1, 1.0, 0.0]).unwrap();
        let c = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.1, 0.9]).unwrap();
        let labels = [TripletLabel::new(3).unwrap(), TripletLabel::new(2).unwrap()];
        assert_eq!(triplet_accuracy([&a, &b, &c], &labels).unwrap(), 1.0);
    }

    #[test]
    fn classification_accuracy_cases() {
        let labels: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let mut perfect = Tensor::zeros(&[16, 8]);
        for (r, &y) in labels.iter().enumerate() {
            perfect.data_mut()[r * 8 + y] = 1.0;
        }
        assert_eq!(classification_accuracy::<f64>(&perfect, &labels, false).unwrap(), 1.0);

        let mut constant = Tensor::<f64>::zeros(&[16, 8]);
        for r in 0..16 {
            constant.data_mut()[r * 8 + 2] = 1.0;
        }
        assert_eq!(classification_accuracy(&constant, &labels, false).unwrap(), 0.125);

        let skewed: Vec<usize> = (0..16).map(|i| if i < 8 { i } else { 2 }).collect();
        assert!(classification_accuracy(&constant, &skewed, false).unwrap() > 0.5);
        assert_eq!(classification_accuracy(&constant, &skewed, true).unwrap(), 0.125);
    }

    proptest::proptest! {
        #[test]
        fn ccc_is_bounded_by_pearson_and_symmetric(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40),
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let c = ccc(&a, &b).unwrap().ccc;
            let r = pearson(&a, &b).unwrap();
            proptest::prop_assert!(c.abs() <= r.abs() + 1e-12);
            proptest::prop_assert!((c - ccc(&b, &a).unwrap().ccc).abs() < 1e-12);
        }
    }
}
