//! Straight-line reference implementations and random instance generators
//! shared by the integration suites. Nothing here calls library kernels.

#![allow(dead_code)]

use actionllm::cmib::{cmia_forward, CmiaWeights};
use actionllm::tensorkit::{AttentionWeights, Graph, Matrix, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
}

pub fn max_dev(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len(), "column counts differ");
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

fn product(a: &Rows, w: &Matrix) -> Rows {
    a.iter()
        .map(|row| {
            (0..w.cols())
                .map(|c| {
                    let mut s = 0.0;
                    for (k, x) in row.iter().enumerate() {
                        s += x * w.get(k, c);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Multi-head attention written out longhand: per head scores, a max-shifted
/// softmax, the weighted value sum, then concatenation and output projection.
pub fn mha(store: &ParamStore, x: &Rows, y: &Rows, w: &AttentionWeights) -> Rows {
    let hd = w.width / w.heads;
    let temp = (hd as f64).sqrt();
    let mut cat: Rows = vec![Vec::new(); x.len()];
    for h in 0..w.heads {
        let q = product(x, store.value(w.query[h]));
        let k = product(y, store.value(w.key[h]));
        let v = product(y, store.value(w.value[h]));
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / temp)
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                let mut acc = 0.0;
                for (j, vj) in v.iter().enumerate() {
                    acc += e[j] / z * vj[c];
                }
                cat[i].push(acc);
            }
        }
    }
    product(&cat, store.value(w.output))
}

/// Sum over sources of attention from each output stream.
pub fn cmia(store: &ParamStore, inputs: &[Rows; 3], w: &CmiaWeights) -> [Rows; 3] {
    let one = |m: usize| {
        let mut acc: Rows = inputs[m].iter().map(|r| vec![0.0; r.len()]).collect();
        for (s, src) in inputs.iter().enumerate() {
            let t = mha(store, &inputs[m], src, &w.blocks[m][s]);
            for (a, b) in acc.iter_mut().zip(&t) {
                for (p, q) in a.iter_mut().zip(b) {
                    *p += q;
                }
            }
        }
        acc
    };
    [one(0), one(1), one(2)]
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + row.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// −Σ over rows of the log-probability of the labelled class.
pub fn seg_loss(logits: &Rows, labels: &[usize]) -> f64 {
    logits.iter().zip(labels).map(|(row, &c)| log_sum_exp(row) - row[c]).sum()
}

/// Cross-entropy over 1-based positions `1..=none_pos`.
pub fn class_loss(logits: &Rows, labels: &[usize], none_pos: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=none_pos.min(logits.len()) {
        total += log_sum_exp(&logits[i - 1]) - logits[i - 1][labels[i - 1]];
    }
    total
}

/// Squared error over 1-based positions `1..none_pos`.
pub fn dur_loss(pred: &[f64], target: &[f64], none_pos: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..none_pos {
        if i > pred.len() {
            break;
        }
        total += (pred[i - 1] - target[i - 1]).powi(2);
    }
    total
}

pub fn moc(pred: &[usize], gt: &[usize]) -> f64 {
    let mut classes: Vec<usize> = gt.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    for &c in &classes {
        let mut hit = 0usize;
        let mut n = 0usize;
        for t in 0..gt.len() {
            if gt[t] == c {
                n += 1;
                if pred[t] == c {
                    hit += 1;
                }
            }
        }
        sum += hit as f64 / n as f64;
    }
    sum / classes.len() as f64
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Frame `t` takes the class of the first kept query whose cumulative end
/// boundary lies beyond `t`.
pub fn decode(logits: &Rows, durations: &[f64], horizon: usize) -> Vec<usize> {
    let none = logits[0].len() - 1;
    let mut kept = 0;
    while kept < logits.len() && first_argmax(&logits[kept]) != none {
        kept += 1;
    }
    if kept == 0 {
        let c = first_argmax(&logits[0][..none]);
        return vec![c; horizon];
    }
    let clean: Vec<f64> = durations[..kept]
        .iter()
        .map(|&d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
        .collect();
    let total: f64 = clean.iter().sum();
    let mut ends = Vec::with_capacity(kept);
    let mut cum = 0.0;
    for (i, d) in clean.iter().enumerate() {
        cum += if total > 1e-12 { d / total } else { 1.0 / kept as f64 };
        let end = if i == kept - 1 {
            horizon
        } else {
            ((cum * horizon as f64 + 1e-9).floor() as usize).min(horizon)
        };
        ends.push(end);
    }
    (0..horizon)
        .map(|t| {
            let i = ends.iter().position(|&e| t < e).expect("last end is the horizon");
            first_argmax(&logits[i])
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Rows {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn matrix(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows)
}

/// A random CMIA instance at width ≤ 8: returns (library output, oracle output).
pub fn cmia_instance(seed: u64) -> ([Rows; 3], [Rows; 3]) {
    let mut r = rng(seed);
    let (width, heads) = [(2, 1), (2, 2), (4, 1), (4, 2), (6, 3), (8, 2), (8, 4)][r.random_range(0..7)];
    let mut store = ParamStore::new();
    let w = CmiaWeights::new(&mut store, "c", width, heads, &mut r).unwrap();
    let inputs: [Rows; 3] = std::array::from_fn(|_| {
        let n = r.random_range(1..5);
        random_rows(&mut r, n, width, 2.0)
    });
    let mut g = Graph::new(&store);
    let vars = inputs.clone().map(|x| g.constant(matrix(&x)));
    let out = cmia_forward(&mut g, vars, &w).unwrap();
    let lib = out.map(|v| rows_of(g.value(v)));
    (lib, cmia(&store, &inputs, &w))
}

/// Random decode input: logits biased so that None appears at a random depth.
pub fn decode_instance<R: Rng>(r: &mut R) -> (Rows, Vec<f64>, usize) {
    let n = r.random_range(1..9);
    let k = r.random_range(1..6);
    let mut logits = random_rows(r, n, k + 1, 3.0);
    if r.random_bool(0.5) {
        let stop = r.random_range(0..=n);
        if stop < n {
            logits[stop][k] = 10.0;
        }
    }
    let durations: Vec<f64> = (0..n)
        .map(|_| match r.random_range(0..10) {
            0 => 0.0,
            1 => -r.random_range(0.0..1.0),
            2 => f64::NAN,
            _ => r.random_range(0.0..2.0),
        })
        .collect();
    let horizon = r.random_range(1..400);
    (logits, durations, horizon)
}
