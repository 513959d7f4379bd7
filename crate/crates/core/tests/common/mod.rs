//! Test-only oracles: scalar-loop objective evaluations written straight from the formulas,
//! random instance generators, and a central finite-difference gradient.

#![allow(dead_code)]

use amtfl::datasets::{MultiTaskDataset, TaskDataset, TaskKind};
use amtfl::losses::{LossConfig, LossKind};
use amtfl::objectives::{
    Activation, AmtflParams, DeepParams, Hyperparams, InterTaskParams, LatentFactorParams,
    LatentInterTaskParams, ModelParams, ObjectiveId,
};
use amtfl::Mat;
use rand::Rng;

pub fn gauss(rng: &mut impl Rng, scale: f64) -> f64 {
    // Box-Muller keeps this independent of the crate's own sampling
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random();
    scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn rand_mat(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| gauss(rng, scale))
}

/// Entries pushed away from zero so `|x|` is differentiable there.
pub fn rand_mat_off_zero(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| loop {
        let v = gauss(rng, scale);
        if v.abs() > 0.05 * scale {
            break v;
        }
    })
}

pub fn rand_transfer(rng: &mut impl Rng, t: usize, scale: f64) -> Mat {
    let mut b = rand_mat_off_zero(rng, t, t, scale);
    for i in 0..t {
        b.set(i, i, 0.0);
    }
    b
}

pub fn rand_dataset(rng: &mut impl Rng, d: usize, t: usize, n: usize, kind: LossKind) -> MultiTaskDataset {
    let tasks = (0..t)
        .map(|i| {
            let x = rand_mat(rng, n, d, 1.0);
            let y = match kind {
                LossKind::Squared => rand_mat(rng, n, 1, 1.0),
                LossKind::Logistic => Mat::from_fn(n, 1, |_, _| f64::from(rng.random_bool(0.5) as u8)),
            };
            let tk = match kind {
                LossKind::Squared => TaskKind::Regression,
                LossKind::Logistic => TaskKind::Binary,
            };
            TaskDataset::new(format!("t{i}"), x, y, tk).unwrap()
        })
        .collect();
    MultiTaskDataset::new("random", tasks).unwrap()
}

pub fn rand_hp(rng: &mut impl Rng, k: usize) -> Hyperparams {
    Hyperparams {
        alpha: rng.random_range(0.05..1.0),
        gamma: rng.random_range(0.05..1.0),
        lambda: rng.random_range(0.01..0.5),
        mu: rng.random_range(0.01..0.5),
        l1_bases: rng.random_range(0.0..0.3),
        k,
        hidden_activation: Activation::Relu,
        b_nonnegative: false,
    }
}

// ---------------------------------------------------------------------------------------------
// scalar-loop oracles

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Identity => x,
    }
}

pub fn loss_oracle(scores: &[f64], y: &[f64], cfg: &LossConfig, n_imb: usize) -> f64 {
    let n = scores.len() as f64;
    let mut total = 0.0;
    for i in 0..scores.len() {
        match cfg.kind {
            LossKind::Squared => total += (y[i] - scores[i]).powi(2),
            LossKind::Logistic => {
                let p = 1.0 / (1.0 + (-scores[i]).exp());
                total -= y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln();
            }
        }
    }
    total / n + cfg.delta / (n_imb as f64).sqrt()
}

fn abs_sum(m: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            s += m.get(i, j).abs();
        }
    }
    s
}

fn sq_sum(m: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            s += m.get(i, j) * m.get(i, j);
        }
    }
    s
}

fn row_abs(m: &Mat, r: usize) -> f64 {
    (0..m.cols()).map(|j| m.get(r, j).abs()).sum()
}

/// Loss of task `t` under linear column `w[:, t]`.
fn linear_task_loss(data: &MultiTaskDataset, w: &dyn Fn(usize, usize) -> f64, t: usize, cfg: &LossConfig) -> f64 {
    let task = &data.tasks[t];
    let scores: Vec<f64> = (0..task.n())
        .map(|i| (0..data.d).map(|j| task.x.get(i, j) * w(j, t)).sum())
        .collect();
    loss_oracle(&scores, task.y.data(), cfg, task.n())
}

fn product_entry(l: &Mat, s: &Mat, j: usize, t: usize) -> f64 {
    (0..l.cols()).map(|c| l.get(j, c) * s.get(c, t)).sum()
}

pub fn stl_oracle(w: &Mat, data: &MultiTaskDataset, cfg: &LossConfig, lambda: f64) -> f64 {
    let mut v = 0.0;
    for t in 0..data.num_tasks() {
        v += linear_task_loss(data, &|j, t| w.get(j, t), t, cfg);
    }
    v + lambda * sq_sum(w)
}

pub fn gomtl_oracle(p: &LatentFactorParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> f64 {
    let mut v = 0.0;
    for t in 0..data.num_tasks() {
        v += linear_task_loss(data, &|j, t| product_entry(&p.l, &p.s, j, t), t, cfg);
        v += hp.mu * (0..p.s.rows()).map(|c| p.s.get(c, t).abs()).sum::<f64>();
    }
    v + hp.lambda * sq_sum(&p.l) + hp.l1_bases * abs_sum(&p.l)
}

/// `Σ_ij (W − WB)_ij²` for task parameters given entrywise.
fn intertask_oracle(w: &dyn Fn(usize, usize) -> f64, b: &Mat, d: usize, t: usize) -> f64 {
    let mut v = 0.0;
    for j in 0..d {
        for c in 0..t {
            let mut rec = 0.0;
            for s in 0..t {
                rec += w(j, s) * b.get(s, c);
            }
            v += (w(j, c) - rec).powi(2);
        }
    }
    v
}

pub fn amtl_oracle(p: &InterTaskParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> f64 {
    let t_count = data.num_tasks();
    let mut v = 0.0;
    for t in 0..t_count {
        v += (1.0 + hp.alpha * row_abs(&p.b, t)) * linear_task_loss(data, &|j, t| p.w.get(j, t), t, cfg);
    }
    v + hp.gamma * intertask_oracle(&|j, t| p.w.get(j, t), &p.b, data.d, t_count)
}

pub fn amtl_gomtl_oracle(
    p: &LatentInterTaskParams,
    data: &MultiTaskDataset,
    cfg: &LossConfig,
    hp: &Hyperparams,
) -> f64 {
    let t_count = data.num_tasks();
    let w = |j: usize, t: usize| product_entry(&p.l, &p.s, j, t);
    let mut v = 0.0;
    for t in 0..t_count {
        v += (1.0 + hp.alpha * row_abs(&p.b, t)) * linear_task_loss(data, &w, t, cfg);
        v += hp.mu * (0..p.s.rows()).map(|c| p.s.get(c, t).abs()).sum::<f64>();
    }
    v + hp.gamma * intertask_oracle(&w, &p.b, data.d, t_count)
        + hp.lambda * sq_sum(&p.l)
        + hp.l1_bases * abs_sum(&p.l)
}

pub fn amtfl_oracle(p: &AmtflParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> f64 {
    let a_fn = hp.hidden_activation;
    let (k, t_count) = (p.l.cols(), data.num_tasks());
    let mut v = 0.0;
    let mut recon = 0.0;
    for t in 0..t_count {
        let task = &data.tasks[t];
        let mut scores = Vec::new();
        for i in 0..task.n() {
            let z: Vec<f64> = (0..k)
                .map(|c| act(a_fn, (0..data.d).map(|j| task.x.get(i, j) * p.l.get(j, c)).sum()))
                .collect();
            scores.push((0..k).map(|c| z[c] * p.s.get(c, t)).sum());
            // (z S) A, task outputs first
            let outs: Vec<f64> = (0..t_count).map(|u| (0..k).map(|c| z[c] * p.s.get(c, u)).sum()).collect();
            for c in 0..k {
                let q: f64 = (0..t_count).map(|u| outs[u] * p.a.get(u, c)).sum();
                recon += (z[c] - act(a_fn, q)).powi(2);
            }
        }
        let loss = loss_oracle(&scores, task.y.data(), cfg, task.n());
        v += (1.0 + hp.alpha * row_abs(&p.a, t)) * loss;
        v += hp.mu * (0..k).map(|c| p.s.get(c, t).abs()).sum::<f64>();
    }
    v + hp.gamma * recon + hp.lambda * sq_sum(&p.l) + hp.l1_bases * abs_sum(&p.l)
}

pub fn deep_oracle(p: &DeepParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams, transfer: bool) -> f64 {
    let a_fn = hp.hidden_activation;
    let depth = p.layers.len();
    let last = &p.layers[depth - 1];
    let k = last.rows();
    let t_count = data.num_tasks();
    let (alpha, gamma) = if transfer { (hp.alpha, hp.gamma) } else { (0.0, 0.0) };
    let mut v = 0.0;
    let mut recon = 0.0;
    for t in 0..t_count {
        let task = &data.tasks[t];
        let mut scores = Vec::new();
        for i in 0..task.n() {
            let mut h: Vec<f64> = task.x.row(i).to_vec();
            for l in 0..depth - 1 {
                let w = &p.layers[l];
                h = (0..w.cols())
                    .map(|c| {
                        let pre: f64 = (0..w.rows()).map(|m| h[m] * w.get(m, c)).sum::<f64>() + p.biases[l].get(0, c);
                        act(a_fn, pre)
                    })
                    .collect();
            }
            scores.push((0..k).map(|c| h[c] * last.get(c, t)).sum());
            let outs: Vec<f64> = (0..t_count).map(|u| (0..k).map(|c| h[c] * last.get(c, u)).sum()).collect();
            for c in 0..k {
                let mut q: f64 = (0..t_count).map(|u| outs[u] * p.a.get(u, c)).sum();
                if let Some(b) = &p.recon_bias {
                    q += b.get(0, c);
                }
                recon += (act(a_fn, q) - h[c]).powi(2);
            }
        }
        let loss = loss_oracle(&scores, task.y.data(), cfg, task.n());
        v += (1.0 + alpha * row_abs(&p.a, t)) * loss;
        v += hp.mu * (0..k).map(|c| last.get(c, t).abs()).sum::<f64>();
    }
    let decay: f64 = p.layers[..depth - 1].iter().map(sq_sum).sum();
    v + gamma * recon + hp.lambda * decay + hp.l1_bases * abs_sum(&p.layers[0])
}

pub fn oracle(obj: ObjectiveId, p: &ModelParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> f64 {
    match (obj, p) {
        (ObjectiveId::Stl, ModelParams::Linear { w }) => stl_oracle(w, data, cfg, hp.lambda),
        (ObjectiveId::Gomtl, ModelParams::LatentFactor(p)) => gomtl_oracle(p, data, cfg, hp),
        (ObjectiveId::Amtl, ModelParams::InterTask(p)) => amtl_oracle(p, data, cfg, hp),
        (ObjectiveId::AmtlGomtl, ModelParams::LatentInterTask(p)) => amtl_gomtl_oracle(p, data, cfg, hp),
        (ObjectiveId::Amtfl, ModelParams::Amtfl(p)) => amtfl_oracle(p, data, cfg, hp),
        (ObjectiveId::DeepAmtfl, ModelParams::Deep(p)) => deep_oracle(p, data, cfg, hp, true),
        (ObjectiveId::Mtnn, ModelParams::Deep(p)) => deep_oracle(p, data, cfg, hp, false),
        _ => panic!("oracle: mismatched {obj}"),
    }
}

// ---------------------------------------------------------------------------------------------
// random parameter sets

pub struct Dims {
    pub d: usize,
    pub k: usize,
    pub t: usize,
    pub n: usize,
}

pub const GRAD_DIMS: Dims = Dims { d: 5, k: 3, t: 4, n: 10 };

pub fn rand_params(rng: &mut impl Rng, obj: ObjectiveId, dims: &Dims) -> ModelParams {
    let Dims { d, k, t, .. } = *dims;
    match obj {
        ObjectiveId::Stl => ModelParams::Linear { w: rand_mat_off_zero(rng, d, t, 0.7) },
        ObjectiveId::Gomtl => ModelParams::LatentFactor(LatentFactorParams {
            l: rand_mat_off_zero(rng, d, k, 0.7),
            s: rand_mat_off_zero(rng, k, t, 0.7),
        }),
        ObjectiveId::Amtl => ModelParams::InterTask(InterTaskParams {
            w: rand_mat_off_zero(rng, d, t, 0.7),
            b: rand_transfer(rng, t, 0.4),
        }),
        ObjectiveId::AmtlGomtl => ModelParams::LatentInterTask(LatentInterTaskParams {
            l: rand_mat_off_zero(rng, d, k, 0.7),
            s: rand_mat_off_zero(rng, k, t, 0.7),
            b: rand_transfer(rng, t, 0.4),
        }),
        ObjectiveId::Amtfl => ModelParams::Amtfl(AmtflParams {
            l: rand_mat_off_zero(rng, d, k, 0.7),
            s: rand_mat_off_zero(rng, k, t, 0.7),
            a: rand_mat_off_zero(rng, t, k, 0.5),
        }),
        ObjectiveId::DeepAmtfl | ObjectiveId::Mtnn => {
            let h1 = k + 1;
            ModelParams::Deep(DeepParams {
                layers: vec![
                    rand_mat_off_zero(rng, d, h1, 0.7),
                    rand_mat_off_zero(rng, h1, k, 0.7),
                    rand_mat_off_zero(rng, k, t, 0.7),
                ],
                biases: vec![rand_mat(rng, 1, h1, 0.3), rand_mat(rng, 1, k, 0.3)],
                a: rand_mat_off_zero(rng, t, k, 0.5),
                recon_bias: Some(rand_mat(rng, 1, k, 0.3)),
            })
        }
    }
}

/// Smallest |pre-activation| over every ReLU in the model, including the reconstruction.
pub fn min_kink_distance(p: &ModelParams, data: &MultiTaskDataset) -> f64 {
    let mut best = f64::INFINITY;
    let mut see = |m: &Mat| {
        for v in m.data() {
            best = best.min(v.abs());
        }
    };
    match p {
        ModelParams::Amtfl(p) => {
            let m = p.s.dot(&p.a);
            for task in &data.tasks {
                let pre = task.x.dot(&p.l);
                see(&pre);
                see(&pre.map(|v| v.max(0.0)).dot(&m));
            }
        }
        ModelParams::Deep(p) => {
            let depth = p.layers.len();
            let m = p.layers[depth - 1].dot(&p.a);
            for task in &data.tasks {
                let mut h = task.x.clone();
                for l in 0..depth - 1 {
                    let pre = h.dot(&p.layers[l]).add_row_broadcast(&p.biases[l]);
                    see(&pre);
                    h = pre.map(|v| v.max(0.0));
                }
                let mut q = h.dot(&m);
                if let Some(b) = &p.recon_bias {
                    q = q.add_row_broadcast(b);
                }
                see(&q);
            }
        }
        _ => {}
    }
    best
}

/// Central differences over every trainable entry.
pub fn finite_difference(f: &dyn Fn(&ModelParams) -> f64, p: &ModelParams, h: f64) -> ModelParams {
    let mut grad = p.zeros_like();
    let mut work = p.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|m| m.data().len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for e in 0..len {
            let orig = work.tensors()[ti].data()[e];
            work.tensors_mut()[ti].data_mut()[e] = orig + h;
            let up = f(&work);
            work.tensors_mut()[ti].data_mut()[e] = orig - h;
            let down = f(&work);
            work.tensors_mut()[ti].data_mut()[e] = orig;
            grad.tensors_mut()[ti].data_mut()[e] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// Largest entrywise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &ModelParams, b: &ModelParams, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ma, mb) in a.tensors().iter().zip(b.tensors()) {
        for (x, y) in ma.data().iter().zip(mb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Diagonal of the transfer graphs is structural, so the finite difference must ignore it.
pub fn mask_structural(g: &mut ModelParams) {
    let b = match g {
        ModelParams::InterTask(p) => &mut p.b,
        ModelParams::LatentInterTask(p) => &mut p.b,
        _ => return,
    };
    for i in 0..b.rows() {
        b.set(i, i, 0.0);
    }
}

pub const GRADIENT_OBJECTIVES: [ObjectiveId; 6] = [
    ObjectiveId::Stl,
    ObjectiveId::Gomtl,
    ObjectiveId::Amtl,
    ObjectiveId::AmtlGomtl,
    ObjectiveId::Amtfl,
    ObjectiveId::DeepAmtfl,
];

// ---------------------------------------------------------------------------------------------
// shared checks, reused by the acceptance target

use amtfl::objectives::{evaluate, objective, task_refs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst gradient relative error per objective over `instances` random problems.
pub fn gradient_check_worst(seed: u64, instances: usize) -> Vec<(ObjectiveId, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for obj in GRADIENT_OBJECTIVES {
        let mut worst: f64 = 0.0;
        for inst in 0..instances {
            let kind = if inst % 2 == 0 { LossKind::Squared } else { LossKind::Logistic };
            let cfg = LossConfig { kind, delta: rng.random_range(0.0..1.0) };
            let data = rand_dataset(&mut rng, GRAD_DIMS.d, GRAD_DIMS.t, GRAD_DIMS.n, kind);
            let hp = rand_hp(&mut rng, GRAD_DIMS.k);
            let params = loop {
                let p = rand_params(&mut rng, obj, &GRAD_DIMS);
                if min_kink_distance(&p, &data) > 1e-3 {
                    break p;
                }
            };
            let refs = task_refs(&data);
            let (_, g) = evaluate(obj, &params, &refs, &cfg, &hp, true).unwrap();
            let f = |p: &ModelParams| evaluate(obj, p, &refs, &cfg, &hp, false).map(|r| r.0).unwrap_or(f64::NAN);
            let mut fd = finite_difference(&f, &params, 1e-5);
            mask_structural(&mut fd);
            worst = worst.max(max_rel_error(&g.unwrap(), &fd, 1e-4));
        }
        out.push((obj, worst));
    }
    out
}

/// Worst |vectorized − loop oracle| per objective over `instances` random problems.
pub fn oracle_check_worst(seed: u64, instances: usize) -> Vec<(ObjectiveId, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objectives = [
        ObjectiveId::Stl,
        ObjectiveId::Gomtl,
        ObjectiveId::Amtl,
        ObjectiveId::AmtlGomtl,
        ObjectiveId::Amtfl,
        ObjectiveId::DeepAmtfl,
        ObjectiveId::Mtnn,
    ];
    let mut out = Vec::new();
    for obj in objectives {
        let mut worst: f64 = 0.0;
        for inst in 0..instances {
            let dims = Dims {
                d: rng.random_range(2..7),
                k: rng.random_range(1..5),
                t: rng.random_range(2..6),
                n: rng.random_range(3..12),
            };
            let kind = if inst % 2 == 0 { LossKind::Squared } else { LossKind::Logistic };
            let cfg = LossConfig { kind, delta: rng.random_range(0.0..1.0) };
            let data = rand_dataset(&mut rng, dims.d, dims.t, dims.n, kind);
            let mut hp = rand_hp(&mut rng, dims.k);
            if inst % 3 == 2 {
                hp.hidden_activation = Activation::Identity;
            }
            let params = rand_params(&mut rng, obj, &dims);
            let v = objective(obj, &params, &data, &cfg, &hp).unwrap();
            let o = oracle(obj, &params, &data, &cfg, &hp);
            worst = worst.max((v - o).abs() / o.abs().max(1.0));
        }
        out.push((obj, worst));
    }
    out
}
