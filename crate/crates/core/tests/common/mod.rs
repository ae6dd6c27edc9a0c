//! Test-side oracles and fixtures. Nothing here calls the solver paths it
//! is used to check.
#![allow(dead_code)]

use std::collections::HashMap;

use dualtpp::count_model::{CountExample, CountModel, CountModelConfig};
use dualtpp::event_model::{EventModel, EventModelConfig};
use dualtpp::inference::{BinProblem, GapState};
use dualtpp::neural::ParamStore;
use dualtpp::{Event, GaussianParams, MarkVocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln() - std.ln() - (x - mean).powi(2) / (2.0 * std * std)
}

/// Random problem with `cmax + 1` states, Δ = 1.
pub fn random_problem(rng: &mut ChaCha8Rng, max_cmax: usize) -> BinProblem {
    let cmax = rng.random_range(1..=max_cmax);
    let states = (0..cmax + 1)
        .map(|_| GapState {
            gap: GaussianParams { mean: rng.random_range(0.01..1.5), std: rng.random_range(0.05..1.0) },
            mark: rng.random_range(0..3),
        })
        .collect();
    BinProblem {
        states,
        offset: if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..0.5) },
        width: 1.0,
        count_prior: GaussianParams { mean: rng.random_range(-0.5..(cmax as f64 + 1.0)), std: rng.random_range(0.05..2.0) },
        cmax,
    }
}

/// Constraint rows `a · g >= b` built directly from the in-bin conditions.
pub fn oracle_constraints(p: &BinProblem, c: usize) -> Vec<(Vec<f64>, f64)> {
    let n = (c + 1).min(p.states.len());
    let eps = 1e-6 * p.width;
    let mut rows = Vec::new();
    for i in 0..n {
        let mut a = vec![0.0; n];
        a[i] = 1.0;
        rows.push((a, eps));
    }
    if c >= 1 {
        let mut a = vec![0.0; n];
        a[0] = 1.0;
        rows.push((a, p.offset));
        let a: Vec<f64> = (0..n).map(|i| if i < c { -1.0 } else { 0.0 }).collect();
        rows.push((a, -(p.offset + p.width)));
    }
    if c < n {
        let a: Vec<f64> = (0..n).map(|i| if i <= c { 1.0 } else { 0.0 }).collect();
        rows.push((a, p.offset + p.width + eps));
    }
    rows
}

fn free_count(p: &BinProblem, c: usize) -> usize {
    (c + 1).min(p.states.len())
}

/// Full objective with the first gaps set to `free` and the rest at their means.
pub fn objective(p: &BinProblem, free: &[f64]) -> f64 {
    p.states
        .iter()
        .enumerate()
        .map(|(i, s)| log_normal(free.get(i).copied().unwrap_or(s.gap.mean), s.gap.mean, s.gap.std))
        .sum()
}

pub fn feasible(rows: &[(Vec<f64>, f64)], g: &[f64], tol: f64) -> bool {
    rows.iter().all(|(a, b)| a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>() >= b - tol)
}

/// Coarse-to-fine grid search over the free gaps. Each round evaluates a
/// full `5^n` lattice around the incumbent and halves the lattice span.
pub fn grid_oracle(p: &BinProblem, c: usize) -> Option<(Vec<f64>, f64)> {
    let n = free_count(p, c);
    let rows = oracle_constraints(p, c);
    let (o, d) = (p.offset, p.width);
    // evenly spaced interior start
    let mut best: Vec<f64> = if c == 0 {
        vec![o + d + 2e-6 * d]
    } else {
        let h = d / (c + 1) as f64;
        let mut g = vec![h; n];
        g[0] = o + h;
        if n > c {
            g[c] = h + 2e-6 * d;
        }
        g
    };
    if !feasible(&rows, &best, 0.0) {
        return None;
    }
    let mut best_val = objective(p, &best);
    // one scale for every axis keeps diagonal moves along active faces on the lattice
    let mut half = p.states[..n].iter().map(|s| s.gap.mean + 3.0 * s.gap.std).fold(o + d, f64::max);
    let k = 5usize;
    let total = k.pow(n as u32);
    // stay at a scale until a full sweep finds nothing better
    while half > 1e-9 {
        let center = best.clone();
        let before = best_val;
        let mut cand = vec![0.0; n];
        for idx in 0..total {
            let mut r = idx;
            for i in 0..n {
                let step = (r % k) as f64 - (k / 2) as f64;
                r /= k;
                cand[i] = center[i] + step * half / (k / 2) as f64;
            }
            if feasible(&rows, &cand, 1e-12) {
                let v = objective(p, &cand);
                if v > best_val {
                    best_val = v;
                    best.copy_from_slice(&cand);
                }
            }
        }
        if best_val <= before {
            half *= 0.5;
        }
    }
    Some((best, best_val))
}

/// Solves `m x = rhs` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for j in col..n {
                    m[r][j] -= f * m[col][j];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    Some((0..n).map(|i| rhs[i] / m[i][i]).collect())
}

/// Exact optimum by enumerating every subset of constraints held with
/// equality: the best feasible KKT point with non-negative multipliers.
pub fn enumeration_oracle(p: &BinProblem, c: usize) -> Option<(Vec<f64>, f64)> {
    let n = free_count(p, c);
    let rows = oracle_constraints(p, c);
    let mu: Vec<f64> = p.states[..n].iter().map(|s| s.gap.mean).collect();
    let var: Vec<f64> = p.states[..n].iter().map(|s| s.gap.std.powi(2)).collect();
    let m = rows.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        if act.len() > n {
            continue;
        }
        let gram: Vec<Vec<f64>> = act
            .iter()
            .map(|&i| act.iter().map(|&j| (0..n).map(|t| rows[i].0[t] * rows[j].0[t] * var[t]).sum()).collect())
            .collect();
        let rhs: Vec<f64> = act
            .iter()
            .map(|&i| rows[i].1 - (0..n).map(|t| rows[i].0[t] * mu[t]).sum::<f64>())
            .collect();
        let lambda = match gauss_solve(gram, rhs) {
            Some(l) => l,
            None => continue,
        };
        if lambda.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let mut g = mu.clone();
        for (l, &k) in lambda.iter().zip(&act) {
            for t in 0..n {
                g[t] += var[t] * rows[k].0[t] * l;
            }
        }
        if !feasible(&rows, &g, 1e-12) {
            continue;
        }
        let v = objective(p, &g);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((g, v));
        }
    }
    best
}

/// Uniformly scattered feasible points (rejection sampling in cumulative
/// coordinates).
pub fn random_feasible_points(p: &BinProblem, c: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = free_count(p, c);
    let rows = oracle_constraints(p, c);
    let (o, d) = (p.offset, p.width);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 200 * count {
        tries += 1;
        let mut times: Vec<f64> = (0..c).map(|_| rng.random_range(o..o + d)).collect();
        times.sort_by(f64::total_cmp);
        if n > c {
            times.push(o + d + rng.random_range(2e-6..3.0));
        }
        let mut g = Vec::with_capacity(n);
        let mut prev = 0.0;
        for t in &times {
            g.push(t - prev);
            prev = *t;
        }
        if feasible(&rows, &g, 0.0) {
            out.push(g);
        }
    }
    out
}

/// Worst KKT residuals `(stationarity, primal, dual, complementarity)` of
/// `(g, λ)` for `max Σ log N` under `rows`.
pub fn kkt_residuals(p: &BinProblem, rows: &[(Vec<f64>, f64)], g: &[f64], lambda: &[f64]) -> (f64, f64, f64, f64) {
    let n = g.len();
    let mut stat: f64 = 0.0;
    for t in 0..n {
        let s = &p.states[t].gap;
        let grad = (g[t] - s.mean) / (s.std * s.std);
        let pull: f64 = rows.iter().zip(lambda).map(|((a, _), l)| a[t] * l).sum();
        stat = stat.max((grad - pull).abs());
    }
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for ((a, b), l) in rows.iter().zip(lambda) {
        let slack = a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>() - b;
        primal = primal.max(-slack);
        comp = comp.max((l * slack).abs());
    }
    let dual = lambda.iter().fold(0.0f64, |m, &l| m.max(-l));
    (stat, primal, dual, comp)
}

/// Plain BLEU for one hypothesis/reference pair written directly from the
/// textbook definition, with the same zero-precision floor.
pub fn reference_bleu(reference: &[u32], hyp: &[u32], max_n: usize, floor: f64) -> f64 {
    if hyp.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    if reference.is_empty() {
        return 0.0;
    }
    let order = max_n.min(hyp.len());
    let mut logp = Vec::new();
    for n in 1..=order {
        let mut refc: HashMap<Vec<u32>, i64> = HashMap::new();
        for i in 0..reference.len().saturating_sub(n - 1) {
            *refc.entry(reference[i..i + n].to_vec()).or_default() += 1;
        }
        let grams: Vec<Vec<u32>> = (0..=hyp.len() - n).map(|i| hyp[i..i + n].to_vec()).collect();
        let mut clip = 0i64;
        for g in &grams {
            if let Some(c) = refc.get_mut(g) {
                if *c > 0 {
                    *c -= 1;
                    clip += 1;
                }
            }
        }
        let total = grams.len() as f64;
        let p = if clip == 0 { floor / total } else { clip as f64 / total };
        logp.push(p.ln());
    }
    let bp = if hyp.len() > reference.len() { 1.0 } else { (1.0 - reference.len() as f64 / hyp.len() as f64).exp() };
    bp * (logp.iter().sum::<f64>() / order as f64).exp()
}

pub fn vocab(k: usize) -> MarkVocab {
    MarkVocab::open((0..k).map(|i| format!("m{i}")).collect())
}

fn zero(params: &mut ParamStore) {
    for t in params.tensors_mut() {
        t.data.fill(0.0);
    }
}

fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Event model with every weight zeroed: constant gap distribution
/// `N(gap, std)` in seconds and mark logits `mark_logits`.
pub fn constant_event_model(k: usize, gap: f64, std: f64, gap_mean: f64, mark_logits: &[f64]) -> EventModel {
    let mut m = EventModel::new(EventModelConfig::new(k), vocab(k), gap_mean).unwrap();
    zero(&mut m.params);
    m.params.by_name_mut("mu.b").unwrap().data[0] = inv_softplus(gap / gap_mean);
    m.params.by_name_mut("sigma.b").unwrap().data[0] = inv_softplus(std / gap_mean);
    m.params.by_name_mut("mark.b").unwrap().data.copy_from_slice(mark_logits);
    m
}

/// Count model that predicts `N(nu, rho)` for every bin.
pub fn constant_count_model(config: CountModelConfig, nu: f64, rho: f64) -> CountModel {
    let floor = config.rho_floor;
    let layers = config.hidden.len();
    let mut m = CountModel::new(config).unwrap();
    zero(&mut m.params);
    let b = m.params.by_name_mut(&format!("count.{layers}.b")).unwrap();
    b.data[0] = nu;
    b.data[1] = inv_softplus(rho - floor);
    m
}

pub struct FdReport {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
    /// Coordinates whose `±h` probes straddle a kink of the loss.
    pub skipped: usize,
}

/// Largest relative error between analytic gradients and central
/// differences over every parameter, `|a - n| / max(|a|, |n|, floor)`.
///
/// `same_piece(plus, minus)` reports whether the loss is smooth between
/// the two probes; coordinates where it is not are skipped and counted.
pub fn max_fd_error(
    params: &ParamStore,
    analytic: &[Vec<f64>],
    mut loss_at: impl FnMut(&ParamStore) -> f64,
    h: f64,
    floor: f64,
    mut same_piece: impl FnMut(&ParamStore, &ParamStore) -> bool,
) -> FdReport {
    let mut report = FdReport { worst: 0.0, at: String::new(), checked: 0, skipped: 0 };
    let mut plus = params.clone();
    let mut minus = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        for i in 0..params.tensors()[k].data.len() {
            let orig = params.tensors()[k].data[i];
            plus.tensors_mut()[k].data[i] = orig + h;
            minus.tensors_mut()[k].data[i] = orig - h;
            if same_piece(&plus, &minus) {
                let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = analytic[k][i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
                report.checked += 1;
                if rel > report.worst {
                    report.worst = rel;
                    report.at = format!("{name}[{i}]: analytic {a:e}, numeric {num:e}");
                }
            } else {
                report.skipped += 1;
            }
            plus.tensors_mut()[k].data[i] = orig;
            minus.tensors_mut()[k].data[i] = orig;
        }
    }
    report
}

/// Signs of every hidden ReLU pre-activation of an MLP named `prefix`
/// with `layers` dense layers, computed directly from the weights.
pub fn relu_pattern(params: &ParamStore, prefix: &str, layers: usize, x: &[f64]) -> Vec<bool> {
    let find = |name: String| params.iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone()).unwrap();
    let mut pattern = Vec::new();
    let mut a = x.to_vec();
    for l in 0..layers - 1 {
        let w = find(format!("{prefix}.{l}.w"));
        let b = find(format!("{prefix}.{l}.b"));
        a = (0..w.rows)
            .map(|r| (0..w.cols).map(|c| w.data[r * w.cols + c] * a[c]).sum::<f64>() + b.data[r])
            .collect();
        pattern.extend(a.iter().map(|&v| v > 0.0));
        a.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    pattern
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

fn random_window(r: &mut ChaCha8Rng, len: usize, k: u32) -> Vec<Event> {
    let mut t = r.random_range(0.0..86_400.0);
    (0..len)
        .map(|_| {
            t += r.random_range(1.0..300.0);
            Event::new(t, r.random_range(0..k))
        })
        .collect()
}

/// Central-difference check of the event-model window loss at jittered
/// random weights.
pub fn fd_event_model(seed: u64) -> FdReport {
    let mut r = rng(seed);
    let k = 3;
    let cfg = EventModelConfig { seed, ..EventModelConfig::new(k) };
    let mut model = EventModel::new(cfg, vocab(k), 120.0).unwrap();
    // move biases off zero so every head contributes
    for t in model.params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let window = random_window(&mut r, 6, k as u32);
    let (_, grads) = model.loss_and_grads(&window).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors.iter().map(|t| t.data.clone()).collect();
    let base = model.clone();
    max_fd_error(
        &model.params,
        &analytic,
        |p| {
            let mut m = base.clone();
            m.params = p.clone();
            m.window_loss(&window).unwrap()
        },
        FD_STEP,
        FD_FLOOR,
        |_, _| true,
    )
}

/// Central-difference check of the count-model batch loss; coordinates
/// whose probes flip a ReLU are skipped.
pub fn fd_count_model(seed: u64) -> FdReport {
    let mut r = rng(seed);
    let cfg = CountModelConfig { seed, ..CountModelConfig::new(3600.0) };
    let model = CountModel::new(cfg).unwrap();
    let batch: Vec<CountExample> = (0..4)
        .map(|_| {
            let mut features: Vec<f64> = (0..20).map(|_| r.random_range(0..12) as f64).collect();
            features.extend((0..21).map(|_| r.random_range(0.0..1.0)));
            CountExample { features, count: r.random_range(0..15) as f64 }
        })
        .collect();
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors.iter().map(|t| t.data.clone()).collect();
    let layers = model.config.hidden.len() + 1;
    max_fd_error(
        &model.params,
        &analytic,
        |p| {
            let mut m = model.clone();
            m.params = p.clone();
            m.loss(&batch).unwrap()
        },
        FD_STEP,
        FD_FLOOR,
        |a, b| {
            batch.iter().all(|ex| relu_pattern(a, "count", layers, &ex.features) == relu_pattern(b, "count", layers, &ex.features))
        },
    )
}
