//! Deliberately naive reference implementations shared by the integration
//! tests. Nothing here calls into the library.

#![allow(dead_code, clippy::needless_range_loop)]

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// Ascending order, ties by lower index, via insertion sort.
pub fn stable_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    for i in 0..values.len() {
        let mut pos = order.len();
        while pos > 0 && values[order[pos - 1]] > values[i] {
            pos -= 1;
        }
        order.insert(pos, i);
    }
    order
}

/// `rank[i]` is the 1-based position of `i` in `order`.
pub fn one_based_ranks(order: &[usize]) -> Vec<usize> {
    let mut rank = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    rank
}

#[derive(Clone, Copy, Debug)]
pub struct RefConfig {
    pub beta: f64,
    pub gamma: f64,
    pub k_cut: usize,
    pub slope: f64,
    /// `None` sums over the whole gallery.
    pub m: Option<usize>,
    /// Weight by the query rank of the receiving item instead of the neighbour.
    pub rank_of_i: bool,
}

impl Default for RefConfig {
    fn default() -> Self {
        RefConfig {
            beta: 0.1,
            gamma: 0.01,
            k_cut: 16,
            slope: 0.01,
            m: Some(16),
            rank_of_i: false,
        }
    }
}

pub fn ref_alpha(rank: usize, cfg: &RefConfig) -> f64 {
    if rank <= cfg.k_cut {
        cfg.slope * rank as f64
    } else {
        1.0
    }
}

/// Query-gallery distances after each of `iters` updates, iteration 0 first.
pub fn reference_rerank(query: &[f64], gallery: &[Vec<f64>], cfg: &RefConfig, iters: usize) -> Vec<Vec<f64>> {
    let g = gallery.len();
    // r[j][i]: rank of i in j's own gallery list
    let mut r = vec![vec![0usize; g]; g];
    let mut dist = vec![vec![0.0; g]; g];
    for j in 0..g {
        for i in 0..g {
            dist[j][i] = if i == j { 0.0 } else { euclidean(&gallery[j], &gallery[i]) };
        }
    }
    for j in 0..g {
        r[j] = one_based_ranks(&stable_order(&dist[j]));
    }

    let mut d: Vec<f64> = gallery.iter().map(|f| euclidean(query, f)).collect();
    let mut history = vec![d.clone()];
    for _ in 0..iters {
        let order = stable_order(&d);
        let qrank = one_based_ranks(&order);
        let m = cfg.m.unwrap_or(g).min(g);
        let mut next = d.clone();
        for i in 0..g {
            let mut sum = 0.0;
            for &j in &order[..m] {
                let a = if cfg.rank_of_i { ref_alpha(qrank[i], cfg) } else { ref_alpha(qrank[j], cfg) };
                sum += a * cfg.gamma * r[j][i] as f64 * dist[j][i];
            }
            next[i] = d[i] + cfg.beta * sum;
        }
        d = next;
        history.push(d.clone());
    }
    history
}

/// AP over the first `k` positions: sum of precision at each relevant hit,
/// divided by `denominator`.
pub fn naive_ap(flags: &[bool], k: usize, denominator: usize) -> f64 {
    let mut total = 0.0;
    for pos in 1..=k {
        if flags[pos - 1] {
            let hits = flags[..pos].iter().filter(|&&f| f).count();
            total += hits as f64 / pos as f64;
        }
    }
    total / denominator as f64
}

pub fn naive_precision(flags: &[bool], k: usize) -> f64 {
    flags[..k].iter().filter(|&&f| f).count() as f64 / k as f64
}

/// Two gallery items at equal query distance: `x` is the nearest neighbour of
/// every item ranked beyond the top 16 by the query, `y` the nearest
/// neighbour of every item in the top 16.
pub struct TwinScene {
    pub query: Vec<f64>,
    pub gallery: Vec<Vec<f64>>,
    pub x: usize,
    pub y: usize,
    pub near: Vec<usize>,
    pub far: Vec<usize>,
}

pub fn twin_scene(far_count: usize) -> TwinScene {
    let near_count = 16;
    let dim = 2 + near_count + far_count;
    let basis = |k: usize, scale: f64| {
        let mut v = vec![0.0; dim];
        v[k] = scale;
        v
    };
    let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(p, q)| p + q).collect::<Vec<f64>>();
    let mut gallery = Vec::new();
    // query distance sqrt(1.5^2 + 1) < 2, distance to y sqrt(0.5^2 + 1)
    for k in 0..near_count {
        gallery.push(add(basis(0, 1.5), basis(2 + k, 1.0)));
    }
    let x = gallery.len();
    gallery.push(basis(1, 2.0));
    let y = gallery.len();
    gallery.push(basis(0, 2.0));
    // query distance sqrt(2.5^2 + 1) > 2, distance to x sqrt(0.5^2 + 1)
    for k in 0..far_count {
        gallery.push(add(basis(1, 2.5), basis(2 + near_count + k, 1.0)));
    }
    TwinScene {
        query: vec![0.0; dim],
        gallery,
        x,
        y,
        near: (0..near_count).collect(),
        far: (y + 1..y + 1 + far_count).collect(),
    }
}
