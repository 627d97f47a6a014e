//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use attrnet::datagen::{make_dataset, DatagenConfig, Manifest};
use attrnet::fusion::{FusionConfig, ModelConfig};
use attrnet::harness::TrainConfig;

fn trp(p: &[f64], g: &[f64], i: usize, j: usize, k: usize) -> f64 {
    // 1-based positions, as written in the loss definition
    let (pi, pj, pk) = (p[i - 1], p[j - 1], p[k - 1]);
    let (gj, gk) = (g[j - 1], g[k - 1]);
    ((pi - pj).abs() - (pi - pk).abs() + (gj - gk).abs()).max(0.0)
}

/// Relative-relation loss written out index by index over a batch sorted by
/// `g` descending.
pub fn literal_relative(p: &[f64], g: &[f64]) -> f64 {
    let b = p.len();
    let mut outer = 0.0;
    for i in 3..=b - 2 {
        let mut inner = 0.0;
        for j in 2..=i - 1 {
            inner += trp(p, g, i, j, j - 1);
        }
        for j in i + 1..=b - 1 {
            inner += trp(p, g, i, j, j + 1);
        }
        outer += inner / (b - 3) as f64;
    }
    outer / (b - 4) as f64
}

/// Average ranks (1-based) by enumerating every permutation that sorts `x`
/// ascending and averaging the position each element lands in.
pub fn brute_average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut sums = vec![0.0; n];
    let mut count = 0.0;
    permute(&mut idx, 0, &mut |perm| {
        if perm.windows(2).all(|w| x[w[0]] <= x[w[1]]) {
            for (pos, &i) in perm.iter().enumerate() {
                sums[i] += (pos + 1) as f64;
            }
            count += 1.0;
        }
    });
    sums.iter().map(|s| s / count).collect()
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

/// Population Pearson correlation, `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// A model and schedule small enough for multi-run tests.
pub fn small_config(seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs,
        seed,
        lr: 1e-3,
        model: ModelConfig {
            image_size: 16,
            grid: 2,
            stem_channels: [4, 4],
            aap_width: 4,
            fusion: FusionConfig {
                channels: 4,
                reduction: 4,
                ..FusionConfig::default()
            },
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn small_dataset(n: usize, seed: u64, dir: &Path) -> Manifest {
    let cfg = DatagenConfig {
        image_size: 16,
        ..DatagenConfig::default()
    };
    make_dataset(n, seed, dir, &cfg).unwrap()
}

/// The CSV with the wall-clock column dropped.
pub fn csv_without_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}
