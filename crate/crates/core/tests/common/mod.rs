//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use lca_core::data::{synth_glyphs, write_image_dir};

/// Every stride-1 window `(row, col, kh, kw)` of a `h×w` map other than 1×1,
/// listed by brute force.
pub fn brute_force_windows(h: usize, w: usize, include_one_by_k: bool) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for kh in 1..=h {
        for kw in 1..=w {
            if kh == 1 && kw == 1 {
                continue;
            }
            if !include_one_by_k && (kh < 2 || kw < 2) {
                continue;
            }
            for r in 0..h {
                for c in 0..w {
                    if r + kh <= h && c + kw <= w {
                        out.push((r, c, kh, kw));
                    }
                }
            }
        }
    }
    out
}

/// LCA head on one `c×h×w` image computed window by window with plain loops.
pub fn naive_lca(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    include_one_by_k: bool,
) -> Vec<f64> {
    let d = bias.len();
    let windows = brute_force_windows(h, w, include_one_by_k);
    let mut acc = vec![0.0; d];
    for &(r, col, kh, kw) in &windows {
        let mut v = vec![0.0; c];
        for (ch, slot) in v.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in r..r + kh {
                for j in col..col + kw {
                    s += x[(ch * h + i) * w + j];
                }
            }
            *slot = s / (kh * kw) as f64;
        }
        for o in 0..d {
            let z: f64 = bias[o] + (0..c).map(|k| weight[o * c + k] * v[k]).sum::<f64>();
            acc[o] += z.max(0.0);
        }
    }
    acc.iter().map(|a| a / windows.len() as f64).collect()
}

/// Writes a synthetic PPM dataset under `dir/data/{train,test}` and a run
/// config at `dir/run.cfg` with `extra` lines appended.
pub fn synth_run(dir: &Path, classes: usize, per_class: usize, test_per_class: usize, extra: &str) -> PathBuf {
    let (train, test) = synth_glyphs(classes, per_class, test_per_class, 42).unwrap();
    write_image_dir(&train, &dir.join("data/train")).unwrap();
    write_image_dir(&test, &dir.join("data/test")).unwrap();
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!("data.train=data/train\ndata.test=data/test\nchannels=4,8\nbatch_size=8\n{extra}\n"),
    )
    .unwrap();
    cfg
}
