//! Independent reference implementations shared by the integration tests and
//! the acceptance harness. Everything here is written from the definitions in
//! plain loops over `f64`, without touching the library's kernels.

#![allow(dead_code)]

use std::collections::HashMap;

use dxformer::attention::{BlockRole, CrossQvMode};
use dxformer::model::{decoder_forward, encoder_forward, ModelConfig, ParameterSet};
use dxformer::{FrameMask, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m)
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// A mask with `real` leading real frames, then padding.
pub fn mask_of(t: usize, real: usize) -> FrameMask {
    FrameMask::right_padded(real, t - real)
}

// ---------------------------------------------------------------- attention

/// Dense softmax attention over `[T × d]` rows under a block-diagonal mask:
/// query `i` may see key `j` iff both are real and `i / w == j / w`.
/// Returns the output and the `[T × T]` weights.
pub fn dense_attention(q: &Mat, k: &Mat, v: &Mat, window: usize, mask: &[bool]) -> (Mat, Mat) {
    let t = q.len();
    let d = q[0].len();
    let mut out = vec![vec![0.0; d]; t];
    let mut weights = vec![vec![0.0; t]; t];
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let allowed: Vec<usize> = (0..t)
            .filter(|&j| mask[j] && i / window == j / window)
            .collect();
        let scores: Vec<f64> = allowed
            .iter()
            .map(|&j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for (&j, s) in allowed.iter().zip(&scores) {
            weights[i][j] = (s - m).exp() / z;
        }
        for j in 0..t {
            for c in 0..d {
                out[i][c] += weights[i][j] * v[j][c];
            }
        }
    }
    (out, weights)
}

/// Random case `seed` of the attention oracle set: `T ≤ 64`,
/// `w ∈ {1, 2, 4, 8, 16}`, a right-padded mask.
pub fn attention_case(seed: u64) -> (Mat, Mat, Mat, usize, Vec<bool>) {
    let mut r = rng(seed);
    let t = r.random_range(1..=64);
    let d = r.random_range(1..=8);
    let window = [1, 2, 4, 8, 16][r.random_range(0..5)];
    let real = r.random_range(1..=t);
    let mask: Vec<bool> = (0..t).map(|i| i < real).collect();
    let q = random_mat(&mut r, t, d, 2.0);
    let k = random_mat(&mut r, t, d, 2.0);
    let v = random_mat(&mut r, t, d, 1.0);
    (q, k, v, window, mask)
}

/// Runs the library's chunked attention on case `seed` and compares output
/// and weights with [`dense_attention`]. Returns the max abs difference.
pub fn check_attention_case(seed: u64, tolerance: f64) -> Result<f64, String> {
    let (q, k, v, w, mask) = attention_case(seed);
    let (want, want_w) = dense_attention(&q, &k, &v, w, &mask);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(to_tensor(&q)),
        tape.constant(to_tensor(&k)),
        tape.constant(to_tensor(&v)),
    );
    let fm = FrameMask::new(mask.clone());
    let out = tape
        .windowed_attention(qv, kv, vv, w, &fm)
        .map_err(|e| e.to_string())?;
    let got = to_mat(tape.value(out));
    let got_w = to_mat(&tape.attention_weights(out).ok_or("no attention weights")?);
    let diff = max_abs_diff(&got, &want).max(max_abs_diff(&got_w, &want_w));
    if diff > tolerance {
        return Err(format!("seed {seed}: max abs diff {diff:.3e}"));
    }
    for i in 0..q.len() {
        for j in 0..q.len() {
            let visible = mask[i] && mask[j] && i / w == j / w;
            if !visible && got_w[i][j] != 0.0 {
                return Err(format!("seed {seed}: weight ({i}, {j}) is {}", got_w[i][j]));
            }
        }
    }
    Ok(diff)
}

// ------------------------------------------------------- layers and blocks

/// Same-padded dilated convolution of `[C_in × T]` with `w[o][c][j]`.
pub fn conv(x: &Mat, w: &Tensor<f64>, b: Option<&Tensor<f64>>, dilation: usize) -> Mat {
    let (c_out, c_in, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(x.len(), c_in);
    let t = x[0].len() as isize;
    let half = (kernel as isize - 1) / 2;
    let wd = w.data();
    (0..c_out)
        .map(|o| {
            (0..t)
                .map(|tt| {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..c_in {
                        for j in 0..kernel {
                            let src = tt + dilation as isize * (j as isize - half);
                            if (0..t).contains(&src) {
                                acc += wd[(o * c_in + c) * kernel + j] * x[c][src as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn mask_cols(x: &Mat, mask: &[bool]) -> Mat {
    x.iter()
        .map(|r| {
            r.iter()
                .zip(mask)
                .map(|(v, m)| if *m { *v } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn instance_norm(x: &Mat, mask: &[bool]) -> Mat {
    let n = mask.iter().filter(|m| **m).count() as f64;
    x.iter()
        .map(|r| {
            let real: Vec<f64> = r
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .collect();
            let mean = real.iter().sum::<f64>() / n;
            let var = real.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter()
                .zip(mask)
                .map(|(v, m)| if *m { (v - mean) / sd } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn stack(a: &Mat, b: &Mat) -> Mat {
    a.iter().chain(b).cloned().collect()
}

pub fn transpose(x: &Mat) -> Mat {
    (0..x[0].len())
        .map(|j| x.iter().map(|r| r[j]).collect())
        .collect()
}

/// Reference DA block on `[F × T]`, reading its weights from `p` under
/// `prefix`.
pub fn da_block(
    p: &ParameterSet<f64>,
    prefix: &str,
    x: &Mat,
    cross: Option<&Mat>,
    windows: (usize, usize),
    mode: CrossQvMode,
    mask: &[bool],
) -> Mat {
    let w = |n: &str| {
        p.get(&format!("{prefix}.{n}"))
            .unwrap_or_else(|| panic!("{prefix}.{n}"))
    };
    let normed = instance_norm(x, mask);
    let mut branch_out = Vec::new();
    for (tag, win) in [("inc", windows.0), ("dec", windows.1)] {
        let hid = mask_cols(
            &relu(&conv(
                &normed,
                w(&format!("{tag}.conv.w")),
                Some(w(&format!("{tag}.conv.b"))),
                win,
            )),
            mask,
        );
        let (qs, ks, vs) = match cross {
            None => (hid.clone(), hid.clone(), hid.clone()),
            Some(c) => {
                let j = stack(&hid, c);
                match mode {
                    CrossQvMode::QueryKey => (j.clone(), j, hid.clone()),
                    CrossQvMode::QueryValue => (j.clone(), hid.clone(), j),
                }
            }
        };
        let q = transpose(&conv(
            &qs,
            w(&format!("{tag}.q.w")),
            Some(w(&format!("{tag}.q.b"))),
            1,
        ));
        let k = transpose(&conv(&ks, w(&format!("{tag}.k.w")), None, 1));
        let v = transpose(&conv(
            &vs,
            w(&format!("{tag}.v.w")),
            Some(w(&format!("{tag}.v.b"))),
            1,
        ));
        let (att, _) = dense_attention(&q, &k, &v, win, mask);
        branch_out.push(conv(
            &transpose(&att),
            w(&format!("{tag}.o.w")),
            Some(w(&format!("{tag}.o.b"))),
            1,
        ));
    }
    let fused = conv(
        &stack(&branch_out[0], &branch_out[1]),
        w("fuse.w"),
        Some(w("fuse.b")),
        1,
    );
    mask_cols(&add(x, &fused), mask)
}

fn windows(i: usize, n: usize) -> (usize, usize) {
    (1 << i, 1 << (n - i))
}

/// Reference stage: in-projection, `N` blocks, out-projection. Returns the
/// block outputs and the logits.
pub fn stage(
    cfg: &ModelConfig,
    p: &ParameterSet<f64>,
    prefix: &str,
    input: &Mat,
    enc_feats: Option<&[Mat]>,
    mask: &[bool],
) -> (Vec<Mat>, Mat) {
    let w = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let n = cfg.blocks_per_stage;
    let mut x = mask_cols(&conv(input, w("in.w"), Some(w("in.b")), 1), mask);
    let mut feats = Vec::new();
    for i in 1..=n {
        let cross = enc_feats.map(|f| {
            if cfg.cross_connections {
                &f[i - 1]
            } else {
                &f[n - 1]
            }
        });
        x = da_block(
            p,
            &format!("{prefix}.blk{i}"),
            &x,
            cross,
            windows(i, n),
            cfg.cross_qv_mode,
            mask,
        );
        feats.push(x.clone());
    }
    let logits = mask_cols(&conv(&x, w("out.w"), Some(w("out.b")), 1), mask);
    (feats, logits)
}

pub fn softmax_cols(x: &Mat) -> Mat {
    let t = x[0].len();
    let mut out = vec![vec![0.0; t]; x.len()];
    for tt in 0..t {
        let m = x.iter().map(|r| r[tt]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|r| (r[tt] - m).exp()).sum();
        for (c, r) in x.iter().enumerate() {
            out[c][tt] = (r[tt] - m).exp() / z;
        }
    }
    out
}

/// Reference forward of the whole model; logits of every stage.
pub fn model(cfg: &ModelConfig, p: &ParameterSet<f64>, x: &Mat, mask: &[bool]) -> Vec<Mat> {
    let (feats, mut logits) = stage(cfg, p, "enc", x, None, mask);
    let mut out = vec![logits.clone()];
    for s in 1..=cfg.num_decoders {
        let (_, l) = stage(
            cfg,
            p,
            &format!("dec{s}"),
            &softmax_cols(&logits),
            Some(&feats),
            mask,
        );
        logits = l;
        out.push(logits.clone());
    }
    out
}

/// Parameters drawn uniformly from `±scale` (biases included), so that no
/// block is close to the identity.
pub fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ParameterSet<f64> {
    let mut p = ParameterSet::<f64>::init(cfg).unwrap();
    let mut r = rng(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
    p
}

// ------------------------------------------------------------------ wiring

/// Checks the cross-connection wiring of decoder 1 for one seed:
/// perturbing encoder block `j`'s output changes the decoder's logits while
/// every decoder block before `j` keeps its input and pre-cross features
/// bitwise; permuting the encoder features changes the logits.
pub fn check_wiring(cfg: &ModelConfig, seed: u64, frames: usize) -> Result<(), String> {
    let p = random_params(cfg, seed, 0.5);
    let mut r = rng(seed ^ 0x3117);
    let x = to_tensor(&random_mat(&mut r, cfg.input_dim, frames, 1.0));
    let mask = FrameMask::all(frames);
    let n = cfg.blocks_per_stage;

    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let xv = tape.constant(x);
    let enc = encoder_forward(&mut tape, cfg, &bound, xv, &mask).map_err(|e| e.to_string())?;
    let base = decoder_forward(
        &mut tape,
        cfg,
        &bound,
        1,
        enc.logits,
        &enc.block_feats,
        &mask,
    )
    .map_err(|e| e.to_string())?;
    let snapshot = |tape: &Tape<f64>, s: &dxformer::model::StageOutput| -> Vec<[Tensor<f64>; 3]> {
        s.blocks
            .iter()
            .map(|b| {
                [
                    tape.value(b.increasing.hidden).clone(),
                    tape.value(b.decreasing.hidden).clone(),
                    tape.value(b.output).clone(),
                ]
            })
            .collect()
    };
    let base_blocks = snapshot(&tape, &base);
    let base_logits = tape.value(base.logits).clone();

    for j in 1..=n {
        let mut feats = enc.block_feats.clone();
        let mut bumped = tape.value(feats[j - 1]).clone();
        for v in bumped.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
        feats[j - 1] = tape.constant(bumped);
        let out = decoder_forward(&mut tape, cfg, &bound, 1, enc.logits, &feats, &mask)
            .map_err(|e| e.to_string())?;
        if tape.value(out.logits) == &base_logits {
            return Err(format!(
                "seed {seed}: perturbing encoder block {j} left decoder logits unchanged"
            ));
        }
        let blocks = snapshot(&tape, &out);
        for i in 1..j {
            if blocks[i - 1] != base_blocks[i - 1] {
                return Err(format!(
                    "seed {seed}: perturbing encoder block {j} changed decoder block {i}"
                ));
            }
        }
        // block j itself: same pre-cross features, different output
        let [hi, hd, o] = &blocks[j - 1];
        let [bhi, bhd, bo] = &base_blocks[j - 1];
        if hi != bhi || hd != bhd {
            return Err(format!(
                "seed {seed}: decoder block {j} pre-cross features moved"
            ));
        }
        if o == bo {
            return Err(format!(
                "seed {seed}: decoder block {j} ignored its cross input"
            ));
        }
    }

    let mut permuted = enc.block_feats.clone();
    permuted.rotate_left(1);
    let out = decoder_forward(&mut tape, cfg, &bound, 1, enc.logits, &permuted, &mask)
        .map_err(|e| e.to_string())?;
    if tape.value(out.logits) == &base_logits {
        return Err(format!(
            "seed {seed}: permuting encoder features left logits unchanged"
        ));
    }
    Ok(())
}

pub fn block_role_name(role: BlockRole) -> &'static str {
    match role {
        BlockRole::Encoder => "encoder",
        BlockRole::Decoder => "decoder",
    }
}

// ----------------------------------------------------------------- metrics

/// Maximal runs as `(label, start, end)`, end exclusive.
pub fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == l => last.2 = t + 1,
            _ => out.push((l, t, t + 1)),
        }
    }
    out
}

/// IoU of two runs as an exact fraction `(intersection, union)` by counting
/// frames.
fn iou_frac(a: (usize, usize, usize), b: (usize, usize, usize)) -> (usize, usize) {
    let lo = a.1.min(b.1);
    let hi = a.2.max(b.2);
    let (mut inter, mut union) = (0, 0);
    for t in lo..hi {
        let (ia, ib) = ((a.1..a.2).contains(&t), (b.1..b.2).contains(&t));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    (inter, union)
}

/// `a > b` for fractions.
fn frac_gt(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

/// Exhaustive version of the greedy rule: every pair is scored with exact
/// fractions. Returns `(tp, fp, fn)`.
pub fn brute_f1_counts(pred: &[usize], gt: &[usize], k: usize) -> (usize, usize, usize) {
    let (ps, gs) = (runs(pred), runs(gt));
    let table: Vec<Vec<(usize, usize)>> = ps
        .iter()
        .map(|p| gs.iter().map(|g| iou_frac(*p, *g)).collect())
        .collect();
    let mut used = vec![false; gs.len()];
    let mut tp = 0;
    for (i, p) in ps.iter().enumerate() {
        let candidates: Vec<usize> = (0..gs.len())
            .filter(|&j| !used[j] && gs[j].0 == p.0)
            .collect();
        let Some(&first) = candidates.first() else {
            continue;
        };
        let best = candidates.iter().fold(first, |b, &j| {
            if frac_gt(table[i][j], table[i][b]) {
                j
            } else {
                b
            }
        });
        if frac_gt(table[i][best], (k, 100)) {
            used[best] = true;
            tp += 1;
        }
    }
    (tp, ps.len() - tp, gs.len() - tp)
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * (2.0 * p * r / (p + r))
    }
}

/// Maximum number of disjoint same-label pairs with IoU above `k / 100`
/// (augmenting paths).
pub fn optimal_tp(pred: &[usize], gt: &[usize], k: usize) -> usize {
    let (ps, gs) = (runs(pred), runs(gt));
    let adj: Vec<Vec<usize>> = ps
        .iter()
        .map(|p| {
            (0..gs.len())
                .filter(|&j| gs[j].0 == p.0 && frac_gt(iou_frac(*p, gs[j]), (k, 100)))
                .collect()
        })
        .collect();
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|o| augment(o, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; gs.len()];
    (0..ps.len())
        .filter(|&i| augment(i, &adj, &mut vec![false; gs.len()], &mut owner))
        .count()
}

/// Edit distance by memoized recursion over suffixes.
pub fn brute_levenshtein(a: &[usize], b: &[usize]) -> usize {
    fn go(
        a: &[usize],
        b: &[usize],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn brute_edit(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = runs(pred).iter().map(|r| r.0).collect();
    let g: Vec<usize> = runs(gt).iter().map(|r| r.0).collect();
    let norm = p.len().max(g.len());
    if norm == 0 {
        return 100.0;
    }
    (100.0 * (1.0 - brute_levenshtein(&p, &g) as f64 / norm as f64)).max(0.0)
}

/// A random labeling of length `1..=max_t` over `classes` labels with runs
/// of random length, so segments are neither all tiny nor all long.
pub fn random_labels(r: &mut ChaCha8Rng, t: usize, classes: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(t);
    while out.len() < t {
        let l = r.random_range(0..classes);
        let len = r.random_range(1..=t.div_ceil(3).max(1));
        out.extend(std::iter::repeat_n(l, len.min(t - out.len())));
    }
    out
}

/// A prediction that mostly follows `gt`: boundary shifts, flips and random
/// runs.
pub fn perturbed_labels(r: &mut ChaCha8Rng, gt: &[usize], classes: usize) -> Vec<usize> {
    let mut p = gt.to_vec();
    let edits = r.random_range(0..4);
    for _ in 0..edits {
        let a = r.random_range(0..p.len());
        let b = (a + r.random_range(1..=p.len().div_ceil(4))).min(p.len());
        let l = r.random_range(0..classes);
        p[a..b].fill(l);
    }
    p
}

/// Instance `seed` of the metric oracle set: `T ≤ 50`, `C ≤ 5`; half the
/// predictions are perturbed copies of the ground truth, half unrelated.
pub fn metric_instance(seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let t = r.random_range(1..=50);
    let c = r.random_range(1..=5);
    let gt = random_labels(&mut r, t, c);
    let pred = if seed.is_multiple_of(2) {
        perturbed_labels(&mut r, &gt, c)
    } else {
        random_labels(&mut r, t, c)
    };
    (pred, gt)
}

/// Compares the library's metrics with the brute-force versions on one
/// instance.
pub fn check_metric_instance(seed: u64) -> Result<(), String> {
    use dxformer::metrics::{edit_score, f1_counts};
    let (pred, gt) = metric_instance(seed);
    let mut f1s = Vec::new();
    for k in [10usize, 25, 50] {
        let got = f1_counts(&pred, &gt, k as f64, None).map_err(|e| e.to_string())?;
        let want = brute_f1_counts(&pred, &gt, k);
        if (got.tp, got.fp, got.fn_) != want {
            return Err(format!(
                "seed {seed} k={k}: counts {:?} vs {want:?}",
                (got.tp, got.fp, got.fn_)
            ));
        }
        let f1 = got.scores().2;
        if f1 != f1_from_counts(want.0, want.1, want.2) {
            return Err(format!("seed {seed} k={k}: f1 {f1}"));
        }
        f1s.push(f1);
    }
    if !(f1s[2] <= f1s[1] && f1s[1] <= f1s[0]) {
        return Err(format!("seed {seed}: F1 not monotone in k: {f1s:?}"));
    }
    let edit = edit_score(&pred, &gt).map_err(|e| e.to_string())?;
    if edit != brute_edit(&pred, &gt) {
        return Err(format!(
            "seed {seed}: edit {edit} vs {}",
            brute_edit(&pred, &gt)
        ));
    }
    Ok(())
}
