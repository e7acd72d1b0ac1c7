mod common;

use common::*;
use dxformer::attention::{da_block_forward, BlockRole, BlockSpec, CrossQvMode, DaBlockParams};
use dxformer::model::{decoder_forward, dxformer_forward, encoder_forward, ModelConfig};
use dxformer::{FrameMask, Tape};
use rand::Rng;

#[test]
fn windowed_attention_matches_dense_block_diagonal_attention() {
    for seed in 0..200 {
        check_attention_case(seed, 1e-6).unwrap();
    }
}

#[test]
fn hidden_keys_and_values_cannot_reach_a_query() {
    for seed in 0..50 {
        let (q, k, v, w, mask) = attention_case(seed);
        let t = q.len();
        let fm = FrameMask::new(mask.clone());
        let run = |k: &Mat, v: &Mat| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (
                tape.constant(to_tensor(&q)),
                tape.constant(to_tensor(k)),
                tape.constant(to_tensor(v)),
            );
            let out = tape.windowed_attention(qv, kv, vv, w, &fm).unwrap();
            to_mat(tape.value(out))
        };
        let base = run(&k, &v);
        let mut r = rng(seed + 1000);
        let i = r.random_range(0..t);
        // scramble every key and value the query may not see
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for j in 0..t {
            if !(mask[j] && mask[i] && i / w == j / w) && j != i {
                k2[j]
                    .iter_mut()
                    .for_each(|x| *x = r.random_range(-9.0..9.0));
                v2[j]
                    .iter_mut()
                    .for_each(|x| *x = r.random_range(-9.0..9.0));
            }
        }
        let moved = run(&k2, &v2);
        assert_eq!(base[i], moved[i], "seed {seed} query {i}");
        if !mask[i] {
            assert!(base[i].iter().all(|x| *x == 0.0));
        }
    }
}

fn toy(blocks: usize, decoders: usize, mode: CrossQvMode) -> ModelConfig {
    let mut cfg = ModelConfig::new(5, 3, blocks).with_model_dim(8);
    cfg.num_decoders = decoders;
    cfg.cross_qv_mode = mode;
    cfg
}

#[test]
fn da_block_matches_the_reference_in_every_role() {
    for (seed, (role, mode)) in [
        (BlockRole::Encoder, CrossQvMode::QueryKey),
        (BlockRole::Decoder, CrossQvMode::QueryKey),
        (BlockRole::Decoder, CrossQvMode::QueryValue),
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = toy(3, 1, mode);
        let p = random_params(&cfg, seed as u64, 0.5);
        let prefix = match role {
            BlockRole::Encoder => "enc.blk2",
            BlockRole::Decoder => "dec1.blk2",
        };
        let spec = BlockSpec::new(2, 3, role).unwrap();
        let mut r = rng(seed as u64);
        let (t, real) = (16, 13);
        let mask = mask_of(t, real);
        let x = mask_cols(&random_mat(&mut r, 8, t, 1.0), mask.as_slice());
        let c = mask_cols(&random_mat(&mut r, 8, t, 1.0), mask.as_slice());
        let cross = (role == BlockRole::Decoder).then_some(&c);
        let want = da_block(
            &p,
            prefix,
            &x,
            cross,
            (spec.w_inc(), spec.w_dec()),
            mode,
            mask.as_slice(),
        );

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let xv = tape.constant(to_tensor(&x));
        let cv = cross.map(|c| tape.constant(to_tensor(c)));
        let bp = DaBlockParams::lookup(prefix, |n| bound.get(n)).unwrap();
        let out = da_block_forward(&mut tape, xv, cv, &spec, &bp, mode, &mask).unwrap();
        let got = to_mat(tape.value(out.output));
        assert!(max_abs_diff(&got, &want) < 1e-10, "{role:?} {mode:?}");
    }
}

#[test]
fn full_model_matches_the_straight_line_reference() {
    for (seed, cc) in [(0, true), (1, false), (2, true)] {
        let mut cfg = toy(4, 2, CrossQvMode::QueryKey);
        cfg.cross_connections = cc;
        let p = random_params(&cfg, seed, 0.4);
        let mut r = rng(seed);
        let (t, real) = (16, 14);
        let mask = mask_of(t, real);
        let x = mask_cols(&random_mat(&mut r, 5, t, 1.0), mask.as_slice());
        let want = model(&cfg, &p, &x, mask.as_slice());

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let xv = tape.constant(to_tensor(&x));
        let out = dxformer_forward(&mut tape, &cfg, &bound, xv, &mask).unwrap();
        assert_eq!(out.stages.len(), want.len());
        for (s, w) in out.stages.iter().zip(&want) {
            let got = to_mat(tape.value(s.logits));
            assert!(max_abs_diff(&got, w) < 1e-9, "seed {seed}");
        }
        // the reference does tell the two wirings apart
        let mut flipped = cfg.clone();
        flipped.cross_connections = !cc;
        let other = model(&flipped, &p, &x, mask.as_slice());
        let last = to_mat(tape.value(out.final_logits()));
        assert!(max_abs_diff(&last, other.last().unwrap()) > 1e-6);
    }
}

#[test]
fn zero_fusion_makes_a_block_the_identity() {
    let cfg = toy(3, 1, CrossQvMode::QueryKey);
    let mut p = random_params(&cfg, 4, 0.5);
    for name in ["dec1.blk1.fuse.w", "dec1.blk1.fuse.b"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mask = mask_of(12, 9);
    let mut r = rng(4);
    let x = mask_cols(&random_mat(&mut r, 8, 12, 1.0), mask.as_slice());
    let c = random_mat(&mut r, 8, 12, 1.0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let (xv, cv) = (tape.constant(to_tensor(&x)), tape.constant(to_tensor(&c)));
    let bp = DaBlockParams::lookup("dec1.blk1", |n| bound.get(n)).unwrap();
    let spec = BlockSpec::new(1, 3, BlockRole::Decoder).unwrap();
    let out = da_block_forward(
        &mut tape,
        xv,
        Some(cv),
        &spec,
        &bp,
        CrossQvMode::QueryKey,
        &mask,
    )
    .unwrap();
    assert_eq!(to_mat(tape.value(out.output)), x);
}

#[test]
fn cross_connections_are_wired_block_to_block() {
    for seed in 0..10 {
        let cfg = toy(4, 1, CrossQvMode::QueryKey);
        check_wiring(&cfg, seed, 16).unwrap();
        let qv = toy(4, 1, CrossQvMode::QueryValue);
        check_wiring(&qv, seed, 16).unwrap();
    }
}

#[test]
fn without_cross_connections_only_the_last_encoder_block_matters() {
    let mut cfg = toy(4, 1, CrossQvMode::QueryKey);
    cfg.cross_connections = false;
    let p = random_params(&cfg, 9, 0.5);
    let mask = FrameMask::all(12);
    let mut r = rng(9);
    let x = to_tensor(&random_mat(&mut r, 5, 12, 1.0));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let xv = tape.constant(x);
    let enc = encoder_forward(&mut tape, &cfg, &bound, xv, &mask).unwrap();
    let base = decoder_forward(
        &mut tape,
        &cfg,
        &bound,
        1,
        enc.logits,
        &enc.block_feats,
        &mask,
    )
    .unwrap();
    let base = tape.value(base.logits).clone();
    for j in 0..4 {
        let mut feats = enc.block_feats.clone();
        let mut bumped = tape.value(feats[j]).clone();
        bumped.data_mut().iter_mut().for_each(|v| *v += 0.3);
        feats[j] = tape.constant(bumped);
        let out = decoder_forward(&mut tape, &cfg, &bound, 1, enc.logits, &feats, &mask).unwrap();
        let changed = tape.value(out.logits) != &base;
        assert_eq!(changed, j == 3, "encoder block {}", j + 1);
    }
}
