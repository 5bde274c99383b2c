use mde_core::attention::{
    cross_attention, implicit_segmentation, inject, resize_bilinear, resize_bilinear_adjoint, segmentation_adjoint,
};
use mde_core::tokens::{align_tokens, Vocabulary};
use mde_core::types::AttentionStack;
use mde_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stack(rng: &mut ChaCha8Rng, tokens: usize) -> AttentionStack<f64> {
    let mut maps = Vec::new();
    let (mut layers, mut heads) = (Vec::new(), Vec::new());
    for (layer, side) in [(0, 4), (1, 2)] {
        for head in 0..2 {
            let mut data = Vec::with_capacity(side * side * tokens);
            for _ in 0..side * side {
                let row: Vec<f64> = (0..tokens).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|v| v / s));
            }
            maps.push(Tensor::from_vec(&[side, side, tokens], data).unwrap());
            layers.push(layer);
            heads.push(head);
        }
    }
    AttentionStack::new(maps, layers, heads).unwrap()
}

fn prompt(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let n = rng.gen_range(1..6);
    (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

#[test]
fn injected_columns_are_bit_identical_to_their_sources() {
    let vocab = Vocabulary::toy();
    let words: Vec<&str> = vocab.tokens().iter().skip(2).map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let src = vocab.tokenize(&prompt(&mut rng, &words)).unwrap();
        let tgt = vocab.tokenize(&prompt(&mut rng, &words)).unwrap();
        let al = align_tokens(&src, &tgt).unwrap();
        let recon = random_stack(&mut rng, src.len());
        let edit = random_stack(&mut rng, tgt.len());
        let out = inject(&recon, &edit, &al).unwrap();
        for i in 0..out.len() {
            for t in 0..tgt.len() {
                let want = match al.source_of(t) {
                    Some(s) => recon.column(i, s),
                    None => edit.column(i, t),
                };
                let got = out.column(i, t);
                assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
}

#[test]
fn identical_prompts_inject_the_whole_stack() {
    let vocab = Vocabulary::toy();
    let ids = vocab.tokenize("a red circle and a blue square").unwrap();
    let al = align_tokens(&ids, &ids).unwrap();
    assert!(al.new_tokens.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recon = random_stack(&mut rng, ids.len());
    let edit = random_stack(&mut rng, ids.len());
    assert_eq!(inject(&recon, &edit, &al).unwrap(), recon);
}

#[test]
fn attention_rows_from_the_kernel_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::from_vec(&[20, 8], (0..160).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let k = Tensor::from_vec(&[7, 8], (0..56).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let a: Tensor<f64> = cross_attention(&q, &k).unwrap();
    for row in a.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn resize_adjoint_satisfies_the_dot_product_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, w, oh, ow) in [(8, 8, 16, 16), (16, 16, 16, 16), (4, 6, 9, 5)] {
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..oh * ow).map(|_| rng.gen()).collect();
        let ax = resize_bilinear(&x, h, w, oh, ow);
        let aty = resize_bilinear_adjoint(&y, h, w, oh, ow);
        let l: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let r: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((l - r).abs() < 1e-12 * l.abs().max(1.0));
    }
}

#[test]
fn segmentation_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let stack = random_stack(&mut rng, 5);
    let target = (8, 8);
    let weights: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |s: &AttentionStack<f64>| -> f64 {
        let seg = implicit_segmentation(s, &[2, 3], target).unwrap();
        seg.map.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let mut grads: Vec<Tensor<f64>> = stack.maps.iter().map(|m| Tensor::zeros(m.shape())).collect();
    segmentation_adjoint(&stack, &[2, 3], &weights, target, &mut grads);
    for i in 0..stack.len() {
        for k in [2, 3, 7, 8, 13] {
            if k >= stack.maps[i].len() {
                continue;
            }
            let mut up = stack.clone();
            up.maps[i].data_mut()[k] += 1e-6;
            let fd = (f(&up) - f(&stack)) / 1e-6;
            assert!((fd - grads[i].data()[k]).abs() < 1e-7, "map {i} entry {k}");
        }
    }
}

proptest! {
    #[test]
    fn segmentation_is_invariant_to_map_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(&mut rng, 4);
        let mut order: Vec<usize> = (0..stack.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = AttentionStack::new(
            order.iter().map(|&i| stack.maps[i].clone()).collect(),
            order.iter().map(|&i| stack.layer_ids[i]).collect(),
            order.iter().map(|&i| stack.head_ids[i]).collect(),
        ).unwrap();
        let a = implicit_segmentation(&stack, &[1], (4, 4)).unwrap();
        let b = implicit_segmentation(&shuffled, &[1], (4, 4)).unwrap();
        for (x, y) in a.map.iter().zip(&b.map) {
            prop_assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn alignment_partitions_target_tokens(a in prop::collection::vec(2usize..11, 0..8), b in prop::collection::vec(2usize..11, 0..8)) {
        let wrap = |v: &[usize]| [&[0usize][..], v, &[1usize][..]].concat();
        let (src, tgt) = (wrap(&a), wrap(&b));
        let al = align_tokens(&src, &tgt).unwrap();
        al.validate().unwrap();
        let shared_content = al.shared_content().count();
        prop_assert_eq!(shared_content + al.new_tokens.len(), b.len());
        let back = align_tokens(&tgt, &src).unwrap();
        prop_assert_eq!(back.shared.len(), al.shared.len());
        prop_assert_eq!(align_tokens(&src, &tgt).unwrap(), al);
    }
}
