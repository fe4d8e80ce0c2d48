use proptest::prelude::*;

use vizgen::adversarial::{perturb, perturb_unit};
use vizgen::io::{decode_checkpoint, encode_checkpoint, SourceRange};
use vizgen::tensor::{ops, ParamSet, Parameter};
use vizgen::Tensor;

fn finite_vec(max: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-50.0f32..50.0, 1..max)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in finite_vec(32)) {
        let p = ops::softmax(&Tensor::from_vec(logits)).unwrap();
        let sum: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn argmax_is_first_maximum(values in finite_vec(16)) {
        let t = Tensor::from_vec(values.clone());
        let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(t.argmax(), values.iter().position(|&v| v == max).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5),
        seed in any::<u64>(),
    ) {
        let mut set = ParamSet::new();
        for (i, shape) in shapes.iter().enumerate() {
            let t = Tensor::random_normal(shape, seed.wrapping_add(i as u64), 3.0).unwrap();
            set.push(Parameter::new(format!("p{i}"), t)).unwrap();
        }
        let bytes = encode_checkpoint(&set);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for (p, r) in set.iter().zip(&back) {
            prop_assert_eq!(p.name(), r.name.as_str());
            prop_assert_eq!(p.value().shape(), r.tensor.shape());
            let a: Vec<u32> = p.value().data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = r.tensor.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn perturbation_stays_in_range(
        pixels in prop::collection::vec(0.0f32..=255.0, 1..50),
        e in 0.0f32..300.0,
        seed in any::<u64>(),
    ) {
        let img = Tensor::from_vec(pixels.clone());
        let v = Tensor::random_uniform(&[pixels.len()], seed, -1.0, 1.0).unwrap();
        let out = perturb(&img, &v, e, 255.0).unwrap();
        prop_assert!(out.data().iter().all(|&x| (0.0..=255.0).contains(&x)));
        prop_assert_eq!(perturb(&img, &v, 0.0, 255.0).unwrap(), img.clone());
        let unit = img.map(|x| x / 255.0);
        let out = perturb_unit(&unit, &v, e).unwrap();
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn byte_mapping_is_monotone_and_clamped(a in -2.0f32..2.0, b in -2.0f32..2.0) {
        for range in [SourceRange::Unit, SourceRange::Signed] {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(range.to_byte(lo) <= range.to_byte(hi));
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv(
        c_in in 1usize..3, c_out in 1usize..3, h in 3usize..6, w in 3usize..6,
        k in 1usize..4, stride in 1usize..3, padding in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * padding && k <= w + 2 * padding && padding < k);
        let x = Tensor::random_normal(&[c_in, h, w], seed, 1.0).unwrap();
        let kern = Tensor::random_normal(&[c_out, c_in, k, k], seed ^ 1, 1.0).unwrap();
        let y = ops::conv2d(&x, &kern, stride, padding).unwrap();
        let u = Tensor::random_normal(y.shape(), seed ^ 2, 1.0).unwrap();
        // <conv(x), u> == <x, convT(u)> with the same kernels read as [c_out, c_in, k, k]
        let back = ops::conv2d_transpose(&u, &kern, stride, padding).unwrap();
        prop_assume!(back.shape() == x.shape());
        let lhs: f64 = y.data().iter().zip(u.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-3 * (1.0 + lhs.abs()));
    }
}
