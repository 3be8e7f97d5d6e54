use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use infostyler::archive::Archive;
use infostyler::bottleneck::mi_scalar;
use infostyler::evaluation::{gram_matrix, ssim_plane};
use infostyler::tensor::{channel_stats, concat_channels, instance_norm, resize_tensor, to_f64_vec, FeatureMap, Level};
use infostyler::transfer::InterpolationWeights;

fn map(values: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(Tensor::from_vec(values, (1, c, h, w), &Device::Cpu).unwrap(), Level::Relu2_1).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stats_shift_and_scale(v in values(2 * 3 * 4), shift in -5.0f64..5.0, scale in 0.1f64..4.0) {
        let base = channel_stats(&map(v.clone(), 2, 3, 4)).unwrap();
        let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
        let st = channel_stats(&map(moved, 2, 3, 4)).unwrap();
        let (m0, s0) = (base.mean_vec().unwrap(), base.std_vec().unwrap());
        let (m1, s1) = (st.mean_vec().unwrap(), st.std_vec().unwrap());
        for c in 0..2 {
            prop_assert!((m1[0][c] - (m0[0][c] * scale + shift)).abs() < 1e-9);
            prop_assert!((s1[0][c] - s0[0][c] * scale).abs() < 1e-9);
            prop_assert!(s1[0][c] >= 0.0);
        }
    }

    #[test]
    fn concat_then_split(a in values(2 * 9), b in values(3 * 9)) {
        let joined = concat_channels(&[map(a.clone(), 2, 3, 3), map(b.clone(), 3, 3, 3)]).unwrap();
        prop_assert_eq!(joined.channels(), 5);
        prop_assert_eq!(to_f64_vec(&joined.tensor().narrow(1, 0, 2).unwrap()).unwrap(), a);
        prop_assert_eq!(to_f64_vec(&joined.tensor().narrow(1, 2, 3).unwrap()).unwrap(), b);
    }

    #[test]
    fn resize_keeps_constants(c in -3.0f64..3.0, h in 1usize..9, w in 1usize..9, th in 1usize..17, tw in 1usize..17) {
        let x = (Tensor::ones((1, 2, h, w), DType::F64, &Device::Cpu).unwrap() * c).unwrap();
        let y = resize_tensor(&x, th, tw).unwrap();
        prop_assert_eq!(y.dims(), &[1, 2, th, tw]);
        prop_assert!(to_f64_vec(&y).unwrap().iter().all(|&v| v == c));
    }

    #[test]
    fn resize_same_size_is_identity(v in values(2 * 5 * 3)) {
        let x = Tensor::from_vec(v.clone(), (1, 2, 5, 3), &Device::Cpu).unwrap();
        prop_assert_eq!(to_f64_vec(&resize_tensor(&x, 5, 3).unwrap()).unwrap(), v);
    }

    #[test]
    fn resize_stays_within_range(v in values(4 * 4), th in 1usize..12, tw in 1usize..12) {
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let x = Tensor::from_vec(v, (1, 1, 4, 4), &Device::Cpu).unwrap();
        for y in to_f64_vec(&resize_tensor(&x, th, tw).unwrap()).unwrap() {
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn instance_norm_centres(v in values(3 * 16)) {
        let x = Tensor::from_vec(v, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let n = instance_norm(&x).unwrap();
        let st = channel_stats(&FeatureMap::new(n, Level::Relu2_1).unwrap()).unwrap();
        for m in &st.mean_vec().unwrap()[0] {
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn mi_non_negative(alpha in 0.0f64..1.0, f in -50.0f64..50.0) {
        prop_assert!(mi_scalar(alpha, f) >= 0.0);
    }

    #[test]
    fn mi_monotone_in_alpha(a in 0.0f64..1.0, b in 0.0f64..1.0, f in -5.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mi_scalar(lo, f) <= mi_scalar(hi, f) + 1e-12);
    }

    #[test]
    fn mi_even_in_f(alpha in 0.0f64..1.0, f in -5.0f64..5.0) {
        prop_assert_eq!(mi_scalar(alpha, f), mi_scalar(alpha, -f));
    }

    #[test]
    fn weights_validation(w in prop::collection::vec(0.0f64..1.0, 1..5)) {
        let s: f64 = w.iter().sum();
        prop_assert_eq!(InterpolationWeights::new(w).is_ok(), (s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normalized_weights_accepted(w in prop::collection::vec(0.01f64..1.0, 1..5)) {
        let s: f64 = w.iter().sum();
        prop_assert!(InterpolationWeights::new(w.iter().map(|x| x / s).collect()).is_ok());
    }

    #[test]
    fn gram_is_symmetric_psd_diagonal(v in values(3 * 4)) {
        let g = to_f64_vec(&gram_matrix(&Tensor::from_vec(v, (1, 3, 2, 2), &Device::Cpu).unwrap()).unwrap()).unwrap();
        for i in 0..3 {
            prop_assert!(g[i * 3 + i] >= 0.0);
            for j in 0..3 {
                prop_assert!((g[i * 3 + j] - g[j * 3 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssim_symmetric_and_bounded(a in prop::collection::vec(0.0f64..1.0, 144), b in prop::collection::vec(0.0f64..1.0, 144)) {
        let ab = ssim_plane(&a, &b, 12, 12).unwrap();
        let ba = ssim_plane(&b, &a, 12, 12).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn archive_roundtrip_is_bit_exact(v in prop::collection::vec(any::<f32>(), 1..40)) {
        let n = v.len();
        let mut a = Archive::new(serde_json::json!({"k": n}));
        a.insert("t", Tensor::from_vec(v.clone(), n, &Device::Cpu).unwrap());
        let bytes = a.to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        let got: Vec<f32> = back.get("t").unwrap().to_vec1().unwrap();
        prop_assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
