use nalgebra::DMatrix;
use proptest::prelude::*;

use seqrot::io::{decode, encode, Tensor, TensorData};
use seqrot::quant::{rtn_quantize, Clip, GroupSize, QuantSpec};
use seqrot::rotation::{rotate_weight, RotationChoice};
use seqrot::transform::{fwht, Ordering};

fn choice() -> impl Strategy<Value = RotationChoice> {
    prop_oneof![
        Just(RotationChoice::GH),
        Just(RotationChoice::GW),
        Just(RotationChoice::LH),
        Just(RotationChoice::GSR),
    ]
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_apply_matches_dense(
        c in choice(),
        log_n in 1u32..8,
        log_g in 1u32..8,
        seed in any::<u64>(),
        x in prop::collection::vec(-5.0f64..5.0, 128),
    ) {
        let n = 1usize << log_n;
        let g = 1usize << log_g.min(log_n);
        let m = c.build_structured(n, g, seed).unwrap().unwrap();
        let dense = m.to_dense();
        let v = nalgebra::DVector::from_column_slice(&x[..n]);

        let mut fast = x[..n].to_vec();
        m.apply(&mut fast).unwrap();
        let want = &dense * &v;
        for (a, b) in fast.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }

        let mut fast_t = x[..n].to_vec();
        m.apply_transpose(&mut fast_t).unwrap();
        let want_t = dense.transpose() * &v;
        for (a, b) in fast_t.iter().zip(want_t.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_undoes_apply(
        c in choice(),
        log_n in 1u32..10,
        seed in any::<u64>(),
        x in prop::collection::vec(-5.0f64..5.0, 512),
    ) {
        let n = 1usize << log_n;
        let m = c.build_structured(n, 16, seed).unwrap().unwrap();
        let mut y = x[..n].to_vec();
        m.apply(&mut y).unwrap();
        m.apply_transpose(&mut y).unwrap();
        for (a, b) in y.iter().zip(&x[..n]) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sequency_fwht_is_walsh_product(
        log_n in 1u32..8,
        x in prop::collection::vec(-5.0f64..5.0, 128),
    ) {
        let n = 1usize << log_n;
        let w = seqrot::transform::walsh(n).unwrap().to_dense();
        let got = fwht(&x[..n], Ordering::Sequency).unwrap();
        let want = w * nalgebra::DVector::from_column_slice(&x[..n]);
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rtn_stays_within_half_step(
        w in matrix(3, 16),
        bits in 2u8..9,
        sym in any::<bool>(),
    ) {
        let spec = QuantSpec::new(bits, GroupSize::Fixed(4), sym, Clip::None).unwrap();
        let q = rtn_quantize(&w, &spec).unwrap();
        prop_assert!(q.codes_in_range());
        let back = q.dequantize();
        for r in 0..3 {
            for c in 0..16 {
                let scale = q.scales()[r * 4 + c / 4];
                prop_assert!(
                    (w[(r, c)] - back[(r, c)]).abs() <= 0.5 * scale * (1.0 + 1e-9) + 1e-12,
                    "({r},{c}) {} -> {} scale {scale}",
                    w[(r, c)],
                    back[(r, c)]
                );
            }
        }
    }

    #[test]
    fn rotate_and_back_is_identity(
        c in choice(),
        w in matrix(16, 8),
        seed in any::<u64>(),
    ) {
        let f = c.build(16, 4, seed).unwrap().unwrap();
        let r = c.build(8, 4, seed ^ 1).unwrap().unwrap();
        let rotated = rotate_weight(&w, Some(&f), Some(&r)).unwrap();
        let back = &f * rotated * r.transpose();
        prop_assert!((back - w).amax() < 1e-10);
    }

    #[test]
    fn tensor_bytes_round_trip(
        dims in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
        dtype in 0u8..3,
    ) {
        let len: usize = dims.iter().product();
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state
        };
        let data = match dtype {
            0 => TensorData::F64((0..len).map(|_| f64::from_bits(next())).collect()),
            1 => TensorData::F32((0..len).map(|_| f32::from_bits(next() as u32)).collect()),
            _ => TensorData::I8((0..len).map(|_| next() as i8).collect()),
        };
        let t = Tensor::new(dims, data).unwrap();
        let meta = serde_json::json!({"seed": seed});
        let (back, back_meta) = decode(&encode(&t, &meta).unwrap()).unwrap();
        prop_assert_eq!(back_meta, meta);
        // NaN payloads must survive, so compare bit patterns
        prop_assert_eq!(encode(&back, &serde_json::Value::Null).unwrap(), encode(&t, &serde_json::Value::Null).unwrap());
    }
}
