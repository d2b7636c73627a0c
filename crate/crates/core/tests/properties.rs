use emim::attention::{
    build_affinity, emim_forward, normalize_affinity, offset_slot, slot_offset, window_slots, Boundary, EmimConfig,
    EmimParams, RelPosBias, Sampling, TokenVolume, VolumeDims, WindowSlot,
};
use emim::synthetic::translate_cyclic;
use emim::tensor::{layernorm, softmax_row, Tensor};
use emim::verify::{mac_count, Mechanism};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sampling() -> impl Strategy<Value = Sampling> {
    prop_oneof![Just(Sampling::Sliding), Just(Sampling::NonSliding)]
}

fn boundary() -> impl Strategy<Value = Boundary> {
    prop_oneof![Just(Boundary::PadConstant), Just(Boundary::ClampEdge)]
}

/// A valid (dims, config) pair with a window no wider than the frame.
fn layer_case() -> impl Strategy<Value = (VolumeDims, EmimConfig, u64)> {
    (0usize..=2, 1usize..=3, 1usize..=2, sampling(), boundary(), any::<u64>()).prop_flat_map(
        |(radius, frames, heads, sampling, boundary, seed)| {
            let side = 2 * radius + 1;
            (side..=side + 3, side..=side + 3, 1usize..=3).prop_map(move |(h, w, per_head)| {
                let dims = VolumeDims { frames, height: h, width: w, channels: heads * per_head };
                let cfg = EmimConfig { radius, heads, sampling, boundary, ..Default::default() };
                (dims, cfg, seed)
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax_row(&v).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ignores_a_common_shift(v in prop::collection::vec(-5.0f64..5.0, 1..20), c in -100.0f64..100.0) {
        let a = softmax_row(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = softmax_row(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_centers_and_scales(v in prop::collection::vec(-10.0f64..10.0, 2..32)) {
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-3));
        let n = v.len();
        let y = layernorm(&v, &vec![1.0; n], &vec![0.0; n], 1e-6).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn slot_offsets_cover_the_window(radius in 0usize..6) {
        let side = 2 * radius + 1;
        for slot in 0..side * side {
            let (dx, dy) = slot_offset(slot, radius);
            prop_assert!(dx.unsigned_abs() <= radius && dy.unsigned_abs() <= radius);
            prop_assert_eq!(offset_slot(dx, dy, radius), Some(slot));
        }
        prop_assert_eq!(offset_slot(radius as isize + 1, 0, radius), None);
    }

    #[test]
    fn window_slots_stay_in_bounds((dims, cfg, _) in layer_case(), t in 0usize..3, x in 0usize..10, y in 0usize..10) {
        let (t, x, y) = (t % dims.frames, x % dims.height, y % dims.width);
        let slots = window_slots(dims, t, x, y, &cfg);
        prop_assert_eq!(slots.len(), cfg.window_len());
        for s in &slots {
            match *s {
                WindowSlot::Source { frame, x, y } => {
                    prop_assert!(frame < dims.frames && x < dims.height && y < dims.width);
                }
                WindowSlot::Pad => prop_assert_eq!(cfg.boundary, Boundary::PadConstant),
            }
        }
    }

    #[test]
    fn normalized_rows_are_distributions((dims, cfg, seed) in layer_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = TokenVolume::from_tensor(Tensor::randn(&dims.shape(), 2.0, &mut rng)).unwrap();
        let k = TokenVolume::from_tensor(Tensor::randn(&dims.shape(), 2.0, &mut rng)).unwrap();
        let bias = RelPosBias::from_table(Tensor::randn(&[cfg.heads, cfg.window_side(), cfg.window_side()], 1.0, &mut rng)).unwrap();
        let a = normalize_affinity(&build_affinity(&q, &k, &bias, &cfg).unwrap()).unwrap();
        for h in 0..cfg.heads {
            for i in 0..dims.tokens() {
                let row = a.row(h, i);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_outputs_are_finite((dims, cfg, seed) in layer_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TokenVolume::from_tensor(Tensor::randn(&dims.shape(), 3.0, &mut rng)).unwrap();
        let p = EmimParams::init(dims.channels, &cfg, &mut rng);
        let y = emim_forward(&x, &p, &cfg).unwrap();
        prop_assert_eq!(y.dims(), dims);
        prop_assert!(y.tensor().is_finite());
    }

    #[test]
    fn cyclic_translations_compose(h in 1usize..9, w in 1usize..9, a in (-4isize..5, -4isize..5), b in (-4isize..5, -4isize..5), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = Tensor::randn(&[h * w], 1.0, &mut rng).into_data();
        let twice = translate_cyclic(&translate_cyclic(&frame, h, w, a), h, w, b);
        let once = translate_cyclic(&frame, h, w, (a.0 + b.0, a.1 + b.1));
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn windows_are_cheaper_than_dense_attention(frames in 1usize..9, side in 2usize..16, radius in 0usize..4, c in 1usize..5) {
        let dims = VolumeDims { frames, height: side, width: side, channels: 8 * c };
        let cfg = EmimConfig { radius, ..Default::default() };
        prop_assume!(cfg.window_len() < dims.tokens());
        let local = mac_count(dims, &cfg, Mechanism::Emim, true).attention();
        let dense = mac_count(dims, &cfg, Mechanism::Global, true).attention();
        prop_assert!(local < dense);
        let n = dims.tokens() as u64;
        let s2 = cfg.window_len() as u64;
        prop_assert_eq!(local, 2 * n * s2 * dims.channels as u64);
    }
}
