use proptest::prelude::*;

use otaro::analysis::{estimate_linear_map, GradientMatrixPair};
use otaro::bps::ScheduleState;
use otaro::container::{self, Container};
use otaro::laa::{AccumulatorState, UpdateDecision};
use otaro::sefp::{dequantize, quantize, quantize_with_shape, truncate_precision, BitWidthConfig, BitWidthSet, RoundingMode};
use otaro::tensor::{matmul, DenseTensor, RngState};

const TRUNC: RoundingMode = RoundingMode::TruncateTowardZero;

/// Finite values spread over many binades, with the odd exact zero.
fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            9 => (-1.0f64..1.0, -20i32..15).prop_map(|(x, e)| x * 2f64.powi(e)),
            1 => Just(0.0),
        ],
        1..max_len,
    )
}

fn group_sizes() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(3), Just(16), Just(64), 2usize..100]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn round_trip_error_is_bounded(xs in values(300), m in 3u8..=8, g in group_sizes()) {
        let t = quantize(&xs, BitWidthConfig::e5(m), g, TRUNC).unwrap();
        let d = dequantize(&t);
        for (i, (x, y)) in xs.iter().zip(&d).enumerate() {
            let e = t.unbiased_exponent(i / g).unwrap_or(-14);
            let bound = 2f64.powi(e - (m as i32 - 1));
            prop_assert!((x - y).abs() <= bound, "i={} x={} y={} bound={}", i, x, y, bound);
            prop_assert!(y.abs() <= x.abs());
        }
    }

    #[test]
    fn rne_halves_the_bound(xs in values(200), m in 3u8..=8) {
        let t = quantize(&xs, BitWidthConfig::e5(m), 32, RoundingMode::RoundHalfEven).unwrap();
        let d = dequantize(&t);
        for (i, (x, y)) in xs.iter().zip(&d).enumerate() {
            let e = t.unbiased_exponent(i / 32).unwrap_or(-14);
            prop_assert!((x - y).abs() <= 2f64.powi(e - m as i32));
        }
    }

    #[test]
    fn truncation_commutes_with_quantization(xs in values(300), hi in 4u8..=8, drop in 1u8..=5, g in group_sizes()) {
        let lo = hi.saturating_sub(drop).max(3);
        prop_assume!(lo < hi);
        let direct = quantize(&xs, BitWidthConfig::e5(lo), g, TRUNC).unwrap();
        let high = quantize(&xs, BitWidthConfig::e5(hi), g, TRUNC).unwrap();
        prop_assert_eq!(truncate_precision(&high, BitWidthConfig::e5(lo)).unwrap(), direct);
    }

    #[test]
    fn more_mantissa_bits_never_hurt(xs in values(200), g in group_sizes()) {
        let mut prev: Option<Vec<f64>> = None;
        for m in 3..=8 {
            let d = dequantize(&quantize(&xs, BitWidthConfig::e5(m), g, TRUNC).unwrap());
            let err: Vec<f64> = xs.iter().zip(&d).map(|(x, y)| (x - y).abs()).collect();
            if let Some(p) = &prev {
                for (a, b) in err.iter().zip(p) {
                    prop_assert!(a <= b);
                }
            }
            prev = Some(err);
        }
    }

    #[test]
    fn permuting_within_groups_permutes_the_encoding(xs in values(256), seed in any::<u64>(), m in 3u8..=8) {
        let g = 16;
        let n = xs.len() - xs.len() % g;
        prop_assume!(n > 0);
        let xs = &xs[..n];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = RngState::new(seed);
        for chunk in perm.chunks_mut(g) {
            rng.shuffle(chunk);
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
        let a = quantize(xs, BitWidthConfig::e5(m), g, TRUNC).unwrap();
        let b = quantize(&permuted, BitWidthConfig::e5(m), g, TRUNC).unwrap();
        prop_assert_eq!(a.shared_exponents(), b.shared_exponents());
        let da = dequantize(&a);
        let db = dequantize(&b);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(db[k].to_bits(), da[i].to_bits());
        }
    }

    #[test]
    fn container_round_trip_is_identity(
        tensors in prop::collection::vec((values(200), 1usize..4), 0..5),
        m in 3u8..=8,
        g in group_sizes(),
    ) {
        let mut c = Container::new(BitWidthConfig::e5(m), g);
        for (k, (xs, rank)) in tensors.into_iter().enumerate() {
            let mut shape = vec![1; rank];
            shape[0] = xs.len();
            let t = quantize_with_shape(&xs, shape, BitWidthConfig::e5(m), g, TRUNC).unwrap();
            c.push(format!("t{k}"), t).unwrap();
        }
        let bytes = container::to_bytes(&c).unwrap();
        let back = container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(container::to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn schedule_counts_track_selections(losses in prop::collection::vec(0.0f64..5.0, 6), steps in 6usize..200) {
        let mut s = ScheduleState::new(BitWidthSet::standard(), 5.0).unwrap();
        for t in 0..steps {
            let sel = s.select().unwrap();
            if t < 6 {
                prop_assert_eq!(sel.index, t);
            }
            s.report_loss(&sel.width, losses[sel.index]).unwrap();
            prop_assert_eq!(s.counts().iter().sum::<u64>(), s.t());
        }
    }

    #[test]
    fn accumulator_conserves_gradient_mass(
        stream in prop::collection::vec((0usize..6, -1.0f64..1.0), 1..120),
        delay in 1usize..12,
    ) {
        let widths = BitWidthSet::standard();
        let mut acc = AccumulatorState::new(vec![vec![1]], delay, AccumulatorState::default_low_set()).unwrap();
        let mut low_total = 0.0;
        let mut released = 0.0;
        let mut low_seen = 0;
        let mut low_updates = 0;
        for (w, v) in &stream {
            let width = widths.widths()[*w];
            let grads = vec![DenseTensor::from_vec(vec![*v])];
            let is_low = acc.is_low(&width);
            match acc.submit(Some(&width), grads).unwrap() {
                UpdateDecision::Apply(g) if is_low => {
                    released += g[0].data()[0];
                    low_updates += 1;
                }
                UpdateDecision::Apply(g) => prop_assert_eq!(g[0].data()[0], *v),
                UpdateDecision::Defer => prop_assert!(is_low),
            }
            if is_low {
                low_total += v;
                low_seen += 1;
            }
            prop_assert!(acc.counter() < delay);
        }
        prop_assert_eq!(low_updates, low_seen / delay);
        if let Some(g) = acc.flush() {
            released += g[0].data()[0];
        }
        prop_assert!((released - low_total).abs() < 1e-9);
    }

    #[test]
    fn least_squares_recovers_exact_maps(seed in any::<u64>(), d in 2usize..12, extra in 0usize..20) {
        let n = d + extra;
        let mut rng = RngState::new(seed);
        let g_fp = rng.normal_tensor(&[n, d], 1.0);
        let x0 = rng.normal_tensor(&[d, d], 1.0);
        let g = matmul(&g_fp, &x0).unwrap();
        let est = estimate_linear_map(&GradientMatrixPair::new(g_fp, g).unwrap()).unwrap();
        prop_assume!(est.condition < 1e6);
        let mut diff = est.x.clone();
        diff.axpy(-1.0, &x0).unwrap();
        prop_assert!(diff.norm() <= 1e-8 * x0.norm() * est.condition.max(1.0));
    }
}
