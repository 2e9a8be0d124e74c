//! Property tests over random shapes and seeds.

use proptest::prelude::*;
use tracegrad::lowmem::{backward_weights, forward_compressed, memory_footprint, LayerDims, LowMemConvConfig, ProbeMode, Storage};
use tracegrad::rng::{Domain, SeqRng};
use tracegrad::{
    conv_forward, gen_block_sparse, grad_input_exact, grad_weights_exact, BlockSparsity, ChannelTensor, ConvWeights,
    ImageShape, KernelOffsetMap, ProbeSeed,
};

#[derive(Debug, Clone)]
struct Case {
    side: usize,
    c_in: usize,
    c_out: usize,
    batch: usize,
    kernel: usize,
    seed: u64,
}

fn cases() -> impl Strategy<Value = Case> {
    (2usize..7, 1usize..4, 1usize..4, 1usize..4, prop_oneof![Just(1usize), Just(3)], any::<u64>())
        .prop_map(|(side, c_in, c_out, batch, kernel, seed)| Case { side, c_in, c_out, batch, kernel, seed })
}

fn draw(c: &Case) -> (ChannelTensor, ChannelTensor, ConvWeights) {
    let mut rng = SeqRng::from_u64(c.seed, Domain::Instance);
    let shape = ImageShape::square(c.side).unwrap();
    let x = ChannelTensor::from_fn(shape, c.c_in, c.batch, |_, _, _| rng.normal()).unwrap();
    let dy = ChannelTensor::from_fn(shape, c.c_out, c.batch, |_, _, _| rng.normal()).unwrap();
    let map = KernelOffsetMap::new(c.kernel).unwrap();
    let w = (0..c.c_in * c.c_out * map.len()).map(|_| rng.normal()).collect();
    (x, dy, ConvWeights::from_vec(c.c_in, c.c_out, map, w).unwrap())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn input_gradient_is_the_adjoint(c in cases()) {
        let (x, dy, w) = draw(&c);
        let lhs = conv_forward(&x, &w).unwrap().dot(&dy).unwrap();
        let rhs = x.dot(&grad_input_exact(&dy, &w).unwrap()).unwrap();
        prop_assert!(close(lhs, rhs), "{lhs} vs {rhs}");
    }

    #[test]
    fn weight_gradient_reproduces_the_bilinear_form(c in cases()) {
        let (x, dy, w) = draw(&c);
        let lhs = conv_forward(&x, &w).unwrap().dot(&dy).unwrap();
        let g = grad_weights_exact(&x, &dy, w.offset_map()).unwrap();
        let rhs: f64 = w.as_slice().iter().zip(&g.values).map(|(a, b)| a * b).sum();
        prop_assert!(close(lhs, rhs), "{lhs} vs {rhs}");
    }

    #[test]
    fn block_sparse_probes_are_consistent(n in 1usize..20, c_in in 1usize..6, r in 4usize..40, p in 0.3f64..1.0, seed in any::<u64>()) {
        let sp = BlockSparsity::uniform(c_in, p).unwrap();
        let s = ProbeSeed::new(seed, 0);
        let z = gen_block_sparse(n, c_in, r, &sp, s).unwrap();
        prop_assert_eq!(&z, &gen_block_sparse(n, c_in, r, &sp, s).unwrap());
        for ch in 0..c_in {
            let active = (0..r).filter(|&j| z.is_active(ch, j)).count();
            prop_assert_eq!(active, z.nnz(ch));
            prop_assert!(active >= 1);
            for j in (0..r).filter(|&j| !z.is_active(ch, j)) {
                prop_assert!(z.block(ch, j).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn compressed_storage_and_replay(c in cases(), r in 1usize..12) {
        let (x, dy, w) = draw(&c);
        let p = 1.0f64.min(4.0 / r as f64).max(0.5);
        for mode in [ProbeMode::Independent, ProbeMode::Multi, ProbeMode::MultiOrtho(BlockSparsity::uniform(c.c_in, p).unwrap())] {
            let cfg = LowMemConvConfig::new(r, mode.clone(), w.clone()).unwrap();
            let seed = ProbeSeed::new(c.seed, 3);
            let (y, ctx) = match forward_compressed(&x, &cfg, seed) {
                Ok(v) => v,
                // a sparse draw may leave a channel empty on every redraw
                Err(tracegrad::Error::DegenerateSparsity { .. }) => continue,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert_eq!(&y, &conv_forward(&x, &w).unwrap());
            let want = match mode {
                ProbeMode::Independent => c.c_in * c.c_out * r * c.batch,
                _ => r * c.batch,
            };
            prop_assert_eq!(ctx.stored_scalars(), want);
            prop_assert_eq!(ctx.footprint().stored as usize, want);
            let g1 = backward_weights(&ctx, &dy, &cfg).unwrap();
            let g2 = backward_weights(&forward_compressed(&x, &cfg, seed).unwrap().1, &dy, &cfg).unwrap();
            prop_assert_eq!(g1, g2);
        }
    }

    #[test]
    fn footprint_factor_is_pixels_times_channels_over_r(gamma in 0u32..10, c_in in 1usize..32, batch in 1usize..16) {
        let (pixels, r) = (1024, 1usize << gamma);
        let fp = memory_footprint(&LayerDims { pixels, c_in, c_out: 3, batch }, &Storage::Probed { r, mode: ProbeMode::Multi });
        prop_assert_eq!(fp.stored as usize, r * batch);
        prop_assert_eq!(fp.conventional as usize * r, pixels * c_in * fp.stored as usize);
    }
}
