use proptest::prelude::*;

use tidn_core::imaging::{radon, AcquisitionConfig};
use tidn_core::numerics::{ImageGrid, RandomStream};
use tidn_core::phantom::insert_signal;
use tidn_core::training::hybrid_loss;

fn acquisition() -> AcquisitionConfig {
    AcquisitionConfig { n_views: 12, n_bins: 24, incident_flux: 500.0, normalization: 10.0, count_floor: 1 }
}

fn image(stream: &mut RandomStream) -> ImageGrid {
    ImageGrid::new(16, 16, (0..256).map(|_| stream.uniform()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radon_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut s = RandomStream::new(seed);
        let (f, g) = (image(&mut s), image(&mut s));
        let mix = ImageGrid::new(16, 16, f.data().iter().zip(g.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let (rf, rg, rm) = (radon(&f, &acquisition()).unwrap(), radon(&g, &acquisition()).unwrap(), radon(&mix, &acquisition()).unwrap());
        for i in 0..rm.data.len() {
            prop_assert!((rm.data[i] - (a * rf.data[i] + b * rg.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn hybrid_loss_lies_between_its_terms(p in 0.0f64..10.0, t in -10.0f64..10.0, lambda in 0.0f64..=1.0) {
        let l = hybrid_loss(p, t, lambda).unwrap();
        prop_assert!(l >= p.min(t) - 1e-12 && l <= p.max(t) + 1e-12);
    }

    #[test]
    fn derived_streams_are_reproducible_and_distinct(seed in any::<u64>(), tag in 0u64..1000) {
        let base = RandomStream::new(seed);
        let (mut a, mut b, mut c) = (base.derive(tag), base.derive(tag), base.derive(tag + 1));
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        prop_assert_eq!(&xa, &xb);
        prop_assert_ne!(xa, xc);
    }

    #[test]
    fn signal_insertion_adds_a_peaked_bump(
        row in 2.0f64..13.0, col in 2.0f64..13.0, amplitude in 0.01f64..2.0, width in 0.5f64..4.0,
    ) {
        let bg = ImageGrid::filled(16, 16, 0.2);
        let img = insert_signal(&bg, (row, col), amplitude, width).unwrap();
        let (r, c) = (row.round() as usize, col.round() as usize);
        let peak = img.get(r, c) - 0.2;
        for i in 0..16 {
            for j in 0..16 {
                let d = img.get(i, j) - 0.2;
                prop_assert!(d >= 0.0 && d <= amplitude + 1e-12);
                prop_assert!(d <= peak + 1e-12);
            }
        }
    }
}
