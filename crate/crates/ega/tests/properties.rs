//! Property tests over randomized inputs.

use proptest::prelude::*;

use ega::balance::eccentric_vector;
use ega::metrics::rmse;
use ega::synth::{gen_record, read_record, write_record_string, SynthConfig};

proptest! {
    #[test]
    fn eccentric_weights_sum_to_n_and_stay_positive(
        lr in prop::collection::vec(-6.0f64..6.0, 2..8),
        t in 0.05f64..5.0,
    ) {
        let v = eccentric_vector(&lr, t).unwrap();
        let sum: f64 = v.weights().iter().sum();
        prop_assert!((sum - lr.len() as f64).abs() <= 1e-12);
        prop_assert!(v.weights().iter().all(|&w| w > 0.0));
        for i in 0..lr.len() {
            for j in 0..lr.len() {
                if lr[i] > lr[j] {
                    prop_assert!(v.weights()[i] > v.weights()[j]);
                }
            }
        }
    }

    #[test]
    fn rmse_symmetry_and_triangle(
        a in prop::collection::vec(-10.0f64..10.0, 4..32),
        bc in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4..32),
    ) {
        let n = a.len().min(bc.len());
        let a = &a[..n];
        let b: Vec<f64> = bc[..n].iter().map(|p| p.0).collect();
        let c: Vec<f64> = bc[..n].iter().map(|p| p.1).collect();
        let ab = rmse(a, &b).unwrap();
        prop_assert_eq!(ab.to_bits(), rmse(&b, a).unwrap().to_bits());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(rmse(a, a).unwrap(), 0.0);
        let ac = rmse(a, &c).unwrap();
        let cb = rmse(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn record_container_round_trips_any_generated_record(seed in any::<u64>(), k in 1usize..12) {
        let record = gen_record(seed, &SynthConfig::default(), k).unwrap();
        let text = write_record_string(&record).unwrap();
        let back = read_record(text.as_bytes()).unwrap();
        prop_assert_eq!(record.radar.len(), back.radar.len());
        for (x, y) in record.radar.iter().zip(&back.radar) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in record.ecg.iter().zip(&back.ecg) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in record.anchors.iter().zip(&back.anchors) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in record.ppis.iter().zip(&back.ppis) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
