use longiseg_model::{BackboneConfig, Mode, Network, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 4], values: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, values.iter().cycle().take(n).copied().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_distributions(
        seed in any::<u64>(),
        h in 1usize..11,
        w in 1usize..11,
        values in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let net = Network::<f64>::new(BackboneConfig::tiny(seed)).unwrap();
        let out = net.predict(&tensor([1, 8, h, w], &values)).unwrap();
        prop_assert_eq!(out.shape(), [1, 3, h, w]);
        for i in 0..h * w {
            let p: Vec<f64> = (0..3).map(|c| out.plane(0, c)[i]).collect();
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn batch_order_permutes_outputs(seed in any::<u64>(), values in prop::collection::vec(-1.0f64..1.0, 3 * 8 * 36)) {
        let net = Network::<f64>::new(BackboneConfig::tiny(seed)).unwrap();
        let batch = tensor([3, 8, 6, 6], &values);
        let out = net.predict(&batch).unwrap();
        let samples: Vec<Tensor<f64>> = (0..3)
            .map(|s| Tensor::from_vec([1, 8, 6, 6], batch.sample(s).to_vec()).unwrap())
            .collect();
        let permuted = Tensor::stack(&[samples[2].clone(), samples[0].clone(), samples[1].clone()]).unwrap();
        let pout = net.predict(&permuted).unwrap();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            prop_assert_eq!(pout.sample(dst), out.sample(src));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let values: Vec<f32> = (0..2 * 8 * 20 * 20).map(|v| ((v * 37) % 101) as f32 / 101.0).collect();
    let x = Tensor::from_vec([2, 8, 20, 20], values).unwrap();
    let a = Network::<f32>::new(BackboneConfig::desk(17)).unwrap();
    let b = Network::<f32>::new(BackboneConfig::desk(17)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    let (ga, oa) = a.forward(&x, Mode::Train, true).unwrap();
    let (gb, ob) = b.forward(&x, Mode::Train, true).unwrap();
    assert_eq!(ga.value(oa), gb.value(ob));
}

#[test]
fn reference_network_handles_odd_sizes() {
    let net = Network::<f32>::new(BackboneConfig::fc_densenet56(1)).unwrap();
    let x = Tensor::from_vec([1, 8, 37, 45], vec![0.5; 8 * 37 * 45]).unwrap();
    let out = net.predict(&x).unwrap();
    assert_eq!(out.shape(), [1, 3, 37, 45]);
}
