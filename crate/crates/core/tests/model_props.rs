//! Property tests for the end-to-end network: shape contract, output sign,
//! modality robustness, determinism and parameter layout.

use mafnet_core::autodiff::Tape;
use mafnet_core::model::{describe, MafNet, ModelConfig, OUTPUT_STRIDE};
use mafnet_core::params::Init;
use mafnet_core::Tensor;
use proptest::prelude::*;

fn inputs(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut init = Init::new(seed);
    (init.normal(&[3, h, w], 0.5), init.normal(&[1, h, w], 0.5))
}

fn check_contract(cfg: &ModelConfig, seed: u64, h: usize, w: usize) -> Result<(), TestCaseError> {
    let (model, store) = MafNet::init::<f32>(cfg, seed).unwrap();
    let (rgb, thermal) = inputs(seed, h, w);
    let mut tape = Tape::new();
    tape.bind(&store);
    let (r, t) = (tape.constant(rgb), tape.constant(thermal));
    let pairs = model.encoder_forward(&mut tape, r, t, None).unwrap();
    let c = cfg.backbone.stage_channels;
    for (k, pair) in pairs.iter().enumerate() {
        let scale = OUTPUT_STRIDE << k;
        let expected = [1, c[k + 2], h / scale, w / scale];
        prop_assert_eq!(tape.value(pair.rgb).shape(), &expected[..]);
        prop_assert_eq!(tape.value(pair.thermal).shape(), &expected[..]);
    }
    let d = model.mma_forward(&mut tape, &pairs).unwrap();
    let d = tape.value(d);
    prop_assert_eq!(d.shape(), &[1, 1, h / OUTPUT_STRIDE, w / OUTPUT_STRIDE][..]);
    prop_assert!(d.all_finite());
    prop_assert!(d.data().iter().all(|&v| v >= 0.0));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn toy_shape_contract_and_nonnegative_output(seed in any::<u64>(), gh in 1usize..=3, gw in 1usize..=3) {
        check_contract(&ModelConfig::toy(), seed, 64 * gh, 64 * gw)?;
    }

    #[test]
    fn zero_thermal_input_gives_a_valid_map(seed in any::<u64>()) {
        let (model, store) = MafNet::init::<f32>(&ModelConfig::toy(), seed).unwrap();
        let (rgb, _) = inputs(seed, 64, 64);
        let d = model.predict(&store, &rgb, &Tensor::zeros([1, 64, 64])).unwrap();
        prop_assert!(d.all_finite());
        prop_assert!(d.data().iter().all(|&v| v >= 0.0));
        let d = model.predict(&store, &Tensor::zeros([3, 64, 64]), &Tensor::zeros([1, 64, 64])).unwrap();
        prop_assert!(d.all_finite());
    }

    #[test]
    fn forward_is_bitwise_repeatable(seed in any::<u64>()) {
        let (model, store) = MafNet::init::<f32>(&ModelConfig::toy(), seed).unwrap();
        let (rgb, thermal) = inputs(seed ^ 7, 64, 64);
        let a = model.predict(&store, &rgb, &thermal).unwrap();
        let (model2, store2) = MafNet::init::<f32>(&ModelConfig::toy(), seed).unwrap();
        let b = model2.predict(&store2, &rgb, &thermal).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn negative_biases_silence_the_output(seed in any::<u64>()) {
        let (model, mut store) = MafNet::init::<f32>(&ModelConfig::toy(), seed).unwrap();
        let biases: Vec<_> = store.iter().filter(|(_, n, _)| n.ends_with(".bias")).map(|(id, _, _)| id).collect();
        for id in biases {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = -1e6);
        }
        let (rgb, thermal) = inputs(seed, 64, 64);
        let d = model.predict(&store, &rgb, &thermal).unwrap();
        prop_assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_layout_depends_only_on_config(a in any::<u64>(), b in any::<u64>()) {
        let (_, sa) = MafNet::init::<f32>(&ModelConfig::toy(), a).unwrap();
        let (_, sb) = MafNet::init::<f32>(&ModelConfig::toy(), b).unwrap();
        prop_assert_eq!(describe(&sa), describe(&sb));
    }
}

#[test]
fn paper_scale_shape_contract() {
    for (h, w) in [(64, 64), (64, 128)] {
        check_contract(&ModelConfig::paper_scale(), 1, h, w).unwrap();
    }
}
