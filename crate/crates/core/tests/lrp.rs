mod common;

use common::oracle::{target_of, zplus_oracle};
use common::{random_net, random_tensor, rng, unrolled_conv};
use lrp3d::layers::{model_forward, LayerSpec, Mode};
use lrp3d::lrp::{conservation_audit, explain, fold_batchnorm, lrp_conv3d, lrp_linear, BiasPolicy, LrpConfig};
use lrp3d::Tensor;
use proptest::prelude::*;

#[test]
fn zplus_matches_independent_oracle() {
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let blocks = 1 + (case % 3) as usize;
        let (config, params) = random_net(100 + case, blocks, case % 2 == 0);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(200 + case));
        let target = target_of(&config, &params, &x);
        let cfg = LrpConfig::default();
        let map = explain(&config, &params, &x, target, &cfg).unwrap();
        let oracle = zplus_oracle(&config, &params, &x, target, cfg.stabilizer());
        let mut w = 0.0f64;
        for (a, b) in map.relevance.data().iter().zip(&oracle) {
            w = w.max((a - b).abs());
        }
        worst = worst.max(w);
    }
    assert!(worst <= 1e-8, "max deviation {worst}");
}

#[test]
fn conv_rule_equals_rule_on_unrolled_matrix() {
    let mut r = rng(7);
    for (in_ch, out_ch, stride, pad) in [(1, 1, 1, 0), (1, 2, 1, 1), (2, 3, 2, 1), (1, 2, 2, 0)] {
        let dims = [in_ch, 4, 4, 4];
        let x = random_tensor(&dims, -1.0, 1.0, &mut r);
        let w = random_tensor(&[out_ch, in_ch, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = random_tensor(&[out_ch], -0.5, 0.5, &mut r);
        let (m, out_len, in_len) = unrolled_conv(dims, w.data(), out_ch, 3, stride, pad);
        let spatial = out_len / out_ch;
        let up = random_tensor(&[out_len], -1.0, 1.0, &mut r);
        let mt = Tensor::new(vec![out_len, in_len], m).unwrap();
        let bt = Tensor::new(vec![out_len], (0..out_len).map(|i| b.data()[i / spatial]).collect()).unwrap();
        for cfg in LrpConfig::default_sweep() {
            for policy in [BiasPolicy::Exclude, BiasPolicy::Include] {
                let cfg = cfg.with_bias_policy(policy);
                let o = 2 * pad;
                let side = (4 + o - 3) / stride + 1;
                let up4 = up.reshape(&[out_ch, side, side, side]).unwrap();
                let conv = lrp_conv3d(&x, &w, &b, &up4, stride, pad, &cfg).unwrap();
                let flat = x.reshape(&[in_len]).unwrap();
                let lin = lrp_linear(&flat, &mt, &bt, &up, &cfg).unwrap();
                let diff = conv
                    .relevance
                    .reshape(&[in_len])
                    .unwrap()
                    .max_abs_diff(&lin.relevance)
                    .unwrap();
                assert!(diff <= 1e-10, "stride {stride} pad {pad}: {diff}");
                assert!((conv.dropped - lin.dropped).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn conservation_on_zero_bias_networks() {
    for case in 0..20u64 {
        let blocks = 1 + (case % 3) as usize;
        let (config, params) = random_net(300 + case, blocks, true);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(400 + case));
        let target = (case % 2) as usize;
        for cfg in LrpConfig::default_sweep() {
            let map = explain(&config, &params, &x, target, &cfg).unwrap();
            let report = conservation_audit(&map);
            assert!(report.relative_leak.abs() <= 1e-6, "case {case}: {report:?}");
            assert_eq!(report.layers.len(), config.layers.len());
            assert_eq!(report.bias_absorbed, 0.0);
            assert!(report.layers.iter().all(|l| l.relative_leak <= 1e-8), "{report:?}");
        }
    }
}

#[test]
fn exclude_policy_reports_bias_share() {
    for case in 0..5u64 {
        let (config, params) = random_net(500 + case, 2, false);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(600 + case));
        for cfg in LrpConfig::default_sweep() {
            let ex = explain(&config, &params, &x, 0, &cfg).unwrap();
            let inc = explain(&config, &params, &x, 0, &cfg.with_bias_policy(BiasPolicy::Include)).unwrap();
            let ex_r = conservation_audit(&ex);
            let inc_r = conservation_audit(&inc);
            assert!(ex_r.bias_absorbed.is_finite() && ex_r.bias_absorbed != 0.0);
            let scale = ex.logit.abs().max(1e-12);
            assert!(((ex_r.bias_absorbed - (inc_r.total_leak - inc_r.dropped)) / scale).abs() <= 1e-6);
            assert!(
                ((ex.total() - inc.total()) - inc_r.bias_absorbed - (inc_r.dropped - ex_r.dropped)).abs() / scale
                    <= 1e-6
            );
        }
    }
}

#[test]
fn folding_preserves_inference() {
    for case in 0..5u64 {
        let (config, params) = random_net(700 + case, 1 + (case % 3) as usize, false);
        let (fc, fp) = fold_batchnorm(&config, &params).unwrap();
        assert!(fc.layers.iter().all(|l| !matches!(l, LayerSpec::BatchNorm { .. })));
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(800 + case));
        let a = model_forward(&config, &params, &x, Mode::Infer).unwrap().logits;
        let b = model_forward(&fc, &fp, &x, Mode::Infer).unwrap().logits;
        let scale = a.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        assert!(a.max_abs_diff(&b).unwrap() / scale <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn positive_rule_gives_nonnegative_relevance(net_seed in 0u64..1000, input_seed in 0u64..1000, blocks in 1usize..3) {
        let (config, params) = random_net(net_seed, blocks, net_seed % 2 == 0);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(input_seed));
        let logits = model_forward(&config, &params, &x, Mode::Infer).unwrap().logits;
        let target = (0..2).find(|&t| logits.data()[t] >= 0.0);
        prop_assume!(target.is_some());
        let map = explain(&config, &params, &x, target.unwrap(), &LrpConfig::default()).unwrap();
        prop_assert!(map.relevance.data().iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn first_layer_shares_ignore_input_scale(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let x = random_tensor(&[1, 4, 4, 4], -1.0, 1.0, &mut r);
        let w = random_tensor(&[2, 1, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::zeros(&[2]);
        let up = random_tensor(&[2, 4, 4, 4], 0.0, 1.0, &mut r);
        for beta in [0.0, 1.0, 2.0] {
            // the stabilizer is the only term that does not scale with the input
            let cfg = LrpConfig::with_beta(beta).unwrap().stabilized(f64::MIN_POSITIVE).unwrap();
            let base = lrp_conv3d(&x, &w, &b, &up, 1, 1, &cfg).unwrap().relevance;
            let scaled = lrp_conv3d(&x.scale(c).unwrap(), &w, &b, &up, 1, 1, &cfg).unwrap().relevance;
            let (sb, ss) = (base.sum(), scaled.sum());
            for (p, q) in base.data().iter().zip(scaled.data()) {
                prop_assert!((p / sb - q / ss).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn conservation_holds_for_random_pairs(seed in 0u64..1000, beta in 0.0f64..4.0) {
        let (config, params) = random_net(seed, 1, true);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(seed + 1));
        let cfg = LrpConfig::with_beta(beta).unwrap();
        let map = explain(&config, &params, &x, (seed % 2) as usize, &cfg).unwrap();
        prop_assert!(conservation_audit(&map).relative_leak.abs() <= 1e-6);
    }
}
