//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Pass substrings as arguments to run only matching criteria. The process
//! exits nonzero when a criterion outside `KNOWN_FAILURES` fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::gradcheck::{check, setup, STEP, TOLERANCE, WEIGHTS};
use common::oracle::{target_of, zplus_oracle};
use common::{random_net, random_tensor, rng, unrolled_conv};
use lrp3d::layers::{backward_batch, forward_batch, model_backward, model_forward, Mode, ModelConfig, ParamSet};
use lrp3d::lrp::{aggregate_group, conservation_audit, explain, lrp_conv3d, lrp_linear, BiasPolicy, LrpConfig};
use lrp3d::modelstore::{decode_model, encode_model};
use lrp3d::trainer::{
    adam_update, evaluate, fit, kfold, stratified_split, weighted_cross_entropy, AdamConfig, AdamState,
    CyclicalSchedule, Dataset, LrPolicy, TrainConfig,
};
use lrp3d::volume::{
    default_appearances, phantom_dataset, read_nifti, write_nifti, PreprocessConfig, Volume, DEFAULT_PHANTOM_DIMS,
};
use lrp3d::Tensor;
use rand::Rng;

/// Criteria that fail for a documented reason; see the README.
const KNOWN_FAILURES: &[&str] = &["localization"];

const PHANTOMS_PER_CLASS: usize = 60;
const PHANTOM_SEED: u64 = 1;
const MIN_ACCURACY: f64 = 0.90;
const MAX_RUNTIME: Duration = Duration::from_secs(600);
const MIN_INSIDE_SHARE: f64 = 0.60;
const TOP_FRACTION: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Experiment {
    config: ModelConfig,
    params: ParamSet,
    test: Dataset,
    accuracy: f64,
    elapsed: Duration,
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let set = phantom_dataset(
            PHANTOMS_PER_CLASS,
            DEFAULT_PHANTOM_DIMS,
            PHANTOM_SEED,
            &default_appearances(),
        )
        .unwrap();
        let data = set
            .dataset(&PreprocessConfig {
                target_dims: DEFAULT_PHANTOM_DIMS,
                ..Default::default()
            })
            .unwrap();
        let [d, h, w] = DEFAULT_PHANTOM_DIMS;
        let standard = ModelConfig::standard([1, d, h, w]).unwrap();
        let config = ModelConfig::new(standard.input_shape, standard.layers, set.class_names.clone()).unwrap();
        let (train_idx, test_idx) = stratified_split(&data.labels().unwrap(), 0.1, PHANTOM_SEED).unwrap();
        let tc = TrainConfig {
            seed: PHANTOM_SEED,
            ..Default::default()
        };
        let outcome = fit(&config, &data.subset(&train_idx), None, &tc).unwrap();
        let test = data.subset(&test_idx);
        let positive = config.class_index("preterm").unwrap();
        let accuracy = evaluate(&config, &outcome.params, &test, positive).unwrap().accuracy;
        Experiment {
            config,
            params: outcome.params,
            test,
            accuracy,
            elapsed: start.elapsed(),
        }
    })
}

fn phantom_accuracy() -> Verdict {
    let e = experiment();
    verdict(
        e.accuracy >= MIN_ACCURACY && e.elapsed <= MAX_RUNTIME,
        format!(
            "held-out accuracy {:.3} on {} subjects (need >= {MIN_ACCURACY}), runtime {:.0} s (limit {} s)",
            e.accuracy,
            e.test.len(),
            e.elapsed.as_secs_f64(),
            MAX_RUNTIME.as_secs()
        ),
    )
}

fn localization() -> Verdict {
    let e = experiment();
    let preterm = e.config.class_index("preterm").unwrap();
    let cfg = LrpConfig::new(2.0, 1.0).unwrap();
    let mut maps = Vec::new();
    for s in &e.test.samples {
        if s.label != Some(preterm) {
            continue;
        }
        let out = model_forward(&e.config, &e.params, &s.input, Mode::Infer).unwrap();
        if out.logits.data()[preterm] < out.logits.data()[1 - preterm] {
            continue;
        }
        let mut map = explain(&e.config, &e.params, &s.input, preterm, &cfg).unwrap();
        map.subject_id = s.subject_id.clone();
        maps.push(map);
    }
    if maps.is_empty() {
        return verdict(false, "no correctly classified preterm test subject".into());
    }
    let labels = vec![0; maps.len()];
    let mean = aggregate_group(&maps, &labels, 1).unwrap().remove(0).unwrap();
    let mask = e.test.discriminative_mask.as_ref().unwrap();

    let n = mean.len();
    let k = ((n as f64 * TOP_FRACTION).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean.data()[b].abs().total_cmp(&mean.data()[a].abs()));
    let inside = order[..k].iter().filter(|&&i| mask.data()[i] > 0.5).count();
    let share = inside as f64 / k as f64;
    verdict(
        share >= MIN_INSIDE_SHARE,
        format!(
            "{inside}/{k} top voxels inside the mask = {share:.3} (need >= {MIN_INSIDE_SHARE}; mask covers {:.3} of the volume; {} maps)",
            mask.sum() / n as f64,
            maps.len()
        ),
    )
}

fn conservation() -> Verdict {
    let mut worst_zero_bias: f64 = 0.0;
    for case in 0..20u64 {
        let blocks = 1 + (case % 3) as usize;
        let (config, params) = random_net(300 + case, blocks, true);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(400 + case));
        for cfg in LrpConfig::default_sweep() {
            let map = explain(&config, &params, &x, (case % 2) as usize, &cfg).unwrap();
            worst_zero_bias = worst_zero_bias.max(conservation_audit(&map).relative_leak.abs());
        }
    }

    let mut worst_bias: f64 = 0.0;
    let mut finite = true;
    for case in 0..20u64 {
        let blocks = 1 + (case % 3) as usize;
        let (config, params) = random_net(500 + case, blocks, false);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(600 + case));
        for cfg in LrpConfig::default_sweep() {
            let ex = explain(&config, &params, &x, 0, &cfg).unwrap();
            let inc = explain(&config, &params, &x, 0, &cfg.with_bias_policy(BiasPolicy::Include)).unwrap();
            let (ex_r, inc_r) = (conservation_audit(&ex), conservation_audit(&inc));
            finite &= ex_r.total_leak.is_finite() && ex_r.bias_absorbed.is_finite();
            let difference = (ex.total() - inc.total()) - (inc_r.dropped - ex_r.dropped);
            let deviation = (ex_r.bias_absorbed - difference).abs() / ex.logit.abs().max(1e-12);
            worst_bias = worst_bias.max(deviation);
        }
    }
    verdict(
        worst_zero_bias <= 1e-6 && finite && worst_bias <= 1e-6,
        format!(
            "zero-bias max relative leak {worst_zero_bias:.2e}; exclude-policy bias share vs include-exclude difference {worst_bias:.2e} (limits 1e-6), leaks finite: {finite}"
        ),
    )
}

fn rule_equivalence() -> Verdict {
    let mut worst_oracle: f64 = 0.0;
    for case in 0..10u64 {
        let blocks = 1 + (case % 3) as usize;
        let (config, params) = random_net(100 + case, blocks, case % 2 == 0);
        let x = random_tensor(&config.input_shape, -1.0, 1.0, &mut rng(200 + case));
        let target = target_of(&config, &params, &x);
        let cfg = LrpConfig::new(1.0, 0.0).unwrap();
        let map = explain(&config, &params, &x, target, &cfg).unwrap();
        let oracle = zplus_oracle(&config, &params, &x, target, cfg.stabilizer());
        for (a, b) in map.relevance.data().iter().zip(&oracle) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
    }

    let mut worst_unrolled: f64 = 0.0;
    let mut r = rng(7);
    for (in_ch, out_ch, stride, pad) in [(1, 1, 1, 0), (1, 2, 1, 1), (2, 3, 2, 1), (1, 2, 2, 0)] {
        let dims = [in_ch, 4, 4, 4];
        let x = random_tensor(&dims, -1.0, 1.0, &mut r);
        let w = random_tensor(&[out_ch, in_ch, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = random_tensor(&[out_ch], -0.5, 0.5, &mut r);
        let (m, out_len, in_len) = unrolled_conv(dims, w.data(), out_ch, 3, stride, pad);
        let spatial = out_len / out_ch;
        let side = (4 + 2 * pad - 3) / stride + 1;
        let upper = random_tensor(&[out_len], -1.0, 1.0, &mut r);
        let matrix = Tensor::new(vec![out_len, in_len], m).unwrap();
        let bias = Tensor::new(vec![out_len], (0..out_len).map(|i| b.data()[i / spatial]).collect()).unwrap();
        for cfg in LrpConfig::default_sweep() {
            for policy in [BiasPolicy::Exclude, BiasPolicy::Include] {
                let cfg = cfg.with_bias_policy(policy);
                let up4 = upper.reshape(&[out_ch, side, side, side]).unwrap();
                let conv = lrp_conv3d(&x, &w, &b, &up4, stride, pad, &cfg).unwrap();
                let lin = lrp_linear(&x.reshape(&[in_len]).unwrap(), &matrix, &bias, &upper, &cfg).unwrap();
                let diff = conv
                    .relevance
                    .reshape(&[in_len])
                    .unwrap()
                    .max_abs_diff(&lin.relevance)
                    .unwrap();
                worst_unrolled = worst_unrolled.max(diff);
            }
        }
    }
    verdict(
        worst_oracle <= 1e-8 && worst_unrolled <= 1e-10,
        format!("z+ oracle max deviation {worst_oracle:.2e} (limit 1e-8); conv vs unrolled {worst_unrolled:.2e} (limit 1e-10)"),
    )
}

fn gradient_check() -> Verdict {
    let (config, params, inputs, labels) = setup(1);
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    let mut checked = 0;
    for (x, &label) in inputs.iter().zip(&labels) {
        let out = model_forward(&config, &params, x, Mode::Infer).unwrap();
        let loss = weighted_cross_entropy(&out.probs, label, &WEIGHTS).unwrap();
        let back = model_backward(&config, &params, &out.cache, &loss.grad_logits).unwrap();
        let c = check(
            &config,
            &params,
            std::slice::from_ref(x),
            &[label],
            Mode::Infer,
            &back.grads.tensors,
        );
        worst = worst.max(c.max_error);
        kinks += c.kink_crossings;
        checked += c.checked;
    }

    let outs = forward_batch(&config, &params, &inputs, Mode::Train).unwrap();
    let grad_logits: Vec<Tensor> = outs
        .iter()
        .zip(&labels)
        .map(|(o, &l)| weighted_cross_entropy(&o.probs, l, &WEIGHTS).unwrap().grad_logits)
        .collect();
    let caches: Vec<_> = outs.into_iter().map(|o| o.cache).collect();
    let (grads, _) = backward_batch(&config, &params, &caches, &grad_logits).unwrap();
    let c = check(&config, &params, &inputs, &labels, Mode::Train, &grads.tensors);
    worst = worst.max(c.max_error);
    kinks += c.kink_crossings;
    checked += c.checked;

    verdict(
        worst <= TOLERANCE && kinks == 0,
        format!(
            "max relative error {worst:.2e} over {checked} parameter checks on {} inputs, h = {STEP:e} (limit {TOLERANCE:e}); kink crossings {kinks}",
            inputs.len()
        ),
    )
}

fn schedule_and_adam() -> Verdict {
    let tc = TrainConfig::default();
    let train_subjects = 2 * PHANTOMS_PER_CLASS - (2 * PHANTOMS_PER_CLASS) / 10;
    let mut schedules = vec![tc.schedule(train_subjects).unwrap()];
    for step in [1, 2, 7, 100] {
        for policy in [LrPolicy::Triangular, LrPolicy::Triangular2] {
            schedules.push(CyclicalSchedule::new(tc.base_lr, tc.max_lr, step, policy).unwrap());
        }
    }
    let exact = schedules.iter().all(|s| s.lr(0) == 1e-5 && s.lr(s.step_size) == 1e-3);

    let mut r = rng(11);
    let cfg = AdamConfig::default();
    let lr = 1e-3;
    let shapes = [vec![5, 3], vec![7]];
    let mut params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, -1.0, 1.0, &mut r)).collect();
    let grads: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (0..n)
                .map(|_| {
                    let magnitude = 10f64.powf(r.random_range(-6.0..2.0));
                    if r.random_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
                .collect();
            Tensor::new(s.clone(), data).unwrap()
        })
        .collect();
    let before = params.clone();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut state = AdamState::new(&shape_refs);
    let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
    adam_update(&mut refs, &grads, &mut state, lr, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for ((p0, p1), g) in before.iter().zip(&params).zip(&grads) {
        for ((a, b), g) in p0.data().iter().zip(p1.data()).zip(g.data()) {
            let expected = lr * g / (g.abs() + cfg.eps);
            worst = worst.max(((a - b) - expected).abs());
        }
    }
    verdict(
        exact && worst <= 1e-9,
        format!(
            "lr(0) = 1e-5 and lr(step) = 1e-3 exactly on {} schedules: {exact}; Adam first step vs closed form {worst:.2e} (limit 1e-9)",
            schedules.len()
        ),
    )
}

fn small_run() -> (Vec<u8>, String, Vec<u64>) {
    let set = phantom_dataset(6, DEFAULT_PHANTOM_DIMS, 5, &default_appearances()).unwrap();
    let data = set
        .dataset(&PreprocessConfig {
            target_dims: DEFAULT_PHANTOM_DIMS,
            ..Default::default()
        })
        .unwrap();
    let [d, h, w] = DEFAULT_PHANTOM_DIMS;
    let config = ModelConfig::blocks([1, d, h, w], &[2, 3], 4, set.class_names.clone()).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let outcome = fit(&config, &data, None, &tc).unwrap();
    let model = encode_model(&config, &outcome.params, Some(&outcome.adam_state)).unwrap();
    let map = explain(
        &config,
        &outcome.params,
        &data.samples[0].input,
        1,
        &LrpConfig::new(2.0, 1.0).unwrap(),
    )
    .unwrap();
    let bits = map.relevance.data().iter().map(|v| v.to_bits()).collect();
    (model, outcome.history.iterations_csv(), bits)
}

fn determinism_and_formats() -> Verdict {
    let first = small_run();
    let second = small_run();
    let reproducible = first == second;

    let (config, params) = random_net(21, 2, false);
    let mut adam = AdamState::for_params(&params);
    adam.t = 3;
    let bytes = encode_model(&config, &params, Some(&adam)).unwrap();
    let loaded = decode_model(&bytes).unwrap();
    let model_exact = loaded.params == params
        && loaded.adam.as_ref() == Some(&adam)
        && loaded.config == config
        && encode_model(&loaded.config, &loaded.params, loaded.adam.as_ref()).unwrap() == bytes;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("volume.nii");
    let mut r = rng(22);
    let mut data = random_tensor(&[5, 4, 3], -1e3, 1e3, &mut r).into_data();
    data[0] = f64::MIN_POSITIVE;
    data[1] = -0.0;
    let volume = Volume::new(
        Tensor::new(vec![5, 4, 3], data).unwrap(),
        [0.5, 0.75, 1.25],
        "round-trip",
    )
    .unwrap();
    write_nifti(&volume, &path).unwrap();
    let back = read_nifti(&path).unwrap();
    let bits = |v: &Volume| v.data().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let nifti_exact = bits(&back) == bits(&volume)
        && back.dims() == volume.dims()
        && back.voxel_size_mm().map(f64::to_bits) == volume.voxel_size_mm().map(f64::to_bits);

    let (tiny_config, tiny_params) = random_net(23, 1, false);
    let tiny = encode_model(&tiny_config, &tiny_params, Some(&AdamState::for_params(&tiny_params))).unwrap();
    let mut accepted = 0;
    for i in 0..tiny.len() {
        for mask in [0x01u8, 0x80, 0xff] {
            let mut corrupt = tiny.clone();
            corrupt[i] ^= mask;
            accepted += usize::from(decode_model(&corrupt).is_ok());
        }
    }
    verdict(
        reproducible && model_exact && nifti_exact && accepted == 0,
        format!(
            "train/explain reruns identical: {reproducible}; model round-trip exact: {model_exact}; NIfTI round-trip exact: {nifti_exact}; corrupted files accepted {accepted} of {}",
            3 * tiny.len()
        ),
    )
}

fn is_stratified_partition(labels: &[usize], parts: &[Vec<usize>], fraction_of: impl Fn(usize) -> f64) -> bool {
    let n = labels.len();
    let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
    all.sort_unstable();
    if all != (0..n).collect::<Vec<_>>() {
        return false;
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let total: Vec<usize> = (0..classes)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .collect();
    parts.iter().enumerate().all(|(p, part)| {
        (0..classes).all(|c| {
            let count = part.iter().filter(|&&i| labels[i] == c).count();
            (count as f64 - total[c] as f64 * fraction_of(p)).abs() <= 1.0
        })
    })
}

fn split_and_cv() -> Verdict {
    let mut r = rng(31);
    let cases = 1000;
    let mut split_ok = 0;
    let mut folds_ok = 0;
    for _ in 0..cases {
        let classes = r.random_range(2..5);
        let n = r.random_range(20..200);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        for c in 0..classes {
            labels[2 * c] = c;
            labels[2 * c + 1] = c;
        }
        let seed = r.random();
        let (train_idx, test_idx) = stratified_split(&labels, 0.1, seed).unwrap();
        split_ok += usize::from(is_stratified_partition(&labels, &[train_idx, test_idx], |p| {
            if p == 0 {
                0.9
            } else {
                0.1
            }
        }));
        let folds = kfold(&labels, 10, seed).unwrap();
        folds_ok += usize::from(folds.len() == 10 && is_stratified_partition(&labels, &folds, |_| 0.1));
    }
    verdict(
        split_ok == cases && folds_ok == cases,
        format!("90/10 split valid in {split_ok}/{cases} cases; 10-fold valid in {folds_ok}/{cases}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("conservation", conservation),
        ("rule-equivalence", rule_equivalence),
        ("gradient-check", gradient_check),
        ("schedule-and-adam", schedule_and_adam),
        ("determinism-and-formats", determinism_and_formats),
        ("split-and-cv", split_and_cv),
        ("phantom-accuracy", phantom_accuracy),
        ("localization", localization),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let known = KNOWN_FAILURES.contains(&name);
        let tag = match (v.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{tag} {name}: {}", v.detail);
        if !v.pass && !known {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        std::process::exit(1);
    }
}
