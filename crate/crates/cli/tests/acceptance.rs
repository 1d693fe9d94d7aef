//! Acceptance gate: ten end-to-end checks covering metric arithmetic,
//! dataset bookkeeping, architecture contracts, learnability, gradients,
//! AUC and statistics oracles, preprocessing properties, determinism, and
//! the full CLI pipeline. Each check prints one pass/fail line (visible
//! with `--nocapture`); tolerances are pinned in the assertions.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pas3d_core::datamodule::{
    oversample_minority, save_aug_sidecar, stratified_split, AugmentationSpec, SplitSpec,
};
use pas3d_core::evaluation::{concordance_auc, macro_metrics, roc_auc, ConfusionMatrix};
use pas3d_core::manifest::{CaseRecord, Manifest, Split};
use pas3d_core::models::{build_model, Arch, ModelConfig};
use pas3d_core::preprocess::{minmax_normalize, resize_plan, resize_with_padding};
use pas3d_core::stats::{bh_fdr, paired_ttest, rm_anova, RunMatrix};
use pas3d_core::synthdata::{generate_dataset, generate_phantom, SynthSpec};
use pas3d_core::training::{evaluate_checkpoint, train, TrainConfig};
use pas3d_core::volume::{Orientation, Volume};
use pas3d_core::Device;

/// Run one criterion, printing a single timed pass/fail line.
fn check(id: u32, desc: &str, body: impl FnOnce()) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let status = if outcome.is_ok() { "pass" } else { "FAIL" };
    println!("criterion {id:02} [{status}] {desc} ({:.1}s)", start.elapsed().as_secs_f64());
    if let Err(e) = outcome {
        std::panic::resume_unwind(e);
    }
}

#[test]
fn c01_metric_arithmetic_on_fixed_confusion_matrix() {
    check(1, "macro metrics on tn=144 fp=27 fn=7 tp=49", || {
        let cm = ConfusionMatrix { tn: 144, fp: 27, fn_: 7, tp: 49 };
        let m = macro_metrics(&cm);
        let tol = 0.0005;
        assert!((m.accuracy - 0.850).abs() <= tol, "accuracy {}", m.accuracy);
        assert!((m.precision_macro - 0.799).abs() <= tol, "precision {}", m.precision_macro);
        assert!((m.recall_macro - 0.859).abs() <= tol, "recall {}", m.recall_macro);
        assert!((m.f1_macro - 0.818).abs() <= tol, "f1 {}", m.f1_macro);
    });
}

#[test]
fn c02_split_and_oversampling_bookkeeping() {
    check(2, "stratified split counts on 853/280 and 1194 balanced training records", || {
        let mut records = Vec::new();
        for i in 0..853 {
            records.push(CaseRecord::new(format!("n{i:04}"), format!("pn{i:04}"), "n.nii", 0).unwrap());
        }
        for i in 0..280 {
            records.push(CaseRecord::new(format!("p{i:04}"), format!("pp{i:04}"), "p.nii", 1).unwrap());
        }
        let manifest = Manifest::new(records, 0).unwrap();
        let split = stratified_split(&manifest, &SplitSpec::standard(0)).unwrap();
        assert_eq!(split.counts(Split::Train), [597, 196]);
        assert_eq!(split.counts(Split::Val), [85, 28]);
        assert_eq!(split.counts(Split::Test), [171, 56]);

        let plan =
            oversample_minority(&split, &AugmentationSpec::standard(0), "unused-dir").unwrap();
        assert_eq!(plan.manifest.counts(Split::Train), [597, 597]);
        assert_eq!(plan.manifest.split_records(Split::Train).len(), 1194);
    });
}

#[test]
fn c03_architecture_shape_contract_at_full_width() {
    check(3, "all architectures map (2,1,128,128,64) to (2,2); hybrid dims 128/768/896", || {
        let xs = tch::Tensor::randn([2, 1, 128, 128, 64], (tch::Kind::Float, tch::Device::Cpu));
        for arch in Arch::ALL {
            let cfg = ModelConfig::new(arch);
            let model = build_model(&cfg, Device::Cpu, 0).unwrap();
            let logits = tch::no_grad(|| model.forward_t(&xs, false));
            assert_eq!(logits.size(), vec![2, 2], "arch {arch}");
            if arch == Arch::Densenet121Vit {
                let emb = tch::no_grad(|| model.hybrid_embeddings(&xs)).unwrap();
                assert_eq!(emb.cnn_embed.size(), vec![2, 128]);
                assert_eq!(emb.vit_embed.size(), vec![2, 768]);
                assert_eq!(emb.fused.size(), vec![2, 896]);
            }
        }
        // token count for the transformer branch at the full input shape
        let tokens = pas3d_core::models::patchify(&xs).unwrap();
        assert_eq!(tokens.size()[1], 256);
    });
}

#[test]
fn c04_reduced_width_hybrid_learns_phantom_dataset() {
    check(4, "quarter-width hybrid: >=95% train / >=90% held-out on 200 phantoms", || {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_normal: 100,
            n_pas: 100,
            size: (64, 64, 32),
            seed: 42,
            ..Default::default()
        };
        let manifest = generate_dataset(&spec, tmp.path()).unwrap();
        let manifest = stratified_split(&manifest, &SplitSpec::standard(0)).unwrap();

        let cfg = ModelConfig::new(Arch::Densenet121Vit)
            .with_input_shape((64, 64, 32))
            .with_width_multiplier(0.25);
        let mut model = build_model(&cfg, Device::Cpu, 0).unwrap();
        let train_cfg = TrainConfig {
            initial_lr: 1e-3,
            epochs: 50,
            seed: 0,
            stop_at_train_accuracy: Some(0.97),
            ..Default::default()
        };
        let (log, ckpt) = train(&mut model, &manifest, &train_cfg, tmp.path().join("run")).unwrap();
        let final_train_acc = log.epochs.last().unwrap().train_accuracy;
        assert!(
            final_train_acc >= 0.95,
            "train accuracy {final_train_acc} after {} epochs",
            log.epochs.len()
        );
        let eval = evaluate_checkpoint(&ckpt, &manifest, Split::Test, 8).unwrap();
        assert!(eval.report.accuracy >= 0.90, "held-out accuracy {}", eval.report.accuracy);
    });
}

#[test]
fn c05_gradient_finite_difference_and_coverage() {
    check(5, "fusion-head gradients match finite differences; all hybrid params get gradients", || {
        use tch::nn::{self, OptimizerConfig};
        use tch::{Kind, Tensor};

        // finite-difference check on a small fusion head in f64
        let mut vs = nn::VarStore::new(tch::Device::Cpu);
        let head = pas3d_core::models::FusionHead::new(&vs.root(), 8, 4, 2, 0.0);
        vs.double();
        tch::manual_seed(5);
        let xs = Tensor::randn([3, 8], (Kind::Double, tch::Device::Cpu));
        let ys = Tensor::from_slice(&[0i64, 1, 1]);
        let loss_fn =
            || head.forward_t(&xs, false).log_softmax(-1, Kind::Double).nll_loss(&ys);
        loss_fn().backward();
        let eps = 1e-5;
        for (name, var) in vs.variables() {
            let orig = var.detach().copy();
            let analytic = var.grad().copy();
            for i in 0..var.numel() as i64 {
                let delta = Tensor::zeros_like(&orig.flatten(0, -1));
                let _ = delta.get(i).fill_(eps);
                let delta = delta.reshape(var.size());
                let lp = tch::no_grad(|| {
                    var.detach().copy_(&(&orig + &delta));
                    f64::try_from(loss_fn()).unwrap()
                });
                let lm = tch::no_grad(|| {
                    var.detach().copy_(&(&orig - &delta));
                    f64::try_from(loss_fn()).unwrap()
                });
                tch::no_grad(|| var.detach().copy_(&orig));
                let fd = (lp - lm) / (2.0 * eps);
                let an = f64::try_from(analytic.flatten(0, -1).get(i)).unwrap();
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {an} vs fd {fd}");
            }
        }

        // every parameter of the reduced-width hybrid receives gradient
        let cfg = ModelConfig::new(Arch::Densenet121Vit)
            .with_input_shape((32, 32, 32))
            .with_width_multiplier(0.25);
        let model = build_model(&cfg, Device::Cpu, 0).unwrap();
        let xs = Tensor::randn([2, 1, 32, 32, 32], (Kind::Float, tch::Device::Cpu));
        let ys = Tensor::from_slice(&[0i64, 1]);
        let mut opt = nn::Adam::default().build(&model.vs, 1e-4).unwrap();
        let loss = model.forward_t(&xs, true).cross_entropy_for_logits(&ys);
        opt.zero_grad();
        loss.backward();
        for (name, var) in model.vs.variables() {
            if !var.requires_grad() {
                continue;
            }
            let norm = f64::try_from(var.grad().norm()).unwrap();
            assert!(norm.is_finite() && norm > 0.0, "{name} grad norm {norm}");
        }
    });
}

#[test]
fn c06_auc_equals_pairwise_concordance() {
    check(6, "trapezoidal AUC equals brute-force concordance on 100 tied instances", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..100 {
            let n = rng.gen_range(3..=20);
            let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if y.iter().all(|&v| v == 0) {
                y[0] = 1;
            }
            if y.iter().all(|&v| v == 1) {
                y[0] = 0;
            }
            // quantized scores so tied values occur frequently
            let scores: Vec<f64> =
                (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let (_, auc) = roc_auc(&y, &scores).unwrap();
            let oracle = concordance_auc(&y, &scores).unwrap();
            assert_eq!(auc, oracle, "trial {trial}: trapezoid {auc} vs concordance {oracle}");
        }
    });
}

/// Direct evaluation of the step-up definition: for sorted p-values,
/// adjusted_(i) = min over j >= i of min(1, p_(j) * m / j).
fn bh_oracle(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
    let mut out = vec![0.0; m];
    for (rank, &idx) in order.iter().enumerate() {
        let mut best = 1.0f64;
        for (r2, &idx2) in order.iter().enumerate().skip(rank) {
            best = best.min((p[idx2] * m as f64 / (r2 + 1) as f64).min(1.0));
        }
        out[idx] = best;
    }
    out
}

#[test]
fn c07_statistics_oracles() {
    check(7, "BH step-up exact; ANOVA/t-test agreement; fixed t-test value", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=12);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert_eq!(bh_fdr(&p), bh_oracle(&p));
        }

        // k = 2: repeated-measures F equals the paired-t statistic squared
        for _ in 0..50 {
            let n = rng.gen_range(3..=8);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let m = RunMatrix::new(
                vec!["a".into(), "b".into()],
                (0..n as u64).collect(),
                vec![a.clone(), b.clone()],
            )
            .unwrap();
            let anova = rm_anova(&m).unwrap();
            let tt = paired_ttest(&a, &b).unwrap();
            assert!((anova.f - tt.t * tt.t).abs() <= 1e-9 * anova.f.abs().max(1.0));
            assert!((anova.p - tt.p).abs() <= 1e-9);
        }

        // sum-of-squares identity on random 6x5 matrices
        for _ in 0..50 {
            let values: Vec<Vec<f64>> =
                (0..6).map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let m = RunMatrix::new(
                (0..6).map(|i| format!("m{i}")).collect(),
                vec![0, 1, 2, 3, 4],
                values,
            )
            .unwrap();
            let a = rm_anova(&m).unwrap();
            let lhs = a.ss_total;
            let rhs = a.ss_subjects + a.ss_treatment + a.ss_error;
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1.0), "{lhs} vs {rhs}");
        }

        let tt = paired_ttest(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((tt.t - 3.4641).abs() <= 1e-3, "t {}", tt.t);
        assert!((tt.p - 0.0742).abs() <= 1e-3, "p {}", tt.p);
    });
}

#[test]
fn c08_preprocessing_properties() {
    check(8, "shape/range/padding/aspect/affine properties over 50 random phantoms", || {
        let target = (128, 128, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let dims = (
                rng.gen_range(20..90),
                rng.gen_range(20..90),
                rng.gen_range(8..40),
            );
            let data = Array3::from_shape_fn(dims, |(i, j, k)| {
                ((i * 7 + j * 3 + k) % 23) as f32 + rng.gen_range(0.0f32..1.0)
            });
            let v = Volume::new(data.clone(), [1.0; 3], Orientation::Canonical).unwrap();
            let resized = resize_with_padding(&v, target).unwrap();
            let normalized = minmax_normalize(&resized).unwrap();

            assert_eq!(normalized.shape(), target);
            assert!(normalized.data().iter().all(|&x| (0.0..=1.0).contains(&x)));

            // padding purity: all voxels outside the content box are zero
            let plan = resize_plan(dims, target);
            for ((i, j, k), &val) in resized.data().indexed_iter() {
                let inside = (plan.pad_low.0..plan.pad_low.0 + plan.content.0).contains(&i)
                    && (plan.pad_low.1..plan.pad_low.1 + plan.content.1).contains(&j)
                    && (plan.pad_low.2..plan.pad_low.2 + plan.content.2).contains(&k);
                if !inside {
                    assert_eq!(val, 0.0, "padding voxel at {i},{j},{k}");
                }
            }

            // aspect ratio preserved within one voxel per axis
            for (c, d) in [
                (plan.content.0, dims.0),
                (plan.content.1, dims.1),
                (plan.content.2, dims.2),
            ] {
                assert!((c as f64 - d as f64 * plan.scale).abs() <= 1.0);
            }

            // normalization is invariant to positive affine intensity maps
            let affine = data.mapv(|x| 3.0 * x + 11.0);
            let va = Volume::new(affine, [1.0; 3], Orientation::Canonical).unwrap();
            let na = minmax_normalize(&resize_with_padding(&va, target).unwrap()).unwrap();
            // padding breaks strict invariance only if the offset changes the
            // minimum; compare on the content region
            let s = ndarray::s![
                plan.pad_low.0..plan.pad_low.0 + plan.content.0,
                plan.pad_low.1..plan.pad_low.1 + plan.content.1,
                plan.pad_low.2..plan.pad_low.2 + plan.content.2
            ];
            let base_inner = minmax_normalize(
                &Volume::new(
                    resized.data().slice(s).to_owned(),
                    [1.0; 3],
                    Orientation::Canonical,
                )
                .unwrap(),
            )
            .unwrap();
            let affine_inner = minmax_normalize(
                &Volume::new(na.data().slice(s).to_owned(), [1.0; 3], Orientation::Canonical)
                    .unwrap(),
            )
            .unwrap();
            for (a, b) in base_inner.data().iter().zip(affine_inner.data().iter()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    });
}

#[test]
fn c09_seeded_determinism() {
    check(9, "split/augment/synth/train-epoch-1 identical under repeated seeds", || {
        let tmp = tempfile::tempdir().unwrap();

        // synth determinism at the voxel level
        let a = generate_phantom(1, (32, 32, 32), 99).unwrap();
        let b = generate_phantom(1, (32, 32, 32), 99).unwrap();
        assert_eq!(a.data(), b.data());

        // split determinism on a mixed manifest
        let mut records = Vec::new();
        for i in 0..60 {
            records.push(
                CaseRecord::new(format!("c{i:03}"), format!("p{i:03}"), "x.nii", (i % 3 == 0) as u8)
                    .unwrap(),
            );
        }
        let manifest = Manifest::new(records, 0).unwrap();
        let s1 = stratified_split(&manifest, &SplitSpec::standard(4)).unwrap();
        let s2 = stratified_split(&manifest, &SplitSpec::standard(4)).unwrap();
        assert_eq!(s1.records(), s2.records());

        // augmentation plan determinism via the sidecar bytes
        let p1 = oversample_minority(&s1, &AugmentationSpec::standard(5), "a").unwrap();
        let p2 = oversample_minority(&s2, &AugmentationSpec::standard(5), "a").unwrap();
        let (f1, f2) = (tmp.path().join("s1.csv"), tmp.path().join("s2.csv"));
        save_aug_sidecar(&p1.records, &f1).unwrap();
        save_aug_sidecar(&p2.records, &f2).unwrap();
        assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());

        // first-epoch training loss is exactly reproducible
        let spec = SynthSpec { n_normal: 6, n_pas: 6, size: (32, 32, 32), seed: 3, ..Default::default() };
        let data = generate_dataset(&spec, tmp.path().join("data")).unwrap();
        let data = stratified_split(&data, &SplitSpec { train: 0.5, val: 0.25, test: 0.25, seed: 3 })
            .unwrap();
        let cfg = ModelConfig::new(Arch::Resnet18)
            .with_input_shape((32, 32, 32))
            .with_width_multiplier(0.125);
        let mut losses = Vec::new();
        for run in 0..2 {
            let mut model = build_model(&cfg, Device::Cpu, 17).unwrap();
            let tc = TrainConfig { batch_size: 4, epochs: 1, seed: 17, ..Default::default() };
            let (log, _) =
                train(&mut model, &data, &tc, tmp.path().join(format!("run{run}"))).unwrap();
            losses.push(log.epochs[0].train_loss);
        }
        assert_eq!(losses[0], losses[1]);
    });
}

fn pas3d(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pas3d")).args(args).output().expect("binary runs")
}

fn ok(out: &std::process::Output, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{what} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn c10_full_cli_pipeline() {
    check(10, "synth>preprocess>split>augment>campaign>evaluate>compare>report end to end", || {
        let tmp = tempfile::tempdir().unwrap();
        let p = |name: &str| tmp.path().join(name).display().to_string();

        ok(
            &pas3d(&[
                "synth", "--normal", "24", "--pas", "16", "--seed", "7",
                "--out-dir", &p("raw"), "--size", "64x64x32",
            ]),
            "synth",
        );
        ok(
            &pas3d(&[
                "preprocess", "--manifest", &p("raw/manifest.csv"),
                "--out-dir", &p("pre"), "--target", "64x64x32",
            ]),
            "preprocess",
        );
        ok(
            &pas3d(&[
                "split", "--manifest", &p("pre/manifest.csv"), "--seed", "0",
                "--out", &p("split.csv"),
            ]),
            "split",
        );
        ok(
            &pas3d(&[
                "augment", "--manifest", &p("split.csv"), "--seed", "0",
                "--out-dir", &p("aug"), "--out", &p("augmented.csv"),
            ]),
            "augment",
        );

        let conf = tmp.path().join("run.conf");
        std::fs::write(
            &conf,
            "epochs = 2\nbatch_size = 8\nlr = 0.001\nwidth_multiplier = 0.25\ninput_shape = 64x64x32\n",
        )
        .unwrap();
        ok(
            &pas3d(&[
                "campaign", "--manifest", &p("augmented.csv"),
                "--archs", "densenet121_vit,resnet18", "--seeds", "0,1",
                "--config", &conf.display().to_string(), "--out-dir", &p("campaign"),
            ]),
            "campaign",
        );
        let results = std::fs::read_to_string(tmp.path().join("campaign/results.csv")).unwrap();
        let ok_rows: Vec<&str> = results.lines().filter(|l| l.contains(",ok,")).collect();
        assert_eq!(ok_rows.len(), 4, "expected 4 successful cells:\n{results}");

        ok(
            &pas3d(&[
                "evaluate",
                "--checkpoint", &p("campaign/densenet121_vit/seed0/best.ckpt"),
                "--manifest", &p("augmented.csv"), "--split", "test",
                "--out", &p("eval.csv"), "--roc", &p("roc.svg"),
            ]),
            "evaluate",
        );
        assert!(tmp.path().join("roc.svg").exists());
        assert!(tmp.path().join("roc.csv").exists(), "ROC companion CSV");
        let eval = std::fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
        assert!(eval.contains("model,seed,accuracy,auc"), "{eval}");
        assert!(eval.lines().any(|l| l.starts_with("densenet121_vit,")), "{eval}");

        ok(
            &pas3d(&[
                "compare", "--runs", &p("campaign/results.csv"), "--metric", "accuracy",
                "--alpha", "0.05", "--out", &p("pairwise.csv"),
            ]),
            "compare",
        );
        let pairwise = std::fs::read_to_string(tmp.path().join("pairwise.csv")).unwrap();
        assert!(pairwise.contains("model_a,model_b,t,p_raw,p_adj,significant"), "{pairwise}");
        let pair_rows = pairwise.lines().filter(|l| l.contains("densenet121_vit,resnet18")).count();
        assert_eq!(pair_rows, 1, "one pairwise row for two models:\n{pairwise}");

        ok(&pas3d(&["report", "--runs", &p("campaign/results.csv"), "--out", &p("report.csv")]), "report");
        let report = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
        let model_rows = report
            .lines()
            .filter(|l| l.starts_with("densenet121_vit,") || l.starts_with("resnet18,"))
            .count();
        assert_eq!(model_rows, 2, "one aggregate row per model:\n{report}");
        // each aggregate row covers both seeds
        assert!(
            report.lines().filter(|l| l.contains(",2,")).count() >= 2,
            "aggregates should report 2 runs per model:\n{report}"
        );
    });
}
