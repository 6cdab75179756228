use std::path::{Path, PathBuf};

use dualvq::codebook::Codebook;
use dualvq::data::{synth_dataset, DataConfig, ShapeClass};
use dualvq::experiment::{
    self, checkpoints_dir, evaluate, load_config, run_eval, run_train, EvalConfig, ExperimentConfig, Split,
    TrainOptions, Which,
};
use dualvq::dual::QuantizerConfig;
use dualvq::Error;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A run small enough for a test: 32 images, 24 steps, GAN from step 8.
fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 9,
        out_dir: out.to_path_buf(),
        eval_every: 6,
        checkpoint_every: 6,
        data: DataConfig {
            n: 32,
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.train.steps = 24;
    cfg.train.disc_start_step = 8;
    cfg.eval.batch = 3;
    cfg.validate().unwrap();
    cfg
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn shipped_configs_load() {
    let d = load_config(&configs().join("default.toml")).unwrap();
    let mut plain = ExperimentConfig::default();
    plain.out_dir = d.out_dir.clone();
    plain.validate().unwrap();
    assert_eq!(d, plain);

    let split = load_config(&configs().join("ablation_split.toml")).unwrap();
    assert_eq!(split.grid.len(), 4);
    let runs: Vec<_> = split.grid.iter().map(|e| e.apply(&split).unwrap()).collect();
    let labels: Vec<_> = split.grid.iter().map(|e| (e.global_label(), e.local_label())).collect();
    assert_eq!(
        labels,
        [("S-4", "S-4"), ("T-6", "S-2"), ("T-2", "S-6"), ("T-4", "S-4")]
            .map(|(a, b)| (a.to_string(), b.to_string()))
    );
    let default = split.default_entry().unwrap();
    assert_eq!(default.name, "equal");
    let chosen = &runs[split.grid.iter().position(|e| e.default).unwrap()];
    assert_eq!(chosen.quantizer, {
        let mut q = QuantizerConfig::default();
        q.validate(8).unwrap();
        q
    });
    assert!(runs.iter().all(|r| r.grid.is_empty() && r.out_dir.starts_with(&split.out_dir)));

    let size = load_config(&configs().join("ablation_size.toml")).unwrap();
    let sizes: Vec<_> = size.grid.iter().map(|e| e.apply(&size).unwrap().quantizer.sizes()).collect();
    assert_eq!(sizes, [(32, 32), (64, 64)]);
}

#[test]
fn config_errors_carry_line_numbers() {
    let err = ExperimentConfig::from_toml("seed = 1\n[train]\nsteps = \"many\"\n").unwrap_err();
    match err {
        Error::Config(m) => assert!(m.contains("line 3"), "{m}"),
        e => panic!("{e:?}"),
    }
}

#[test]
fn synthetic_classes_are_balanced() {
    for n in [256, 100, 31] {
        let set = synth_dataset(7, n, 32).unwrap();
        let labels = set.labels().unwrap();
        for class in ShapeClass::ALL {
            let c = labels.iter().filter(|&&l| l == class).count() as f64;
            assert!((c - n as f64 / 3.0).abs() <= 1.0, "{class:?}: {c} of {n}");
        }
        assert!(set.images().iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
    assert_eq!(synth_dataset(7, 256, 32).unwrap().checksum(), synth_dataset(7, 256, 32).unwrap().checksum());
}

#[test]
fn eval_is_independent_of_batching() {
    let cfg = small(Path::new("unused"));
    let state = cfg.build_state().unwrap();
    let (_, val, _) = synth_dataset(1, 64, 32).unwrap().split();
    let reports: Vec<_> = [1, 2, 7]
        .into_iter()
        .map(|batch| {
            let ev = EvalConfig {
                batch,
                ..EvalConfig::default()
            };
            evaluate(&state.model, &val, &ev, 0).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
}

#[test]
fn train_eval_resume_and_export_agree() {
    let dir = tempfile::tempdir().unwrap();
    let full = small(&dir.path().join("full"));
    let summary = run_train(&full, &TrainOptions::default()).unwrap();
    assert_eq!(summary.step, 24);
    for f in ["config.toml", "train.csv", "eval.csv", "utilization.json", "utilization.csv"] {
        assert!(full.out_dir.join(f).exists(), "{f}");
    }
    for c in ["best", "latest", "final"] {
        assert!(checkpoints_dir(&full.out_dir).join(c).join("manifest.json").exists());
    }
    assert_eq!(read(&full.out_dir.join("train.csv")).lines().count(), 25);

    // eval on the final checkpoint reproduces the last logged row
    let final_ckpt = checkpoints_dir(&full.out_dir).join("final");
    let ev = run_eval(&final_ckpt, Split::Val, Some(&dir.path().join("val.json"))).unwrap();
    assert_eq!(Some(ev.report.clone()), summary.last_eval);
    let last_row = read(&full.out_dir.join("eval.csv")).lines().last().unwrap().to_string();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    w.serialize(&ev.report).unwrap();
    let row = String::from_utf8(w.into_inner().unwrap()).unwrap();
    assert_eq!(row.trim_end(), last_row);
    assert_ne!(run_eval(&final_ckpt, Split::Test, None).unwrap().report, ev.report);

    // interrupted at 12, resumed to 24
    let part = small(&dir.path().join("part"));
    let mut first = part.clone();
    first.train.steps = 12;
    run_train(&first, &TrainOptions::default()).unwrap();
    let resumed = run_train(
        &part,
        &TrainOptions {
            resume: Some(checkpoints_dir(&part.out_dir).join("latest")),
            force: false,
        },
    )
    .unwrap();
    assert_eq!(resumed.step, 24);
    for f in ["train.csv", "eval.csv", "utilization.csv"] {
        assert_eq!(read(&part.out_dir.join(f)), read(&full.out_dir.join(f)), "{f}");
    }

    // a changed configuration is refused unless forced
    let mut changed = part.clone();
    changed.train.learning_rate = 2e-4;
    changed.train.steps = 30;
    let opts = TrainOptions {
        resume: Some(checkpoints_dir(&part.out_dir).join("final")),
        force: false,
    };
    assert!(matches!(run_train(&changed, &opts), Err(Error::ResumeMismatch { .. })));
    let forced = run_train(&changed, &TrainOptions { force: true, ..opts }).unwrap();
    assert_eq!(forced.step, 30);

    // exported codebooks match the checkpoint and the usage report
    let usage = read(&full.out_dir.join("utilization.csv"));
    for (which, name, key) in [(Which::Global, "global", "global_cb"), (Which::Local, "local", "local_cb")] {
        let path = dir.path().join(format!("{name}.dvqc"));
        let cb = experiment::export_codebook(&final_ckpt, which, &path).unwrap();
        let back = Codebook::load(&path).unwrap();
        assert_eq!(back, cb);
        assert_eq!((cb.len(), cb.dim()), (32, 4));
        let ckpt = dualvq::checkpoint::load(&final_ckpt).unwrap();
        let id = ckpt.state.model.store.find(key).unwrap();
        assert_eq!(cb.entries(), ckpt.state.model.store.value(id));
        let counts: Vec<u64> = usage
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{name},")))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(cb.usage().counts(), counts.as_slice());
        assert_eq!(cb.usage().total(), 24 * 8 * 64);
    }
}
