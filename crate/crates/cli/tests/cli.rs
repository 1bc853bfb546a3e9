use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uam_core::data::load_csv;

fn uam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uam")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn snapshot_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("resolved_config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from snapshot"))
        .to_string()
}

fn synth_with(dir: &Path, features: &str) {
    let out = dir.to_str().unwrap();
    let o = uam(&["synth", "--individuals", "6", "--cells", "30", "--features", features, "--seed", "7", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn synth(dir: &Path) {
    synth_with(dir, "8");
}

#[test]
fn synth_writes_csvs_manifest_and_snapshot_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    for f in ["train.csv", "test.csv", "manifest.txt", "resolved_config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = load_csv(a.join("train.csv")).unwrap();
    let test = load_csv(a.join("test.csv")).unwrap();
    assert_eq!(train.len() + test.len(), 180);
    assert_eq!(train.n_features(), 8);
}

#[test]
fn synth_feature_default_is_106() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = uam(&["synth", "--individuals", "2", "--cells", "3", "--out", out]);
    assert_eq!(code(&o), 0);
    assert_eq!(load_csv(tmp.path().join("train.csv")).unwrap().n_features(), 106);
    assert_eq!(snapshot_value(tmp.path(), "features"), "106");
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.join("train.csv").to_str().unwrap(),
        "--test",
        data.join("test.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    uam(&refs)
}

#[test]
fn train_defaults_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let o = train(&data, &run, &["--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(snapshot_value(&run, "model.n_blocks"), "4");
    assert_eq!(snapshot_value(&run, "train.batch_size"), "64");
    assert_eq!(snapshot_value(&run, "train.learning_rate"), "0.0001");
    assert_eq!(snapshot_value(&run, "model.variant"), "UAM");

    let eval = tmp.path().join("eval");
    let o = uam(&[
        "eval",
        "--data",
        data.join("test.csv").to_str().unwrap(),
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv")).unwrap(),
        fs::read_to_string(eval.join("metrics.csv")).unwrap()
    );
    let preds = fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + load_csv(data.join("test.csv")).unwrap().len());
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = train(&data, dir, &["--epochs", "2", "--variant", "jamba", "--seed", "3"]);
        assert_eq!(code(&o), 0);
    }
    for f in ["losses.csv", "model.ckpt", "metrics.csv", "train_metrics.csv", "resolved_config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_rejects_a_dimension_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&data, &run, &["--epochs", "1"])), 0);
    let other = tmp.path().join("other");
    synth_with(&other, "9");
    let o = uam(&[
        "eval",
        "--data",
        other.join("test.csv").to_str().unwrap(),
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        tmp.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint expects 8"));
}

#[test]
fn missing_data_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = uam(&["train", "--data", "/nonexistent/x.csv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn assert_svg(path: &Path) {
    let svg = fs::read_to_string(path).unwrap();
    assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
    assert!(svg.trim_end().ends_with("</svg>"));
    // Every element is either self-closing or explicitly closed.
    let opens = svg.matches("<text").count() + svg.matches("<circle").count() + svg.matches("<title").count();
    let closes = svg.matches("</text>").count() + svg.matches("</circle>").count() + svg.matches("</title>").count();
    assert_eq!(opens, closes);
}

#[test]
fn ablate_block_sweep_gives_four_rows_and_a_chart() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out = tmp.path().join("ablate");
    let o = uam(&[
        "ablate",
        "--data",
        data.join("train.csv").to_str().unwrap(),
        "--sweep",
        "blocks",
        "--values",
        "2,4,6,8",
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = data_rows(&fs::read_to_string(out.join("ablation.csv")).unwrap());
    assert_eq!(rows.len(), 4);
    let blocks: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(blocks, ["2", "4", "6", "8"]);
    assert_svg(&out.join("ablation.svg"));
}

#[test]
fn ablate_variant_sweep_covers_all_eight() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out = tmp.path().join("ablate");
    let o = uam(&[
        "ablate",
        "--data",
        data.join("train.csv").to_str().unwrap(),
        "--test",
        data.join("test.csv").to_str().unwrap(),
        "--sweep",
        "variant",
        "--epochs",
        "1",
        "--blocks",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = data_rows(&fs::read_to_string(out.join("ablation.csv")).unwrap());
    let names: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["Trans", "Trans-M", "Mamba", "Mamba-M", "Jamba", "UAM-L", "UAM-M", "UAM"]);
    assert_svg(&out.join("ablation.svg"));
}

#[test]
fn gradcheck_passes_and_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = uam(&["gradcheck", "--seeds", "2", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    let rows = data_rows(&csv);
    for name in ["linear", "rmsnorm", "gated_scan", "amamba", "amamba_moe", "uam_2_block", "decoder", "softmax"] {
        let row = rows.iter().find(|r| r[0] == name).unwrap_or_else(|| panic!("{name} missing"));
        let err: f64 = row[4].parse().unwrap();
        assert!(err < 1e-4, "{name}: {err}");
        assert_eq!(row[6], "true");
    }
}

#[test]
fn gradcheck_catches_an_injected_sign_flip() {
    let o = uam(&["gradcheck", "--seeds", "1", "--inject-sign-flip", "matmul"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    let o = uam(&["gradcheck", "--inject-sign-flip", "no_such_op"]);
    assert_eq!(code(&o), 1);
}

fn cost_rows(args: &[&str]) -> Vec<(String, u64, u64)> {
    let tmp = tempfile::tempdir().unwrap();
    let mut all = vec!["cost", "--out", tmp.path().to_str().unwrap()];
    all.extend_from_slice(args);
    let o = uam(&all);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data_rows(&fs::read_to_string(tmp.path().join("cost.csv")).unwrap())
        .into_iter()
        .map(|r| (r[0].clone(), r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect()
}

#[test]
fn cost_table_orderings_and_tree_agreement() {
    for args in [&[][..], &["--d-model", "8", "--heads", "2", "--d-ff", "64", "--blocks", "8"][..]] {
        let rows = cost_rows(args);
        assert_eq!(rows.len(), 6);
        let p = |n: &str| rows.iter().find(|r| r.0 == n).unwrap().1;
        assert!(p("Mamba") < p("Trans"));
        assert!(p("UAM-M") < p("UAM"));
        assert!(p("UAM") < p("Jamba"));
        assert!(rows.iter().all(|r| r.1 == r.2));
    }
    assert_eq!(cost_rows(&["--all"]).len(), 8);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&uam(&["cost", "--no-such-flag"])), 1);
    assert_eq!(code(&uam(&["train", "--variant", "resnet", "--data", "x", "--out", "y"])), 1);
    assert_eq!(code(&uam(&["cost", "--heads", "3"])), 1);
    assert_eq!(code(&uam(&[])), 1);
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        ("synth", &["--individuals", "--cells", "--features", "--classes", "--difficulty", "--seed", "--out"]),
        ("train", &["--data", "--test", "--variant", "--blocks", "--batch-size", "--lr", "--weight-decay", "--out"]),
        ("eval", &["--data", "--checkpoint", "--out"]),
        ("ablate", &["--sweep", "--values", "--data", "--out"]),
        ("gradcheck", &["--seeds", "--out"]),
        ("cost", &["--variant", "--all", "--seq-len"]),
        ("multimodal", &["--epochs", "--batch-size", "--ablate", "--encoder", "--out"]),
    ];
    for (cmd, flags) in cases {
        let o = uam(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let help = stdout(&o);
        for f in *flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert!(!stdout(&uam(&["gradcheck", "--help"])).contains("inject"));
}

#[test]
fn multimodal_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = uam(&[
        "multimodal",
        "--train-samples",
        "8",
        "--test-samples",
        "4",
        "--epochs",
        "1",
        "--ablate",
        "--save-samples",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("segmentation.csv")).unwrap();
    let rows = data_rows(&summary);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["radiomics", "image_only"]);
    assert_eq!(snapshot_value(tmp.path(), "batch_size"), "4");
    assert!(tmp.path().join("samples/train").is_dir());

    // Reloading the saved samples reproduces the run.
    let again = tmp.path().join("again");
    let o = uam(&[
        "multimodal",
        "--train-dir",
        tmp.path().join("samples/train").to_str().unwrap(),
        "--test-dir",
        tmp.path().join("samples/test").to_str().unwrap(),
        "--epochs",
        "1",
        "--ablate",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary, fs::read_to_string(again.join("segmentation.csv")).unwrap());
}
