use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uam_core::autodiff::{inject_sign_flip, parameter_count, PRIMITIVES};
use uam_core::data::{load_csv, load_csv_with_vocab, split_by_individual, synthesize_dataset, write_csv, Dataset, LabelVocab, Standardizer, SynthSpec};
use uam_core::gradsuite::{self, CheckKind, SUITE_EPS, SUITE_TOLERANCE};
use uam_core::model::{Checkpoint, UamClassifier};
use uam_core::multimodal::{
    load_samples, save_samples, synthesize_seg_samples, train_multimodal, EncoderKind, MultimodalConfig,
    MultimodalModel, MultimodalTrainConfig, SegMetrics, SegSample, SegSynthSpec,
};
use uam_core::train::{evaluate, predict_proba, train_model, MetricsReport, TrainConfig};
use uam_core::uam::{cost_report, ModelConfig, Variant};

use crate::svg::line_chart;
use crate::{
    AblateArgs, CheckFailed, CostArgs, EncoderArg, EvalArgs, GradcheckArgs, ModelArgs, MultimodalArgs, Sweep,
    SynthArgs, TrainArgs, TrainFlags,
};

const SNAPSHOT: &str = "resolved_config.txt";
const STANDARDIZER: &str = "standardizer";

type Pairs = Vec<(String, String)>;

fn pair(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_snapshot(out: &Path, command: &str, pairs: &[(String, String)]) -> Result<()> {
    let mut s = format!("command={command}\n");
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    write(&out.join(SNAPSHOT), s)
}

fn model_pairs(cfg: &ModelConfig) -> Pairs {
    cfg.to_pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect()
}

fn train_pairs(cfg: &TrainConfig, standardize: bool) -> Pairs {
    vec![
        pair("train.epochs", cfg.epochs),
        pair("train.batch_size", cfg.batch_size),
        pair("train.learning_rate", format!("{:?}", cfg.learning_rate)),
        pair("train.weight_decay", format!("{:?}", cfg.weight_decay)),
        pair("train.seed", cfg.seed),
        pair("train.standardize", standardize),
    ]
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_individuals: a.individuals,
        cells_per_individual: a.cells,
        n_features: a.features,
        n_classes: a.classes,
        difficulty: a.difficulty,
        seed: a.seed,
    };
    let data = synthesize_dataset(&spec)?;
    let split = split_by_individual(&data, a.train_ratio, a.seed)?;
    let (train, test) = split.apply(&data);
    create_dir(&a.out)?;
    write_csv(a.out.join("train.csv"), &train)?;
    write_csv(a.out.join("test.csv"), &test)?;

    let join = |ids: &std::collections::BTreeSet<String>| ids.iter().cloned().collect::<Vec<_>>().join(" ");
    let mut manifest = String::new();
    let _ = writeln!(manifest, "train.csv cells={} individuals={}", train.len(), join(&split.train_individuals));
    let _ = writeln!(manifest, "test.csv cells={} individuals={}", test.len(), join(&split.test_individuals));
    let _ = writeln!(manifest, "features={} classes={}", data.n_features(), data.vocab.classes().join(" "));
    write(&a.out.join("manifest.txt"), manifest)?;

    write_snapshot(
        &a.out,
        "synth",
        &[
            pair("individuals", a.individuals),
            pair("cells", a.cells),
            pair("features", a.features),
            pair("classes", a.classes),
            pair("difficulty", format!("{:?}", a.difficulty)),
            pair("seed", a.seed),
            pair("train_ratio", format!("{:?}", a.train_ratio)),
        ],
    )?;
    println!("wrote {} train and {} test cells to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

/// Train-set statistics, or identity when standardization is off.
fn standardizer_for(train: &Dataset, standardize: bool) -> Result<Standardizer> {
    Ok(if standardize {
        Standardizer::fit(train)?
    } else {
        Standardizer::identity(train.n_features())
    })
}

struct Fitted {
    model: UamClassifier,
    losses: Vec<Vec<f64>>,
}

fn fit(model_args: &ModelArgs, flags: &TrainFlags, train: &Dataset) -> Result<Fitted> {
    let cfg = model_args.config(train.n_features(), train.n_classes());
    fit_config(&cfg, flags, train)
}

fn fit_config(cfg: &ModelConfig, flags: &TrainFlags, train: &Dataset) -> Result<Fitted> {
    let mut model = UamClassifier::init(cfg, &mut ChaCha8Rng::seed_from_u64(flags.seed))?;
    let losses = train_model(&mut model, train, &flags.config())?;
    Ok(Fitted { model, losses })
}

fn write_metrics(out: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write(
        &out.join(format!("{stem}.csv")),
        format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    write(&out.join(format!("{stem}_report.txt")), report.to_report())
}

fn vocab_meta(vocab: &LabelVocab) -> Pairs {
    let mut v = vec![pair("classes", vocab.len())];
    v.extend(vocab.classes().iter().enumerate().map(|(i, c)| pair(&format!("class.{i}"), c)));
    v
}

fn vocab_from_meta(ck: &Checkpoint) -> Result<LabelVocab> {
    let n: usize = ck
        .meta("classes")
        .context("checkpoint has no label vocabulary")?
        .parse()
        .context("bad class count in checkpoint")?;
    let classes = (0..n)
        .map(|i| {
            ck.meta(&format!("class.{i}"))
                .map(str::to_string)
                .with_context(|| format!("checkpoint is missing class {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelVocab::from_classes(classes)?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let raw = load_csv(&a.data)?;
    let standardize = !a.train.no_standardize;
    let stdz = standardizer_for(&raw, standardize)?;
    let train = stdz.transform(&raw)?;
    let test = match &a.test {
        Some(p) => Some(stdz.transform(&load_csv_with_vocab(p, &raw.vocab)?)?),
        None => None,
    };
    let cfg = a.model.config(train.n_features(), train.n_classes());
    let tcfg = a.train.config();
    cfg.validate()?;
    tcfg.validate()?;
    create_dir(&a.out)?;

    let mut snapshot = vec![pair("data", a.data.display())];
    if let Some(t) = &a.test {
        snapshot.push(pair("test", t.display()));
    }
    snapshot.extend(model_pairs(&cfg));
    snapshot.extend(train_pairs(&tcfg, standardize));
    write_snapshot(&a.out, "train", &snapshot)?;

    let fitted = fit(&a.model, &a.train, &train)?;
    let mut losses = String::from("epoch,batch,loss\n");
    for (e, epoch) in fitted.losses.iter().enumerate() {
        for (b, l) in epoch.iter().enumerate() {
            let _ = writeln!(losses, "{e},{b},{l:?}");
        }
    }
    write(&a.out.join("losses.csv"), losses)?;

    let mut ck = Checkpoint::new(fitted.model);
    ck.meta = vocab_meta(&train.vocab);
    ck.meta.push(pair("standardized", standardize));
    ck.extras.push((STANDARDIZER.into(), stdz.to_tensor()));
    ck.save(a.out.join("model.ckpt"))?;

    let train_report = evaluate(&ck.model, &train)?;
    write_metrics(&a.out, "train_metrics", &train_report)?;
    println!("train accuracy {:.4}", train_report.accuracy);
    if let Some(test) = &test {
        let report = evaluate(&ck.model, test)?;
        write_metrics(&a.out, "metrics", &report)?;
        print!("{}", report.to_report());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let vocab = vocab_from_meta(&ck)?;
    let raw = load_csv_with_vocab(&a.data, &vocab)?;
    let stdz = match ck.extra(STANDARDIZER) {
        Some(t) => Standardizer::from_tensor(t)?,
        None => Standardizer::identity(raw.n_features()),
    };
    let expected = ck.model.config.n_features;
    if raw.n_features() != expected || stdz.mean.len() != expected {
        return Err(uam_core::Error::Data(format!(
            "{} has {} features, checkpoint expects {expected}",
            a.data.display(),
            raw.n_features()
        ))
        .into());
    }
    let data = stdz.transform(&raw)?;
    create_dir(&a.out)?;
    let mut snapshot = vec![pair("data", a.data.display()), pair("checkpoint", a.checkpoint.display())];
    snapshot.extend(model_pairs(&ck.model.config));
    write_snapshot(&a.out, "eval", &snapshot)?;

    let probs = predict_proba(&ck.model, &data, 256)?;
    let report = MetricsReport::from_probabilities(&probs, &data.labels(), &data.vocab)?;
    write_metrics(&a.out, "metrics", &report)?;

    let mut pred = String::from("cell_id,label,predicted");
    for c in vocab.classes() {
        let _ = write!(pred, ",p_{c}");
    }
    pred.push('\n');
    for (r, p) in data.records.iter().zip(&probs) {
        let best = uam_core::train::argmax(p);
        let _ = write!(pred, "{},{},{}", r.cell_id, vocab.name(r.label), vocab.name(best));
        for v in p {
            let _ = write!(pred, ",{v:?}");
        }
        pred.push('\n');
    }
    write(&a.out.join("predictions.csv"), pred)?;
    print!("{}", report.to_report());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let raw = load_csv(&a.data)?;
    let (raw_train, raw_test) = match &a.test {
        Some(p) => (raw.clone(), load_csv_with_vocab(p, &raw.vocab)?),
        None => split_by_individual(&raw, a.train_ratio, a.train.seed)?.apply(&raw),
    };
    let standardize = !a.train.no_standardize;
    let stdz = standardizer_for(&raw_train, standardize)?;
    let (train, test) = (stdz.transform(&raw_train)?, stdz.transform(&raw_test)?);
    let base = a.model.config(train.n_features(), train.n_classes());

    let values: Vec<String> = if !a.values.is_empty() {
        a.values.iter().map(|v| v.trim().to_string()).collect()
    } else {
        match a.sweep {
            Sweep::Blocks => ["2", "4", "6", "8"].map(String::from).to_vec(),
            Sweep::Variant => Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
        }
    };
    let configs = values
        .iter()
        .map(|v| match a.sweep {
            Sweep::Blocks => v
                .parse::<usize>()
                .map(|n| ModelConfig { n_blocks: n, ..base.clone() })
                .map_err(|_| uam_core::Error::Config(format!("block count {v:?} is not an integer"))),
            Sweep::Variant => v.parse::<Variant>().map(|var| base.with_variant(var)),
        })
        .collect::<uam_core::Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    a.train.config().validate()?;
    create_dir(&a.out)?;

    let sweep_name = match a.sweep {
        Sweep::Blocks => "blocks",
        Sweep::Variant => "variant",
    };
    let mut snapshot = vec![
        pair("data", a.data.display()),
        pair("sweep", sweep_name),
        pair("values", values.join(",")),
        pair("train_cells", train.len()),
        pair("test_cells", test.len()),
    ];
    snapshot.extend(model_pairs(&base));
    snapshot.extend(train_pairs(&a.train.config(), standardize));
    write_snapshot(&a.out, "ablate", &snapshot)?;

    let mut table = format!("value,variant,n_blocks,parameters,{}\n", MetricsReport::csv_header());
    let mut points = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let fitted = fit_config(cfg, &a.train, &train)?;
        let report = evaluate(&fitted.model, &test)?;
        let params = parameter_count(&fitted.model);
        let _ = writeln!(table, "{value},{},{},{params},{}", cfg.variant, cfg.n_blocks, report.csv_row());
        println!("{sweep_name}={value}: test accuracy {:.4}", report.accuracy);
        points.push((value.clone(), report.accuracy));
    }
    write(&a.out.join("ablation.csv"), table)?;
    let x_label = match a.sweep {
        Sweep::Blocks => "UAM blocks",
        Sweep::Variant => "architecture",
    };
    write(&a.out.join("ablation.svg"), line_chart(&points, x_label, "test accuracy"))?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(uam_core::Error::Config("--seeds must be at least 1".into()).into());
    }
    let flip = match &a.inject_sign_flip {
        Some(op) => Some(
            *PRIMITIVES
                .iter()
                .find(|p| **p == op.as_str())
                .ok_or_else(|| uam_core::Error::Config(format!("unknown primitive {op:?}")))?,
        ),
        None => None,
    };
    inject_sign_flip(flip);
    let entries = gradsuite::run_suite(a.seeds);
    inject_sign_flip(None);
    let entries = entries?;

    let mut csv = String::from("name,kind,seeds,checked,max_rel_error,worst,passed\n");
    println!("{:<18} {:<9} {:>8} {:>14}  status", "check", "kind", "coords", "max rel error");
    let mut failures = 0;
    for e in &entries {
        let kind = match e.kind {
            CheckKind::Primitive => "primitive",
            CheckKind::Layer => "layer",
        };
        let ok = e.passed();
        failures += usize::from(!ok);
        println!(
            "{:<18} {:<9} {:>8} {:>14.3e}  {}",
            e.name,
            kind,
            e.report.checked,
            e.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        let _ = writeln!(
            csv,
            "{},{kind},{},{},{:e},{},{ok}",
            e.name, e.seeds, e.report.checked, e.report.max_rel_error, e.report.worst
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("gradcheck.csv"), csv)?;
        write_snapshot(
            out,
            "gradcheck",
            &[
                pair("seeds", a.seeds),
                pair("eps", format!("{SUITE_EPS:e}")),
                pair("tolerance", format!("{SUITE_TOLERANCE:e}")),
                pair("inject_sign_flip", flip.unwrap_or("none")),
            ],
        )?;
    }
    if failures > 0 {
        bail!(CheckFailed(format!("{failures} of {} gradient checks failed", entries.len())));
    }
    println!("all {} checks passed (eps {SUITE_EPS:e}, tolerance {SUITE_TOLERANCE:e})", entries.len());
    Ok(())
}

pub fn cost(a: CostArgs) -> Result<()> {
    let base = a.model.config(a.features, a.classes);
    base.validate()?;
    let t = a.seq_len.unwrap_or_else(|| base.seq_len());
    let variants: &[Variant] = if a.all { &Variant::ALL } else { &Variant::COST_TABLE };

    let mut csv = String::from("variant,parameters,parameters_tree,flops_per_token,flops_per_sequence\n");
    println!(
        "{:<8} {:>12} {:>12} {:>16} {:>18}",
        "variant", "params", "params(tree)", "flops/token", "flops/sequence"
    );
    let mut mismatches = Vec::new();
    for &v in variants {
        let cfg = base.with_variant(v);
        let report = cost_report(&cfg, t);
        let tree = parameter_count(&UamClassifier::zeroed(&cfg)?) as u64;
        if tree != report.parameter_count {
            mismatches.push(v.name());
        }
        println!(
            "{:<8} {:>12} {:>12} {:>16} {:>18}",
            v.name(),
            report.parameter_count,
            tree,
            report.flops_per_token,
            report.flops_per_sequence
        );
        let _ = writeln!(
            csv,
            "{},{},{tree},{},{}",
            v.name(),
            report.parameter_count,
            report.flops_per_token,
            report.flops_per_sequence
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("cost.csv"), csv)?;
        let mut snapshot = model_pairs(&base);
        snapshot.push(pair("seq_len", t));
        snapshot.push(pair("all", a.all));
        write_snapshot(out, "cost", &snapshot)?;
    }
    if !mismatches.is_empty() {
        bail!(CheckFailed(format!("closed-form and counted parameters differ for {}", mismatches.join(", "))));
    }
    Ok(())
}

fn seg_samples(dir: &Option<std::path::PathBuf>, spec: SegSynthSpec) -> Result<Vec<SegSample>> {
    Ok(match dir {
        Some(d) => load_samples(d)?,
        None => synthesize_seg_samples(&spec)?,
    })
}

pub fn multimodal(a: MultimodalArgs) -> Result<()> {
    let spec = |n, seed| SegSynthSpec {
        n_samples: n,
        size: a.size,
        n_features: a.features,
        seed,
        ..SegSynthSpec::default()
    };
    let train = seg_samples(&a.train_dir, spec(a.train_samples, a.train_seed))?;
    let test = seg_samples(&a.test_dir, spec(a.test_samples, a.test_seed))?;
    let n_features = train
        .iter()
        .find_map(|s| s.cell_features.first().map(Vec::len))
        .unwrap_or(a.features);
    let config = MultimodalConfig {
        backbone: ModelConfig {
            n_features,
            ..MultimodalConfig::default().backbone
        },
        encoder: match a.encoder {
            EncoderArg::Toy => EncoderKind::Toy,
            EncoderArg::Frozen => EncoderKind::Frozen,
        },
        freeze_backbone: a.freeze_backbone,
        ..MultimodalConfig::default()
    };
    let tcfg = MultimodalTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    let mut snapshot = vec![
        pair("train", a.train_dir.as_ref().map_or(format!("synth seed={} n={}", a.train_seed, train.len()), |d| d.display().to_string())),
        pair("test", a.test_dir.as_ref().map_or(format!("synth seed={} n={}", a.test_seed, test.len()), |d| d.display().to_string())),
        pair("size", a.size),
        pair("seed", a.seed),
        pair("epochs", tcfg.epochs),
        pair("batch_size", tcfg.batch_size),
        pair("learning_rate", format!("{:?}", tcfg.learning_rate)),
        pair("weight_decay", format!("{:?}", tcfg.weight_decay)),
        pair("encoder", format!("{:?}", config.encoder).to_lowercase()),
        pair("freeze_backbone", config.freeze_backbone),
        pair("d_img", config.d_img),
        pair("projection_hidden", config.projection_hidden),
        pair("decoder_hidden", config.decoder_hidden),
        pair("ablate", a.ablate),
    ];
    snapshot.extend(model_pairs(&config.backbone));
    write_snapshot(&a.out, "multimodal", &snapshot)?;
    if a.save_samples {
        save_samples(&a.out.join("samples").join("train"), &train)?;
        save_samples(&a.out.join("samples").join("test"), &test)?;
    }

    let mut runs = vec![("radiomics", config.clone())];
    if a.ablate {
        runs.push(("image_only", MultimodalConfig { use_radiomics: false, ..config.clone() }));
    }
    let mut summary = format!("run,{},cell_accuracy\n", SegMetrics::csv_header());
    let mut per_sample = format!("run,sample,{}\n", SegMetrics::csv_header());
    for (name, cfg) in runs {
        let mut model = MultimodalModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
        train_multimodal(&train, &mut model, &tcfg)?;
        let report = model.evaluate(&test)?;
        let acc = report.cell_accuracy.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(summary, "{name},{},{acc}", report.segmentation.csv_row());
        for (i, m) in report.per_sample.iter().enumerate() {
            let _ = writeln!(per_sample, "{name},{i},{}", m.csv_row());
        }
        let s = report.segmentation;
        println!(
            "{name}: mIoU {:.4} cIoU {:.4} mDICE {:.4} cDICE {:.4} precision {:.4}",
            s.m_iou, s.c_iou, s.m_dice, s.c_dice, s.precision
        );
    }
    write(&a.out.join("segmentation.csv"), summary)?;
    write(&a.out.join("segmentation_per_sample.csv"), per_sample)?;
    Ok(())
}

