//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fewshot_dc::annotations::{
    compute_missing_rate, load_split_files, parse_annotations, parse_annotations_str, parse_split, parse_split_str,
    ClassScope, ImageCounting, RateOptions, ScopeKind,
};
use fewshot_dc::dcloss::{
    dc_loss_image, negative_head_grad_logits, negative_head_loss, standard_ce_image, LabelMask, RoiClassificationBatch,
};
use fewshot_dc::detection::{iou, BBox};
use fewshot_dc::experiment::{grad_check, simulate, ExperimentConfig};
use fewshot_dc::numerics::{cross_entropy_from_logits, stable_softmax, LogitVector};
use fewshot_dc::sim::{
    export_dataset, generate_scenes, make_fewshot_split, stream_rng, synthetic_missing_rate, ClassSampling,
    FeatureModel, SimConfig, Stream,
};
use fewshot_dc::trainer::{train, LossKind, TrainConfig};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

type Criterion = (&'static str, fn() -> Outcome);

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, c: usize) -> LabelMask {
    let mut bits: Vec<u8> = (0..c).map(|_| rng.random_range(0..=1)).collect();
    bits.push(1);
    LabelMask::from_bits(&bits).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let r = grad_check(200, 1e-6, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    check(
        r.passed() && secs < 5.0,
        format!(
            "200 cases, max rel err pos {:.2e} neg {:.2e} linear {:.2e} (<= 1e-6), {secs:.2}s",
            r.max_positive_head, r.max_negative_head, r.max_linear
        ),
    )
}

fn identity_mask_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_loss: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(1..=10);
        let n = rng.random_range(1..=32);
        let logits = (0..n)
            .map(|_| LogitVector::new(normal(&mut rng, c + 1, 3.0)).unwrap())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..=c)).collect();
        let batch = RoiClassificationBatch::new(logits, labels, LabelMask::all_ones(c)).unwrap();
        let d = (dc_loss_image(&batch).unwrap().total - standard_ce_image(&batch).unwrap()).abs();
        worst_loss = worst_loss.max(d);
    }

    let sim = SimConfig {
        class_sampling: ClassSampling::Cycle,
        instances_per_scene: (5, 8),
        ..Default::default()
    };
    let mut scenes = generate_scenes(&sim, &mut stream_rng(3, Stream::Scenes)).unwrap();
    let split = make_fewshot_split(
        &mut scenes,
        sim.num_fg_classes,
        usize::MAX,
        &mut stream_rng(3, Stream::Split),
    )
    .unwrap();
    let fm = FeatureModel::from_config(&sim).unwrap();
    let ce = TrainConfig {
        steps: 100,
        loss: LossKind::StandardCe,
        seed: 3,
        ..Default::default()
    };
    let dc = TrainConfig {
        loss: LossKind::Decoupled,
        ..ce.clone()
    };
    let a = train(&scenes, &split, &sim, &fm, &ce).unwrap().classifier;
    let b = train(&scenes, &split, &sim, &fm, &dc).unwrap().classifier;
    let worst_param = a
        .weights
        .iter()
        .chain(&a.biases)
        .zip(b.weights.iter().chain(&b.biases))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        worst_loss <= 1e-12 && worst_param <= 1e-9 && secs < 10.0,
        format!("max |dc - ce| {worst_loss:.1e} over 100 batches, max param gap {worst_param:.1e} after 100 steps, {secs:.2}s"),
    )
}

fn masked_dimension_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut all_zero = true;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(1..=10);
        let x = normal(&mut rng, c + 1, 3.0);
        let m = random_mask(&mut rng, c);
        let g = negative_head_grad_logits(&x, &m).unwrap();
        let mx: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| if m.get(i) { *v } else { 0.0 })
            .collect();
        let p = stable_softmax(&mx).unwrap();
        let masked_mass: f64 = (0..=c).filter(|&i| !m.get(i)).map(|i| p.as_slice()[i]).sum();
        all_zero &= (0..=c).filter(|&i| !m.get(i)).all(|i| g[i] == 0.0);
        worst = worst.max((g.iter().sum::<f64>() + masked_mass).abs());
    }
    check(
        all_zero && worst <= 1e-12,
        format!("masked components exactly 0: {all_zero}, max |sum + masked mass| {worst:.1e}"),
    )
}

// The stated 1.806379 disagrees with the closed form, which evaluates to
// 1.8063557 at 40 digits; the check uses the reference value.
const NEG_HEAD_REFERENCE: f64 = 1.806355712229146520172620579553978146167;
const NEG_HEAD_STATED: f64 = 1.806379;

fn worked_values() -> Outcome {
    let neg = negative_head_loss(&[2.0, 1.0, 0.5], &LabelMask::from_bits(&[1, 0, 1]).unwrap()).unwrap();
    let ce = cross_entropy_from_logits(&[0.0, 0.0, 0.0], 1).unwrap();
    let v = iou(
        &BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        &BBox::new(5.0, 5.0, 15.0, 15.0).unwrap(),
    )
    .unwrap();
    let ok =
        (neg - NEG_HEAD_REFERENCE).abs() <= 1e-5 && (ce - 3f64.ln()).abs() <= 1e-12 && (v - 1.0 / 7.0).abs() <= 1e-12;
    check(
        ok,
        format!(
            "neg head {neg:.7} (reference {NEG_HEAD_REFERENCE:.7}; stated {NEG_HEAD_STATED} is off by {:.1e}), ce ln3 gap {:.1e}, iou 1/7 gap {:.1e}",
            (neg - NEG_HEAD_STATED).abs(),
            (ce - 3f64.ln()).abs(),
            (v - 1.0 / 7.0).abs()
        ),
    )
}

fn paired_experiment(shots: usize) -> (Vec<(f64, f64)>, f64, f64) {
    let cfg = ExperimentConfig {
        shots,
        ..Default::default()
    };
    let t = Instant::now();
    let rows = simulate(&cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut pairs = Vec::new();
    let mut rates = Vec::new();
    for seed in &cfg.seeds {
        let get = |k| rows.iter().find(|r| r.seed == *seed && r.loss == k).unwrap();
        let (ce, dc) = (get(LossKind::StandardCe), get(LossKind::Decoupled));
        pairs.push((ce.m_recall, dc.m_recall));
        rates.push(ce.missing_rate);
    }
    let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    (pairs, mean_rate, secs)
}

fn bias_mitigation() -> Outcome {
    let (pairs, rate, secs) = paired_experiment(1);
    let wins = pairs.iter().filter(|(ce, dc)| dc > ce).count();
    let gain = pairs.iter().map(|(ce, dc)| dc - ce).sum::<f64>() / pairs.len() as f64;
    check(
        rate >= 0.7 && wins >= 9 && gain >= 0.10 && secs < 120.0,
        format!(
            "missing rate {rate:.3}, DC wins {wins}/10, mean mRecall gain {:.1}pp, {secs:.1}s",
            100.0 * gain
        ),
    )
}

fn zero_missing_robustness() -> Outcome {
    let (pairs, rate, secs) = paired_experiment(usize::MAX);
    let n = pairs.len() as f64;
    let ce = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let dc = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    check(
        rate == 0.0 && (dc - ce).abs() <= 0.03 && secs < 120.0,
        format!(
            "missing rate {rate}, mean mRecall CE {ce:.4} DC {dc:.4}, gap {:.2}pp, {secs:.1}s",
            100.0 * (dc - ce).abs()
        ),
    )
}

fn missing_rate_oracle() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..10 {
        let sim = SimConfig {
            num_scenes: 60,
            ..Default::default()
        };
        let mut scenes = generate_scenes(&sim, &mut stream_rng(seed, Stream::Scenes)).unwrap();
        let k = [1, 2, 5, 10, 1000][seed as usize % 5];
        let split = make_fewshot_split(&mut scenes, 5, k, &mut stream_rng(seed, Stream::Split)).unwrap();
        let (anns, spec) = export_dataset(&scenes, &split, 5).unwrap();
        let anns = parse_annotations_str(&anns.to_json(), "export").unwrap();
        let spec = parse_split_str(&spec.to_json(), "export", &anns).unwrap();
        for scope in [vec![0, 1, 2, 3, 4], vec![3, 4]] {
            let set: BTreeSet<usize> = scope.iter().copied().collect();
            let direct = synthetic_missing_rate(&scenes, &split, &set).unwrap();
            let novel: BTreeSet<u64> = scope.iter().map(|&c| c as u64).collect();
            let cs = ClassScope::new(ScopeKind::NovelOnly, BTreeSet::new(), novel).unwrap();
            let via = compute_missing_rate(&anns, &spec, &cs, RateOptions::default()).unwrap();
            if direct.rate != via.rate || direct.present != via.present || direct.labeled != via.labeled {
                mismatches += 1;
            }
        }
    }

    let anns = parse_annotations(Path::new(FIXTURES).join("fig1c_annotations.json")).unwrap();
    let split = parse_split(Path::new(FIXTURES).join("fig1c_split.json"), &anns).unwrap();
    let full = parse_split(Path::new(FIXTURES).join("fig1c_full_split.json"), &anns).unwrap();
    let scope = ClassScope::new(ScopeKind::BasePlusNovel, [1, 17].into(), [18].into()).unwrap();
    let rate = |s, o| compute_missing_rate(&anns, s, &scope, o).unwrap().rate;
    let fig = rate(&split, RateOptions::default());
    let zero = rate(&full, RateOptions::default());
    let crowd = rate(
        &split,
        RateOptions {
            include_crowd: true,
            image_counting: ImageCounting::Once,
        },
    );
    check(
        mismatches == 0 && fig == 2.0 / 3.0 && zero == 0.0 && crowd == 0.75,
        format!("export/re-ingest mismatches {mismatches}/20, fixtures {fig} / {zero} / {crowd}"),
    )
}

// Set FSDC_COCO_ANNOTATIONS to comma-separated annotation files and
// FSDC_COCO_SPLIT_DIR to a directory of full_box_{K}shot_*_trainval.json files.
fn coco_missing_rates() -> Outcome {
    let (Ok(ann_var), Ok(dir)) = (
        std::env::var("FSDC_COCO_ANNOTATIONS"),
        std::env::var("FSDC_COCO_SPLIT_DIR"),
    ) else {
        return Outcome::Skip("set FSDC_COCO_ANNOTATIONS and FSDC_COCO_SPLIT_DIR to run".into());
    };
    let t = Instant::now();
    let mut files = ann_var.split(',');
    let mut anns = parse_annotations(files.next().unwrap()).unwrap();
    for f in files {
        anns.merge(parse_annotations(f).unwrap()).unwrap();
    }
    let mut details = Vec::new();
    let mut ok = true;
    for (k, expected) in [(1usize, 0.833), (5, 0.803), (10, 0.767)] {
        let prefix = format!("full_box_{k}shot_");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with(&prefix) && name.ends_with("_trainval.json")
            })
            .collect();
        paths.sort();
        let split = load_split_files(&paths, &anns, Some(k)).unwrap();
        let all: BTreeSet<u64> = anns.categories.keys().copied().collect();
        let scope = ClassScope::new(ScopeKind::BasePlusNovel, BTreeSet::new(), all).unwrap();
        let r = compute_missing_rate(&anns, &split, &scope, RateOptions::default()).unwrap();
        ok &= (r.rate - expected).abs() <= 0.01;
        details.push(format!(
            "{k}-shot {:.1}% (target {:.1}%)",
            100.0 * r.rate,
            100.0 * expected
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("{}, {secs:.1}s", details.join(", ")))
}

fn run_cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot-dc"))
        .args(args)
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn cli_determinism() -> Outcome {
    let ann = format!("{FIXTURES}/fig1c_annotations.json");
    let split = format!("{FIXTURES}/fig1c_split.json");
    let commands: Vec<Vec<&str>> = vec![
        vec!["grad-check", "--cases", "50", "--seed", "3"],
        vec!["simulate", "--seeds", "0..3", "--steps", "300"],
        vec!["simulate", "--seeds", "0,1", "--steps", "200", "--format", "machine"],
        vec![
            "missing-rate",
            "--annotations",
            &ann,
            "--split",
            &split,
            "--scope",
            "both",
        ],
    ];
    let mut differing = Vec::new();
    for args in &commands {
        let (c1, o1) = run_cli(args);
        let (c2, o2) = run_cli(args);
        if c1 != 0 || c1 != c2 || o1 != o2 || o1.is_empty() {
            differing.push(args[0]);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        run_cli(&[
            "simulate",
            "--seeds",
            "4,5",
            "--steps",
            "200",
            "--out",
            d.to_str().unwrap(),
        ]);
    }
    for name in ["results.csv", "summary.csv"] {
        if std::fs::read(a.join(name)).ok() != std::fs::read(b.join(name)).ok() {
            differing.push(name);
        }
    }
    let (ra, rb) = (
        run_cli(&["report", a.join("manifest.json").to_str().unwrap()]),
        run_cli(&["report", b.join("manifest.json").to_str().unwrap()]),
    );
    if ra != rb || ra.0 != 0 {
        differing.push("report");
    }
    check(
        differing.is_empty(),
        format!("{} invocations rerun; differing: {differing:?}", commands.len() + 3),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 identity-mask equivalence", identity_mask_equivalence),
        ("3 masked-dimension exactness", masked_dimension_exactness),
        ("4 worked values", worked_values),
        ("5 bias mitigation", bias_mitigation),
        ("6 zero-missing robustness", zero_missing_robustness),
        ("7 missing-rate oracle", missing_rate_oracle),
        ("8 COCO missing rates", coco_missing_rates),
        ("9 CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let (tag, detail) = match f() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
