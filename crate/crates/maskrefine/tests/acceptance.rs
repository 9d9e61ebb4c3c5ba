//! Acceptance suite: one line per criterion, run in order on one thread.
//! Exits non-zero when any criterion fails.

#[path = "../../core/tests/support/coco_reference.rs"]
mod coco_reference;

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use maskrefine::cli::{run, EXIT_OK, GRADCHECK_TOLERANCE};
use maskrefine::report::measure_refine_fps;
use maskrefine_core::eval::{average_precision, coco_metrics, measure_fps, Clock};
use maskrefine_core::model::{ModelParams, TreeSource};
use maskrefine_core::quadtree::*;
use maskrefine_core::training::*;
use maskrefine_core::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_EPS: f32 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const PROPAGATION_BUDGET: Duration = Duration::from_secs(10);
const LOSS_TOLERANCE: f32 = 1e-6;
const EVAL_TOLERANCE: f64 = 1e-9;
const SUM_ROUNDING: f64 = 1e-12;
const TRAIN_SAMPLES: usize = 500;
const TRAIN_EPOCHS: usize = 30;
const MIN_IOU_GAIN: f64 = 0.03;
const TRAIN_BUDGET: Duration = Duration::from_secs(60 * 60);
const OVERFIT_STEPS: usize = 500;
const OVERFIT_LOSS: f32 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn grid(level: u8, values: Vec<f32>) -> MaskGrid {
    MaskGrid::new(level, MaskKind::Probability, values).unwrap()
}

fn random_scores(rng: &mut ChaCha8Rng, level: u8) -> MaskGrid {
    let n = side(level) * side(level);
    grid(level, (0..n).map(|_| rng.gen::<f32>()).collect())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = gradient_probe(GRAD_EPS).unwrap();
    let took = start.elapsed();
    let pass = r.max_rel_error_smooth < GRADCHECK_TOLERANCE && took < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "{} entries, max rel error {:.2e} over {} kink-free entries (bound {GRADCHECK_TOLERANCE:.0e}); \
             {:.2e} including {} entries whose stencil crosses a kink; {:.1?}",
            r.checked,
            r.max_rel_error_smooth,
            r.checked - r.kinked,
            r.max_rel_error,
            r.kinked,
            took
        ),
    )
}

fn random_tree(rng: &mut ChaCha8Rng) -> Quadtree {
    let threshold = rng.gen_range(0.5..0.99);
    let cap = if rng.gen_bool(0.3) { rng.gen_range(0..300) } else { usize::MAX };
    build_quadtree(&random_scores(rng, 1), &random_scores(rng, 2), threshold, cap).unwrap()
}

fn propagation_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut agree, mut nodes) = (0, 0);
    for _ in 0..100 {
        let coarse = random_scores(&mut rng, 1);
        let mut tree = random_tree(&mut rng);
        let labels: Vec<f32> = (0..tree.len()).map(|_| rng.gen()).collect();
        tree.set_labels(&labels).unwrap();
        nodes += tree.len();
        let fast = propagate_labels(&coarse, &tree).unwrap();
        let slow = brute_force_assemble(&coarse, &tree).unwrap();
        if fast.values().iter().zip(slow.values()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            agree += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        agree == 100 && took < PROPAGATION_BUDGET,
        format!("{agree}/100 triples pixel-identical ({nodes} nodes in total); {took:.1?}"),
    )
}

fn random_gt(rng: &mut ChaCha8Rng) -> MaskGrid {
    let (cx, cy) = (rng.gen_range(10.0..46.0f32), rng.gen_range(10.0..46.0f32));
    let (rx, ry) = (rng.gen_range(4.0..24.0f32), rng.gen_range(4.0..24.0f32));
    let v = (0..56 * 56)
        .map(|k| {
            let (x, y) = ((k % 56) as f32 + 0.5, (k / 56) as f32 + 0.5);
            if ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0 { 1.0 } else { 0.0 }
        })
        .collect();
    MaskGrid::new(FINE_LEVEL, MaskKind::Binary, v).unwrap()
}

fn perfect_label_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut exact, mut covered, mut wrong) = (0, 0usize, 0usize);
    for _ in 0..50 {
        let gt = random_gt(&mut rng);
        let mut tree = gt_quadtree(&gt, DEFAULT_THRESHOLD, usize::MAX).unwrap();
        let pooled = [1, 2].map(|l| downsample_mask(&gt, l).unwrap());
        let labels: Vec<f32> = tree
            .nodes()
            .iter()
            .map(|n| if n.level == 3 { gt.get(n.cell.0, n.cell.1) } else { pooled[n.level as usize - 1].get(n.cell.0, n.cell.1) })
            .collect();
        tree.set_labels(&labels).unwrap();
        let out = propagate_labels(&pooled[0], &tree).unwrap();
        let mut ok = true;
        for y in 0..56 {
            for x in 0..56 {
                let hit = tree.nodes().iter().any(|n| n.cell == (y >> (3 - n.level), x >> (3 - n.level)));
                if hit {
                    covered += 1;
                    if out.get(y, x) != gt.get(y, x) {
                        ok = false;
                        wrong += 1;
                    }
                }
            }
        }
        exact += ok as usize;
    }
    outcome(exact == 50, format!("{exact}/50 masks exact under every node; {wrong} of {covered} covered pixels differ"))
}

fn loss_arithmetic() -> Outcome {
    let w = LossWeights::default();
    let unit = |k: usize| {
        let mut v = [0.0f32; 4];
        v[k] = 1.0;
        LossParts { detect: v[0], coarse: v[1], refine: v[2], incoherence: v[3] }
    };
    let got: Vec<f32> = (0..4).map(|k| loss_total(&unit(k), &w).unwrap()).collect();
    let probe = loss_total(&LossParts { detect: 0.0, coarse: 1.0, refine: 1.0, incoherence: 1.0 }, &w).unwrap();
    let pass = got == [0.75, 0.75, 0.8, 0.5] && (probe - 2.05).abs() <= LOSS_TOLERANCE;
    outcome(pass, format!("unit vectors give {got:?}; parts (0,1,1,1) give {probe}"))
}

fn node_cells(tree: &Quadtree) -> BTreeSet<(u8, (usize, usize))> {
    tree.nodes().iter().map(|n| (n.level, n.cell)).collect()
}

fn quadtree_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut geometry, mut ordering, mut monotone) = (0, 0, 0);
    for _ in 0..1000 {
        let (l1, l2) = (random_scores(&mut rng, 1), random_scores(&mut rng, 2));
        let t = rng.gen_range(0.3f32..0.95);
        let cap = if rng.gen_bool(0.5) { usize::MAX } else { rng.gen_range(0..400) };
        let tree = build_quadtree(&l1, &l2, t, cap).unwrap();

        let geo_ok = tree.len() <= cap
            && tree.nodes().iter().all(|n| match n.parent {
                None => n.level == 1,
                Some(p) => {
                    let parent = &tree.nodes()[p];
                    parent.level + 1 == n.level && parent.cell == (n.cell.0 / 2, n.cell.1 / 2)
                }
            });
        geometry += geo_ok as usize;

        let seq = serialize_sequence(&tree).unwrap();
        let keys: Vec<_> = seq.entries().iter().map(|e| (e.level, e.cell)).collect();
        let context_ok = keys[..CONTEXT_LEN].iter().enumerate().all(|(k, &(l, c))| l == 0 && c == (k / 7, k % 7));
        let sorted_unique = keys[CONTEXT_LEN..].windows(2).all(|w| w[0] < w[1]);
        ordering += (seq.len() == CONTEXT_LEN + tree.len() && context_ok && sorted_unique) as usize;

        let hi = (t + rng.gen_range(0.0f32..0.4)).min(0.99);
        let lo_cells = node_cells(&build_quadtree(&l1, &l2, t, usize::MAX).unwrap());
        let hi_cells = node_cells(&build_quadtree(&l1, &l2, hi, usize::MAX).unwrap());
        monotone += hi_cells.is_subset(&lo_cells) as usize;
    }
    outcome(
        geometry == 1000 && ordering == 1000 && monotone == 1000,
        format!("geometry {geometry}/1000, sequence order {ordering}/1000, threshold monotonicity {monotone}/1000"),
    )
}

fn evaluator_oracle() -> Outcome {
    use coco_reference::*;
    let m = micro_set();
    let (preds, gts) = records(&m);
    let rep = coco_metrics(&preds, &gts).unwrap();
    let pairs = [
        (rep.ap, reference_mean(&m, 0)),
        (rep.ap50, reference_ap(&m, 0, 0.5)),
        (rep.ap75, reference_ap(&m, 0, 0.75)),
        (rep.ap_small, reference_mean(&m, 1)),
        (rep.ap_medium, reference_mean(&m, 2)),
        (rep.ap_large, reference_mean(&m, 3)),
    ];
    let mut worst = 0.0f64;
    let mut all_defined_and_close = true;
    for (got, want) in pairs {
        match (got, want) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => all_defined_and_close = false,
        }
    }
    all_defined_and_close &= worst <= EVAL_TOLERANCE;

    // AP is a mean of ten per-threshold values, each at most AP50, so only
    // summation rounding can put it above.
    let (mut dominated, mut excess) = (0, 0.0f64);
    for seed in 0..100 {
        let m = random_set(seed);
        let (preds, gts) = records(&m);
        let r = coco_metrics(&preds, &gts).unwrap();
        if let (Some(ap), Some(ap50)) = (r.ap, r.ap50) {
            excess = excess.max(ap - ap50);
            dominated += (ap50 + SUM_ROUNDING >= ap) as usize;
        }
    }
    let single = average_precision(&preds, &gts, 0.5).unwrap();
    outcome(
        all_defined_and_close && dominated == 100 && single == rep.ap50,
        format!("micro-set max column difference {worst:.1e} (bound {EVAL_TOLERANCE:.0e}); AP50 >= AP on {dominated}/100 random inputs (largest AP - AP50 {excess:.1e})"),
    )
}

fn directional_training() -> (Outcome, Option<(ModelParams, Vec<InstanceSample>)>) {
    let start = Instant::now();
    let config = Config::default();
    let split = generate_synthetic_dataset(TRAIN_SAMPLES, 0, config.data.image_size).unwrap();
    let mut cfg = config.clone();
    cfg.training.epochs = TRAIN_EPOCHS;
    let out = train(&split, &cfg, &mut |e| {
        println!(
            "      epoch {:>2}: loss {:.4}, {:.0} nodes, val refined {:.4} coarse {:.4}",
            e.epoch, e.train_total, e.mean_nodes, e.val_refined_iou, e.val_coarse_iou
        )
    })
    .unwrap();
    let test = evaluate_iou(&out.params, &split.test, TreeSource::Predicted).unwrap();
    let empty = evaluate_iou(&out.params, &split.test, TreeSource::Empty).unwrap();
    let took = start.elapsed();
    let gain = test.refined - test.coarse;
    let pass = gain >= MIN_IOU_GAIN && test.refined > empty.refined && took <= TRAIN_BUDGET;
    let detail = format!(
        "test refined IoU {:.4}, coarse {:.4} (gain {:+.2} points, need {:+.0}), empty tree {:.4}; best epoch {:?}; {:.1?}",
        test.refined,
        test.coarse,
        100.0 * gain,
        100.0 * MIN_IOU_GAIN,
        empty.refined,
        out.best_epoch,
        took
    );
    (outcome(pass, detail), Some((out.params, split.test)))
}

fn one_sample_overfit() -> Outcome {
    let sample = generate_samples(1, 0, 128).unwrap().remove(0);
    let split = DatasetSplit { train: vec![sample.clone()], val: vec![sample], test: Vec::new() };
    let mut config = Config::default();
    // One instance per epoch gives one optimizer step per epoch.
    config.training.epochs = OVERFIT_STEPS;
    let out = train(&split, &config, &mut |_| {}).unwrap();
    let last = out.log.last().unwrap();
    let lowest = out.log.iter().map(|e| e.train_total).fold(f32::INFINITY, f32::min);
    outcome(
        last.train_total < OVERFIT_LOSS,
        format!(
            "total loss after {OVERFIT_STEPS} steps {:.4} (coarse {:.4}, refine {:.4}, incoherence {:.4}); lowest {:.4}; bound {OVERFIT_LOSS}",
            last.train_total, last.train_loss.coarse, last.train_loss.refine, last.train_loss.incoherence, lowest
        ),
    )
}

const TINY: &str = "\
[model]
d_model = 8
heads = 2
layers = 1
channels = 4
node_cap = 120

[training]
epochs = 2
batch = 4
seed = 5
teacher_forcing_epochs = 1

[data]
image_size = 64
";

fn cli(args: &[&str]) -> (u8, String) {
    let argv: Vec<String> = std::iter::once("maskrefine").chain(args.iter().copied()).map(String::from).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(&argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap() + &String::from_utf8(err).unwrap())
}

fn pipeline(root: &Path) -> [Vec<u8>; 4] {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (data, config, ckpt, log, report) =
        (root.join("data"), root.join("tiny.toml"), root.join("m.qmrs"), root.join("train.log"), root.join("test.txt"));
    fs::write(&config, TINY).unwrap();
    for args in [
        vec!["gen-data", "--n", "20", "--seed", "9", "--image-size", "64", "--out", &s(&data)],
        vec!["train", "--data", &s(&data), "--config", &s(&config), "--out", &s(&ckpt), "--log", &s(&log)],
        vec!["eval", "--data", &s(&data), "--ckpt", &s(&ckpt), "--split", "test", "--report", &s(&report), "--no-fps"],
    ] {
        let (code, text) = cli(&args);
        assert_eq!(code, EXIT_OK, "{args:?}: {text}");
    }
    [data.join("manifest.json"), log, report, ckpt].map(|p| fs::read(p).unwrap())
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (pipeline(a.path()), pipeline(b.path()));
    let names = ["manifest", "training log", "report", "checkpoint"];
    let same: Vec<&str> = names.iter().zip(first.iter().zip(&second)).filter(|(_, (x, y))| x == y).map(|(n, _)| *n).collect();
    outcome(same.len() == 4, format!("identical across two seeded runs: {}", same.join(", ")))
}

struct ScriptedClock(Rc<Cell<f64>>);

impl Clock for ScriptedClock {
    fn now(&mut self) -> f64 {
        self.0.get()
    }
}

fn fps_harness(trained: Option<&(ModelParams, Vec<InstanceSample>)>) -> Outcome {
    // Instrumented delay: the first call costs 100 s of scripted time.
    let time = Rc::new(Cell::new(0.0));
    let mut clock = ScriptedClock(time.clone());
    let mut calls = 0;
    let items = vec![(); 8];
    let mut timed = |warmup| {
        calls = 0;
        measure_fps(&mut clock, &items, warmup, 3, |_| {
            calls += 1;
            time.set(time.get() + if calls == 1 { 100.0 } else { 0.02 });
            Ok(())
        })
        .unwrap()
    };
    let with_warmup = timed(1);
    let without = timed(0);
    let excluded = with_warmup.per_repeat.iter().all(|f| (f - 50.0).abs() < 1e-6) && without.per_repeat[0] < 1.0;

    let params;
    let samples;
    let (params, samples) = match trained {
        Some((p, s)) => (p, &s[..]),
        None => {
            let config = Config::default();
            params = ModelParams::init(&config.model, 0).unwrap();
            samples = generate_samples(20, 0, 128).unwrap();
            (&params, &samples[..])
        }
    };
    let list = &samples[..samples.len().min(40)];
    let doubled: Vec<InstanceSample> = list.iter().chain(list).cloned().collect();
    let once = measure_refine_fps(params, list, 2, 5).unwrap();
    let twice = measure_refine_fps(params, &doubled, 2, 5).unwrap();
    let band = 3.0 * once.std.max(twice.std);
    let stable = (once.mean - twice.mean).abs() <= band;
    let positive = once.mean > 0.0 && twice.mean > 0.0;
    outcome(
        excluded && stable && positive,
        format!(
            "warmup excluded: {excluded}; {:.1} ± {:.1} FPS on {} instances, {:.1} ± {:.1} on {} (3σ band {band:.1})",
            once.mean,
            once.std,
            list.len(),
            twice.mean,
            twice.std,
            doubled.len()
        ),
    )
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "propagation oracle", propagation_oracle());
    report(3, "perfect-label oracle", perfect_label_oracle());
    report(4, "loss arithmetic", loss_arithmetic());
    report(5, "quadtree invariants", quadtree_invariants());
    report(6, "evaluator oracle", evaluator_oracle());
    let (seven, trained) = directional_training();
    report(7, "directional training result", seven);
    report(8, "one-sample overfit", one_sample_overfit());
    report(9, "determinism", determinism());
    report(10, "throughput harness", fps_harness(trained.as_ref()));
    if failed.is_empty() {
        println!("all 10 criteria passed");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
