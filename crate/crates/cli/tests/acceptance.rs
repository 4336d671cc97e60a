//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gated criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::time::{Duration, Instant};

use smoothconv::autodiff::{check_gradients, FnModel, GradReport};
use smoothconv::bench::{bench_variants, BenchConfig, BENCH_CSV_HEADER};
use smoothconv::conv::{
    build_smoothing_filter, dilated_conv2d, fused_smoothed_dilated_conv2d, smooth_channelwise,
    smooth_separable, smoothed_dilated_conv2d,
};
use smoothconv::gridding::{gridding_score, trace_dependencies, LayerStack, StackLayer};
use smoothconv::segmentation::compare::{compare_modes, mean_std, ExperimentConfig};
use smoothconv::segmentation::model::{BlockSmoothing, ModelConfig, ToyModel};
use smoothconv::{
    AggregatedFilter, ConvSpec, ConvWeights, FilterKind, GradTape, Rng, SmoothingFilter, Tensor,
};
use smoothconv_cli::config::RunConfig;
use smoothconv_cli::{cmd_analyze, cmd_bench, cmd_compare, cmd_generate, cmd_gradcheck};

const EQUIVALENCE_FUSED_TOL: f64 = 1e-10;
const EQUIVALENCE_SEPARABLE_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-4;
const SIMPLEX_SUM_TOL: f64 = 1e-9;
const HULL_SLACK: f64 = 1e-12;
const GRADIENT_INSTANCES: usize = 20;
const SIMPLEX_UPDATES: usize = 1000;
const BUDGET_1: Duration = Duration::from_secs(60);
const BUDGET_2: Duration = Duration::from_secs(120);
const BUDGET_3: Duration = Duration::from_secs(60);
const BUDGET_4: Duration = Duration::from_secs(60);
const MAX_ORACLE_SPAN: usize = 15;
const TRAJECTORY_STEPS: usize = 1000;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn artifacts_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

fn rand_tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng).unwrap()
}

// Criterion 1 -------------------------------------------------------------

/// Dense stride-1 convolution with zero padding, written from the
/// definition: y[o,i,j] = sum_c sum_a sum_b x[c, i-(a-K/2), j-(b-K/2)] w[o,c,a,b].
fn brute_force_conv(x: &Tensor, w: &Tensor) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let c = (k / 2) as isize;
    let mut y = Tensor::zeros([n, co, h, wd]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..h as isize {
                for j in 0..wd as isize {
                    let mut acc = 0.0;
                    for ch in 0..ci {
                        for a in 0..k as isize {
                            for bb in 0..k as isize {
                                let (si, sj) = (i - (a - c), j - (bb - c));
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                acc += x.get(b, ch, si as usize, sj as usize)
                                    * w.get(o, ch, a as usize, bb as usize);
                            }
                        }
                    }
                    y.set(b, o, i as usize, j as usize, acc);
                }
            }
        }
    }
    y
}

fn random_filter(kind: FilterKind, r: usize, rng: &mut Rng) -> SmoothingFilter {
    match kind {
        FilterKind::Aggregated => {
            let mut agg = AggregatedFilter::new(r, 1.0, rng).unwrap();
            for v in agg.logits_mut().data_mut() {
                *v = rng.uniform(-2.0, 2.0);
            }
            agg.realize()
        }
        FilterKind::Learned => build_smoothing_filter(kind, r, None, Some(rng)).unwrap(),
        _ => build_smoothing_filter(kind, r, Some(rng.uniform(0.5, 2.0)), None).unwrap(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut exact = 0;
    for _ in 0..100 {
        let k = [1, 3, 5][rng.below(0, 3)];
        let shape = [
            rng.below(1, 3),
            rng.below(1, 4),
            rng.below(4, 13),
            rng.below(4, 13),
        ];
        let x = rand_tensor(shape, &mut rng);
        let w = rand_tensor([rng.below(1, 4), shape[1], k, k], &mut rng);
        let got = dilated_conv2d(
            &x,
            &ConvWeights::new(w.clone()).unwrap(),
            &ConvSpec::new(k, 1).unwrap(),
        )
        .unwrap();
        if got == brute_force_conv(&x, &w) {
            exact += 1;
        }
    }

    let kinds = [
        FilterKind::Average,
        FilterKind::Gaussian,
        FilterKind::Learned,
        FilterKind::Aggregated,
    ];
    let mut fused_worst = 0.0f64;
    for i in 0..50 {
        let r = [1, 3, 5, 7][rng.below(0, 4)];
        let k = [1, 3][rng.below(0, 2)];
        let shape = [
            rng.below(1, 3),
            rng.below(1, 4),
            rng.below(6, 20),
            rng.below(6, 20),
        ];
        let x = rand_tensor(shape, &mut rng);
        let w = ConvWeights::new(rand_tensor([rng.below(1, 4), shape[1], k, k], &mut rng)).unwrap();
        let v = random_filter(kinds[i % kinds.len()], r, &mut rng);
        let spec = ConvSpec::new(k, r).unwrap();
        let two_stage = smoothed_dilated_conv2d(&x, &v, &w, &spec).unwrap();
        let fused = fused_smoothed_dilated_conv2d(&x, &v, &w, &spec).unwrap();
        fused_worst = fused_worst.max(two_stage.max_abs_diff(&fused).unwrap());
    }

    let mut sep_worst = 0.0f64;
    for i in 0..50 {
        let kind = [FilterKind::Average, FilterKind::Gaussian][i % 2];
        let r = [3, 5, 7][(i / 2) % 3];
        let shape = [
            rng.below(1, 3),
            rng.below(1, 4),
            rng.below(4, 16),
            rng.below(4, 16),
        ];
        let x = rand_tensor(shape, &mut rng);
        let v = random_filter(kind, r, &mut rng);
        let sep = smooth_separable(&x, &v).unwrap();
        sep_worst = sep_worst.max(sep.max_abs_diff(&smooth_channelwise(&x, &v)).unwrap());
    }
    let elapsed = start.elapsed();
    outcome(
        exact == 100
            && fused_worst <= EQUIVALENCE_FUSED_TOL
            && sep_worst <= EQUIVALENCE_SEPARABLE_TOL
            && elapsed < BUDGET_1,
        format!(
            "r=1 exact {exact}/100; fused vs two-stage max {fused_worst:.2e} (tol {EQUIVALENCE_FUSED_TOL:e}); \
             separable vs 2-D max {sep_worst:.2e} (tol {EQUIVALENCE_SEPARABLE_TOL:e}); {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 2 -------------------------------------------------------------

fn weighted_sum(
    tape: &mut GradTape,
    y: smoothconv::Var,
    u: &Tensor,
) -> smoothconv::Result<smoothconv::Var> {
    let u = tape.constant(u.clone());
    let p = tape.mul(y, u)?;
    Ok(tape.sum(p))
}

struct GradSuite {
    worst: f64,
    passed: usize,
    judged: usize,
    skipped: usize,
}

impl GradSuite {
    fn new() -> Self {
        GradSuite {
            worst: 0.0,
            passed: 0,
            judged: 0,
            skipped: 0,
        }
    }

    fn add(&mut self, report: &GradReport, name: &str) {
        let p = report
            .params
            .iter()
            .find(|p| p.name == name)
            .expect("named parameter");
        self.worst = self.worst.max(p.max_rel_error);
        self.judged += p.checked;
        self.skipped += p.kinks + p.unresolved;
        if p.passed {
            self.passed += 1;
        }
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(202);
    let mut suites: BTreeMap<&str, GradSuite> = BTreeMap::new();
    for name in [
        "conv weights",
        "input",
        "learned filter",
        "aggregation logits",
    ] {
        suites.insert(name, GradSuite::new());
    }
    for _ in 0..GRADIENT_INSTANCES {
        // Dilated convolution: weights and input.
        let k = [1, 3][rng.below(0, 2)];
        let r = rng.below(1, 4);
        let shape = [
            rng.below(1, 3),
            rng.below(1, 4),
            rng.below(5, 10),
            rng.below(5, 10),
        ];
        let co = rng.below(1, 4);
        let x = rand_tensor(shape, &mut rng);
        let w = rand_tensor([co, shape[1], k, k], &mut rng);
        let u = rand_tensor([shape[0], co, shape[2], shape[3]], &mut rng);
        let spec = ConvSpec::new(k, r).unwrap();
        let model = FnModel::new(
            vec![("w".into(), w), ("x".into(), x)],
            |tape: &mut GradTape, p: &[smoothconv::Var]| {
                let y = tape.conv2d(p[1], p[0], &spec)?;
                weighted_sum(tape, y, &u)
            },
        );
        let report = check_gradients(&model, GRADIENT_TOL).unwrap();
        suites.get_mut("conv weights").unwrap().add(&report, "w");
        suites.get_mut("input").unwrap().add(&report, "x");

        // Learned smoothing filter followed by a dilated convolution.
        let r = [1, 3, 5][rng.below(0, 3)];
        let shape = [
            rng.below(1, 3),
            rng.below(1, 4),
            rng.below(5, 10),
            rng.below(5, 10),
        ];
        let x = rand_tensor(shape, &mut rng);
        let w = rand_tensor([2, shape[1], 3, 3], &mut rng);
        let v = build_smoothing_filter(FilterKind::Learned, r, None, Some(&mut rng)).unwrap();
        let u = rand_tensor([shape[0], 2, shape[2], shape[3]], &mut rng);
        let spec = ConvSpec::new(3, r).unwrap();
        let model = FnModel::new(
            vec![("v".into(), v.weights().clone())],
            |tape: &mut GradTape, p: &[smoothconv::Var]| {
                let xv = tape.constant(x.clone());
                let wv = tape.constant(w.clone());
                let s = tape.smooth(xv, p[0])?;
                let y = tape.conv2d(s, wv, &spec)?;
                weighted_sum(tape, y, &u)
            },
        );
        suites
            .get_mut("learned filter")
            .unwrap()
            .add(&check_gradients(&model, GRADIENT_TOL).unwrap(), "v");

        // Aggregation logits through the realized filter.
        let r = [1, 3, 5][rng.below(0, 3)];
        let mut agg = AggregatedFilter::new(r, rng.uniform(0.5, 2.0), &mut rng).unwrap();
        for l in agg.logits_mut().data_mut() {
            *l = rng.uniform(-1.0, 1.0);
        }
        let shape = [
            rng.below(1, 3),
            rng.below(1, 4),
            rng.below(5, 10),
            rng.below(5, 10),
        ];
        let x = rand_tensor(shape, &mut rng);
        let u = rand_tensor(shape, &mut rng);
        let model = FnModel::new(
            vec![("logits".into(), agg.logits().clone())],
            |tape: &mut GradTape, p: &[smoothconv::Var]| {
                let learned = tape.constant(agg.learned_weights().clone());
                let kernel = agg.record_with(tape, p[0], learned)?;
                let xv = tape.constant(x.clone());
                let y = tape.smooth(xv, kernel)?;
                weighted_sum(tape, y, &u)
            },
        );
        suites
            .get_mut("aggregation logits")
            .unwrap()
            .add(&check_gradients(&model, GRADIENT_TOL).unwrap(), "logits");
    }
    let elapsed = start.elapsed();
    let all = suites.values().all(|s| s.passed == GRADIENT_INSTANCES);
    let parts: Vec<String> = suites
        .iter()
        .map(|(n, s)| {
            format!(
                "{n} {}/{GRADIENT_INSTANCES} max {:.2e} ({} coords, {} skipped)",
                s.passed, s.worst, s.judged, s.skipped
            )
        })
        .collect();
    outcome(
        all && elapsed < BUDGET_2,
        format!(
            "{}; tol {GRADIENT_TOL:e}; {:.1}s",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 3 -------------------------------------------------------------

/// Axis offsets read by a window of `size` taps spaced `step` apart under the
/// convolution convention y[i] = sum_a x[i - step * (a - size / 2)].
fn read_offsets(size: usize, step: usize) -> Vec<isize> {
    let c = (size / 2) as isize;
    (0..size as isize)
        .map(|a| -(a - c) * step as isize)
        .collect()
}

/// Impulse responses of a stack built from all-ones kernels. Entry
/// `[q][p]` is positive iff output pixel q responds to an impulse at p.
fn impulse_responses(stack: &LayerStack, h: usize, w: usize) -> Vec<Vec<f64>> {
    let n = h * w;
    // resp[p] is the current image produced by an impulse at p.
    let mut resp: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let mut img = vec![0.0; n];
            img[p] = 1.0;
            img
        })
        .collect();
    let apply = |img: &[f64], offs: &[isize]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for &dy in offs {
                    for &dx in offs {
                        let (si, sj) = (i + dy, j + dx);
                        if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                            acc += img[si as usize * w + sj as usize];
                        }
                    }
                }
                out[i as usize * w + j as usize] = acc;
            }
        }
        out
    };
    for layer in stack.layers() {
        if layer.smoothing != FilterKind::None {
            let offs = read_offsets(layer.smoothing_size, 1);
            resp = resp.iter().map(|img| apply(img, &offs)).collect();
        }
        let offs = read_offsets(layer.spec.kernel_size(), layer.spec.dilation());
        resp = resp.iter().map(|img| apply(img, &offs)).collect();
    }
    (0..n)
        .map(|q| (0..n).map(|p| resp[p][q]).collect())
        .collect()
}

fn oracle_stacks() -> Vec<LayerStack> {
    let mut stacks = Vec::new();
    let smoothings = [FilterKind::None, FilterKind::Average, FilterKind::Gaussian];
    for layers in 1..=3 {
        for k in [1, 3, 5] {
            for r in 1..=7 {
                for s in smoothings {
                    if let Ok(st) = LayerStack::uniform(layers, k, r, s) {
                        stacks.push(st);
                    }
                }
            }
        }
    }
    for r1 in 1..=5 {
        for r2 in 1..=5 {
            for s in smoothings {
                let a = StackLayer::new(ConvSpec::new(3, r1).unwrap(), s, r1).unwrap();
                let b =
                    StackLayer::new(ConvSpec::new(3, r2).unwrap(), FilterKind::None, 1).unwrap();
                stacks.push(LayerStack::new(vec![a, b]));
                stacks.push(LayerStack::new(vec![b, a]));
            }
        }
    }
    stacks.retain(|s| s.span() <= MAX_ORACLE_SPAN);
    stacks
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let plain_stack = LayerStack::uniform(2, 3, 2, FilterKind::None).unwrap();
    let smoothed_stack = LayerStack::uniform(2, 3, 2, FilterKind::Average).unwrap();
    let extent = (2 * plain_stack.span() + 1, 2 * plain_stack.span() + 1);
    let plain = gridding_score(&trace_dependencies(&plain_stack, extent).unwrap());
    let smoothed = gridding_score(&trace_dependencies(&smoothed_stack, extent).unwrap());

    let stacks = oracle_stacks();
    let mut mismatches = 0;
    for stack in &stacks {
        let (h, w) = (stack.span() + 3, stack.span() + 2);
        let map = trace_dependencies(stack, (h, w)).unwrap();
        let resp = impulse_responses(stack, h, w);
        for (q, row) in resp.iter().enumerate() {
            let mut oracle: Vec<(usize, usize)> = (0..h * w)
                .filter(|&p| row[p] > 0.0)
                .map(|p| (p / w, p % w))
                .collect();
            oracle.sort();
            let mut got = map.dependencies(q / w, q % w);
            got.sort();
            if got != oracle {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        plain == 1.0 && smoothed == 0.0 && mismatches == 0 && elapsed < BUDGET_3,
        format!(
            "two K=3 r=2 layers: score {plain}; with average s=r: {smoothed}; \
             {} stacks (span <= {MAX_ORACLE_SPAN}) vs impulse oracle, {mismatches} mismatching pixels; {:.1}s",
            stacks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 4 -------------------------------------------------------------

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(404);
    let mut agg = AggregatedFilter::new(5, 1.0, &mut rng).unwrap();
    let (mut worst_sum, mut min_alpha, mut hull_violations) = (0.0f64, f64::INFINITY, 0);
    for _ in 0..SIMPLEX_UPDATES {
        let u = rand_tensor([1, 1, 5, 5], &mut rng);
        let mut tape = GradTape::new();
        let (kernel, logits, _) = agg.record(&mut tape).unwrap();
        let loss = weighted_sum(&mut tape, kernel, &u).unwrap();
        let g = tape.backward(loss).unwrap().take(logits).unwrap();
        let lr = rng.uniform(0.1, 5.0);
        agg.logits_mut().axpy(-lr, &g).unwrap();

        let alphas = agg.alphas();
        worst_sum = worst_sum.max((alphas.iter().sum::<f64>() - 1.0).abs());
        min_alpha = alphas.iter().copied().fold(min_alpha, f64::min);
        let realized = agg.realize();
        let members = agg.member_kernels();
        for (i, &v) in realized.weights().data().iter().enumerate() {
            let lo = members
                .iter()
                .map(|m| m.data()[i])
                .fold(f64::INFINITY, f64::min);
            let hi = members
                .iter()
                .map(|m| m.data()[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if v < lo - HULL_SLACK || v > hi + HULL_SLACK {
                hull_violations += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_sum <= SIMPLEX_SUM_TOL
            && min_alpha > 0.0
            && hull_violations == 0
            && elapsed < BUDGET_4,
        format!(
            "{SIMPLEX_UPDATES} updates: max |sum-1| {worst_sum:.1e} (tol {SIMPLEX_SUM_TOL:e}); \
             min alpha {min_alpha:.3e}; hull violations {hull_violations}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 5 -------------------------------------------------------------

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let cmp = compare_modes(&cfg, None).unwrap();
    let dir = artifacts_dir("quality");
    fs::write(dir.join("comparison.csv"), cmp.to_csv(true)).unwrap();
    fs::write(dir.join("summary.txt"), cmp.summary_table()).unwrap();
    print!("{}", cmp.summary_table());

    let mious = |mode: FilterKind| -> Vec<f64> {
        cmp.cells
            .iter()
            .filter(|c| c.mode == mode)
            .filter_map(|c| c.outcome.as_ref().ok().map(|r| r.metrics.miou))
            .collect()
    };
    let none = mious(FilterKind::None);
    let (none_mean, none_std) = mean_std(&none);
    let mut ok = none.len() == cfg.seeds.len() && cmp.failed_cells().count() == 0;
    let mut any_above = false;
    let mut parts = vec![format!("none {none_mean:.4} +/- {none_std:.4}")];
    for mode in [
        FilterKind::Average,
        FilterKind::Gaussian,
        FilterKind::Learned,
    ] {
        let m = mious(mode);
        let (mean, std) = mean_std(&m);
        let pooled = ((none_std.powi(2) + std.powi(2)) / 2.0).sqrt();
        let within = mean >= none_mean - pooled;
        ok &= within && m.len() == cfg.seeds.len();
        any_above |= mean > none_mean;
        parts.push(format!(
            "{mode} {mean:.4} +/- {std:.4} (floor {:.4}: {})",
            none_mean - pooled,
            if within { "ok" } else { "below" }
        ));
    }
    outcome(
        ok && any_above,
        format!(
            "{}; some smoothed mode above none: {any_above}; {} seeds x {} steps; {:.0}s",
            parts.join("; "),
            cfg.seeds.len(),
            cfg.train.steps,
            start.elapsed().as_secs_f64()
        ),
    )
}

// Criterion 6 -------------------------------------------------------------

fn criterion_6() -> Outcome {
    let cfg = BenchConfig::default();
    let report = bench_variants(&cfg).unwrap();
    let dir = artifacts_dir("bench");
    fs::write(dir.join("bench.csv"), report.to_csv()).unwrap();
    print!("{}", report.summary_table());
    let v = |s: &str| s.parse().unwrap();
    let rel =
        |slower: &str, faster: &str| report.slower_in_every_rep(v(slower), v(faster)).unwrap();
    // "None <= Average" is checked as "Average not faster than None".
    let none_le_avg = rel("average", "none");
    let none_le_gauss = rel("gaussian", "none");
    let learned_gt_avg = rel("learned", "average");
    let learned_gt_gauss = rel("learned", "gaussian");

    let base = ModelConfig::default();
    let census =
        |kind: FilterKind| ToyModel::new(base.clone().with_smoothing(kind), &Rng::new(0)).unwrap();
    let none = census(FilterKind::None);
    let mut census_ok = none.smoothing_param_count() == 0;
    for kind in [FilterKind::Average, FilterKind::Gaussian] {
        let m = census(kind);
        census_ok &= m.param_count() == none.param_count() && m.smoothing_param_count() == 0;
    }
    let learned = census(FilterKind::Learned);
    for b in learned.blocks() {
        let r = b.spec.dilation();
        census_ok &= matches!(&b.smoothing, BlockSmoothing::Learned(t) if t.len() == r * r);
    }
    let extra: usize = base.dilations.iter().map(|r| r * r).sum();
    census_ok &= learned.param_count() == none.param_count() + extra;

    outcome(
        none_le_avg && none_le_gauss && learned_gt_avg && learned_gt_gauss && census_ok,
        format!(
            "over {} reps: none<=average {none_le_avg}, none<=gaussian {none_le_gauss}, \
             learned>average {learned_gt_avg}, learned>gaussian {learned_gt_gauss}; \
             census: fixed filters add 0, learned adds {extra} (sum of s^2): {census_ok}",
            cfg.reps
        ),
    )
}

// Criterion 7 -------------------------------------------------------------

fn criterion_7() -> Outcome {
    let dir = artifacts_dir("trajectory");
    let mut cfg = RunConfig {
        output_dir: dir.clone(),
        ..RunConfig::default()
    };
    cfg.experiment.modes = vec![FilterKind::None, FilterKind::Aggregated];
    cfg.experiment.seeds = vec![1, 2, 3];
    cfg.training.steps = TRAJECTORY_STEPS;
    let mut sink = Vec::new();
    let run = cmd_compare(&cfg, &AtomicBool::new(false), &mut sink);
    if let Err(e) = run {
        return outcome(false, format!("cmd_compare failed: {e}"));
    }
    let mut well_formed = true;
    let mut rows = 0;
    for layer in 0..cfg.model.dilations.len() {
        let Ok(text) = fs::read_to_string(dir.join(format!("alpha_layer{layer}.csv"))) else {
            well_formed = false;
            continue;
        };
        let mut lines = text.lines();
        well_formed &= lines.next() == Some("step,alpha_ave,alpha_gauss,alpha_learned,alpha_none");
        for (i, line) in lines.enumerate() {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.parse().unwrap_or(f64::NAN))
                .collect();
            rows += 1;
            if fields.len() != 5 {
                well_formed = false;
                continue;
            }
            let alphas = &fields[1..];
            well_formed &= alphas.iter().all(|&a| a > 0.0)
                && (alphas.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_SUM_TOL;
            if i == 0 {
                well_formed &= fields[0] == 0.0 && alphas.iter().all(|&a| a == 0.25);
            }
        }
    }
    let summary = fs::read_to_string(dir.join("summary.txt")).unwrap_or_default();
    let trends: Vec<&str> = summary
        .lines()
        .filter(|l| l.starts_with("alpha trend"))
        .collect();
    for t in &trends {
        println!("  {t}");
    }
    outcome(
        well_formed && trends.len() == cfg.model.dilations.len(),
        format!(
            "{} layer CSVs, {rows} rows, start (0.25, 0.25, 0.25, 0.25), all on simplex: {well_formed}; \
             trend (report only) recorded in summary.txt",
            cfg.model.dilations.len()
        ),
    )
}

// Criterion 8 -------------------------------------------------------------

fn strip_last_column(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn bench_payload(csv: &str) -> Vec<String> {
    let mut rows: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{},{},{}", f[0], f[4], f[5])
        })
        .collect();
    rows.sort();
    rows
}

fn small_run_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.dataset.samples = 20;
    cfg.experiment.modes = vec![
        FilterKind::None,
        FilterKind::Learned,
        FilterKind::Aggregated,
    ];
    cfg.experiment.seeds = vec![1, 2, 3];
    cfg.data.train_samples = 8;
    cfg.data.test_samples = 4;
    cfg.training.steps = 40;
    cfg.training.crop_size = 32;
    cfg.bench.steps = 30;
    cfg.bench.warmup = 1;
    cfg.bench.reps = 1;
    cfg.bench.train_samples = 2;
    cfg.gradcheck.extent = 8;
    cfg.gradcheck.modes = vec![FilterKind::Learned, FilterKind::Aggregated];
    cfg
}

fn criterion_8() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let runs: Vec<PathBuf> = (0..2)
        .map(|i| artifacts_dir(&format!("determinism_{i}")))
        .collect();
    let mut stdout_gradcheck = Vec::new();
    for dir in &runs {
        let cfg = small_run_config(dir);
        let mut sink = Vec::new();
        cmd_generate(&cfg, &mut sink).unwrap();
        cmd_compare(&cfg, &AtomicBool::new(false), &mut sink).unwrap();
        cmd_analyze(&cfg, &mut sink).unwrap();
        cmd_bench(&cfg, &mut sink).unwrap();
        let mut grad = Vec::new();
        cmd_gradcheck(&cfg, &mut grad).unwrap();
        stdout_gradcheck.push(grad);
    }
    let (a, b) = (dir_contents(&runs[0]), dir_contents(&runs[1]));
    let dataset = |m: &BTreeMap<String, Vec<u8>>| -> Vec<(String, Vec<u8>)> {
        m.iter()
            .filter(|(k, _)| k.starts_with("dataset"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    checks.push((
        "dataset",
        !dataset(&a).is_empty() && dataset(&a) == dataset(&b),
    ));
    let text = |m: &BTreeMap<String, Vec<u8>>, k: &str| String::from_utf8(m[k].clone()).unwrap();
    checks.push((
        "comparison",
        strip_last_column(&text(&a, "comparison.csv"))
            == strip_last_column(&text(&b, "comparison.csv")),
    ));
    let alpha_files: Vec<&String> = a.keys().filter(|k| k.starts_with("alpha_")).collect();
    checks.push((
        "alpha trajectories",
        !alpha_files.is_empty() && alpha_files.iter().all(|k| a.get(*k) == b.get(*k)),
    ));
    let analysis: Vec<&String> = a
        .keys()
        .filter(|k| k.starts_with("art_") || *k == "gridding.csv")
        .collect();
    checks.push((
        "gridding",
        analysis.len() > 1 && analysis.iter().all(|k| a.get(*k) == b.get(*k)),
    ));
    let bench_a = text(&a, "bench.csv");
    checks.push((
        "bench non-timing",
        bench_a.starts_with(BENCH_CSV_HEADER)
            && bench_payload(&bench_a) == bench_payload(&text(&b, "bench.csv")),
    ));
    checks.push(("gradcheck", stdout_gradcheck[0] == stdout_gradcheck[1]));
    let parts: Vec<String> = checks
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect();
    outcome(checks.iter().all(|c| c.1), parts.join("; "))
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // target skips the run.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [Criterion; 8] = [
        ("equivalence suite", criterion_1),
        ("gradient suite", criterion_2),
        ("gridding reproduction", criterion_3),
        ("simplex invariant", criterion_4),
        ("desk-scale quality direction", criterion_5),
        ("overhead ordering", criterion_6),
        ("trajectory artifact", criterion_7),
        ("determinism", criterion_8),
    ];
    // ACCEPTANCE_ONLY=1,3 restricts the run to the listed criteria.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let o = run();
        println!(
            "criterion {} ({name}): {} | {}",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
