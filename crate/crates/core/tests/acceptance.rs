//! End-to-end acceptance checks. Each check prints one `PASS`/`FAIL` line.
//!
//! The training comparisons share one set of runs: every configuration uses
//! the same hyperparameters and iteration budget, differing only in the
//! property under comparison.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lattice_lstm::cell::{init_params, unroll, CellConfig, HiddenTransition, Variant};
use lattice_lstm::eval::evaluate;
use lattice_lstm::gradcheck::{gradcheck, GradcheckConfig};
use lattice_lstm::linear_rnn::theory_check;
use lattice_lstm::model::{sgd_step, shared_gate_update, ModelConfig, TwoStreamModel};
use lattice_lstm::ops::{lattice_apply, NormMode};
use lattice_lstm::par::Exec;
use lattice_lstm::params::{zeros_like, Parameters};
use lattice_lstm::sampling::{sample_plan, SamplingConfig, VideoMeta};
use lattice_lstm::synth::{generate, Dataset, GenerateConfig, Split, SplitPlan, Suite};
use lattice_lstm::tensor::{LatticeFilterBank, Tensor};
use lattice_lstm::train::{sampling_config, train, TrainConfig};
use lattice_lstm::viz::saliency;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Shared by every training comparison.
const BASE_CONFIG: &str = "
stem_channels = 8
hidden_channels = 8
lr = 0.05
iterations = 600
eval_every = 50
two_step = false
";

/// Outcome of one check: pass flag and a one-line summary.
type Check = (bool, String);

fn gradient_exactness() -> Check {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut passed = true;
    for variant in [Variant::L2stm, Variant::Convlstm] {
        let cfg = GradcheckConfig {
            variant,
            ..GradcheckConfig::default()
        };
        let r = gradcheck(&cfg, Exec::Parallel).unwrap();
        passed &= r.passed();
        for g in r.failures() {
            println!("  {variant} {} rel err {:.3e}", g.name, g.worst_relative_error);
        }
        worst.push(format!("{variant} {:.2e} over {} groups", r.worst(), r.groups.len()));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(120);
    (passed, format!("{} in {:.1}s", worst.join(", "), elapsed.as_secs_f64()))
}

fn tied_bank_reduces_to_convlstm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    for seq in 0..20 {
        let cfg = CellConfig {
            variant: Variant::Convlstm,
            input_channels: 2,
            hidden_channels: 3,
            rows: 5,
            cols: 4,
            norm: seq % 2 == 1,
        };
        let conv = init_params::<f64>(&cfg, seq).unwrap();
        let mut lattice = conv.clone();
        let HiddenTransition::Conv(k) = &conv.core.hc else {
            unreachable!()
        };
        lattice.core.hc = HiddenTransition::Lattice(LatticeFilterBank::tied(k, 5, 4));
        let xs: Vec<Tensor<f64>> = (0..8)
            .map(|_| Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let (sc, _) = unroll(conv.as_ref(), &xs, NormMode::Running).unwrap();
        let (sl, _) = unroll(lattice.as_ref(), &xs, NormMode::Running).unwrap();
        assert_eq!(sc.len(), sl.len());
        for (a, b) in sc.iter().zip(&sl) {
            for (x, y) in a.h.data().iter().chain(a.c.data()).zip(b.h.data().iter().chain(b.c.data())) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let passed = worst <= 1e-12;
    (passed, format!("max state gap {worst:.2e} over 20 sequences"))
}

/// Superposition with one explicit loop per index.
fn direct_superposition(hidden: &Tensor<f64>, b: &LatticeFilterBank<f64>, kr: usize, kc: usize) -> Vec<f64> {
    let (cin, rows, cols) = hidden.chw().unwrap();
    let mut out = vec![0.0; b.out_channels * rows * cols];
    for k in 0..b.out_channels {
        for i in 0..rows {
            for j in 0..cols {
                let mut s = b.bias[k];
                for l in 0..cin {
                    for m in 0..kr {
                        for n in 0..kc {
                            let si = i as isize + m as isize - (kr / 2) as isize;
                            let sj = j as isize + n as isize - (kc / 2) as isize;
                            if si < 0 || sj < 0 || si as usize >= rows || sj as usize >= cols {
                                continue;
                            }
                            s += b.weight[b.index(l, i, j, k, m, n)] * hidden.at(l, si as usize, sj as usize);
                        }
                    }
                }
                out[(k * rows + i) * cols + j] = s;
            }
        }
    }
    out
}

fn lattice_matches_direct_superposition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (rows, cols) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let (kr, kc) = ([1, 3, 5][rng.gen_range(0..3)], [1, 3, 5][rng.gen_range(0..3)]);
        let mut bank = LatticeFilterBank::zeros(cin, rows, cols, cout, kr, kc).unwrap();
        bank.weight.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        bank.bias.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let hidden = Tensor::from_fn(&[cin, rows, cols], |_| rng.gen_range(-1.0..1.0));
        let got = lattice_apply(&hidden, &bank).unwrap();
        let want = direct_superposition(&hidden, &bank, kr, kc);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let gap = got.data().iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(gap / scale);
    }
    let passed = worst <= 1e-12;
    (passed, format!("max relative gap {worst:.2e} over 200 instances"))
}

fn linear_recurrence_closed_form() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        for (_, gap) in theory_check(4, 8, seed).unwrap() {
            worst = worst.max(gap);
        }
    }
    let passed = worst <= 1e-9;
    (passed, format!("max relative gap {worst:.2e} for tau 0..=8"))
}

fn shared_gate_update_sums_modalities() -> Check {
    let cfg = ModelConfig {
        variant: Variant::L2stm,
        rgb_channels: 3,
        flow_channels: 6,
        stem_channels: 2,
        hidden_channels: 2,
        input_rows: 8,
        input_cols: 8,
        num_classes: 3,
        share_gates: true,
        norm: true,
        fusion_weight: 0.5,
    };
    let m0 = TwoStreamModel::<f64>::init(&cfg, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut random_grads = || {
        let mut g = zeros_like(&m0);
        for v in g.views_mut() {
            v.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        g
    };
    let (g_rgb, g_flow) = (random_grads(), random_grads());
    let lr = 0.03;
    let mut m = m0.clone();
    shared_gate_update(&mut m, &g_rgb, &g_flow, lr).unwrap();
    let (before, after, gr, gf) = (m0.views(), m.views(), g_rgb.views(), g_flow.views());
    let mut checked = 0usize;
    let mut exact = true;
    for (((p0, p1), a), b) in before.iter().zip(&after).zip(&gr).zip(&gf) {
        if !p0.name.starts_with("gates.") {
            continue;
        }
        for i in 0..p0.data.len() {
            exact &= p1.data[i] == p0.data[i] - lr * (a.data[i] + b.data[i]);
            checked += 1;
        }
    }
    let mut single = m0.clone();
    shared_gate_update(&mut single, &g_rgb, &zeros_like(&m0), lr).unwrap();
    let mut reference = m0.clone();
    sgd_step(&mut reference, &g_rgb, lr);
    let bitwise = single
        .views()
        .iter()
        .zip(reference.views())
        .all(|(a, b)| a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    let passed = exact && bitwise && checked > 0;
    (passed, format!("{checked} shared weights exact: {exact}, zero-flow update bitwise: {bitwise}"))
}

fn sampling_plans_are_valid() -> Check {
    let cfg = SamplingConfig {
        n: 8,
        l_t: 5,
        crop_rows: 14,
        crop_cols: 14,
    };
    let meta = VideoMeta {
        rows: 16,
        cols: 16,
        frames: 180,
    };
    let s_max = (180 - 5) / 7;
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let (mut valid, mut consecutive, mut long) = (0, false, false);
    for _ in 0..10_000 {
        let p = sample_plan(meta, &cfg, &mut rng).unwrap();
        let in_range = (0..p.n).all(|c| (0..p.l_t).all(|f| p.frame_index(c, f) < 180));
        if 1 <= p.s_t && p.s_t <= p.s_s && p.s_s <= s_max && in_range {
            valid += 1;
        }
        consecutive |= p.s_t == 1 && p.s_s == p.l_t;
        long |= p.span() as f64 >= 0.9 * 180.0;
    }
    let passed = valid == 10_000 && consecutive && long;
    (passed, format!("{valid}/10000 valid, consecutive plan seen: {consecutive}, long plan seen: {long}"))
}

fn saturated_gates_preserve_memory() -> Check {
    let cfg = CellConfig {
        variant: Variant::L2stm,
        input_channels: 2,
        hidden_channels: 3,
        rows: 4,
        cols: 4,
        norm: false,
    };
    let mut p = init_params::<f64>(&cfg, 70).unwrap();
    for k in [&mut p.gates.xi, &mut p.gates.hi, &mut p.gates.xf, &mut p.gates.hf] {
        k.weight.iter_mut().for_each(|w| *w = 0.0);
        k.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    p.gates.xf.bias = vec![40.0; 3];
    p.gates.xi.bias = vec![-40.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut state = lattice_lstm::cell::CellState::zeros(3, 4, 4);
    state.c = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
    let c0 = state.c.clone();
    for _ in 0..50 {
        let x = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        state = lattice_lstm::cell::cell_forward(p.as_ref(), &state, &x, NormMode::Running, false)
            .unwrap()
            .0;
    }
    let drift = state.c.data().iter().zip(c0.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let passed = drift < 1e-8;
    (passed, format!("max cell drift {drift:.2e} over 50 steps"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Run {
    /// Lattice cells, long-short sampling, shared gates.
    Lattice,
    Conv,
    FixedStride,
    SeparateGates,
}

impl Run {
    fn overrides(self) -> &'static str {
        match self {
            Run::Lattice => "variant = l2stm",
            Run::Conv => "variant = convlstm",
            Run::FixedStride => "variant = l2stm\nsampling = fixed",
            Run::SeparateGates => "variant = l2stm\nshare_gates = false",
        }
    }
}

fn dataset(suite: Suite, seed: u64) -> Dataset {
    let split = SplitPlan::Counts {
        train: 200,
        val: 20,
        test: 60,
    };
    generate(&GenerateConfig::new(suite.classes(), split, 1000 + seed), Exec::Parallel).unwrap()
}

fn run_config(run: Run, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&format!("{BASE_CONFIG}\n{}\nseed = {seed}", run.overrides()))
        .unwrap();
    cfg
}

struct Outcome {
    test_accuracy: f64,
    model: TwoStreamModel<f32>,
}

type Runs = HashMap<(Suite, Run, u64), Outcome>;

fn train_runs(suite: Suite, runs: &[Run]) -> Runs {
    let mut out = HashMap::new();
    for seed in SEEDS {
        let ds = dataset(suite, seed);
        for &run in runs {
            let cfg = run_config(run, seed);
            let start = Instant::now();
            let trained = train(&ds, &cfg, Exec::Parallel).unwrap();
            let model = trained.checkpoint.model;
            let report = evaluate(&model, &ds, Split::Test, &sampling_config(&cfg), &cfg.eval_strides, Exec::Parallel)
                .unwrap();
            println!(
                "  {suite:?} {run:?} seed {seed}: test {:.1}% ({:?}, {:.0}s)",
                report.overall_accuracy * 100.0,
                trained.stop,
                start.elapsed().as_secs_f64()
            );
            out.insert(
                (suite, run, seed),
                Outcome {
                    test_accuracy: report.overall_accuracy * 100.0,
                    model,
                },
            );
        }
    }
    out
}

fn non_stationary() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        train_runs(
            Suite::NonStationary,
            &[Run::Lattice, Run::Conv, Run::FixedStride, Run::SeparateGates],
        )
    })
}

fn stationary() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| train_runs(Suite::Stationary, &[Run::Lattice, Run::Conv]))
}

fn accuracies(runs: &Runs, suite: Suite, run: Run) -> Vec<f64> {
    SEEDS.iter().map(|&s| runs[&(suite, run, s)].test_accuracy).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_accs(v: &[f64]) -> String {
    let each: Vec<String> = v.iter().map(|a| format!("{a:.1}")).collect();
    format!("{:.1} [{}]", mean(v), each.join(" "))
}

fn non_stationary_advantage() -> Check {
    let runs = non_stationary();
    let lattice = accuracies(runs, Suite::NonStationary, Run::Lattice);
    let conv = accuracies(runs, Suite::NonStationary, Run::Conv);
    let gap = mean(&lattice) - mean(&conv);
    let passed = gap >= 5.0;
    (passed, format!("l2stm {} vs convlstm {}, gap {gap:+.1} (need >= +5)", fmt_accs(&lattice), fmt_accs(&conv)))
}

fn stationary_parity() -> Check {
    let runs = stationary();
    let lattice = accuracies(runs, Suite::Stationary, Run::Lattice);
    let conv = accuracies(runs, Suite::Stationary, Run::Conv);
    let gap = mean(&lattice) - mean(&conv);
    let passed = gap.abs() <= 3.0;
    (passed, format!("l2stm {} vs convlstm {}, gap {gap:+.1} (need |gap| <= 3)", fmt_accs(&lattice), fmt_accs(&conv)))
}

fn long_short_sampling_ablation() -> Check {
    let runs = non_stationary();
    let long_short = accuracies(runs, Suite::NonStationary, Run::Lattice);
    let fixed = accuracies(runs, Suite::NonStationary, Run::FixedStride);
    let wins = long_short.iter().zip(&fixed).filter(|(a, b)| a > b).count();
    let passed = mean(&long_short) >= mean(&fixed) - 1.0 && wins >= 2;
    let detail = format!(
        "long-short {} vs fixed {}, strictly better on {wins}/3 seeds",
        fmt_accs(&long_short),
        fmt_accs(&fixed)
    );
    (passed, detail)
}

fn gate_sharing_ablation() -> Check {
    let runs = non_stationary();
    let shared = accuracies(runs, Suite::NonStationary, Run::Lattice);
    let separate = accuracies(runs, Suite::NonStationary, Run::SeparateGates);
    let passed = mean(&shared) >= mean(&separate) - 1.0;
    (passed, format!("shared {} vs separate {}", fmt_accs(&shared), fmt_accs(&separate)))
}

fn saliency_concentrates_on_sprites() -> Check {
    let runs = non_stationary();
    let seed = SEEDS[0];
    let model = &runs[&(Suite::NonStationary, Run::Lattice, seed)].model;
    let ds = dataset(Suite::NonStationary, seed);
    let sampling = sampling_config(&run_config(Run::Lattice, seed));
    let test = ds.indices(Split::Test);
    let mut above = 0usize;
    for &v in &test {
        let maps = saliency(model, &ds, v, ds.videos[v].label, &sampling).unwrap();
        if maps.sprite_ratio(&ds, v).is_some_and(|r| r > 1.5) {
            above += 1;
        }
    }
    let share = above as f64 / test.len() as f64;
    let passed = share >= 0.8;
    (passed, format!("{above}/{} test videos with sprite/background ratio > 1.5 ({:.0}%)", test.len(), share * 100.0))
}

const CHECKS: [(&str, fn() -> Check); 12] = [
    ("gradient_exactness", gradient_exactness),
    ("tied_bank_reduces_to_convlstm", tied_bank_reduces_to_convlstm),
    ("lattice_matches_direct_superposition", lattice_matches_direct_superposition),
    ("linear_recurrence_closed_form", linear_recurrence_closed_form),
    ("shared_gate_update_sums_modalities", shared_gate_update_sums_modalities),
    ("sampling_plans_are_valid", sampling_plans_are_valid),
    ("saturated_gates_preserve_memory", saturated_gates_preserve_memory),
    ("non_stationary_advantage", non_stationary_advantage),
    ("stationary_parity", stationary_parity),
    ("long_short_sampling_ablation", long_short_sampling_ablation),
    ("gate_sharing_ablation", gate_sharing_ablation),
    ("saliency_concentrates_on_sprites", saliency_concentrates_on_sprites),
];

/// Runs every check whose name contains one of the positional arguments
/// (all checks when none are given) and exits non-zero if any fails.
fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0usize;
    let mut ran = 0usize;
    for (name, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let (passed, detail) = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        failed += usize::from(!passed);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
