//! Acceptance checks, one per criterion, each printing a single PASS/FAIL line.
//!
//! Runs with a custom harness so the verdict lines are always visible:
//! `cargo test -p rivid --test acceptance`. Criterion numbers after `--`
//! select a subset (`-- 1 3 9`); any other word filters by criterion name.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rivid::datamodel::{load_image, Embedding, ImageTensor, Manifest, Split};
use rivid::degrade::{apply_protocol, downsample, resolution_of, synth_corpus, DegradeProtocol, ProtocolKind, Ratio, SynthSpec};
use rivid::evalkit::{cmc, pairwise_sqdist, retrieval_metrics, DistanceMatrix, GridMode};
use rivid::ffsr::{ffsr_loss, Ffsr, FfsrOutput};
use rivid::masks::{gaussian_mask, ones_mask, MaskKind};
use rivid::nn::{Mode, ParamId, ParamKind, ParamStore, Tape, Var};
use rivid::rife::{rw_loss, xent_loss, Rife, RifeConfig};
use rivid::trainer::{
    diagnose, evaluate_retrieval, infer_at, load_hr_images, preprocess, region_mse, run_stage, stage_loss, Batch,
    BatchMask, Model, Stage, StageVars, TrainConfig, TrainingSet, Variant,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Verdict;

const CRITERIA: [(u8, &str, Check); 9] = [
    (1, "loss formulas", loss_formulas),
    (2, "gradient verification", gradient_verification),
    (3, "cmc oracle equivalence", cmc_oracle),
    (4, "resolution arithmetic", resolution_arithmetic),
    (5, "degenerate fusion", degenerate_fusion),
    (6, "end-to-end toy experiment", end_to_end),
    (7, "stream specialization", stream_specialization),
    (8, "foreground focus", foreground_focus),
    (9, "cli determinism", cli_determinism),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let numbers: Vec<u8> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let words: Vec<&String> = args.iter().filter(|a| a.parse::<u8>().is_err()).collect();
    let selected = |n: u8, name: &str| {
        if args.is_empty() {
            return true;
        }
        numbers.contains(&n) || words.iter().any(|w| name.contains(w.as_str()))
    };
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, name, check) in CRITERIA {
        if !selected(n, name) {
            continue;
        }
        let t = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} [{tag}] {name} ({:.1?}): {}", t.elapsed(), v.detail);
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("runtime {e:.2?} (limit {limit:?})"))
}

// ---------------------------------------------------------------- criterion 1

fn loss_formulas() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (16, 8);
    let pred = Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>());
    let target = Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>());

    // plain MSE written out by hand
    let mut acc = 0.0;
    for (p, q) in pred.iter().zip(&target) {
        acc += (p - q) * (p - q);
    }
    let plain = acc / pred.len() as f64;

    let out = FfsrOutput {
        restored: ImageTensor::new(pred.clone()).unwrap(),
    };
    let lib = ffsr_loss(&out, &ImageTensor::new(target.clone()).unwrap(), &ones_mask(h, w).unwrap()).unwrap();
    let mut tape = Tape::<f64>::new(Mode::Train);
    let x = tape.input(pred.clone().insert_axis(Axis(0)).into_dyn());
    let l = tape.masked_mse(x, &target.clone().insert_axis(Axis(0)).into_dyn(), &Array2::ones((h, w)));
    let taped = tape.scalar_value(l);
    let mse_err = (lib - plain).abs().max((taped - plain).abs());

    let mut rw_ok = true;
    for r in [0.125, 0.5, 1.0] {
        rw_ok &= rw_loss(1.0 - r, r, r).unwrap() == 0.0;
        let mut tape = Tape::<f64>::new(Mode::Train);
        let lo = tape.input(ArrayD::from_elem(vec![3, 1], 1.0 - r));
        let hi = tape.input(ArrayD::from_elem(vec![3, 1], r));
        let v = tape.resolution_weight_loss(lo, hi, &[r; 3]);
        rw_ok &= tape.scalar_value(v) == 0.0;
    }

    let mut xent_err: f64 = 0.0;
    for c in [2usize, 16, 751] {
        let ln_c = (c as f64).ln();
        xent_err = xent_err.max((xent_loss(&vec![0.0; c], c - 1).unwrap() - ln_c).abs());
        let mut tape = Tape::<f64>::new(Mode::Train);
        let z = tape.input(ArrayD::zeros(vec![4, c]));
        let v = tape.cross_entropy(z, &[0, 1, 0, c - 1]);
        xent_err = xent_err.max((tape.scalar_value(v) - ln_c).abs());
    }

    let (fast, rt) = within(t, Duration::from_secs(1));
    Verdict::new(
        mse_err < 1e-12 && rw_ok && xent_err < 1e-12 && fast,
        format!("ones-mask |L - MSE| = {mse_err:.1e}, rw at (1-r, r) zero: {rw_ok}, |xent - ln C| = {xent_err:.1e}, {rt}"),
    )
}

// ---------------------------------------------------------------- criterion 2

#[derive(Clone, Copy, Debug)]
enum Term {
    Ffsr,
    Rw,
    Xent,
    Total,
}

impl Term {
    fn pick(self, v: &StageVars) -> Var {
        match self {
            Term::Ffsr => v.ffsr.unwrap(),
            Term::Rw => v.rw.unwrap(),
            Term::Xent => v.xent.unwrap(),
            Term::Total => v.total,
        }
    }

    /// Parameters the term depends on.
    fn touches(self, name: &str) -> bool {
        match self {
            Term::Ffsr => name.starts_with("ffsr."),
            // embed and classifier sit after the last fusion
            Term::Rw => name.starts_with("ffsr.") || name.contains(".low.") || name.contains(".high.") || name.starts_with("rife.stem"),
            Term::Xent | Term::Total => true,
        }
    }
}

struct Micro {
    ffsr: Ffsr,
    rife: Rife,
    store: ParamStore<f64>,
    batch: Batch<f64>,
}

impl Micro {
    fn new() -> Self {
        let cfg = TrainConfig {
            canonical_size: (32, 16),
            ffsr_channels: 3,
            rife_widths: vec![4, 4, 6, 6],
            stem_channels: 4,
            embedding_dim: 8,
            weight_hidden: 4,
            units_per_block: 1,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ffsr = Ffsr::init(cfg.ffsr_config(), &mut store, &mut rng).unwrap();
        let rife = Rife::init(cfg.rife_config(3), &mut store, &mut rng).unwrap();
        // Move away from the symmetric initialization: nonzero restoration
        // head, distinct streams, distinct weight heads.
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if matches!(store.kind(id), ParamKind::Weight { .. }) {
                store.value_mut(id).mapv_inplace(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let (h, w) = cfg.canonical_size;
        let n = 4;
        let targets = Array4::from_shape_fn((n, 3, h, w), |_| rng.random::<f64>());
        let inputs = &targets + &Array4::from_shape_fn((n, 3, h, w), |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let batch = Batch {
            inputs: inputs.into_dyn(),
            targets: targets.into_dyn(),
            mask: BatchMask::Shared(gaussian_mask(h, w, 0.5).unwrap().weights().clone()),
            labels: vec![0, 1, 2, 1],
            resolutions: vec![0.125, 0.5, 0.75, 1.0],
        };
        Self {
            ffsr,
            rife,
            store,
            batch,
        }
    }

    fn record(&self, store: &ParamStore<f64>) -> (Tape<f64>, StageVars) {
        let mut tape = Tape::new(Mode::Train);
        let v = stage_loss(&mut tape, Stage::Joint, Some(&self.ffsr), Some(&self.rife), store, &self.batch, 1.0).unwrap();
        (tape, v)
    }

    fn value(&self, store: &ParamStore<f64>, term: Term) -> f64 {
        let (tape, v) = self.record(store);
        tape.scalar_value(term.pick(&v))
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over `count` random informative parameter entries.
fn grad_check(m: &Micro, term: Term, count: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    const STEP: f64 = 1e-5;
    let (tape, vars) = m.record(&m.store);
    let grads = tape.backward(term.pick(&vars));
    let candidates: Vec<(ParamId, usize)> = m
        .store
        .iter()
        .filter(|(id, name, _)| matches!(m.store.kind(*id), ParamKind::Weight { .. }) && term.touches(name))
        .flat_map(|(id, _, v)| (0..v.len()).map(move |k| (id, k)))
        .collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut store = m.store.clone();
    for _ in 0..400 {
        if checked == count {
            break;
        }
        let (id, k) = candidates[rng.random_range(0..candidates.len())];
        let analytic = grads.param(id).map_or(0.0, |g| g.as_slice_memory_order().unwrap()[k]);
        let orig = store.value(id).as_slice_memory_order().unwrap()[k];
        store.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig + STEP;
        let up = m.value(&store, term);
        store.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig - STEP;
        let down = m.value(&store, term);
        store.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-9 {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    (worst, checked)
}

fn gradient_verification() -> Verdict {
    let t = Instant::now();
    let m = Micro::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut pass = true;
    let mut parts = Vec::new();
    for term in [Term::Ffsr, Term::Rw, Term::Xent, Term::Total] {
        let (worst, n) = grad_check(&m, term, 8, &mut rng);
        pass &= n >= 6 && worst < 1e-4;
        parts.push(format!("{term:?} {n} params max rel err {worst:.1e}"));
    }
    let (fast, rt) = within(t, Duration::from_secs(60));
    Verdict::new(pass && fast, format!("{}, {rt}", parts.join("; ")))
}

// ---------------------------------------------------------------- criterion 3

fn cmc_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (nq, ng, ids, dim) = (50, 200, 25u32, 8);
    let mut embed = |n: usize| -> Vec<Embedding> {
        (0..n)
            .map(|_| Embedding::new((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap())
            .collect()
    };
    let q = embed(nq);
    let g = embed(ng);
    let gid: Vec<u32> = (0..ng as u32).map(|j| j % ids).collect();
    let qid: Vec<u32> = (0..nq).map(|_| rng.random_range(0..ids)).collect();

    // Brute force: full sort of each gallery row, position of the first match.
    let oracle_dist = Array2::from_shape_fn((nq, ng), |(i, j)| {
        q[i].as_slice()
            .iter()
            .zip(g[j].as_slice())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
    });
    let first_hit: Vec<usize> = (0..nq)
        .map(|i| {
            let mut order: Vec<usize> = (0..ng).collect();
            order.sort_by(|&a, &b| oracle_dist[[i, a]].total_cmp(&oracle_dist[[i, b]]).then(a.cmp(&b)));
            order.iter().position(|&j| gid[j] == qid[i]).unwrap()
        })
        .collect();
    let ranks: Vec<usize> = (1..=ng).collect();
    let oracle: Vec<f64> = ranks
        .iter()
        .map(|&k| first_hit.iter().filter(|&&p| p < k).count() as f64 / nq as f64)
        .collect();

    let lib_dist = pairwise_sqdist(&q, &g).unwrap();
    let dist_err = (&lib_dist.values - &oracle_dist).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let curve = cmc(&DistanceMatrix { values: oracle_dist.clone() }, &qid, &gid, &ranks).unwrap();
    let curve_lib = cmc(&lib_dist, &qid, &gid, &ranks).unwrap();
    let metrics = retrieval_metrics(&q, &qid, &g, &gid).unwrap();
    let mismatches = ranks
        .iter()
        .zip(&oracle)
        .filter(|(&k, &o)| curve.at(k) != Some(o) || curve_lib.at(k) != Some(o))
        .count();
    let headline = metrics.rank1 == oracle[0] && metrics.rank5 == oracle[4];
    let (fast, rt) = within(t, Duration::from_secs(5));
    Verdict::new(
        mismatches == 0 && headline && dist_err < 1e-9 && fast,
        format!(
            "{mismatches} of {} ranks differ, rank-1 {} / rank-5 {}, distance err {dist_err:.1e}, {rt}",
            ranks.len(),
            oracle[0],
            oracle[4]
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn resolution_arithmetic() -> Verdict {
    let half = resolution_of(48, 96).unwrap();
    let quarter = resolution_of(24, 96).unwrap();
    let hr = ImageTensor::filled(192, 96, 0.5).unwrap();
    let shrunk = downsample(&hr, 0.5).unwrap();
    let example = half == 0.5 && quarter == 0.25 && shrunk.width() == 48;

    let src = ImageTensor::filled(128, 64, 0.5).unwrap();
    let vr = DegradeProtocol::vr(8, 32, 99);
    let mut out_of_range = 0;
    let (mut lo, mut hi) = (usize::MAX, 0);
    for i in 0..1000 {
        let w = vr.degrade(&src, Split::Query, i).unwrap().unwrap().width();
        lo = lo.min(w);
        hi = hi.max(w);
        if !(8..32).contains(&w) {
            out_of_range += 1;
        }
    }
    Verdict::new(
        example && out_of_range == 0,
        format!("48/96 -> {half}, 24/96 -> {quarter}; VR widths over 1000 samples span [{lo}, {hi}], {out_of_range} out of [8, 32)"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn degenerate_fusion() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RifeConfig::default();
    let (h, w) = cfg.canonical_size;
    let mut store = ParamStore::<f32>::new();
    let net = Rife::init(cfg, &mut store, &mut rng).unwrap();
    // Streams start as copies; perturb the high ones so the check is not vacuous.
    let high: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.contains(".high.")).map(|(id, _, _)| id).collect();
    for id in high {
        if matches!(store.kind(id), ParamKind::Weight { .. }) {
            store.value_mut(id).mapv_inplace(|v| v + 0.1 * rng.sample::<f32, _>(StandardNormal));
        }
    }
    let x = Array4::from_shape_fn((3, 3, h, w), |_| rng.random::<f32>()).into_dyn();
    let mut identical = 0;
    let mut differs_from_high = 0;
    let mut blocks = 0;
    for mode in [Mode::Eval, Mode::Train] {
        let mut tape = Tape::new(mode);
        let xv = tape.constant(x.clone());
        let out = net.forward(&mut tape, &store, xv, Some((1.0, 0.0)));
        for b in &out.blocks {
            blocks += 1;
            let bits = |v: Var| tape.value(v).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(b.fused) == bits(b.m_low) {
                identical += 1;
            }
            if tape.value(b.m_high.unwrap()) != tape.value(b.m_low) {
                differs_from_high += 1;
            }
        }
    }
    let (fast, rt) = within(t, Duration::from_secs(5));
    Verdict::new(
        identical == blocks && differs_from_high == blocks && fast,
        format!("{identical}/{blocks} block outputs bitwise equal to the low stream (high stream distinct in {differs_from_high}), {rt}"),
    )
}

// ------------------------------------------------------------ criteria 6 to 8

const E2E_SEEDS: [u64; 3] = [0, 1, 2];

struct SeedRun {
    seed: u64,
    base_rank1: f64,
    full_rank1: f64,
    base_slope: f64,
    full_slope: f64,
    base_curve: Vec<f64>,
    full_curve: Vec<f64>,
    /// Mean w_H per block at r = 0.125 and r = 1.
    w_high: Vec<(f64, f64)>,
    fg_gaussian: f64,
    fg_ones: f64,
    /// Time spent on criterion 6's training and evaluation.
    c6_time: Duration,
}

fn e2e() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| E2E_SEEDS.iter().map(|&s| run_seed(s)).collect())
}

/// Mean foreground-region error of the restorations of a split's inputs.
fn foreground_mse(model: &Model, split: &Manifest) -> f64 {
    let size = model.canonical_size().unwrap();
    let mut total = 0.0;
    for (i, e) in split.entries.iter().enumerate() {
        let p = preprocess(&split.load_sample(i).unwrap(), size).unwrap();
        let restored = model.restore(&[&p.input]).unwrap().pop().unwrap();
        let mask = load_image(split.resolve(e.mask_path.as_ref().expect("synthetic splits carry masks"))).unwrap();
        let region = mask.pixels().index_axis(Axis(0), 0).mapv(|v| v > 0.5);
        total += region_mse(&restored, &p.hr, &region).unwrap();
    }
    total / split.len() as f64
}

fn run_seed(seed: u64) -> SeedRun {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&SynthSpec { seed, ..SynthSpec::default() }, &dir.path().join("hr")).unwrap();
    let protocol = DegradeProtocol {
        kind: ProtocolKind::Mlr {
            ratios: (1..=8).map(|k| Ratio::new(k, 8)).collect(),
        },
        seed,
    };
    let lr = dir.path().join("lr");
    let train = apply_protocol(&corpus.train, &protocol, &lr).unwrap();
    let query = apply_protocol(&corpus.query, &protocol, &lr).unwrap();
    let gallery = apply_protocol(&corpus.gallery, &protocol, &lr).unwrap();
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let data = TrainingSet::from_manifest(&train, &cfg, 1).unwrap();
    let test_hr = load_hr_images(&[&corpus.query, &corpus.gallery], 1).unwrap();
    let with = |stage: Stage| TrainConfig { stage, ..cfg.clone() };

    let baseline_cfg = TrainConfig {
        variant: Variant::Single,
        ..with(Stage::RifeTrain)
    };
    let base = run_stage(&baseline_cfg, &data, None, true).unwrap().model;
    let s1 = run_stage(&with(Stage::FfsrPretrain), &data, None, false).unwrap().model;
    let s2 = run_stage(&with(Stage::RifeTrain), &data, Some(s1.clone()), false).unwrap().model;
    let full = run_stage(&with(Stage::Joint), &data, Some(s2), false).unwrap().model;

    let base_m = evaluate_retrieval(&base, &query, &gallery, 1).unwrap();
    let full_m = evaluate_retrieval(&full, &query, &gallery, 1).unwrap();
    let base_grid = diagnose(&base, &test_hr, GridMode::B, 1).unwrap();
    let full_grid = diagnose(&full, &test_hr, GridMode::B, 1).unwrap();
    let c6_time = t.elapsed();

    let images: Vec<ImageTensor> = test_hr.iter().map(|(_, im)| im.clone()).collect();
    let lo = infer_at(&full, &images, 0.125, 1).unwrap();
    let hi = infer_at(&full, &images, 1.0, 1).unwrap();
    let w_high = lo
        .block_weights
        .iter()
        .zip(&hi.block_weights)
        .map(|(l, h)| (l.1.mean().unwrap(), h.1.mean().unwrap()))
        .collect();

    let ones_cfg = TrainConfig {
        mask: MaskKind::Ones,
        ..with(Stage::FfsrPretrain)
    };
    let s1_ones = run_stage(&ones_cfg, &data, None, false).unwrap().model;

    let curve = |g: &rivid::evalkit::ObjectiveGrid| g.rows.iter().map(|r| r.point.o.unwrap_or(f64::NAN)).collect();
    SeedRun {
        seed,
        base_rank1: base_m.rank1,
        full_rank1: full_m.rank1,
        base_slope: base_grid.mean_abs_slope().unwrap(),
        full_slope: full_grid.mean_abs_slope().unwrap(),
        base_curve: curve(&base_grid),
        full_curve: curve(&full_grid),
        w_high,
        fg_gaussian: foreground_mse(&s1, &query),
        fg_ones: foreground_mse(&s1_ones, &query),
        c6_time,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_curve(c: &[f64]) -> String {
    c.iter().map(|o| format!("{o:.4}")).collect::<Vec<_>>().join(" ")
}

fn end_to_end() -> Verdict {
    let runs = e2e();
    let base = mean(runs.iter().map(|r| r.base_rank1));
    let full = mean(runs.iter().map(|r| r.full_rank1));
    let base_slope = mean(runs.iter().map(|r| r.base_slope));
    let full_slope = mean(runs.iter().map(|r| r.full_slope));
    let time: Duration = runs.iter().map(|r| r.c6_time).sum();
    for r in runs {
        println!(
            "  seed {}: rank-1 baseline {:.4} full {:.4}; mean |slope| baseline {:.5} full {:.5}",
            r.seed, r.base_rank1, r.full_rank1, r.base_slope, r.full_slope
        );
        println!("    O(r, 1) baseline: {}", fmt_curve(&r.base_curve));
        println!("    O(r, 1) full:     {}", fmt_curve(&r.full_curve));
        let monotone = r.base_curve.windows(2).all(|w| w[1] <= w[0]);
        println!("    baseline O non-increasing in r: {monotone} (informational)");
    }
    let gain = full - base;
    let ok = gain >= 0.03 && full_slope < base_slope && time < Duration::from_secs(45 * 60);
    Verdict::new(
        ok,
        format!(
            "mean rank-1 {full:.4} vs baseline {base:.4} (gain {:+.1} pp, need >= 3), mean |slope| {full_slope:.5} vs {base_slope:.5}, runtime {time:.0?} (limit 45 min)",
            100.0 * gain
        ),
    )
}

fn stream_specialization() -> Verdict {
    let runs = e2e();
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let cells: Vec<String> = r
            .w_high
            .iter()
            .map(|(lo, hi)| {
                ok &= hi > lo;
                format!("{lo:.3}->{hi:.3}")
            })
            .collect();
        parts.push(format!("seed {} w_H(0.125)->w_H(1): {}", r.seed, cells.join(" ")));
    }
    Verdict::new(ok, parts.join("; "))
}

fn foreground_focus() -> Verdict {
    let runs = e2e();
    let g = mean(runs.iter().map(|r| r.fg_gaussian));
    let o = mean(runs.iter().map(|r| r.fg_ones));
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.6}/{:.6}", r.seed, r.fg_gaussian, r.fg_ones))
        .collect();
    Verdict::new(
        g < o,
        format!("foreground MSE gaussian {g:.6} vs ones {o:.6} ({})", per_seed.join(", ")),
    )
}

// ---------------------------------------------------------------- criterion 9

const SYNTH_SPEC: &str = "n_identities = 6\nimages_per_identity = 4\ncanonical_height = 64\ncanonical_width = 32\n";

const TRAIN_TOML: &str = "\
epochs_per_stage = 2
batch_size = 4
canonical_size = [64, 32]
ffsr_channels = 4
rife_widths = [4, 4, 8, 8]
units_per_block = 1
stem_channels = 4
embedding_dim = 8
weight_hidden = 4
";

fn cli(workers: &str, args: &[String]) {
    let mut argv = vec!["rivid".to_string(), "--workers".into(), workers.into()];
    argv.extend(args.iter().cloned());
    let code = rivid::cli::dispatch(&argv);
    assert_eq!(code, 0, "rivid {} exited with {code}", args.join(" "));
}

/// Runs the whole pipeline below `root`. Words starting with `@` name paths
/// relative to `root`. Returns the inspect report of the final checkpoint.
fn pipeline(root: &Path, workers: &str) -> String {
    fs::create_dir_all(root).unwrap();
    fs::write(root.join("spec.toml"), SYNTH_SPEC).unwrap();
    fs::write(root.join("train.toml"), TRAIN_TOML).unwrap();
    let run = |cmd: &str| {
        let args: Vec<String> = cmd
            .split_whitespace()
            .map(|w| match w.strip_prefix('@') {
                Some(rel) => root.join(rel).to_string_lossy().into_owned(),
                None => w.to_string(),
            })
            .collect();
        cli(workers, &args);
    };
    run("synth --spec @spec.toml --out @hr --seed 7");
    run("degrade --data @hr --protocol mlr --ratios 1/2,1/4 --out @lr --seed 7");
    run("degrade --data @hr --protocol vr --widths 6..16 --out @vr --seed 7");
    let train = "--config @train.toml --data @lr --seed 7";
    run(&format!("train --stage 1 {train} --out @s1"));
    run(&format!("train --stage 2 {train} --out @s2 --init @s1/model.ckpt"));
    run(&format!("train --stage 3 {train} --out @s3 --init @s2/model.ckpt"));
    run("eval --ckpt @s3/model.ckpt --data @lr --out @eval/metrics.json");
    run("diagnose --ckpt @s3/model.ckpt --data @lr --mode a --out @diag_a/grid.csv");
    run("diagnose --ckpt @s3/model.ckpt --data @lr --mode b --out @diag_b/grid.csv");
    let report = rivid::cli::inspect(&root.join("s3/model.ckpt")).unwrap();
    // the first line echoes the checkpoint path
    report.lines().skip(1).collect::<Vec<_>>().join("\n")
}

/// Relative path to bytes for every file below `root` except run records.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|n| n != "run.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn cli_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let inspect_a = pipeline(&a, "1");
    let inspect_b = pipeline(&b, "2");
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let differing: Vec<String> = sa
        .keys()
        .chain(sb.keys())
        .filter(|k| sa.get(*k) != sb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let key_files = [
        "hr/train.csv",
        "lr/query.csv",
        "vr/gallery.csv",
        "s1/loss_log.csv",
        "s2/loss_log.csv",
        "s3/loss_log.csv",
        "eval/metrics.json",
        "diag_a/grid.csv",
        "diag_b/grid.csv",
    ];
    let missing: Vec<&str> = key_files.iter().copied().filter(|f| !sa.contains_key(Path::new(f))).collect();
    Verdict::new(
        differing.is_empty() && missing.is_empty() && inspect_a == inspect_b,
        format!(
            "{} files compared across two runs (1 and 2 workers), differing: {differing:?}, missing: {missing:?}, inspect identical: {}",
            sa.len(),
            inspect_a == inspect_b
        ),
    )
}
