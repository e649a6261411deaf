//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Run with `cargo test -p tcc-cli --test acceptance -- --nocapture`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use tcc_cli::checkpoint;
use tcc_cli::commands::cmd_trace;
use tcc_cli::config::RunConfig;
use tcc_cli::trace_io;
use tcc_core::flops::{describe_pyramid, model_report, paper_scale_arch, refinement_summary};
use tcc_core::gradcheck::standard_suite;
use tcc_core::pyramid::{pyramid_forward, Refinement};
use tcc_core::rng::SeededRng;
use tcc_core::synth::{
    eval_recall, export_context_trace, gen_scene, Dataset, Detector, DetectorConfig, LevelBands, SceneSpec, TrainConfig,
    Trainer,
};
use tcc_core::tcc::Stage;
use tcc_core::{Graph, Tensor};

const PROPTEST_CASES: u32 = 128;
const SCORE_THRESHOLD: f64 = 0.3;
const RADIUS_CELLS: usize = 1;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn flops_delta_ratio() -> Outcome {
    let s = refinement_summary(&paper_scale_arch()).map_err(|e| e.to_string())?;
    check(
        s.ratio <= 0.25,
        format!("(tcc - none) / (conv3x3 - none) = {} / {} = {:.4}, bound 0.25", s.tcc_delta, s.conv_delta, s.ratio),
    )
}

fn key_count_saturation() -> Outcome {
    let total = |n_keys| -> Result<u64, String> {
        let mut arch = paper_scale_arch().with_refinement(Refinement::Tcc);
        arch.tcc.n_keys = n_keys;
        Ok(model_report(&describe_pyramid(&arch).map_err(|e| e.to_string())?).total_flops)
    };
    let (four, eight) = (total(4)?, total(8)?);
    let added = eight - four;
    check(added < 1_000_000_000, format!("n 4 -> 8 adds {added} FLOPs ({:.4} G), bound 1 G", added as f64 / 1e9))
}

fn gradient_integrity() -> Outcome {
    let rows = standard_suite(7).map_err(|e| e.to_string())?;
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).ok_or("empty suite")?;
    check(
        worst.max_rel_error < 1e-4,
        format!("{} checks, worst {} at {:.2e}, bound 1e-4", rows.len(), worst.name, worst.max_rel_error),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst = ("", 0.0f64);
    for seed in 0..4 {
        for (name, err) in support::oracle_errors(seed) {
            if !(err <= worst.1) {
                worst = (name, err);
            }
        }
    }
    check(worst.1 <= 1e-12, format!("worst {} at {:.2e}, bound 1e-12", worst.0, worst.1))
}

/// A random parameter list, including values whose bit patterns are easy
/// to lose: signed zero, infinities, NaN and subnormals.
fn random_params(seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = SeededRng::new(seed);
    let specials = [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::NAN, f64::MIN_POSITIVE / 3.0, f64::MAX];
    (0..rng.int_inclusive(0, 5))
        .map(|i| {
            let shape: Vec<usize> = (0..rng.int_inclusive(0, 4)).map(|_| rng.int_inclusive(0, 4)).collect();
            let t = Tensor::from_fn(&shape, |_| {
                if rng.uniform() < 0.2 {
                    specials[rng.int_inclusive(0, specials.len() - 1)]
                } else {
                    f64::from_bits(rng.next_u64())
                }
            });
            (format!("p{i}.{}", "w".repeat(rng.int_inclusive(0, 6))), t)
        })
        .collect()
}

fn prop_checkpoint_roundtrip(seed: u64) -> Result<(), String> {
    let params = random_params(seed);
    let bytes = checkpoint::encode(params.iter().map(|(n, t)| (n.as_str(), t)));
    let back = checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    let same = back.len() == params.len()
        && back.iter().zip(&params).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    if same {
        Ok(())
    } else {
        Err("decoded parameters differ".into())
    }
}

fn structural_invariants() -> Outcome {
    let props: [(&str, fn(u64) -> Result<(), String>); 5] = [
        ("attention normalization", support::prop_attention_normalized),
        ("argmax shift/scale", support::prop_argmax_shift_scale),
        ("identity at init", support::prop_identity_at_init),
        ("decode permutation", support::prop_decode_permutation),
        ("checkpoint roundtrip", prop_checkpoint_roundtrip),
    ];
    for (name, prop) in props {
        let mut runner = TestRunner::new(Config {
            cases: PROPTEST_CASES,
            failure_persistence: None,
            ..Config::default()
        });
        runner
            .run(&any::<u64>(), |seed| prop(seed).map_err(TestCaseError::fail))
            .map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} properties x {PROPTEST_CASES} cases", props.len()))
}

struct RunResult {
    losses: Vec<f64>,
    recall: f64,
}

fn train(refinement: Refinement, data: &Dataset) -> Result<RunResult, String> {
    let mut det = Detector::new(&DetectorConfig {
        refinement,
        ..DetectorConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&det, TrainConfig::default()).map_err(|e| e.to_string())?;
    let losses = trainer.run(&mut det, data).map_err(|e| e.to_string())?;
    let recall = eval_recall(&det, data, SCORE_THRESHOLD, RADIUS_CELLS).map_err(|e| e.to_string())?;
    Ok(RunResult { losses, recall })
}

fn training_proxy() -> Outcome {
    let data = Dataset::generate(0..32, &SceneSpec::default(), &LevelBands::default(), 4).map_err(|e| e.to_string())?;
    let (tcc, none, repeat) = std::thread::scope(|s| {
        let a = s.spawn(|| train(Refinement::Tcc, &data));
        let b = s.spawn(|| train(Refinement::None, &data));
        let c = s.spawn(|| train(Refinement::Tcc, &data));
        (a.join().unwrap(), b.join().unwrap(), c.join().unwrap())
    });
    let (tcc, none, repeat) = (tcc?, none?, repeat?);
    let (first, last) = (tcc.losses[0], *tcc.losses.last().ok_or("no steps")?);
    let halved = last <= 0.5 * first;
    let better = tcc.recall >= none.recall;
    let deterministic =
        tcc.losses.len() == repeat.losses.len() && tcc.losses.iter().zip(&repeat.losses).all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        halved && better && deterministic,
        format!(
            "{} steps: loss {first:.4} -> {last:.4} [{}]; recall tcc {:.3} vs none {:.3} [{}]; repeat run bit-identical [{}]",
            tcc.losses.len(),
            if halved { "ok" } else { "not halved" },
            tcc.recall,
            none.recall,
            if better { "ok" } else { "lower" },
            if deterministic { "ok" } else { "differs" },
        ),
    )
}

fn flops_agreement() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, base) in support::desk_archs().into_iter().enumerate() {
        for r in [Refinement::None, Refinement::Conv3x3, Refinement::Tcc] {
            let arch = base.with_refinement(r);
            let analytic = model_report(&describe_pyramid(&arch).map_err(|e| e.to_string())?).total_flops;
            let counted = support::instrumented_flops(&arch, i as u64);
            ok &= analytic == counted;
            if analytic != counted {
                lines.push(format!("config {i} {r:?}: report {analytic} vs counter {counted}"));
            }
        }
    }
    check(ok, if ok { "3 configs x 3 refinements agree exactly".into() } else { lines.join("; ") })
}

fn trace_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let (path, _) = cmd_trace(&cfg, None, dir.path()).map_err(|e| e.to_string())?;
    let records = trace_io::parse(&std::fs::read_to_string(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let tcc = cfg.tcc_config();
    let n = tcc.n_keys;
    let placements = [Stage::BeforeFusion, Stage::AfterFusion];

    let det = Detector::new(&cfg.detector_config()).map_err(|e| e.to_string())?;
    let image = gen_scene(cfg.seed, &cfg.scene_spec()).map_err(|e| e.to_string())?.image;
    if records != export_context_trace(&det, &image).map_err(|e| e.to_string())? {
        return Err("file differs from exported records".into());
    }
    for level in 0..det.levels() {
        for stage in placements {
            for round in 0..tcc.stack_depth {
                let r: Vec<_> = records.iter().filter(|r| r.level == level && r.stage == stage && r.round == round).collect();
                if r.len() != 1 || r[0].keys.len() != n {
                    return Err(format!("level {level} {stage:?} round {round}: expected one record with {n} keys"));
                }
                let mut ranks: Vec<usize> = r[0].attention.iter().map(|a| a.rank).collect();
                ranks.sort_unstable();
                if ranks != (1..=n + 1).collect::<Vec<_>>() {
                    return Err(format!("level {level} {stage:?} round {round}: ranks {ranks:?}"));
                }
            }
        }
    }

    // weights as held on the tape during the forward pass
    let mut g = Graph::new();
    let bound = det.store.bind(&mut g, false).map_err(|e| e.to_string())?;
    let x = g.constant(image).map_err(|e| e.to_string())?;
    let out = pyramid_forward(&mut g, &bound, &det.pyramid, x).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for app in &out.tcc {
        for (round, rt) in app.result.rounds.iter().enumerate() {
            let w = g.value(rt.weights);
            let rec = records
                .iter()
                .find(|r| r.level == app.level && r.stage == app.stage && r.round == round)
                .ok_or("missing record")?;
            let hw = w.shape()[1];
            let side = (hw as f64).sqrt() as usize;
            let q = rec.query_cell.1 * side + rec.query_cell.0;
            for a in &rec.attention {
                if a.weight.to_bits() != w.data()[q * (n + 1) + a.entry].to_bits() {
                    return Err(format!("level {} round {round}: weight {} differs from tape", app.level, a.entry));
                }
                compared += 1;
            }
        }
    }
    Ok(format!(
        "{} records, {n} keys each, ranks 1..={}, {compared} weights bit-equal to the tape",
        records.len(),
        n + 1
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("refinement FLOPs delta ratio at full scale", flops_delta_ratio),
        ("key-count saturation cost", key_count_saturation),
        ("gradient integrity", gradient_integrity),
        ("oracle equivalence", oracle_equivalence),
        ("structural invariants", structural_invariants),
        ("desk-scale training proxy", training_proxy),
        ("analytical vs instrumented FLOPs", flops_agreement),
        ("trace fidelity", trace_fidelity),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
