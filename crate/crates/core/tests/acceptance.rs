//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines appear in order.

use std::collections::BTreeSet;
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgr_core::components::{drop_small, extract_components, Component, ComponentSet, LabelMap};
use sgr_core::losses::{dice_value, focal_value};
use sgr_core::metrics::{entropy, image_diversity, token_histogram, TokenHistogram};
use sgr_core::oracle::union_find_components;
use sgr_core::suites::{components_oracle, hungarian_oracle, loss_gradchecks, matching_invariants, model_gradcheck};
use sgr_core::synth::{generate_dataset, SceneSpec};
use sgr_core::train::{evaluate, lr_schedule, train, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, started: Instant, out: Outcome) -> bool {
    let tag = if out.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{tag} {name} [{:.1}s] {}", started.elapsed().as_secs_f64(), out.detail);
    out.pass
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut results = loss_gradchecks(100, 8, 0xa11);
    results.push(model_gradcheck(100, 0xb22));
    let secs = started.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({}/{})", r.name, r.failures, r.instances))
        .collect();
    Outcome {
        pass: failed.is_empty() && secs < 120.0,
        detail: format!(
            "{} suites x 100 instances, max rel err {worst:.2e} (tol 1e-4), {secs:.1}s (limit 120s){}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    }
}

fn hungarian() -> Outcome {
    let started = Instant::now();
    let r = hungarian_oracle(1000, 7, 0xc33);
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: r.passed() && secs < 30.0,
        detail: format!("{} matrices up to 7x7, {} mismatches, {secs:.2}s (limit 30s)", r.instances, r.failures),
    }
}

fn matching() -> Outcome {
    let r = matching_invariants(500, 0xd44);
    Outcome {
        pass: r.passed(),
        detail: format!("{} instances, {} violations", r.instances, r.failures),
    }
}

fn connected_components() -> Outcome {
    let r = components_oracle(500, 16, 0xe55);
    let blob = |area: usize, offset: usize| {
        let mut mask = vec![false; 400];
        mask[offset..offset + area].iter_mut().for_each(|m| *m = true);
        Component { class_id: 1, mask, area }
    };
    let boundary = |small: usize| {
        let cs = ComponentSet {
            width: 20,
            height: 20,
            components: vec![blob(100, 0), blob(small, 300)],
        };
        drop_small(&cs).areas()
    };
    let drop4 = boundary(4) == vec![100];
    let keep5 = boundary(5) == vec![100, 5];
    // diagonal touch joins under 8-connectivity
    let diag = LabelMap::new(3, 3, vec![1, 0, 0, 0, 1, 0, 0, 0, 1], None).unwrap();
    let diag_ok = extract_components(&diag).components.iter().filter(|c| c.class_id == 1).count() == 1
        && union_find_components(3, 3, &diag.classes).iter().filter(|c| c.0 == 1).count() == 1;
    Outcome {
        pass: r.passed() && drop4 && keep5 && diag_ok,
        detail: format!(
            "{} random 16x16 grids, {} mismatches; {{100,4}} drop {drop4}, {{100,5}} keep {keep5}, diagonal join {diag_ok}",
            r.instances, r.failures
        ),
    }
}

fn metrics_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf66);
    let one_hot = entropy([1.0, 0.0, 0.0]) == 0.0;
    let uniform = (entropy([0.5, 0.5]) - 2f64.ln()).abs() <= 1e-12;

    let mut refine_bad = 0;
    let mut scale_bad = 0;
    for _ in 0..500 {
        let n = 36;
        let classes: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let inst: Vec<Option<u32>> = classes.iter().map(|&c| Some(1 + c * 4 + rng.gen_range(0..4))).collect();
        let cls: Vec<Option<u32>> = classes.iter().map(|&c| Some(c)).collect();
        let mask: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
        let present = |l: &[Option<u32>]| l.iter().flatten().copied().collect::<BTreeSet<u32>>();
        let ch = token_histogram(0, &mask, &cls, &present(&cls)).unwrap();
        let ih = token_histogram(0, &mask, &inst, &present(&inst)).unwrap();
        if ch.entropy() > ih.entropy() + 1e-12 {
            refine_bad += 1;
        }
        let factor = rng.gen_range(1e-3..1e3);
        let scaled: Vec<f64> = mask.iter().map(|m| m * factor).collect();
        let sh = token_histogram(0, &scaled, &cls, &present(&cls)).unwrap();
        if ch.bins.values().zip(sh.bins.values()).any(|(a, b)| (a - b).abs() > 1e-12) {
            scale_bad += 1;
        }
    }

    let mut diversity_bad = 0;
    for _ in 0..500 {
        let tokens = rng.gen_range(2..6);
        let hist = |rng: &mut ChaCha8Rng, t: usize| {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            TokenHistogram {
                token: t,
                bins: raw.iter().enumerate().map(|(i, v)| (i as u32, v / s)).collect(),
            }
        };
        let base = hist(&mut rng, 0);
        let same: Vec<TokenHistogram> = (0..tokens).map(|_| base.clone()).collect();
        let mut mixed = same.clone();
        mixed[rng.gen_range(0..tokens)] = hist(&mut rng, 1);
        let differ = mixed.windows(2).any(|w| w[0].bins != w[1].bins);
        if image_diversity(&same) != 0.0 || (image_diversity(&mixed) > 0.0) != differ {
            diversity_bad += 1;
        }
    }
    Outcome {
        pass: one_hot && uniform && refine_bad == 0 && scale_bad == 0 && diversity_bad == 0,
        detail: format!(
            "one-hot entropy 0: {one_hot}; uniform-2 = ln 2: {uniform}; class<=instance violations {refine_bad}/500; \
             scale-invariance violations {scale_bad}/500; diversity-zero violations {diversity_bad}/500"
        ),
    }
}

struct SeedRun {
    ratio: f64,
    accuracy: f64,
    s_sup: f64,
    s_base: f64,
    d_sup: f64,
    d_base: f64,
}

fn e2e_seed(seed: u64) -> SeedRun {
    let spec = SceneSpec::default();
    let train_set = generate_dataset(&spec.with_seed(1000 * seed), 200).expect("train split");
    let held_out = generate_dataset(&spec.with_seed(1000 * seed + 500), 50).expect("held-out split");
    let sup_cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let mut base_cfg = TrainConfig {
        seed,
        supervision: false,
        ..Default::default()
    };
    base_cfg.weights.beta = 0.0;
    let (sup, sup_run) = train(&sup_cfg, &train_set).expect("supervised run");
    let (base, _) = train(&base_cfg, &train_set).expect("baseline run");
    let sup_eval = evaluate(&sup, &sup_cfg.model, &held_out).expect("evaluation");
    let base_eval = evaluate(&base, &base_cfg.model, &held_out).expect("evaluation");
    SeedRun {
        ratio: sup_run.final_loss(100) / sup_run.losses[0],
        accuracy: sup_eval.pixel_accuracy,
        s_sup: sup_eval.metrics.s_class,
        s_base: base_eval.metrics.s_class,
        d_sup: sup_eval.metrics.d_class,
        d_base: base_eval.metrics.d_class,
    }
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let runs: Vec<(u64, SeedRun)> = (0..3).map(|s| (s, e2e_seed(s))).collect();
    let secs = started.elapsed().as_secs_f64();
    let mut pass = secs < 600.0;
    let mut parts = Vec::new();
    for (seed, r) in &runs {
        let ok = r.ratio <= 0.5 && r.accuracy >= 0.85 && r.s_sup < r.s_base && r.d_sup > r.d_base;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: loss ratio {:.3}, acc {:.3}, s_class {:.3} vs {:.3}, d_class {:.4} vs {:.4}{}",
            r.ratio,
            r.accuracy,
            r.s_sup,
            r.s_base,
            r.d_sup,
            r.d_base,
            if ok { "" } else { " (miss)" }
        ));
    }
    Outcome {
        pass,
        detail: format!("{}; {secs:.0}s (limit 600s)", parts.join("; ")),
    }
}

fn loss_spot_values() -> Outcome {
    let half = vec![0.5; 16];
    let target: Vec<f64> = (0..16).map(|i| if i < 6 { 1.0 } else { 0.0 }).collect();
    let focal = focal_value(&half, &target, 2.0).unwrap();
    let focal_ok = (focal - 0.25 * 2f64.ln()).abs() <= 1e-9;
    let pred: Vec<f64> = target.iter().map(|t| 0.5 * t).collect();
    let dice = dice_value(&pred, &target).unwrap();
    let dice_ok = (dice - 0.2).abs() <= 1e-6;
    let lr = lr_schedule(1000, 2000, 0.01, 0.9);
    let lr_ok = (lr - 0.01 * 0.5f64.powf(0.9)).abs() <= 1e-12;
    Outcome {
        pass: focal_ok && dice_ok && lr_ok,
        detail: format!("focal {focal:.12} (0.25 ln 2), dice {dice:.9} (0.2), lr(total/2) {lr:.12}"),
    }
}

fn main() -> ExitCode {
    // honour `cargo test -- <filter>` only to the extent of skipping entirely
    if std::env::args().skip(1).any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient-suite", gradient_suite),
        ("hungarian-oracle", hungarian),
        ("matching-invariants", matching),
        ("connected-components-oracle", connected_components),
        ("metrics-identities", metrics_identities),
        ("end-to-end-toy-run", end_to_end),
        ("loss-spot-values", loss_spot_values),
    ];
    let mut all = true;
    for (name, check) in criteria {
        let started = Instant::now();
        all &= report(name, started, check());
    }
    let _ = writeln!(std::io::stderr(), "acceptance: {}", if all { "all criteria passed" } else { "FAILED" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
