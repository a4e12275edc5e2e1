//! Acceptance gate: one test per release criterion, each printing a
//! single PASS/FAIL line (run with `--nocapture` to see them on success).
//!
//! The heavier criteria train real models, so this target takes tens of
//! minutes on one CPU core.

mod common;

use std::path::Path;

use pixpro::encoder::{
    momentum_schedule, ppm_forward, EncoderConfig, ForwardCtx, Mode, PpmMode,
};
use pixpro::eval::{
    collapse_diagnostic, correspondence_eval, linear_probe, COLLAPSE_STD_THRESHOLD,
};
use pixpro::objectives::{instance_loss, pix_contrast_loss, pixpro_loss, LossOutcome};
use pixpro::params::{BufferSet, LeafSet};
use pixpro::trainer::{
    checkpoint,
    config::{TrainRunConfig, Variant},
    init_state,
    lars::effective_base_lr,
    metrics, run_pretrain, TrainState,
};
use pixpro::viewgen::{assignment_for, AssignmentMatrix, CropRecord, DiagNorm};
use pixpro::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, label: &str, pass: bool, detail: String) {
    println!(
        "criterion {id} [{label}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} [{label}] failed: {detail}");
}

fn base_config(dataset: &Path, steps: usize) -> TrainRunConfig {
    TrainRunConfig {
        dataset: dataset.display().to_string(),
        steps,
        ..TrainRunConfig::default()
    }
}

fn gen_data(dir: &Path, n: usize, n_classes: usize, seed: u64) -> pixpro::data::Dataset {
    pixpro::data::gen_synthetic_dataset(dir, n, 32, n_classes, seed).unwrap()
}

fn final_state(out_dir: &Path) -> TrainState {
    checkpoint::load(&pixpro::trainer::checkpoint_path(out_dir)).unwrap()
}

#[test]
fn criterion_1_gradient_oracle_suite() {
    let start = std::time::Instant::now();
    let suite = pixpro::gradcheck::run_suite(42);
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (name, res) in &suite.checks {
        match res {
            Ok(err) => worst = worst.max(*err),
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = suite.all_passed() && failed.is_empty() && elapsed.as_secs() < 120;
    report(
        1,
        "gradient oracles",
        pass,
        format!(
            "{} checks, worst rel err {worst:.2e}, {:.1}s{}",
            suite.checks.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failures: {failed:?}") }
        ),
    );
}

#[test]
fn criterion_2_geometry_oracle_suite() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = 0.7;
    for draw in 0..1000 {
        let size = rng.gen_range(12..=48usize);
        let feat_res = rng.gen_range(1..=7usize);
        let mut crop = || {
            let w = rng.gen_range(2..=size);
            let h = rng.gen_range(2..=size);
            CropRecord {
                x0: rng.gen_range(0..=size - w),
                y0: rng.gen_range(0..=size - h),
                w,
                h,
                out_res: 32,
                flip: rng.gen_bool(0.5),
            }
        };
        let rec_a = crop();
        let rec_b = crop();

        let got = assignment_for(&rec_a, &rec_b, feat_res, t, DiagNorm::Max);
        let want = common::brute_force_assignment(&rec_a, &rec_b, feat_res, t);
        assert_eq!(got.positives, want, "draw {draw}: assignment disagrees with enumeration");

        let swapped = assignment_for(&rec_b, &rec_a, feat_res, t, DiagNorm::Max);
        assert_eq!(got, swapped.transpose(), "draw {draw}: transpose symmetry violated");

        // Toggling a view's flip must permute that view's cells within
        // each grid row (column c becomes column res-1-c).
        let flipped = assignment_for(
            &CropRecord { flip: !rec_a.flip, ..rec_a },
            &rec_b,
            feat_res,
            t,
            DiagNorm::Max,
        );
        for r in 0..feat_res {
            for c in 0..feat_res {
                let i = r * feat_res + c;
                let mirrored = r * feat_res + (feat_res - 1 - c);
                assert_eq!(
                    flipped.row_mask(i),
                    got.row_mask(mirrored),
                    "draw {draw}: flip consistency violated"
                );
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        "geometry oracles",
        elapsed.as_secs() < 60,
        format!("1000 draws exact, {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_3_propagation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gammas = [0.5, 1.0, 2.0, 4.0, 8.0];
    let layer_counts = [0usize, 1, 2];
    let d = 3;
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let gamma = gammas[case % gammas.len()];
        let layers = layer_counts[(case / gammas.len()) % layer_counts.len()];
        let h = rng.gen_range(1..=8usize);
        let w = rng.gen_range(1..=8usize);
        let n_cells = h * w;

        // Cells with non-vanishing norm so the cosine is well defined.
        let mut cells: Vec<Vec<f64>> = Vec::with_capacity(n_cells);
        while cells.len() < n_cells {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 0.3 {
                cells.push(v);
            }
        }

        let mut g_w = Vec::new();
        let mut g_b = Vec::new();
        let mut bn = Vec::new();
        let mut named = Vec::new();
        for i in 0..layers {
            let wv: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            named.push((format!("ppm.g{i}.w"), Tensor::leaf(&[d, d, 1, 1], wv.clone(), false)));
            named.push((format!("ppm.g{i}.b"), Tensor::leaf(&[d], bv.clone(), false)));
            g_w.push(wv);
            g_b.push(bv);
            if i + 1 < layers {
                let sv: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
                let tv: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
                named.push((format!("ppm.bn{i}.gamma"), Tensor::leaf(&[d], sv.clone(), false)));
                named.push((format!("ppm.bn{i}.beta"), Tensor::leaf(&[d], tv.clone(), false)));
                bn.push((sv, tv));
            }
        }

        let cfg = EncoderConfig {
            embed_dim: d,
            ppm_mode: PpmMode::Propagation { layers },
            gamma,
            ..EncoderConfig::default()
        };
        let mut chw = vec![0.0; d * n_cells];
        for (cell, v) in cells.iter().enumerate() {
            for (ch, x) in v.iter().enumerate() {
                chw[ch * n_cells + cell] = *x;
            }
        }
        let map = Tensor::leaf(&[1, d, h, w], chw, false);
        let leaves = LeafSet::from_named(named);
        let mut buffers = BufferSet::new();
        let mut ctx = ForwardCtx {
            leaves: &leaves,
            buffers: &mut buffers,
            mode: Mode::Train,
            update_stats: false,
        };
        let got = ppm_forward(&map, &cfg, &mut ctx).unwrap();
        let want = common::ppm_reference(&cells, gamma, layers, &g_w, &g_b, &bn, cfg.bn_eps);

        let gd = got.data();
        for (cell, v) in want.iter().enumerate() {
            for (ch, o) in v.iter().enumerate() {
                let diff = (gd[ch * n_cells + cell] - o).abs();
                worst = worst.max(diff);
                assert!(
                    diff < 1e-6,
                    "case {case} (gamma {gamma}, layers {layers}): {diff}"
                );
            }
        }
    }
    report(3, "propagation oracle", true, format!("200 maps, worst abs diff {worst:.2e}"));
}

#[test]
fn criterion_4_closed_form_losses() {
    let single = AssignmentMatrix {
        positives: vec![true],
        rows: 1,
        cols: 1,
        threshold_used: 0.7,
    };
    // Consistency at perfect agreement: y's proportional to the crossed
    // targets drive both cosine terms to 1, so the loss reaches -2.
    let y_a = Tensor::constant(&[1, 3], vec![2.0, 4.0, 6.0]);
    let x_bm = Tensor::constant(&[1, 3], vec![1.0, 2.0, 3.0]);
    let y_b = Tensor::constant(&[1, 3], vec![0.5, 0.0, 0.5]);
    let x_am = Tensor::constant(&[1, 3], vec![1.0, 0.0, 1.0]);
    let consistency = match pixpro_loss(&y_a, &y_b, &x_am, &x_bm, &single) {
        LossOutcome::Value(v) => v.item(),
        LossOutcome::Skipped => f64::NAN,
    };

    // One positive and one negative at equal cosine to the anchor, in
    // both directions by symmetry: the softmax is an even split, ln 2.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let x_a = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let x_b = Tensor::constant(&[2, 2], vec![s, s, s, -s]);
    let one_pos = AssignmentMatrix {
        positives: vec![true, false, false, false],
        rows: 2,
        cols: 2,
        threshold_used: 0.7,
    };
    let contrast = match pix_contrast_loss(&x_a, &x_b, &x_a, &x_b, &one_pos, 0.3) {
        LossOutcome::Value(v) => v.item(),
        LossOutcome::Skipped => f64::NAN,
    };

    // Batch of two with positive cosine 1 and negative cosine 0 at unit
    // temperature: -ln(e / (e + 1)) = 0.3133...
    let z = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let instance = instance_loss(&z, &z, &z, &z, 1.0).unwrap().item();

    let pass = (consistency + 2.0).abs() < 1e-6
        && (contrast - std::f64::consts::LN_2).abs() < 1e-6
        && (instance - 0.3133).abs() < 1e-4;
    report(
        4,
        "closed-form losses",
        pass,
        format!("consistency {consistency:.8}, contrast {contrast:.8}, instance {instance:.6}"),
    );
}

#[test]
fn criterion_5_training_progress() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let dataset = gen_data(&data_dir, 256, 4, 11);
    let config = base_config(&data_dir, 500);

    let out = dir.path().join("run");
    run_pretrain(&config, &out, false, None).unwrap();

    let records = metrics::read_all(&pixpro::trainer::metrics_path(&out)).unwrap();
    assert_eq!(records.len(), 500);
    let mean = |r: &[metrics::StepMetrics]| {
        r.iter().map(|m| m.loss_pix).sum::<f64>() / r.len() as f64
    };
    let first = mean(&records[..50]);
    let last = mean(&records[450..]);

    let trained = final_state(&out);
    let trained_corr = correspondence_eval(&trained, &dataset, 64, 3).unwrap();
    let random = init_state(&config);
    let random_corr = correspondence_eval(&random, &dataset, 64, 3).unwrap();

    let elapsed = start.elapsed();
    let pass = first - last >= 0.2
        && trained_corr.accuracy >= 2.0 * trained_corr.chance
        && trained_corr.accuracy > random_corr.accuracy
        && elapsed.as_secs() < 900;
    report(
        5,
        "training progress",
        pass,
        format!(
            "loss {first:.3} -> {last:.3}, correspondence {:.3} (chance {:.3}, random init {:.3}), {:.0}s",
            trained_corr.accuracy, trained_corr.chance, random_corr.accuracy,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_collapse_without_propagation() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let dataset = gen_data(&data_dir, 256, 4, 11);

    // The stripped variant (no propagation, no transform) must collapse
    // within the step budget; probe it in chunks so the run can stop at
    // the first collapsed snapshot.
    let bare = TrainRunConfig {
        ppm_mode: "bare".to_string(),
        ..base_config(&data_dir, 2000)
    };
    let bare_out = dir.path().join("bare");
    let mut bare_collapse = (false, 0u64, f64::NAN);
    for limit in (250u64..=2000).step_by(250) {
        run_pretrain(&bare, &bare_out, true, Some(limit)).unwrap();
        let state = final_state(&bare_out);
        let diag = collapse_diagnostic(&state, &dataset, COLLAPSE_STD_THRESHOLD).unwrap();
        if diag.collapsed {
            bare_collapse = (true, state.step, diag.mean_std);
            break;
        }
        bare_collapse = (false, state.step, diag.mean_std);
    }

    let mut healthy = Vec::new();
    for (name, config) in [
        ("default", base_config(&data_dir, 2000)),
        (
            "identity transform",
            TrainRunConfig { ppm_layers: 0, ..base_config(&data_dir, 2000) },
        ),
    ] {
        let out = dir.path().join(name.replace(' ', "_"));
        run_pretrain(&config, &out, false, None).unwrap();
        let diag =
            collapse_diagnostic(&final_state(&out), &dataset, COLLAPSE_STD_THRESHOLD).unwrap();
        healthy.push((name, diag.collapsed, diag.mean_std));
    }

    let pass = bare_collapse.0 && healthy.iter().all(|(_, collapsed, _)| !collapsed);
    report(
        6,
        "collapse trend",
        pass,
        format!(
            "stripped variant std {:.2e} at step {} (collapsed: {}); {}",
            bare_collapse.2,
            bare_collapse.1,
            bare_collapse.0,
            healthy
                .iter()
                .map(|(n, _, s)| format!("{n} std {s:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn criterion_7_instance_branch_tradeoff() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    // Eight image-level classes keep the linear probe off its ceiling so
    // the global branch has headroom to show up.
    let dataset = gen_data(&data_dir, 256, 8, 41);

    let mut probe = [Vec::new(), Vec::new()];
    let mut corr = [Vec::new(), Vec::new()];
    for seed in 1..=3u64 {
        for (slot, variant) in [(0, Variant::PixPro), (1, Variant::PixProInstance)] {
            let config = TrainRunConfig {
                variant,
                seed,
                ..base_config(&data_dir, 500)
            };
            let out = dir.path().join(format!("{}_{seed}", variant.name().replace('+', "_")));
            run_pretrain(&config, &out, false, None).unwrap();
            let state = final_state(&out);
            probe[slot].push(linear_probe(&state, &dataset, 100).unwrap());
            corr[slot].push(correspondence_eval(&state, &dataset, 64, 99).unwrap().accuracy);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (probe_base, probe_inst) = (mean(&probe[0]), mean(&probe[1]));
    let (corr_base, corr_inst) = (mean(&corr[0]), mean(&corr[1]));
    let degradation = (corr_base - corr_inst) / corr_base;

    let pass = probe_inst > probe_base && degradation < 0.2;
    report(
        7,
        "instance branch tradeoff",
        pass,
        format!(
            "probe {probe_base:.3} -> {probe_inst:.3}, correspondence {corr_base:.3} -> {corr_inst:.3} ({:+.1}% rel)",
            -degradation * 100.0
        ),
    );
}

#[test]
fn criterion_8_reproducibility_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    gen_data(&data_dir, 64, 4, 31);
    let config = TrainRunConfig {
        batch_size: 8,
        out_res: 16,
        checkpoint_interval: 2,
        ..base_config(&data_dir, 6)
    };

    let run = |out: &Path, stop: Option<u64>| {
        run_pretrain(&config, out, true, stop).unwrap();
        std::fs::read(pixpro::trainer::metrics_path(out)).unwrap()
    };
    let a = run(&dir.path().join("a"), None);
    let b = run(&dir.path().join("b"), None);
    let identical = a == b;

    let c_dir = dir.path().join("c");
    run(&c_dir, Some(3));
    let resumed = run(&c_dir, None);
    let resume_exact = resumed == a;

    let state = final_state(&dir.path().join("a"));
    let bytes = checkpoint::serialize(&state);
    let roundtrip = checkpoint::serialize(&checkpoint::deserialize(&bytes).unwrap());
    let bitwise = bytes == roundtrip;

    let pass = identical && resume_exact && bitwise;
    report(
        8,
        "reproducibility",
        pass,
        format!(
            "metrics identical: {identical}, resume exact: {resume_exact}, checkpoint bitwise: {bitwise}"
        ),
    );
}

#[test]
fn criterion_9_schedule_endpoints() {
    let endpoints = momentum_schedule(0, 1000, 0.99) == 0.99
        && momentum_schedule(1000, 1000, 0.99) == 1.0;
    let scaling = [32usize, 64, 128]
        .iter()
        .all(|b| effective_base_lr(1.0, *b) == *b as f64 / 256.0);
    let pass = endpoints && scaling;
    report(
        9,
        "schedule endpoints",
        pass,
        format!("momentum endpoints exact: {endpoints}, lr scaling exact: {scaling}"),
    );
}
