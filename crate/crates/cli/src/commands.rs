use std::path::{Path, PathBuf};

use fpm_core::checkpoint::Checkpoint;
use fpm_core::data::{ingest, make_binary16, ComplexDataset, Encoder, IngestFormat, Split};
use fpm_core::infotheory::{estimate_mi, MiReportRow};
use fpm_core::trainer::{
    evaluate, restore, simulate_sensor, train, CaseSpec, CheckpointMeta, Restored, RunStatus, TrainSchedule, TrainSetup,
};
use fpm_core::{ComplexField, Error, ForwardModel, LedPattern};

use crate::args::{DatasetKind, EvalArgs, MiArgs, ReportArgs, SplitArg, SynthDataArgs, TrainArgs};
use crate::artifacts::*;
use crate::failure::{require_exists, CliResult, Failure};
use crate::render;

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    }
}

fn encoder_name(e: Encoder) -> &'static str {
    match e {
        Encoder::Mnist => "mnist",
        Encoder::Ucsb => "ucsb",
    }
}

pub fn synth_data(args: &SynthDataArgs) -> CliResult<()> {
    let (preset, config) = resolve_preset(&args.preset)?;
    let dataset = match args.dataset {
        DatasetKind::Binary16 => {
            if preset != "table3" {
                return Err(Failure::usage("binary16 objects are defined on the table3 grid only"));
            }
            if args.input.is_some() {
                return Err(Failure::usage("binary16 takes no --input"));
            }
            make_binary16()
        }
        kind => {
            let input = args
                .input
                .as_deref()
                .ok_or_else(|| Failure::usage("--input is required for mnist and image-dir"))?;
            require_exists(input, "input directory")?;
            let format = if kind == DatasetKind::Mnist {
                IngestFormat::Idx
            } else {
                IngestFormat::PngDir
            };
            ingest(input, format, preset, config)?
        }
    };
    let archive = args.out.join(DATASET_FILE);
    dataset.save(&archive)?;
    let [train, validation, test] = dataset.split_sizes();
    write_manifest(
        &args.out.join(MANIFEST_FILE),
        &DatasetManifest {
            command: "synth-data".into(),
            dataset: dataset.source.to_string(),
            encoder: encoder_name(dataset.encoder).into(),
            preset: dataset.preset.clone(),
            archive: DATASET_FILE.into(),
            objects: dataset.len(),
            train,
            validation,
            test,
            optics: dataset.config.clone(),
        },
    )?;
    eprintln!(
        "wrote {} objects ({train}/{validation}/{test}) to {}",
        dataset.len(),
        archive.display()
    );
    Ok(())
}

pub fn train_command(args: &TrainArgs) -> CliResult<()> {
    let data = load_dataset(&args.data)?;
    let objects = data.split(Split::Train);
    if objects.is_empty() {
        return Err(Failure::usage("dataset has no training objects"));
    }
    let schedule = TrainSchedule {
        iterations: args.iters,
        batch_size: args.batch_size,
        lr0: args.lr,
        dropout: !args.no_dropout,
        adversarial: !args.no_adversarial,
        snapshot_every: args.snapshot_every,
        seed: args.seed,
        ..TrainSchedule::default()
    };
    let case = CaseSpec::new(args.case)?;
    let setup = TrainSetup::standard(data.config.clone(), &data.preset, case, args.m, schedule);
    let every = args.snapshot_every.max(1);
    let run = train(&setup, objects, |r, _| {
        if r.iteration % every == 0 {
            eprintln!("iteration {}: M={:.6} G={:.6} C={:.6} J={:.6}", r.iteration, r.m, r.g, r.c, r.j);
        }
    })?;

    let out = &args.out;
    let ck_dir = out.join(CHECKPOINT_DIR);
    write_losses(&out.join(LOSSES_FILE), &run.reports)?;
    write_led_pattern(
        &out.join(LED_PATTERN_FILE),
        &led_rows(&data.config.geometry(), &run.led_snapshots),
    )?;
    run.initial_checkpoint().save(&ck_dir.join(INITIAL_CHECKPOINT))?;
    run.final_checkpoint().save(&ck_dir.join(FINAL_CHECKPOINT))?;
    let status = match &run.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { iteration, .. } => format!("diverged at iteration {iteration}"),
    };
    write_manifest(
        &out.join(MANIFEST_FILE),
        &TrainManifest {
            command: "train".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            data: args.data.clone(),
            dataset: data.source.to_string(),
            preset: data.preset.clone(),
            case: args.case,
            m: args.m,
            seed: args.seed,
            iterations_requested: args.iters,
            iterations_completed: run.state.iteration,
            batch_size: args.batch_size,
            learning_rate: args.lr,
            dropout: !args.no_dropout,
            adversarial: !args.no_adversarial,
            train_objects: objects.len(),
            parameter_count: run.state.stores.gen.parameter_count(),
            status,
            losses: LOSSES_FILE.into(),
            led_pattern: LED_PATTERN_FILE.into(),
            initial_checkpoint: format!("{CHECKPOINT_DIR}/{INITIAL_CHECKPOINT}"),
            final_checkpoint: format!("{CHECKPOINT_DIR}/{FINAL_CHECKPOINT}"),
        },
    )?;
    if let RunStatus::Diverged { iteration, message } = run.status {
        return Err(Error::Divergence {
            iteration: iteration as usize,
            message,
        }
        .into());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Restored> {
    require_exists(path, "checkpoint")?;
    Ok(restore(&Checkpoint::<CheckpointMeta>::load(path)?)?)
}

fn check_compatible(restored: &Restored, data: &ComplexDataset, path: &Path) -> CliResult<()> {
    if restored.meta.optics != data.config {
        return Err(Failure::usage(format!(
            "checkpoint {} was trained for optics {:?} ({}x{} objects), dataset uses {:?} ({}x{})",
            path.display(),
            restored.meta.optics.name,
            restored.meta.optics.highres_pixels,
            restored.meta.optics.highres_pixels,
            data.config.name,
            data.config.highres_pixels,
            data.config.highres_pixels
        )));
    }
    Ok(())
}

pub fn eval_command(args: &EvalArgs) -> CliResult<()> {
    let restored = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    check_compatible(&restored, &data, &args.checkpoint)?;
    let split = data.split(split_of(args.dataset_split));
    let objects = &split[..args.limit.unwrap_or(split.len()).min(split.len())];
    if objects.is_empty() {
        return Err(Failure::usage("the selected split holds no objects"));
    }
    let ms = match (&args.m_sweep, args.m) {
        (Some(sweep), _) => sweep.clone(),
        (None, Some(m)) => vec![m],
        (None, None) => vec![restored.meta.m],
    };
    let seed = args.seed.unwrap_or(restored.meta.schedule.seed);
    let rows = ms
        .iter()
        .map(|&m| evaluate(&restored.model, &restored.state.ema, objects, m, seed))
        .collect::<Result<Vec<_>, _>>()?;
    write_eval(args.out.as_deref(), &rows)
}

pub fn mi_command(args: &MiArgs) -> CliResult<()> {
    let data = load_dataset(&args.data)?;
    let optics = ForwardModel::new(&data.config)?;
    let mut snapshots: Vec<(String, Vec<f64>, f64)> = Vec::new();
    if let Some(file) = &args.pattern_file {
        for (it, w) in read_led_pattern(file)? {
            snapshots.push((format!("iteration-{it}"), w, args.m.unwrap_or(1.0)));
        }
    }
    for path in &args.checkpoint {
        let r = load_checkpoint(path)?;
        check_compatible(&r, &data, path)?;
        let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        snapshots.push((id, r.state.leds().to_vec(), args.m.unwrap_or(r.meta.m)));
    }
    let mut rows = Vec::with_capacity(snapshots.len());
    for (id, weights, m) in snapshots {
        if weights.len() != optics.led_count() {
            return Err(Failure::usage(format!(
                "snapshot {id} has {} LED weights, the optics have {}",
                weights.len(),
                optics.led_count()
            )));
        }
        let est = estimate_mi(&optics, data.objects(), &LedPattern::new(weights), m, args.samples, args.seed)?;
        if est.under_resolved {
            eprintln!("warning: snapshot {id}: one bin holds over 1% of every object's mass; binning may be too coarse");
        }
        eprintln!("{id}: {:.4} bits (bin width {:.3e})", est.bits, est.bin_width);
        rows.push(MiReportRow::new(id, &est));
    }
    write_mi(args.out.as_deref(), &rows)
}

fn example_path(dir: &Path, i: usize, panel: &str) -> PathBuf {
    dir.join(format!("example{i:03}_{panel}.png"))
}

pub fn report_command(args: &ReportArgs) -> CliResult<()> {
    require_exists(&args.run_dir, "run directory")?;
    let manifest: TrainManifest = read_manifest(&args.run_dir.join(MANIFEST_FILE))?;
    let ck_dir = args.run_dir.join(CHECKPOINT_DIR);
    let initial = load_checkpoint(&ck_dir.join(INITIAL_CHECKPOINT))?;
    let last = load_checkpoint(&ck_dir.join(FINAL_CHECKPOINT))?;
    let data = load_dataset(args.data.as_deref().unwrap_or(&manifest.data))?;
    check_compatible(&last, &data, &ck_dir.join(FINAL_CHECKPOINT))?;
    let split = data.split(split_of(args.split));
    let objects: &[ComplexField] = &split[..args.examples.min(split.len())];
    if objects.is_empty() {
        return Err(Failure::usage("the selected split holds no objects"));
    }

    let out = args.run_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| crate::failure::io_failure(&out, e))?;
    let geometry = data.config.geometry();
    render::save_led_heatmap(&out.join("leds_initial.png"), &geometry, initial.state.leds())?;
    render::save_led_heatmap(&out.join("leds_final.png"), &geometry, last.state.leds())?;

    let (h, w) = data.config.lowres_shape();
    let (hh, hw) = data.config.highres_shape();
    let m = manifest.m;
    let seed = manifest.seed;
    let model = &last.model;
    let sensors = |r: &Restored, noise: f64| simulate_sensor(&r.model, &r.state.ema, objects, noise, seed);
    let (clean_0, noisy_0) = (sensors(&initial, f64::INFINITY)?, sensors(&initial, m)?);
    let (clean_1, noisy_1) = (sensors(&last, f64::INFINITY)?, sensors(&last, m)?);
    let recon = model.reconstruct(&last.state.ema, &noisy_1)?;
    for (i, actual) in objects.iter().enumerate() {
        render::save_magnitude(&example_path(&out, i, "actual_amplitude"), hh, hw, &actual.amplitude())?;
        render::save_phase(&example_path(&out, i, "actual_phase"), hh, hw, &actual.phase())?;
        render::save_magnitude(&example_path(&out, i, "recon_amplitude"), hh, hw, &recon[i].amplitude())?;
        render::save_phase(&example_path(&out, i, "recon_phase"), hh, hw, &recon[i].phase())?;
        render::save_magnitude(&example_path(&out, i, "lowres_clean_initial"), h, w, &clean_0[i].data)?;
        render::save_magnitude(&example_path(&out, i, "lowres_noisy_initial"), h, w, &noisy_0[i].data)?;
        render::save_magnitude(&example_path(&out, i, "lowres_clean_final"), h, w, &clean_1[i].data)?;
        render::save_magnitude(&example_path(&out, i, "lowres_noisy_final"), h, w, &noisy_1[i].data)?;
    }
    eprintln!("wrote {} example panels and 2 LED heatmaps to {}", objects.len() * 8, out.display());
    Ok(())
}
