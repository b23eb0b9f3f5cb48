//! Training loop, holdout evaluation, and model checkpoint glue.

use std::fs;
use std::path::{Path, PathBuf};

use pgdudst_core::data::{augment, generate_toy_dataset};
use pgdudst_core::dst::DSTConfig;
use pgdudst_core::metrics::{charbonnier, psnr, ssim_cube};
use pgdudst_core::optim::{lr_schedule, Adam};
use pgdudst_core::physics::{shot_noise, CodedMask, DispersionSpec, SensingOperator, SpectralCube};
use pgdudst_core::rng::CounterRng;
use pgdudst_core::tensor::{Ctx, Tensor};
use pgdudst_core::unfold::{InitScheme, UnfoldingModel};

use crate::config::ExperimentConfig;
use crate::formats::{write_checkpoint, Record};
use crate::{AppError, AppResult};

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// TV-baseline settings used by `reconstruct --method pgd-tv`: a safe step
/// for the operator at hand and enough iterations to converge. The objective
/// slack is wider than the solver default because the prox is evaluated
/// inexactly (finite dual ascent) and long runs accumulate ~1e-6 blips.
pub fn tv_config(
    op: &SensingOperator,
    bands: usize,
) -> AppResult<pgdudst_core::baseline::TVSolverConfig> {
    Ok(pgdudst_core::baseline::TVSolverConfig {
        iterations: 3000,
        step: pgdudst_core::baseline::safe_tv_step(op, bands)?,
        lambda: 1e-3,
        tolerance: 1e-5,
        inner_iterations: 20,
    })
}

// Independent deterministic draw streams, keyed on the experiment seed.
const STREAM_MASK: u64 = 0x4D41534B;
const STREAM_SCENE: u64 = 0x5343454E;
const STREAM_CROP: u64 = 0x43524F50;
const STREAM_AUG: u64 = 0x414C4754;
const STREAM_NOISE: u64 = 0x4E4F4953;

/// One line of the training log CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Global steps completed when the row was written.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
    pub holdout_psnr: f64,
    pub holdout_ssim: f64,
}

pub struct TrainOutcome {
    pub model: UnfoldingModel,
    pub rows: Vec<EpochRow>,
    /// Per-step losses, for reproducibility checks.
    pub step_losses: Vec<f64>,
    pub best_psnr: f64,
}

pub fn log_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,step,loss,lr,holdout_psnr,holdout_ssim\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.loss, r.lr, r.holdout_psnr, r.holdout_ssim
        ));
    }
    s
}

fn crop_cube(cube: &SpectralCube, top: usize, left: usize, size: usize) -> SpectralCube {
    let mut out = SpectralCube::zeros(size, size, cube.bands);
    out.wavelengths = cube.wavelengths.clone();
    for b in 0..cube.bands {
        for h in 0..size {
            for w in 0..size {
                out.set(h, w, b, cube.at(top + h, left + w, b));
            }
        }
    }
    out
}

fn load_scene_dir(dir: &str, cfg: &ExperimentConfig) -> AppResult<Vec<SpectralCube>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AppError::Data(format!("{dir}: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hsc"))
        .collect();
    paths.sort();
    let needed = cfg.train_scenes + cfg.holdout_scenes;
    if paths.len() < needed {
        return Err(AppError::Data(format!(
            "{dir}: found {} .hsc scenes, need {needed}",
            paths.len()
        )));
    }
    paths.truncate(needed);
    let mut scenes = Vec::with_capacity(needed);
    for p in paths {
        let cube = crate::formats::read_cube(&p)?;
        if cube.bands != cfg.bands
            || cube.height < cfg.patch_size
            || cube.width < cfg.patch_size
        {
            return Err(AppError::Data(format!(
                "{}: scene is {}x{}x{}, config wants >= {}x{} patches of {} bands",
                p.display(),
                cube.height,
                cube.width,
                cube.bands,
                cfg.patch_size,
                cfg.patch_size,
                cfg.bands
            )));
        }
        scenes.push(cube);
    }
    Ok(scenes)
}

fn load_dataset(cfg: &ExperimentConfig) -> AppResult<(Vec<SpectralCube>, Vec<SpectralCube>)> {
    if cfg.data_dir.is_empty() {
        let ds = generate_toy_dataset(
            cfg.seed,
            cfg.train_scenes,
            cfg.holdout_scenes,
            cfg.scene_height,
            cfg.scene_width,
            cfg.bands,
        )?;
        Ok((ds.train, ds.holdout))
    } else {
        let mut scenes = load_scene_dir(&cfg.data_dir, cfg)?;
        let holdout = scenes.split_off(cfg.train_scenes);
        Ok((scenes, holdout))
    }
}

/// The coded mask the experiment trains and evaluates against.
pub fn experiment_mask(cfg: &ExperimentConfig) -> CodedMask {
    let mut rng = CounterRng::new(cfg.seed, STREAM_MASK);
    CodedMask::random_binary(cfg.patch_size, cfg.patch_size, &mut rng)
}

/// Mean holdout PSNR/SSIM of noiseless reconstructions through `recon`.
/// Scenes larger than the mask are cropped at the top-left corner.
pub fn holdout_metrics(
    scenes: &[SpectralCube],
    mask: &CodedMask,
    d: usize,
    mut recon: impl FnMut(&pgdudst_core::physics::Measurement, &SensingOperator) -> AppResult<SpectralCube>,
) -> AppResult<(f64, f64)> {
    let op = SensingOperator::new(mask.clone(), DispersionSpec { step: d });
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for scene in scenes {
        let patch = crop_cube(scene, 0, 0, mask.height);
        let y = op.forward(&patch)?;
        let rec = recon(&y, &op)?;
        psnr_sum += psnr(&patch, &rec, 1.0)?;
        ssim_sum += ssim_cube(&patch, &rec, 1.0)?;
    }
    let n = scenes.len().max(1) as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

pub fn train(cfg: &ExperimentConfig, quiet: bool) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let (train_scenes, holdout_scenes) = load_dataset(cfg)?;
    let mask = experiment_mask(cfg);
    let dst_cfg = cfg.dst_config();
    let mut model = UnfoldingModel::new(cfg.stages, &dst_cfg, InitScheme::Training(cfg.seed))?;
    let mut adam = Adam::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    let mut scene_rng = CounterRng::new(cfg.seed, STREAM_SCENE);
    let mut crop_rng = CounterRng::new(cfg.seed, STREAM_CROP);
    let mut aug_rng = CounterRng::new(cfg.seed, STREAM_AUG);
    let mut noise_rng = CounterRng::new(cfg.seed, STREAM_NOISE);

    let total_steps = cfg.total_steps();
    let warmup_steps = cfg.warmup_steps();
    let p = cfg.patch_size;
    let bands = cfg.bands;

    if !cfg.checkpoint_dir.is_empty() {
        fs::create_dir_all(&cfg.checkpoint_dir)
            .map_err(|e| AppError::Data(format!("{}: {e}", cfg.checkpoint_dir)))?;
    }

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut best_psnr = f64::NEG_INFINITY;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let scene = &train_scenes[scene_rng.below(cfg.train_scenes as u64) as usize];
            let top = crop_rng.below((scene.height - p + 1) as u64) as usize;
            let left = crop_rng.below((scene.width - p + 1) as u64) as usize;
            let patch = crop_cube(scene, top, left, p);
            let (patch, mask_t) = if cfg.augment {
                let (c, m, _) = augment(&patch, &mask, &mut aug_rng)?;
                (c, m)
            } else {
                (patch, mask.clone())
            };
            let op = SensingOperator::new(mask_t, DispersionSpec { step: cfg.dispersion_step });
            let mut y = op.forward(&patch)?;
            if cfg.noise {
                y = shot_noise(&y, cfg.noise_bits, &mut noise_rng)?;
            }

            let lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr_max);
            let target = Tensor::constant(patch.data().to_vec(), &[1, bands, p, p]);
            let (loss_val, grads) = {
                let ctx = Ctx::new(&model.params);
                let pred = model.forward(&ctx, &y, &op)?;
                let loss = charbonnier(&pred, &target, CHARBONNIER_EPS)?;
                let lv = loss.item();
                if !lv.is_finite() {
                    return Err(AppError::Numerical(format!(
                        "loss became {lv} at step {step}\n--- config dump ---\n{}",
                        cfg.serialize()
                    )));
                }
                let g = loss.backward()?;
                (lv, ctx.collect_grads(&g))
            };
            adam.step(&mut model.params, &grads, lr);
            epoch_loss += loss_val;
            step_losses.push(loss_val);
            last_lr = lr;
            step += 1;
        }

        let (hp, hs) = holdout_metrics(&holdout_scenes, &mask, cfg.dispersion_step, |y, op| {
            model.reconstruct(y, op).map_err(AppError::from)
        })?;
        rows.push(EpochRow {
            epoch,
            step,
            loss: epoch_loss / cfg.steps_per_epoch as f64,
            lr: last_lr,
            holdout_psnr: hp,
            holdout_ssim: hs,
        });
        if !quiet {
            eprintln!(
                "epoch {epoch}: loss {:.6} lr {:.3e} holdout psnr {hp:.2} dB ssim {hs:.4}",
                epoch_loss / cfg.steps_per_epoch as f64,
                last_lr
            );
        }
        if !cfg.log_path.is_empty() {
            fs::write(&cfg.log_path, log_csv(&rows))
                .map_err(|e| AppError::Data(format!("{}: {e}", cfg.log_path)))?;
        }
        if hp > best_psnr {
            best_psnr = hp;
            if !cfg.checkpoint_dir.is_empty() {
                save_model(&Path::new(&cfg.checkpoint_dir).join("best.pgdw"), &model)?;
            }
        }
    }
    if !cfg.checkpoint_dir.is_empty() {
        save_model(&Path::new(&cfg.checkpoint_dir).join("last.pgdw"), &model)?;
    }
    Ok(TrainOutcome { model, rows, step_losses, best_psnr })
}

/// Serialize the model as checkpoint records. Architecture rides along in
/// `meta.*` records so a checkpoint alone reconstructs the model.
pub fn model_records(model: &UnfoldingModel) -> Vec<Record> {
    let c = &model.config;
    let meta = |name: &str, values: Vec<f64>| Record {
        name: format!("meta.{name}"),
        shape: vec![values.len()],
        values,
    };
    let mut records = vec![
        meta("stages", vec![model.stages.len() as f64]),
        meta("bands", vec![c.bands as f64]),
        meta("base_channels", vec![c.base_channels as f64]),
        meta("blocks_per_level", c.blocks_per_level.iter().map(|&v| v as f64).collect()),
        meta("heads_per_level", c.heads_per_level.iter().map(|&v| v as f64).collect()),
        meta("gdfn_expansion", vec![c.gdfn_expansion]),
        meta("global_residual", vec![c.global_residual as u8 as f64]),
    ];
    for p in model.params.iter() {
        records.push(Record {
            name: p.name.clone(),
            shape: p.shape.clone(),
            values: p.value.clone(),
        });
    }
    records
}

pub fn save_model(path: &Path, model: &UnfoldingModel) -> AppResult<()> {
    write_checkpoint(path, &model_records(model))
}

fn meta_usize(records: &[Record], name: &str, path: &Path) -> AppResult<usize> {
    let v = meta_values(records, name, path)?;
    if v.len() != 1 || v[0].fract() != 0.0 || v[0] < 0.0 {
        return Err(AppError::Data(format!(
            "{}: meta.{name} must be a single non-negative integer",
            path.display()
        )));
    }
    Ok(v[0] as usize)
}

fn meta_values(records: &[Record], name: &str, path: &Path) -> AppResult<Vec<f64>> {
    records
        .iter()
        .find(|r| r.name == format!("meta.{name}"))
        .map(|r| r.values.clone())
        .ok_or_else(|| {
            AppError::Data(format!("{}: checkpoint is missing meta.{name}", path.display()))
        })
    }

fn meta_triple(records: &[Record], name: &str, path: &Path) -> AppResult<[usize; 3]> {
    let v = meta_values(records, name, path)?;
    if v.len() != 3 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(AppError::Data(format!(
            "{}: meta.{name} must hold three non-negative integers",
            path.display()
        )));
    }
    Ok([v[0] as usize, v[1] as usize, v[2] as usize])
}

pub fn load_model(path: &Path) -> AppResult<UnfoldingModel> {
    let records = crate::formats::read_checkpoint(path)?;
    let config = DSTConfig {
        bands: meta_usize(&records, "bands", path)?,
        base_channels: meta_usize(&records, "base_channels", path)?,
        blocks_per_level: meta_triple(&records, "blocks_per_level", path)?,
        heads_per_level: meta_triple(&records, "heads_per_level", path)?,
        gdfn_expansion: meta_values(&records, "gdfn_expansion", path)?
            .first()
            .copied()
            .ok_or_else(|| AppError::Data(format!("{}: empty meta.gdfn_expansion", path.display())))?,
        global_residual: meta_usize(&records, "global_residual", path)? != 0,
    };
    let stages = meta_usize(&records, "stages", path)?;
    let mut model = UnfoldingModel::new(stages, &config, InitScheme::Zeros)?;
    let mut used = vec![false; records.len()];
    for param in model.params.iter_mut() {
        let idx = records
            .iter()
            .position(|r| r.name == param.name)
            .ok_or_else(|| {
                AppError::Data(format!(
                    "{}: checkpoint is missing parameter {:?}",
                    path.display(),
                    param.name
                ))
            })?;
        let rec = &records[idx];
        if rec.shape != param.shape {
            return Err(AppError::Data(format!(
                "{}: parameter {:?} has shape {:?}, model expects {:?}",
                path.display(),
                param.name,
                rec.shape,
                param.shape
            )));
        }
        param.value = rec.values.clone();
        used[idx] = true;
    }
    for (rec, used) in records.iter().zip(&used) {
        if !used && !rec.name.starts_with("meta.") {
            return Err(AppError::Data(format!(
                "{}: unexpected record {:?} for this architecture",
                path.display(),
                rec.name
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy();
        cfg.epochs = 2;
        cfg.steps_per_epoch = 2;
        cfg.warmup_epochs = 1;
        cfg.patch_size = 12;
        cfg.scene_height = 12;
        cfg.scene_width = 12;
        cfg.bands = 4;
        cfg.base_channels = 4;
        cfg.train_scenes = 2;
        cfg.holdout_scenes = 1;
        cfg
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut cfg = tiny_cfg();
        cfg.lr_max = 0.0;
        // One scene, full-size patch, no augmentation: every step sees the
        // same sample, so a frozen model must yield a constant loss.
        cfg.train_scenes = 1;
        cfg.augment = false;
        let before = UnfoldingModel::new(cfg.stages, &cfg.dst_config(), InitScheme::Training(cfg.seed)).unwrap();
        let out = train(&cfg, true).unwrap();
        for (a, b) in before.params.iter().zip(out.model.params.iter()) {
            assert_eq!(a.value, b.value, "{} drifted", a.name);
        }
        assert_eq!(out.step_losses[0], out.step_losses[out.step_losses.len() - 1]);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = tiny_cfg();
        let a = train(&cfg, true).unwrap();
        let b = train(&cfg, true).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.rows, b.rows);
        for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_the_model() {
        let cfg = tiny_cfg();
        let out = train(&cfg, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgdw");
        save_model(&p, &out.model).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.stages.len(), cfg.stages);
        for (a, b) in out.model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        // Restored model reconstructs identically.
        let mask = experiment_mask(&cfg);
        let ds = generate_toy_dataset(cfg.seed, 1, 0, 12, 12, 4).unwrap();
        let op = SensingOperator::new(mask, DispersionSpec { step: 1 });
        let y = op.forward(&ds.train[0]).unwrap();
        let r1 = out.model.reconstruct(&y, &op).unwrap();
        let r2 = back.reconstruct(&y, &op).unwrap();
        assert_eq!(r1.data(), r2.data());
    }

    #[test]
    fn csv_has_the_contracted_header() {
        let rows = vec![EpochRow { epoch: 0, step: 2, loss: 0.5, lr: 1e-3, holdout_psnr: 20.0, holdout_ssim: 0.9 }];
        let csv = log_csv(&rows);
        assert!(csv.starts_with("epoch,step,loss,lr,holdout_psnr,holdout_ssim\n"));
        assert!(csv.contains("0,2,0.5,0.001,20,0.9\n"));
    }
}
