use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pgdudst::config::ExperimentConfig;
use pgdudst::formats;
use pgdudst::harness;
use pgdudst::{AppError, AppResult};
use pgdudst_core::baseline::pgd_tv_reconstruct;
use pgdudst_core::gradcheck::{run_suite, standard_suite};
use pgdudst_core::metrics::{psnr, spectral_correlation, ssim_cube};
use pgdudst_core::physics::{shot_noise, DispersionSpec, SensingOperator};
use pgdudst_core::rng::CounterRng;

/// Compressive spectral imaging: simulation, unfolded reconstruction, and
/// training of the reconstructor.
#[derive(Parser)]
#[command(name = "pgdudst", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a dispersed snapshot measurement from a cube and a mask.
    Simulate {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Dispersion shift in pixels per band.
        #[arg(long, default_value_t = 1)]
        d: usize,
        /// Apply Poisson shot noise at this bit depth (e.g. 11).
        #[arg(long)]
        noise_bits: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unfolded reconstructor from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct a cube from a measurement, via a trained checkpoint or a
    /// classical baseline.
    Reconstruct {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Classical solver to use instead of a checkpoint ("pgd-tv").
        #[arg(long)]
        method: Option<String>,
        /// Dispersion shift in pixels per band.
        #[arg(long, default_value_t = 1)]
        d: usize,
        /// Band count; inferred from the widths and --d when omitted.
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reconstruction against a reference cube.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Also run the full-model checks on every seed.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write each band of a cube as a 16-bit PGM image.
    ExportBands {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code: u8 = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("pgdudst: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> AppResult<ExitCode> {
    match cmd {
        Cmd::Simulate { cube, mask, d, noise_bits, seed, out } => {
            let cube = formats::read_cube(&cube)?;
            let mask = formats::read_mask(&mask)?;
            let op = SensingOperator::new(mask, DispersionSpec { step: d });
            let mut y = op.forward(&cube)?;
            if let Some(bits) = noise_bits {
                let mut rng = CounterRng::new(seed, 0x53494D);
                y = shot_noise(&y, bits, &mut rng)?;
            }
            formats::write_measurement(&out, &y)?;
            println!(
                "wrote {} ({}x{} measurement, {} bands dispersed by {d})",
                out.display(),
                y.height,
                y.width,
                cube.bands
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = harness::train(&cfg, false)?;
            let last = out.rows.last().expect("at least one epoch");
            println!(
                "trained {} steps; final holdout psnr {:.2} dB ssim {:.4} (best {:.2} dB)",
                out.step_losses.len(),
                last.holdout_psnr,
                last.holdout_ssim,
                out.best_psnr
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Reconstruct { measurement, mask, checkpoint, method, d, bands, out } => {
            if checkpoint.is_some() == method.is_some() {
                return Err(AppError::Usage(
                    "pass exactly one of --checkpoint or --method".into(),
                ));
            }
            let y = formats::read_measurement(&measurement)?;
            let mask = formats::read_mask(&mask)?;
            let bands = infer_bands(&y, &mask, d, bands)?;
            let op = SensingOperator::new(mask, DispersionSpec { step: d });
            let cube = match (checkpoint, method.as_deref()) {
                (Some(ckpt), None) => {
                    let model = harness::load_model(&ckpt)?;
                    if model.config.bands != bands {
                        return Err(AppError::Data(format!(
                            "{}: checkpoint expects {} bands, measurement implies {bands}",
                            ckpt.display(),
                            model.config.bands
                        )));
                    }
                    model.reconstruct(&y, &op)?
                }
                (None, Some("pgd-tv")) => {
                    let cfg = harness::tv_config(&op, bands)?;
                    pgd_tv_reconstruct(&y, &op, bands, &cfg)?
                }
                (None, Some(other)) => {
                    return Err(AppError::Usage(format!(
                        "unknown --method {other:?} (supported: pgd-tv)"
                    )))
                }
                _ => unreachable!("mode exclusivity checked above"),
            };
            formats::write_cube(&out, &cube)?;
            println!("wrote {} ({}x{}x{})", out.display(), cube.height, cube.width, cube.bands);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { reference, test, report } => {
            let r = formats::read_cube(&reference)?;
            let t = formats::read_cube(&test)?;
            let p = psnr(&r, &t, 1.0)?;
            let s = ssim_cube(&r, &t, 1.0)?;
            let region: Vec<(usize, usize)> =
                (0..r.height).flat_map(|h| (0..r.width).map(move |w| (h, w))).collect();
            let c = spectral_correlation(&r, &t, &region)?;
            let csv = format!("scene,psnr_db,ssim,spectral_corr\n{},{p},{s},{c}\n",
                test.file_stem().and_then(|s| s.to_str()).unwrap_or("scene"));
            std::fs::write(&report, &csv)
                .map_err(|e| AppError::Data(format!("{}: {e}", report.display())))?;
            println!("psnr {p} dB, ssim {s}, spectral correlation {c}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { full, seeds } => {
            let reports = run_suite(standard_suite(seeds, full), 0)?;
            let mut ok = true;
            for r in &reports {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{verdict}  {:<28} max rel err {:>10.3e}  (tol {:.0e}, {} coords)",
                    r.name, r.max_rel_err, r.tolerance, r.coords_checked
                );
                ok &= r.passed();
            }
            if ok {
                println!("all {} checks passed", reports.len());
                Ok(ExitCode::SUCCESS)
            } else {
                Err(AppError::Numerical("gradient check failures above".into()))
            }
        }
        Cmd::ExportBands { cube, out_dir } => {
            let c = formats::read_cube(&cube)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| AppError::Data(format!("{}: {e}", out_dir.display())))?;
            let digits = if c.bands > 100 { 3 } else { 2 };
            let plane = c.height * c.width;
            for b in 0..c.bands {
                let name = format!("band_{b:0digits$}_{}nm.pgm", c.wavelengths[b].round());
                let slice = &c.data()[b * plane..(b + 1) * plane];
                formats::write_pgm16(&out_dir.join(&name), slice, c.height, c.width)?;
            }
            println!("wrote {} bands to {}", c.bands, out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn infer_bands(
    y: &pgdudst_core::physics::Measurement,
    mask: &pgdudst_core::physics::CodedMask,
    d: usize,
    explicit: Option<usize>,
) -> AppResult<usize> {
    if let Some(b) = explicit {
        return Ok(b);
    }
    if y.height != mask.height || y.width < mask.width {
        return Err(AppError::Data(format!(
            "measurement {}x{} is incompatible with mask {}x{}",
            y.height, y.width, mask.height, mask.width
        )));
    }
    if d == 0 {
        return Err(AppError::Usage(
            "--bands is required when --d 0 (width does not determine it)".into(),
        ));
    }
    let extra = y.width - mask.width;
    if extra % d != 0 {
        return Err(AppError::Data(format!(
            "width surplus {extra} is not a multiple of the dispersion step {d}"
        )));
    }
    Ok(extra / d + 1)
}
