//! Command-line driver for the flowstyle pipelines.
//!
//! Four subcommands, all driven by a JSON run configuration:
//!
//! * `resample` — grid sequence to particle sequence (sampling, transport,
//!   redistribution, multi-scale densities)
//! * `reconstruct` — particle files back to density grids, with PSNR
//!   against a reference when configured
//! * `stylize` — optimize particle attributes toward a style image,
//!   writing stylized particle files and loss trace CSVs
//! * `render` — grids or particles to PNG frames
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
//! 1 any other failure.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowstyle::bank::FilterBank;
use flowstyle::error::Error;
use flowstyle::io::{
    self, expand_pattern, RunConfig, DEFAULT_BANK_SEED,
};
use flowstyle::particles::ParticleSet;
use flowstyle::render::{render_color, render_liquid, render_smoke, RenderMode};
use flowstyle::resim;
use flowstyle::style::StyleTarget;
use flowstyle::stylize::{self, AttributeDeltas, DENSITY_CHANNEL};
use flowstyle::ScalarGrid;

#[derive(Parser)]
#[command(name = "flowstyle", version, about = "Particle-based fluid stylization pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a grid simulation into a particle sequence
    Resample(CommonArgs),
    /// Rebuild density grids from particle files (reports PSNR vs reference)
    Reconstruct(CommonArgs),
    /// Optimize particle attributes toward the configured style image
    Stylize(StylizeArgs),
    /// Render grids or particles to PNG frames
    Render(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Directory for output files (created if absent)
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    /// Frame range `a..b`, end exclusive
    #[arg(long, default_value = "0..1")]
    frames: String,
    /// Seed for procedurally generated data (overrides `bank_seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StylizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the configured iteration count
    #[arg(long)]
    iterations: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Resample(args) => run_resample(args),
        Command::Reconstruct(args) => run_reconstruct(args),
        Command::Stylize(args) => run_stylize(args),
        Command::Render(args) => run_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn parse_frames(s: &str) -> Result<Range<usize>, Error> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("--frames expects a..b, got {s:?}")))?;
    let start: usize =
        a.parse().map_err(|_| Error::Config(format!("bad frame range start {a:?}")))?;
    let end: usize =
        b.parse().map_err(|_| Error::Config(format!("bad frame range end {b:?}")))?;
    if end <= start {
        return Err(Error::Config(format!("empty frame range {s:?}")));
    }
    Ok(start..end)
}

fn load_setup(args: &CommonArgs) -> Result<(RunConfig, Range<usize>), Error> {
    let config = RunConfig::from_path(&args.config)?;
    let frames = parse_frames(&args.frames)?;
    std::fs::create_dir_all(&args.output_dir)?;
    Ok((config, frames))
}

fn pattern<'a>(pattern: &'a Option<String>, which: &str) -> Result<&'a str, Error> {
    pattern
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing \"inputs.{which}\" pattern")))
}

fn load_bank(config: &RunConfig, seed: Option<u64>) -> Result<FilterBank, Error> {
    match (&config.bank, seed) {
        (Some(path), _) => io::read_bank(path),
        (None, Some(seed)) => Ok(FilterBank::default_bank(seed)),
        (None, None) => {
            Ok(FilterBank::default_bank(config.bank_seed.unwrap_or(DEFAULT_BANK_SEED)))
        }
    }
}

fn out_path(dir: &Path, name: String) -> PathBuf {
    dir.join(name)
}

// ---------------------------------------------------------------------------
// resample
// ---------------------------------------------------------------------------

fn run_resample(args: &CommonArgs) -> Result<(), Error> {
    let (config, frames) = load_setup(args)?;
    let density_pattern = pattern(&config.inputs.density, "density")?;
    let params = config.multiscale_params();
    let resample = &config.resample;

    let mut particles: Option<ParticleSet> = None;
    for frame in frames {
        let density = io::read_grid(expand_pattern(density_pattern, frame)?)?;
        params
            .validate(density.spec.spacing)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !params.well_scaled(density.spec.spacing) {
            eprintln!(
                "warning: finest splat radius is below half the grid spacing (frame {frame})"
            );
        }

        let mut set = match particles.take() {
            None => resim::sample_particles(&density, resample.threshold)?,
            Some(prev) => {
                let mut set = prev;
                if let Some(velocity_pattern) = &config.inputs.velocity {
                    let velocity =
                        io::read_vector_grid(expand_pattern(velocity_pattern, frame)?)?;
                    let moved = resim::advect_particles(&set, &velocity, resample.dt)?;
                    set.set_positions(moved)?;
                }
                set
            }
        };
        if resample.redistribute_steps > 0 {
            let rho0 = resim::rest_density_grid(
                set.positions(),
                set.dim(),
                set.channel("mass")?,
                config.splat_support,
                &density.spec,
            )?;
            let (positions, _) = resim::redistribute_positions(
                &set,
                &rho0,
                config.splat_support,
                resample.redistribute_steps,
                resample.redistribute_step_size,
            )?;
            set.set_positions(positions)?;
        }
        let result = resim::multiscale_density(&set, &density, &params)?;
        let quality = resim::psnr(&result.reconstruction, &density)?;
        io::write_particles(
            out_path(&args.output_dir, format!("particles_{frame:04}.lnsp")),
            &result.particles,
        )?;
        println!("frame {frame}: particles={} PSNR={quality:.4}", result.particles.len());
        particles = Some(result.particles);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

fn run_reconstruct(args: &CommonArgs) -> Result<(), Error> {
    let (config, frames) = load_setup(args)?;
    let particles_pattern = pattern(&config.inputs.particles, "particles")?;
    let radii = config.multiscale_params().radii();
    for frame in frames {
        let set = io::read_particles(expand_pattern(particles_pattern, frame)?)?;
        let reference = match &config.inputs.reference {
            Some(p) => Some(io::read_grid(expand_pattern(p, frame)?)?),
            None => None,
        };
        let spec = match &reference {
            Some(r) => r.spec.clone(),
            None => config.grid_spec()?,
        };
        let recon = resim::reconstruct_density(&set, &radii, &spec)?;
        io::write_grid(
            out_path(&args.output_dir, format!("reconstructed_{frame:04}.lnsg")),
            &recon,
        )?;
        match &reference {
            Some(r) => println!("frame {frame}: PSNR={:.4}", resim::psnr(&recon, r)?),
            None => println!("frame {frame}: nodes={}", recon.values.len()),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stylize
// ---------------------------------------------------------------------------

fn run_stylize(args: &StylizeArgs) -> Result<(), Error> {
    let (config, frames) = load_setup(&args.common)?;
    let particles_pattern = pattern(&config.inputs.particles, "particles")?;
    let grid_spec = config.grid_spec()?;
    let mut stylize_config = config.stylize_config()?;
    if let Some(iterations) = args.iterations {
        stylize_config.iterations = iterations;
    }
    let temporal = config.temporal_config()?;
    let bank = load_bank(&config, args.common.seed)?;
    let style_path = config
        .style_image
        .as_ref()
        .ok_or_else(|| Error::Config("missing \"style_image\"".into()))?;
    let style_image = io::load_image(style_path)?;
    let target = StyleTarget::from_image(&style_image, &bank, style_path.clone())?;

    let frame_numbers: Vec<usize> = frames.collect();
    let sets: Vec<ParticleSet> = frame_numbers
        .iter()
        .map(|&f| io::read_particles(expand_pattern(particles_pattern, f)?))
        .collect::<Result<_, _>>()?;

    let result =
        stylize::stylize_sequence(&sets, &grid_spec, &bank, &target, &stylize_config, &temporal)?;

    for (record_index, record) in result.keyframes.iter().enumerate() {
        let frame = frame_numbers[record.frame];
        io::write_trace_csv(
            out_path(&args.common.output_dir, format!("trace_{frame:04}.csv")),
            &record.trace,
        )?;
        let last = record.trace.last().expect("trace is never empty");
        println!(
            "keyframe {record_index} (frame {frame}): style={:.6e} total={:.6e}",
            last.style, last.total
        );
    }
    for (set, (&frame, deltas)) in
        sets.iter().zip(frame_numbers.iter().zip(&result.frames))
    {
        let stylized = apply_delta_channels(set, deltas)?;
        io::write_particles(
            out_path(&args.common.output_dir, format!("stylized_{frame:04}.lnsp")),
            &stylized,
        )?;
    }
    Ok(())
}

/// Record deltas as channels next to the original data: `delta` for the
/// density change, `delta_color_*` and `delta_pos_*` for the others.
fn apply_delta_channels(
    set: &ParticleSet,
    deltas: &AttributeDeltas,
) -> Result<ParticleSet, Error> {
    let mut out = set.clone();
    if let Some(d) = &deltas.density {
        out.set_channel("delta", d.clone())?;
    }
    if let Some(c) = &deltas.color {
        for (name, values) in ["delta_color_r", "delta_color_g", "delta_color_b"].iter().zip(c) {
            out.set_channel(*name, values.clone())?;
        }
    }
    if let Some(p) = &deltas.position {
        let dim = set.dim();
        for (a, name) in ["delta_pos_x", "delta_pos_y", "delta_pos_z"][..dim].iter().enumerate() {
            let axis: Vec<f64> = (0..set.len()).map(|i| p[i * dim + a]).collect();
            out.set_channel(*name, axis)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn axis_tag(name: &str) -> String {
    name.replace('+', "p").replace('-', "m")
}

/// Channel values with the stylization delta applied, when recorded.
fn applied_channel(set: &ParticleSet, base: &str, delta: &str) -> Result<Vec<f64>, Error> {
    let mut values = set.channel(base)?.to_vec();
    if set.has_channel(delta) {
        for (v, d) in values.iter_mut().zip(set.channel(delta)?) {
            *v += d;
        }
    }
    Ok(values)
}

fn run_render(args: &CommonArgs) -> Result<(), Error> {
    let (config, frames) = load_setup(args)?;
    let render_config = config.render_config()?;
    let views = config.view_configs()?;
    let radii = config.multiscale_params().radii();
    for frame in frames {
        // Either a grid file directly, or particles reconstructed to one.
        // Particle files carry stylization deltas as channels; apply them.
        let (grid, color_set): (ScalarGrid, Option<ParticleSet>) =
            if let Some(p) = &config.inputs.density {
                (io::read_grid(expand_pattern(p, frame)?)?, None)
            } else if let Some(p) = &config.inputs.particles {
                let mut set = io::read_particles(expand_pattern(p, frame)?)?;
                let spec = config.grid_spec()?;
                set.set_channel(DENSITY_CHANNEL, applied_channel(&set, DENSITY_CHANNEL, "delta")?)?;
                let grid = resim::reconstruct_density(&set, &radii, &spec)?;
                (grid, Some(set))
            } else {
                return Err(Error::Config(
                    "render needs \"inputs.density\" or \"inputs.particles\"".into(),
                ));
            };
        for view in &views {
            let image = match render_config.mode {
                RenderMode::Liquid => render_liquid(&grid, *view, &render_config)?,
                RenderMode::Smoke => render_smoke(&grid, *view, &render_config)?,
            };
            let tag = axis_tag(view.axis.name());
            io::save_image(
                out_path(&args.output_dir, format!("frame_{frame:04}_{tag}.png")),
                &image,
            )?;
            if let Some(set) = color_set.as_ref().filter(|s| s.has_channel("color_r")) {
                let mut color_grids = Vec::new();
                for (base, delta) in [
                    ("color_r", "delta_color_r"),
                    ("color_g", "delta_color_g"),
                    ("color_b", "delta_color_b"),
                ] {
                    let values = applied_channel(set, base, delta)?;
                    color_grids.push(flowstyle::transfer::p2g(
                        set.positions(),
                        set.dim(),
                        &values,
                        config.splat_support,
                        &grid.spec,
                    )?);
                }
                let image = render_color(
                    &grid,
                    [&color_grids[0], &color_grids[1], &color_grids[2]],
                    *view,
                    &render_config,
                )?;
                io::save_image(
                    out_path(&args.output_dir, format!("frame_{frame:04}_{tag}_color.png")),
                    &image,
                )?;
            }
        }
        println!("frame {frame}: rendered {} view(s)", views.len());
    }
    Ok(())
}
