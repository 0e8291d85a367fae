//! Library walkthrough: sample a smoke volume into particles, build the
//! multi-scale density pyramid, stylize one frame against a stripe
//! pattern, and render before/after images.
//!
//! Run with `cargo run --release -p flowstyle --example smoke_demo`;
//! outputs land in `demo_out/`.

use flowstyle::adam::AdamParams;
use flowstyle::bank::FilterBank;
use flowstyle::fixtures;
use flowstyle::io;
use flowstyle::particles::CH_MASS;
use flowstyle::render::{render_smoke, Axis, RenderConfig, RenderMode, ViewConfig};
use flowstyle::resim::{
    multiscale_density, redistribute_positions, rest_density_grid, sample_particles,
    MultiScaleParams,
};
use flowstyle::style::StyleTarget;
use flowstyle::stylize::{
    stylize_frame, Attribute, AttributeSelection, StylizeConfig, DENSITY_CHANNEL,
};

fn main() -> flowstyle::Result<()> {
    std::fs::create_dir_all("demo_out")?;
    let volume = fixtures::plume_volume();

    // Grid simulation -> sparse particles with multi-scale densities.
    let sampled = sample_particles(&volume, 0.05)?;
    let rest = rest_density_grid(
        sampled.positions(),
        3,
        sampled.channel(CH_MASS)?,
        2.0,
        &volume.spec,
    )?;
    let (positions, _) = redistribute_positions(&sampled, &rest, 2.0, 10, 1e-4)?;
    let mut particles = sampled;
    particles.set_positions(positions)?;
    let pyramid = multiscale_density(&particles, &volume, &MultiScaleParams::default())?;
    println!(
        "sampled {} particles, reconstruction PSNR {:.2} dB",
        pyramid.particles.len(),
        flowstyle::resim::psnr(&pyramid.reconstruction, &volume)?
    );

    // Stylize the level-0 densities toward a stripe pattern.
    let bank = FilterBank::default_bank(io::DEFAULT_BANK_SEED);
    let style = fixtures::stripe_image(16, 16);
    let target = StyleTarget::from_image(&style, &bank, "stripes")?;
    let config = StylizeConfig {
        views: vec![ViewConfig { axis: Axis::ZPos }],
        attributes: vec![AttributeSelection { attribute: Attribute::Density, weight: 1.0 }],
        render: RenderConfig { mode: RenderMode::Smoke, gamma: 1.0, emission: 0.5 },
        splat_support: 2.0,
        reg_density_weight: 0.1,
        reg_position_weight: 0.0,
        iterations: 200,
        adam: AdamParams::default(),
    };
    let result = stylize_frame(&pyramid.particles, &volume.spec, &bank, &target, &config, None)?;
    println!(
        "style loss {:.4e} -> {:.4e}",
        result.trace.first().unwrap().style,
        result.trace.last().unwrap().style
    );

    // Render the original and stylized level-0 splats.
    let view = ViewConfig { axis: Axis::ZPos };
    let before = flowstyle::transfer::p2g(
        pyramid.particles.positions(),
        3,
        pyramid.particles.channel(DENSITY_CHANNEL)?,
        config.splat_support,
        &volume.spec,
    )?;
    let stylized: Vec<f64> = pyramid
        .particles
        .channel(DENSITY_CHANNEL)?
        .iter()
        .zip(result.deltas.density.as_ref().unwrap())
        .map(|(v, d)| v + d)
        .collect();
    let after = flowstyle::transfer::p2g(
        pyramid.particles.positions(),
        3,
        &stylized,
        config.splat_support,
        &volume.spec,
    )?;
    io::save_image("demo_out/before.png", &render_smoke(&before, view, &config.render)?)?;
    io::save_image("demo_out/after.png", &render_smoke(&after, view, &config.render)?)?;
    io::save_image("demo_out/style.png", &style)?;
    println!("wrote demo_out/before.png, demo_out/after.png, demo_out/style.png");
    Ok(())
}
