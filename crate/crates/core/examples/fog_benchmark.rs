//! Renders a handful of scenes, fogs them, and writes a small benchmark.
//!
//! `cargo run --release --example fog_benchmark -- /tmp/fog`

use datr::synthetic::{apply_domain_shift, build_benchmark, generate_scene, FogPreset, SceneSpec};

fn main() -> datr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fog_benchmark".into());
    let spec = SceneSpec::default();
    for preset in [FogPreset::None, FogPreset::Light, FogPreset::Heavy] {
        let mut change = 0.0;
        for seed in 0..20 {
            let clean = generate_scene(seed, &spec)?;
            let fogged = apply_domain_shift(&clean, &preset.params(), seed)?;
            assert_eq!(clean.boxes, fogged.boxes);
            change += clean
                .pixels
                .data
                .iter()
                .zip(&fogged.pixels.data)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / clean.pixels.data.len() as f64;
        }
        println!("{preset:?}: mean absolute pixel change {:.4}", change / 20.0);
    }

    let bench = build_benchmark(&spec, &FogPreset::Heavy.params(), 16, 8, 0, out.as_ref())?;
    let objects: usize = bench.source_train.entries.iter().map(|e| e.annotations.len()).sum();
    println!(
        "wrote {} source and {} target training images ({objects} objects per domain) under {out}",
        bench.source_train.len(),
        bench.target_train.len()
    );
    let first = bench.target_train.load_entry(0)?;
    first.pixels.to_rgb8().save(format!("{out}/first_target.png")).expect("png written");
    Ok(())
}
