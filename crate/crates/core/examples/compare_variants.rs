//! Mean average accuracy of each variant on the reference synthetic stream.
//!
//! `cargo run --release --example compare_variants -- [seeds] [key=value ...]`

use std::time::Instant;

use edgehml::data::{synth_stream, SynthSpec};
use edgehml::{run_stream, Hyperparams, Variant};

fn main() -> edgehml::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(5, |s| s.parse().expect("seed count"));
    let mut h = Hyperparams::default();
    let mut spec = SynthSpec::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        if Hyperparams::has_key(k) {
            h.apply_override(k, v)?;
        } else {
            spec.apply_override(k, v)?;
        }
    }
    let dir = std::env::temp_dir().join(format!("edgehml-compare-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    for variant in Variant::ALL {
        let start = Instant::now();
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let stream = synth_stream(&SynthSpec { seed, ..spec.clone() })?;
            let h = Hyperparams { seed, ..h.clone() };
            let r = run_stream(&stream, &h, variant, &dir.join(format!("{variant}-{seed}.pool")))?;
            accs.push(r.average_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{variant:>15}: mean {mean:.4} {accs:.3?} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
