//! The full benchmark pipeline: certificate, identification over 3000 s,
//! excitation check, CSV files, summary and SVG figures.
//!
//! cargo run --release --example reproduce_example -- [tanh|literal] [OUT_DIR]
//!
//! `tanh` (the default) uses `ψ = tanh(y)`. `literal` uses the benchmark as
//! stated with `ψ = y²`, which escapes in finite time under the prescribed
//! input; the run then stops with a blow-up error after writing the
//! certificate.

use std::path::PathBuf;

use tdid::benchmark::{benchmark_config, benchmark_tanh_config, reproduce, summary_table};

fn main() -> tdid::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant = args.next().unwrap_or_else(|| "tanh".into());
    let cfg = match variant.as_str() {
        "tanh" => benchmark_tanh_config(),
        "literal" => benchmark_config(),
        other => {
            eprintln!("unknown variant {other:?}, expected tanh or literal");
            std::process::exit(2);
        }
    };
    let exp = cfg.build()?;
    let out = PathBuf::from(args.next().or(exp.output.dir.clone()).unwrap_or_else(|| ".".into()));

    let report = match reproduce(&exp, &out, true, None) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("certificate: {}", out.join("certificate.toml").display());
            std::process::exit(3);
        }
    };
    println!("certificate: {:?}", report.certificate.verdict);
    if let Some(pe) = &report.pe {
        println!("{}", pe.summary_line());
    }
    print!("{}", summary_table(&report.summary));
    let eps: Vec<f64> = report.run.diagnostics.iter().map(|d| d.eps_norm).collect();
    let peak = eps.iter().copied().fold(0.0, f64::max);
    println!("|ε| final / peak = {:.3e}", eps.last().copied().unwrap_or(0.0) / peak);
    println!("{} files in {} ({:.1} s)", report.files.len(), out.display(), report.elapsed.as_secs_f64());
    Ok(())
}
