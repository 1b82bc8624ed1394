//! Runs a shipped TOML experiment through the command layer and prints the
//! checks it reports.

use std::path::PathBuf;

fn main() -> mvlasov::error::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "heat".into());
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(format!("{name}.toml"));
    let out = std::env::temp_dir().join(format!("mvlasov-{name}"));
    let outcome = mvlasov::cli::run_config("validate", &config, &out)?;
    for check in outcome.summary["checks"].as_array().into_iter().flatten() {
        println!(
            "{} {} = {:.3e} (threshold {:.1e})",
            if check["pass"] == true {
                "ok  "
            } else {
                "FAIL"
            },
            check["name"].as_str().unwrap_or(""),
            check["value"].as_f64().unwrap_or(f64::NAN),
            check["threshold"].as_f64().unwrap_or(f64::NAN)
        );
    }
    println!("summary written to {}", out.join("summary.json").display());
    Ok(())
}
