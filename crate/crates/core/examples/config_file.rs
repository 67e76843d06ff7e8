//! The `key = value` configuration surface shared by files and flags.

use vnoip::config::{RunConfig, KEYS};

fn main() -> vnoip::Result<()> {
    let dir = std::env::temp_dir().join("vnoip-config-example");
    std::fs::create_dir_all(&dir)?;
    let file = dir.join("run.conf");
    std::fs::write(&file, "# a smaller model\nhidden = 16\nlatent = 8\nlr = 0.001\n")?;

    // flags are applied after the file and win
    let flags: Vec<String> = ["--lr", "0.002", "--max_epochs=50"].iter().map(|s| s.to_string()).collect();
    let cfg = RunConfig::load(Some(&file), &flags)?;
    println!(
        "hidden {}, latent {}, lr {}, max_epochs {}",
        cfg.model.hidden, cfg.model.latent, cfg.train.lr, cfg.train.max_epochs
    );

    println!("\n{} keys; the resolved configuration:", KEYS.len());
    print!("{}", cfg.to_text());

    match RunConfig::load(None, &["--hidden".to_string(), "wide".to_string()]) {
        Err(e) => println!("\nrejected: {e} (exit code {})", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
