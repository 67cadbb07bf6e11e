//! Regenerates `config.reference` and `configs/acceptance.toml` at the
//! repository root.

use std::path::PathBuf;

fn main() -> ccop::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let reference = root.join("config.reference");
    std::fs::write(&reference, ccop::config::reference()).map_err(|e| ccop::Error::io(&reference, e))?;
    let dir = root.join("configs");
    std::fs::create_dir_all(&dir).map_err(|e| ccop::Error::io(&dir, e))?;
    ccop::config::Config::acceptance().save(dir.join("acceptance.toml"))?;
    println!("wrote {} and {}", reference.display(), dir.join("acceptance.toml").display());
    Ok(())
}
