use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{micronet_from_text, micronet_to_text};
use crate::io::{read_tensor, write_tensor};
use crate::{Error, Result};

use super::{MicroNetConfig, Weights};

/// Lists `name file extents` for each tensor, one per line.
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

fn extents(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes each weight tensor to `<name>.hstn` plus the manifest and the
/// network config. Values are stored as 32-bit floats.
pub fn save_checkpoint(dir: impl AsRef<Path>, weights: &Weights, config: &MicroNetConfig) -> Result<()> {
    let dir = dir.as_ref();
    Weights::zeros(config).expect_same_layout(weights)?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in weights.named() {
        let file = format!("{name}.hstn");
        write_tensor(dir.join(&file), t)?;
        writeln!(manifest, "{name} {file} {}", extents(t.dims())).unwrap();
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(CONFIG_FILE), micronet_to_text(config))?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(MicroNetConfig, Weights)> {
    let dir = dir.as_ref();
    let config = micronet_from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut weights = Weights::zeros(&config);
    let mut lines = manifest.lines();
    for (name, slot) in weights.named_mut() {
        let bad = |m: String| Error::Config(format!("{MANIFEST_FILE}: {m}"));
        let line = lines.next().ok_or_else(|| bad(format!("missing entry for {name}")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [entry, file, ext] = fields[..] else {
            return Err(bad(format!("malformed line {line:?}")));
        };
        if entry != name {
            return Err(bad(format!("expected {name}, found {entry}")));
        }
        if file.contains(['/', '\\']) || file.starts_with('.') {
            return Err(bad(format!("file name {file:?} leaves the checkpoint directory")));
        }
        let t = read_tensor(dir.join(file))?;
        if t.dims() != slot.dims() || ext != extents(slot.dims()) {
            return Err(bad(format!(
                "{name} has extents {} but the config needs {}",
                extents(t.dims()),
                extents(slot.dims())
            )));
        }
        *slot = t;
    }
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(Error::Config(format!("{MANIFEST_FILE}: unexpected entry {extra:?}")));
    }
    Ok((config, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MicroNetConfig {
        MicroNetConfig {
            num_classes: 3,
            feature_channels: 2,
            hidden: 3,
            ..MicroNetConfig::default()
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let w = Weights::init(&cfg, 4).unwrap();
        save_checkpoint(dir.path(), &w, &cfg).unwrap();
        let (c2, w2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c2, cfg);
        for ((n, a), (_, b)) in w.named().into_iter().zip(w2.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y, "{n}");
            }
        }
        // a second save of the loaded weights is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(dir2.path(), &w2, &c2).unwrap();
        for (name, _) in w.named() {
            let f = format!("{name}.hstn");
            assert_eq!(
                fs::read(dir.path().join(&f)).unwrap(),
                fs::read(dir2.path().join(&f)).unwrap()
            );
        }
    }

    #[test]
    fn rejects_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let w = Weights::init(&cfg, 4).unwrap();
        let other = MicroNetConfig { num_classes: 5, ..cfg.clone() };
        assert!(save_checkpoint(dir.path(), &w, &other).is_err());

        save_checkpoint(dir.path(), &w, &cfg).unwrap();
        fs::write(dir.path().join(CONFIG_FILE), micronet_to_text(&other)).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());

        fs::write(dir.path().join(CONFIG_FILE), micronet_to_text(&cfg)).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), manifest.replacen("features.0.weight ", "x ", 1)).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
