//! Run settings: built-in defaults, overlaid by a flat `key = value` file,
//! overlaid by `--set` pairs and dedicated flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use fwdskin::diff::TrainConfig;
use fwdskin::Variant;

/// Settings that are not training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Bones of the built-in arm when no skeleton file is given.
    pub bones: usize,
    pub radius: f64,
    /// Radius growth per radian of joint angle.
    pub radius_modulation: f64,
    /// Falloff of the analytic skinning weights.
    pub temperature: f64,
    pub variant: Variant,
    /// Convergence threshold; 0 derives it from the canonical box.
    pub eps: f64,
    pub max_iters: usize,
    pub train_poses: usize,
    pub val_poses: usize,
    /// Multiplier on the body's joint ranges when drawing random poses.
    pub pose_scale: f64,
    /// Lattice vertices per axis for mesh extraction.
    pub resolution: usize,
    /// `obj` or `ply`.
    pub mesh_format: String,
    pub bench_points: Vec<usize>,
    pub bench_runs: usize,
    /// Queries in the discarded warm-up pass.
    pub bench_warmup: usize,
    pub bench_grid_dims: Vec<[usize; 3]>,
    pub bench_variants: Vec<Variant>,
    /// Supervised steps fitting the benchmark's skinning network to the
    /// analytic weights when no checkpoint is given.
    pub bench_fit_steps: usize,
    pub ablate_grid_dims: Vec<[usize; 3]>,
    pub ablate_distill: Vec<bool>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            bones: 3,
            radius: 0.25,
            radius_modulation: 0.0,
            temperature: 0.1,
            variant: Variant::Voxel,
            eps: 0.0,
            max_iters: 50,
            train_poses: 20,
            val_poses: 5,
            pose_scale: 1.0,
            resolution: 64,
            mesh_format: "obj".into(),
            bench_points: vec![200_000],
            bench_runs: 5,
            bench_warmup: 2000,
            bench_grid_dims: vec![[64, 64, 16]],
            bench_variants: vec![Variant::Mlp, Variant::Voxel],
            bench_fit_steps: 300,
            ablate_grid_dims: vec![[16, 16, 4], [64, 64, 16]],
            ablate_distill: vec![true],
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub settings: Settings,
    pub train: TrainConfig,
}

fn defaults_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("defaults serialize to a table")
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

impl RunConfig {
    /// Merges defaults, the optional file, and `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut settings = defaults_table(&Settings::default());
        let mut train = defaults_table(&TrainConfig::default());
        let mut apply = |key: &str, value: Value, origin: &dyn Fn() -> String| -> Result<()> {
            if train.contains_key(key) {
                train.insert(key.to_string(), value);
            } else if settings.contains_key(key) {
                settings.insert(key.to_string(), value);
            } else {
                bail!("{}: unknown config key `{key}`", origin());
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: Table = text.parse().map_err(|e: toml::de::Error| {
                let line = e.span().map(|s| line_of(&text, s.start)).unwrap_or(0);
                anyhow!("{}:{line}: {}", path.display(), e.message())
            })?;
            for (k, v) in table {
                let line = key_line(&text, &k).unwrap_or(0);
                apply(&k, v, &|| format!("{}:{line}", path.display()))?;
            }
        }
        for pair in overrides {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{pair}`"))?;
            let (k, v) = (k.trim(), v.trim());
            let value = parse_value(v);
            apply(k, value, &|| format!("--set {pair}"))?;
        }
        let settings: Settings = Value::Table(settings)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("invalid setting: {}", e.message()))?;
        let train: TrainConfig = Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("invalid training setting: {}", e.message()))?;
        Ok(RunConfig { settings, train })
    }

    /// Every effective key in one flat table.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for v in [
            serde_json::to_value(&self.settings).expect("settings serialize"),
            serde_json::to_value(&self.train).expect("training settings serialize"),
        ] {
            if let serde_json::Value::Object(m) = v {
                map.extend(m);
            }
        }
        serde_json::Value::Object(map)
    }
}

/// A TOML value, or a bare string when the text is not valid TOML.
fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// `NX,NY,NZ` with every entry at least 2.
pub fn parse_dims(text: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = text.split([',', 'x']).collect();
    if parts.len() != 3 {
        return Err(format!("expected NX,NY,NZ, got `{text}`"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("not a count: `{p}`"))?;
        if *o < 2 {
            return Err(format!("grid dimensions must be at least 2, got `{text}`"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_a_file() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.settings, Settings::default());
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "# comment\nepochs = 3\nresolution = 32\ngrid_dims = [8, 4, 4]\n").unwrap();
        let c = RunConfig::load(Some(&p), &["epochs=5".into(), "variant=mlp".into()]).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.grid_dims, [8, 4, 4]);
        assert_eq!(c.settings.resolution, 32);
        assert_eq!(c.settings.variant, Variant::Mlp);
    }

    #[test]
    fn unknown_keys_name_the_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "epochs = 3\nlearnin_rate = 0.1\n").unwrap();
        let msg = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(msg.contains("learnin_rate") && msg.contains(":2"), "{msg}");
        let msg = RunConfig::load(None, &["nope=1".into()]).unwrap_err().to_string();
        assert!(msg.contains("nope"));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "epochs = 3\nseed = = 4\n").unwrap();
        let msg = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(msg.contains("run.toml:2"), "{msg}");
    }

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims("64,16,16").unwrap(), [64, 16, 16]);
        assert_eq!(parse_dims("8x4x4").unwrap(), [8, 4, 4]);
        assert!(parse_dims("8,4").is_err());
        assert!(parse_dims("1,4,4").is_err());
    }
}
