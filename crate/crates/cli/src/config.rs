//! The `train` configuration file: a `[data]` table naming the inputs, with
//! every other key read as a training setting.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use refsplat::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PriorChoice {
    /// One target image per training view.
    Analytic,
    /// Any number of weighted target images per training view.
    Mixture,
    /// The prior service; `None` falls back to the configured address.
    Remote(Option<String>),
}

impl FromStr for PriorChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "mixture" => Ok(Self::Mixture),
            "remote" => Ok(Self::Remote(None)),
            _ => match s.strip_prefix("remote=") {
                Some(url) if !url.is_empty() => Ok(Self::Remote(Some(url.to_string()))),
                _ => Err(format!("expected analytic, mixture, remote or remote=<url>, got {s:?}")),
            },
        }
    }
}

/// Input locations; relative paths are resolved against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Labeled, initialized scene (PLY).
    pub scene: PathBuf,
    /// Training camera records with images and consistent masks.
    pub cameras: PathBuf,
    /// Camera records holding the reference view.
    pub reference: Option<PathBuf>,
    pub reference_id: Option<usize>,
    /// Analytic prior targets (JSON list of `{view, image, weight}`).
    pub targets: Option<PathBuf>,
    /// Scene the ground-truth depth oracle renders.
    pub depth_scene: Option<PathBuf>,
    #[serde(default = "one")]
    pub depth_scale: f64,
    #[serde(default)]
    pub depth_offset: f64,
}

fn one() -> f64 {
    1.0
}

/// One analytic prior component: `image` is a target for camera `view`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRecord {
    pub view: usize,
    pub image: String,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFile {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("parsing the config")?;
        let Some(data) = table.remove("data") else {
            bail!("the config needs a [data] table");
        };
        let mut data: DataConfig = data.try_into().context("in [data]")?;
        let rest = toml::to_string(&table)?;
        let train = TrainConfig::from_toml(&rest)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut data.scene);
        resolve(&mut data.cameras);
        for p in [&mut data.reference, &mut data.targets, &mut data.depth_scene].into_iter().flatten() {
            resolve(p);
        }
        Ok(Self { data, train })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    /// The file text, with `[data]` first.
    pub fn to_toml(&self) -> Result<String> {
        let mut out = toml::Table::new();
        out.insert("data".into(), toml::Value::try_from(&self.data)?);
        let train: toml::Table = toml::from_str(&self.train.to_toml()?)?;
        out.extend(train);
        Ok(toml::to_string(&out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_choices() {
        assert_eq!("analytic".parse(), Ok(PriorChoice::Analytic));
        assert_eq!("mixture".parse(), Ok(PriorChoice::Mixture));
        assert_eq!("remote".parse(), Ok(PriorChoice::Remote(None)));
        assert_eq!("remote=http://h:1".parse(), Ok(PriorChoice::Remote(Some("http://h:1".into()))));
        assert!("remote=".parse::<PriorChoice>().is_err());
        assert!("sdxl".parse::<PriorChoice>().is_err());
    }

    #[test]
    fn round_trip_resolves_paths() {
        let run = RunFile {
            data: DataConfig {
                scene: "init.ply".into(),
                cameras: "/abs/cameras.json".into(),
                targets: Some("targets.json".into()),
                depth_scale: 0.5,
                ..Default::default()
            },
            train: TrainConfig {
                iterations: 17,
                ..Default::default()
            },
        };
        let back = RunFile::parse(&run.to_toml().unwrap(), Path::new("/base")).unwrap();
        assert_eq!(back.train, run.train);
        assert_eq!(back.data.scene, PathBuf::from("/base/init.ply"));
        assert_eq!(back.data.cameras, PathBuf::from("/abs/cameras.json"));
        assert_eq!(back.data.targets, Some(PathBuf::from("/base/targets.json")));
        assert_eq!(back.data.depth_scale, 0.5);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let data = "[data]\nscene = \"a.ply\"\ncameras = \"c.json\"\n";
        assert!(RunFile::parse(data, Path::new(".")).is_ok());
        assert!(RunFile::parse(&format!("iteratons = 3\n{data}"), Path::new(".")).is_err());
        assert!(RunFile::parse(&format!("{data}colour = 1\n"), Path::new(".")).is_err());
        assert!(RunFile::parse("iterations = 3\n", Path::new(".")).is_err());
    }
}
