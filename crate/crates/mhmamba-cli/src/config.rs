//! Flat key-value run configuration.
//!
//! The file format is one `dotted.key=value` per line, `#` starting a
//! comment, blank lines ignored. Later lines win over earlier ones and
//! `--set key=value` flags win over the file. Every key a run consults is
//! recorded with its final value (defaults included) so the manifest can
//! reproduce the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mhmamba::blocks::Activation;
use mhmamba::error::{Error, Result};
use mhmamba::io::PhantomSpec;
use mhmamba::network::{NetworkConfig, Precision};
use mhmamba::train::TrainConfig;

/// Every key the tool understands. Anything else is a typo and is rejected
/// with the offending location.
const KNOWN_KEYS: &[&str] = &[
    "network.in_channels",
    "network.num_classes",
    "network.channels",
    "network.blocks_per_stage",
    "network.heads",
    "network.d_state",
    "network.patch",
    "network.activation",
    "network.precision",
    "train.epochs",
    "train.batch",
    "train.lr",
    "train.weight_decay",
    "train.poly_power",
    "train.momentum",
    "train.mirror_flips",
    "phantom.dims",
    "phantom.center",
    "phantom.radii.outer",
    "phantom.radii.middle",
    "phantom.radii.inner",
    "phantom.noise",
    "phantom.count",
    "infer.overlap",
];

#[derive(Debug)]
pub struct Config {
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn insert_checked(
    map: &mut BTreeMap<String, String>,
    key: &str,
    value: &str,
    at: &str,
) -> Result<()> {
    if !KNOWN_KEYS.contains(&key) {
        return Err(Error::config(format!("{at}: unknown config key '{key}'")));
    }
    map.insert(key.to_string(), value.to_string());
    Ok(())
}

impl Config {
    /// Reads the optional file, then applies `--set` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut values = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let at = format!("{}:{}", p.display(), idx + 1);
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("{at}: expected key=value, got '{line}'")))?;
                insert_checked(&mut values, k.trim(), v.trim(), &at)?;
            }
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set {item}: expected key=value")))?;
            insert_checked(&mut values, k.trim(), v.trim(), "--set")?;
        }
        Ok(Config { values, resolved: BTreeMap::new() })
    }

    /// Final values of every key consulted so far, defaults materialized.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Records a value that arrived through a flag rather than a key, so it
    /// still lands in the manifest.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let out = match self.values.get(key) {
            Some(s) => s
                .parse::<T>()
                .map_err(|e| Error::config(format!("{key}={s}: {e}")))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), out.to_string());
        Ok(out)
    }

    /// `a,b,c` or a single value repeated across all three axes.
    fn get_triple<T: FromStr + Display + Copy>(&mut self, key: &str, default: [T; 3]) -> Result<[T; 3]>
    where
        T::Err: Display,
    {
        let out = match self.values.get(key) {
            Some(s) => parse_list::<T, 3>(key, s)?,
            None => default,
        };
        self.resolved
            .insert(key.to_string(), format!("{},{},{}", out[0], out[1], out[2]));
        Ok(out)
    }

    fn get_quad(&mut self, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
        let out = match self.values.get(key) {
            Some(s) => parse_list::<usize, 4>(key, s)?,
            None => default,
        };
        self.resolved.insert(
            key.to_string(),
            format!("{},{},{},{}", out[0], out[1], out[2], out[3]),
        );
        Ok(out)
    }

    pub fn network(&mut self) -> Result<NetworkConfig> {
        let activation = match self.values.get("network.activation") {
            Some(s) => Activation::parse(s)?,
            None => Activation::Relu,
        };
        let precision = match self.values.get("network.precision") {
            Some(s) => Precision::parse(s)?,
            None => Precision::F32,
        };
        self.resolved.insert("network.activation".into(), activation.name().into());
        self.resolved.insert("network.precision".into(), precision.name().into());
        let cfg = NetworkConfig {
            in_channels: self.get("network.in_channels", 4)?,
            num_classes: self.get("network.num_classes", 4)?,
            channels: self.get_quad("network.channels", [48, 96, 192, 384])?,
            blocks_per_stage: self.get("network.blocks_per_stage", 2)?,
            heads: self.get("network.heads", 4)?,
            d_state: self.get("network.d_state", 16)?,
            patch: self.get_triple("network.patch", [32, 32, 32])?,
            activation,
            precision,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The training schedule; `patch` comes from the network config so the
    /// sampled crops always match what the model expects.
    pub fn train(&mut self, seed: u64, patch: [usize; 3]) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get("train.epochs", 150)?,
            batch: self.get("train.batch", 1)?,
            lr: self.get("train.lr", 1e-3)?,
            weight_decay: self.get("train.weight_decay", 1e-5)?,
            poly_power: self.get("train.poly_power", 0.9)?,
            momentum: self.get("train.momentum", 0.0)?,
            patch,
            seed,
            mirror_flips: self.get("train.mirror_flips", true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Geometry defaults track the volume extent: center sits mid-grid and
    /// the preset semi-axes scale with dims/64, so resizing the phantom
    /// keeps the three shells nested and in frame.
    pub fn phantom(&mut self, seed: u64) -> Result<(PhantomSpec, usize)> {
        let dims = self.get_triple("phantom.dims", [64, 64, 64])?;
        let mid = |d: usize| (d as f64 - 1.0) / 2.0;
        let scaled = |base: [f64; 3]| {
            [0, 1, 2].map(|a| base[a] * dims[a] as f64 / 64.0)
        };
        let preset = PhantomSpec::default();
        let spec = PhantomSpec {
            dims,
            center: self.get_triple("phantom.center", [mid(dims[0]), mid(dims[1]), mid(dims[2])])?,
            radii: [
                self.get_triple("phantom.radii.outer", scaled(preset.radii[0]))?,
                self.get_triple("phantom.radii.middle", scaled(preset.radii[1]))?,
                self.get_triple("phantom.radii.inner", scaled(preset.radii[2]))?,
            ],
            region_means: preset.region_means,
            noise: self.get("phantom.noise", 0.02)?,
            seed,
        };
        spec.validate()?;
        let count = self.get("phantom.count", 1)?;
        if count == 0 {
            return Err(Error::config("phantom.count must be at least 1"));
        }
        Ok((spec, count))
    }

    pub fn overlap(&mut self) -> Result<f64> {
        self.get("infer.overlap", 0.5)
    }
}

fn parse_list<T: FromStr + Copy, const N: usize>(key: &str, s: &str) -> Result<[T; N]>
where
    T::Err: Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let one = |p: &str| -> Result<T> {
        p.parse::<T>().map_err(|e| Error::config(format!("{key}={s}: {e}")))
    };
    if parts.len() == 1 && N > 1 {
        let v = one(parts[0])?;
        return Ok([v; N]);
    }
    if parts.len() != N {
        return Err(Error::config(format!(
            "{key}={s}: expected {N} comma-separated values, got {}",
            parts.len()
        )));
    }
    let mut out = [one(parts[0])?; N];
    for (i, p) in parts.iter().enumerate() {
        out[i] = one(p)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn file_then_overrides_then_defaults() {
        let f = write_cfg("# comment\nnetwork.heads=2\n\ntrain.lr=0.01\n");
        let over = vec!["train.lr=0.02".to_string()];
        let mut cfg = Config::load(Some(f.path()), &over).unwrap();
        let net = cfg.network().unwrap();
        assert_eq!(net.heads, 2);
        assert_eq!(net.channels, [48, 96, 192, 384]);
        let t = cfg.train(9, net.patch).unwrap();
        assert_eq!(t.lr, 0.02);
        assert_eq!(t.epochs, 150);
        assert_eq!(t.seed, 9);
        let r = cfg.resolved();
        assert_eq!(r.get("train.lr").unwrap(), "0.02");
        assert_eq!(r.get("network.heads").unwrap(), "2");
        assert_eq!(r.get("network.patch").unwrap(), "32,32,32");
        assert_eq!(r.get("train.mirror_flips").unwrap(), "true");
    }

    #[test]
    fn unknown_key_reports_line() {
        let f = write_cfg("network.heads=2\nnetwork.hedas=4\n");
        let err = Config::load(Some(f.path()), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("network.hedas"), "{msg}");
        assert!(msg.contains(":2"), "missing line number: {msg}");
    }

    #[test]
    fn malformed_line_reports_location() {
        let f = write_cfg("network.heads\n");
        let err = Config::load(Some(f.path()), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("key=value"), "{msg}");
        assert!(msg.contains(":1"), "{msg}");
    }

    #[test]
    fn bad_value_names_key() {
        let f = write_cfg("train.lr=fast\n");
        let mut cfg = Config::load(Some(f.path()), &[]).unwrap();
        let err = cfg.train(0, [32; 3]).unwrap_err();
        assert!(err.to_string().contains("train.lr=fast"), "{err}");
    }

    #[test]
    fn triples_accept_scalar_or_list() {
        let over = vec!["network.patch=16".to_string(), "phantom.dims=32,48,64".to_string()];
        let mut cfg = Config::load(None, &over).unwrap();
        let net = cfg.network().unwrap();
        assert_eq!(net.patch, [16, 16, 16]);
        let (spec, count) = cfg.phantom(1).unwrap();
        assert_eq!(spec.dims, [32, 48, 64]);
        assert_eq!(count, 1);
        // Scaled preset keeps the outer shell inside each axis.
        for a in 0..3 {
            assert!(spec.center[a] + spec.radii[0][a] <= (spec.dims[a] - 1) as f64);
        }
        let err = Config::load(None, &["network.patch=1,2".to_string()])
            .and_then(|mut c| c.network())
            .unwrap_err();
        assert!(err.to_string().contains("expected 3"), "{err}");
    }

    #[test]
    fn phantom_defaults_match_preset_at_64() {
        let mut cfg = Config::load(None, &[]).unwrap();
        let (spec, _) = cfg.phantom(7).unwrap();
        let preset = PhantomSpec::default();
        assert_eq!(spec.dims, preset.dims);
        assert_eq!(spec.center, preset.center);
        assert_eq!(spec.radii, preset.radii);
        assert_eq!(spec.seed, 7);
    }
}
