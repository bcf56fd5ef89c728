//! Sectioned `key = value` configuration files with a strict schema:
//! unknown sections or keys are rejected by name, every value is typed, and
//! the fully resolved configuration can be written back out for
//! reproducibility.
//!
//! Format: `[section]` headers, `key = value` lines, `#` comments, blank
//! lines ignored. Command-line overrides use `section.key=value`.

use crate::augment::{AugmentConfig, AugmentMode};
use crate::bimamba::Variant;
use crate::error::{Error, Result};
use crate::metrics::TdcfCostModel;
use crate::model::{ModelConfig, Pooling};
use crate::train::TrainConfig;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    /// section -> key -> (value, line number)
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 'key = value', got '{line}'"),
                });
            };
            let key = k.trim().to_string();
            let val = v.trim().to_string();
            let entry = cfg.sections.entry(section.clone()).or_default();
            if entry.insert(key.clone(), (val, i + 1)).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{key}' in section '[{section}]'"),
                });
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply a `section.key=value` override.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let Some((k, v)) = spec.split_once('=') else {
            return Err(Error::Config(format!(
                "override '{spec}' is not of the form section.key=value"
            )));
        };
        let Some((section, key)) = k.trim().split_once('.') else {
            return Err(Error::Config(format!(
                "override key '{}' must be qualified as section.key",
                k.trim()
            )));
        };
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    fn reader<'a>(&'a self, section: &str) -> SectionReader<'a> {
        SectionReader {
            section: section.to_string(),
            entries: self.sections.get(section),
            taken: std::cell::RefCell::new(Vec::new()),
        }
    }

    fn check_sections(&self, allowed: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown section '[{name}]'")));
            }
        }
        Ok(())
    }
}

struct SectionReader<'a> {
    section: String,
    entries: Option<&'a BTreeMap<String, (String, usize)>>,
    taken: std::cell::RefCell<Vec<String>>,
}

impl<'a> SectionReader<'a> {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.taken.borrow_mut().push(key.to_string());
        let Some(entries) = self.entries else {
            return Ok(None);
        };
        match entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line: *line,
                msg: format!(
                    "bad value '{v}' for key '{}.{key}'",
                    self.section
                ),
            }),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Reject any key in the section that was never requested.
    fn finish(self) -> Result<()> {
        if let Some(entries) = self.entries {
            let taken = self.taken.borrow();
            for key in entries.keys() {
                if !taken.contains(key) {
                    return Err(Error::Config(format!(
                        "unknown key '{}.{key}'",
                        self.section
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Paths and run-level settings for the `train` / `score` commands.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { runs: 20, warmup: 3 }
    }
}

/// The fully resolved configuration for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

impl FullConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<FullConfig> {
        raw.check_sections(&["model", "train", "augment", "data", "bench"])?;

        let m = raw.reader("model");
        let md = ModelConfig::default();
        let variant = match m.get::<String>("variant")? {
            Some(v) => Variant::parse(&v)?,
            None => md.variant,
        };
        let pooling = match m.get::<String>("pooling")? {
            Some(p) if p == "mean" => Pooling::Mean,
            Some(p) => return Err(Error::Config(format!("unknown pooling '{p}'"))),
            None => md.pooling,
        };
        let wb = m.get::<f64>("class_weight_bonafide")?;
        let ws = m.get::<f64>("class_weight_spoof")?;
        let class_weights = match (wb, ws) {
            (None, None) => None,
            (Some(b), Some(s)) => Some((b, s)),
            _ => {
                return Err(Error::Config(
                    "class weights must be given for both classes or neither".into(),
                ))
            }
        };
        let model = ModelConfig {
            d_feat: m.get_or("d_feat", md.d_feat)?,
            d_model: m.get_or("d_model", md.d_model)?,
            d_inner: m.get_or("d_inner", md.d_inner)?,
            n_state: m.get_or("n_state", md.n_state)?,
            n_blocks: m.get_or("n_blocks", md.n_blocks)?,
            variant,
            k_conv: m.get_or("k_conv", md.k_conv)?,
            pooling,
            class_weights,
            seed: m.get_or("seed", md.seed)?,
        };
        m.finish()?;
        model.validate()?;

        let t = raw.reader("train");
        let td = TrainConfig::default();
        let train = TrainConfig {
            lr: t.get_or("lr", td.lr)?,
            weight_decay: t.get_or("weight_decay", td.weight_decay)?,
            batch_size: t.get_or("batch_size", td.batch_size)?,
            patience: t.get_or("patience", td.patience)?,
            top_k: t.get_or("top_k", td.top_k)?,
            max_epochs: t.get_or("max_epochs", td.max_epochs)?,
            crop_len: t.get_or("crop_len", td.crop_len)?,
        };
        t.finish()?;
        train.validate()?;

        let a = raw.reader("augment");
        let ad = AugmentConfig::default();
        let mode = match a.get::<String>("mode")? {
            Some(m) => AugmentMode::parse(&m)?,
            None => ad.mode,
        };
        let range_f = |lo_key: &str, hi_key: &str, d: (f32, f32)| -> Result<(f32, f32)> {
            Ok((a.get_or(lo_key, d.0)?, a.get_or(hi_key, d.1)?))
        };
        let augment = AugmentConfig {
            mode,
            conv_bands: (
                a.get_or("conv_bands_min", ad.conv_bands.0)?,
                a.get_or("conv_bands_max", ad.conv_bands.1)?,
            ),
            conv_strength: range_f("conv_strength_min", "conv_strength_max", ad.conv_strength)?,
            conv_nl_gain: range_f("conv_nl_gain_min", "conv_nl_gain_max", ad.conv_nl_gain)?,
            imp_density: range_f("imp_density_min", "imp_density_max", ad.imp_density)?,
            imp_snr_db: range_f("imp_snr_db_min", "imp_snr_db_max", ad.imp_snr_db)?,
            stat_snr_db: range_f("stat_snr_db_min", "stat_snr_db_max", ad.stat_snr_db)?,
            stat_color: range_f("stat_color_min", "stat_color_max", ad.stat_color)?,
        };
        a.finish()?;

        let d = raw.reader("data");
        let data = DataConfig {
            train_manifest: d.get::<String>("train_manifest")?.map(PathBuf::from),
            dev_manifest: d.get::<String>("dev_manifest")?.map(PathBuf::from),
            out_dir: d.get::<String>("out_dir")?.map(PathBuf::from),
        };
        d.finish()?;

        let b = raw.reader("bench");
        let bd = BenchConfig::default();
        let bench = BenchConfig {
            runs: b.get_or("runs", bd.runs)?,
            warmup: b.get_or("warmup", bd.warmup)?,
        };
        b.finish()?;
        if bench.runs == 0 {
            return Err(Error::Config("bench.runs must be >= 1".into()));
        }

        Ok(FullConfig {
            model,
            train,
            augment,
            data,
            bench,
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<FullConfig> {
        let mut raw = RawConfig::from_file(path)?;
        for o in overrides {
            raw.set_override(o)?;
        }
        Self::from_raw(&raw)
    }

    /// Serialize the resolved configuration; reparsing reproduces it.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        writeln!(s, "[model]").unwrap();
        writeln!(s, "d_feat = {}", m.d_feat).unwrap();
        writeln!(s, "d_model = {}", m.d_model).unwrap();
        writeln!(s, "d_inner = {}", m.d_inner).unwrap();
        writeln!(s, "n_state = {}", m.n_state).unwrap();
        writeln!(s, "n_blocks = {}", m.n_blocks).unwrap();
        writeln!(s, "variant = {}", m.variant.name()).unwrap();
        writeln!(s, "k_conv = {}", m.k_conv).unwrap();
        writeln!(s, "pooling = mean").unwrap();
        if let Some((wb, ws)) = m.class_weights {
            writeln!(s, "class_weight_bonafide = {wb}").unwrap();
            writeln!(s, "class_weight_spoof = {ws}").unwrap();
        }
        writeln!(s, "seed = {}", m.seed).unwrap();
        let t = &self.train;
        writeln!(s, "\n[train]").unwrap();
        writeln!(s, "lr = {}", t.lr).unwrap();
        writeln!(s, "weight_decay = {}", t.weight_decay).unwrap();
        writeln!(s, "batch_size = {}", t.batch_size).unwrap();
        writeln!(s, "patience = {}", t.patience).unwrap();
        writeln!(s, "top_k = {}", t.top_k).unwrap();
        writeln!(s, "max_epochs = {}", t.max_epochs).unwrap();
        writeln!(s, "crop_len = {}", t.crop_len).unwrap();
        let a = &self.augment;
        writeln!(s, "\n[augment]").unwrap();
        let mode = match a.mode {
            AugmentMode::La => "la",
            AugmentMode::Df => "df",
            AugmentMode::None => "none",
        };
        writeln!(s, "mode = {mode}").unwrap();
        writeln!(s, "conv_bands_min = {}", a.conv_bands.0).unwrap();
        writeln!(s, "conv_bands_max = {}", a.conv_bands.1).unwrap();
        writeln!(s, "conv_strength_min = {}", a.conv_strength.0).unwrap();
        writeln!(s, "conv_strength_max = {}", a.conv_strength.1).unwrap();
        writeln!(s, "conv_nl_gain_min = {}", a.conv_nl_gain.0).unwrap();
        writeln!(s, "conv_nl_gain_max = {}", a.conv_nl_gain.1).unwrap();
        writeln!(s, "imp_density_min = {}", a.imp_density.0).unwrap();
        writeln!(s, "imp_density_max = {}", a.imp_density.1).unwrap();
        writeln!(s, "imp_snr_db_min = {}", a.imp_snr_db.0).unwrap();
        writeln!(s, "imp_snr_db_max = {}", a.imp_snr_db.1).unwrap();
        writeln!(s, "stat_snr_db_min = {}", a.stat_snr_db.0).unwrap();
        writeln!(s, "stat_snr_db_max = {}", a.stat_snr_db.1).unwrap();
        writeln!(s, "stat_color_min = {}", a.stat_color.0).unwrap();
        writeln!(s, "stat_color_max = {}", a.stat_color.1).unwrap();
        let d = &self.data;
        writeln!(s, "\n[data]").unwrap();
        if let Some(p) = &d.train_manifest {
            writeln!(s, "train_manifest = {}", p.display()).unwrap();
        }
        if let Some(p) = &d.dev_manifest {
            writeln!(s, "dev_manifest = {}", p.display()).unwrap();
        }
        if let Some(p) = &d.out_dir {
            writeln!(s, "out_dir = {}", p.display()).unwrap();
        }
        writeln!(s, "\n[bench]").unwrap();
        writeln!(s, "runs = {}", self.bench.runs).unwrap();
        writeln!(s, "warmup = {}", self.bench.warmup).unwrap();
        s
    }
}

/// Cost-model file for `eval --tdcf`: flat `key = value` (a `[tdcf]` section
/// header is also accepted).
pub fn load_cost_model(path: &Path) -> Result<TdcfCostModel> {
    let raw = RawConfig::from_file(path)?;
    raw.check_sections(&["", "tdcf"])?;
    let d = TdcfCostModel::default();
    let mut model = d.clone();
    for section in ["", "tdcf"] {
        let r = raw.reader(section);
        model = TdcfCostModel {
            p_target: r.get_or("p_target", model.p_target)?,
            p_nontarget: r.get_or("p_nontarget", model.p_nontarget)?,
            p_spoof: r.get_or("p_spoof", model.p_spoof)?,
            c_miss: r.get_or("c_miss", model.c_miss)?,
            c_fa: r.get_or("c_fa", model.c_fa)?,
            c_fa_spoof: r.get_or("c_fa_spoof", model.c_fa_spoof)?,
            p_miss_asv: r.get_or("p_miss_asv", model.p_miss_asv)?,
            p_fa_asv: r.get_or("p_fa_asv", model.p_fa_asv)?,
            p_fa_spoof_asv: r.get_or("p_fa_spoof_asv", model.p_fa_spoof_asv)?,
        };
        r.finish()?;
    }
    model.validate()?;
    Ok(model)
}
