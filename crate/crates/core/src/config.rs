//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! `model.kind` is applied first, then `model.retrieval.step`, then every
//! other key, so a file may override single switches of a preset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::MlpConfig;
use crate::data::{NumPolicy, Task};
use crate::embeddings::EmbeddingScheme;
use crate::error::{Error, Result};
use crate::model::{MlpModel, Model, Tabr, TabrConfig};
use crate::retrieval::{RetrievalConfig, Similarity, ValueKind};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Tabr,
    /// TabR with the encoder, predictor and embedding fixed to the simple
    /// configuration.
    TabrS,
    Mlp,
    Knn,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabr" => Ok(ModelKind::Tabr),
            "tabr-s" => Ok(ModelKind::TabrS),
            "mlp" => Ok(ModelKind::Mlp),
            "knn" => Ok(ModelKind::Knn),
            _ => Err(Error::Config(format!("unknown model kind '{s}' (tabr, tabr-s, mlp, knn)"))),
        }
    }
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tabr => "tabr",
            ModelKind::TabrS => "tabr-s",
            ModelKind::Mlp => "mlp",
            ModelKind::Knn => "knn",
        }
    }

    pub fn is_tabr(self) -> bool {
        matches!(self, ModelKind::Tabr | ModelKind::TabrS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory; falls back to `$TABR_DATA_DIR/<name>`.
    pub dir: Option<PathBuf>,
    pub name: String,
    /// Policy for numeric columns without an override.
    pub policy: NumPolicy,
    /// Per-column overrides by numeric column index.
    pub column_policies: BTreeMap<usize, NumPolicy>,
    /// Fraction of the training split used for training; the rest can be
    /// added as candidates later.
    pub train_fraction: f64,
}

impl DataConfig {
    pub fn policies(&self, p_num: usize) -> Result<Vec<NumPolicy>> {
        if let Some((&j, _)) = self.column_policies.range(p_num..).next() {
            return Err(Error::Config(format!("policy for column {j}, but only {p_num} numeric columns")));
        }
        Ok((0..p_num)
            .map(|j| self.column_policies.get(&j).copied().unwrap_or(self.policy))
            .collect())
    }

    /// The dataset directory after the environment fallback.
    pub fn resolve_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.dir {
            if dir.exists() || dir.is_absolute() {
                return Ok(dir.clone());
            }
            if let Ok(root) = std::env::var("TABR_DATA_DIR") {
                return Ok(PathBuf::from(root).join(dir));
            }
            return Ok(dir.clone());
        }
        match std::env::var("TABR_DATA_DIR") {
            Ok(root) => Ok(PathBuf::from(root).join(&self.name)),
            Err(_) => Err(Error::Config(
                "no data.dir given and TABR_DATA_DIR is not set".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seeds: usize,
    pub group_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub tabr: TabrConfig,
    pub mlp: MlpConfig,
    pub knn_k: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Dataset short names accepted wherever a dataset name is.
pub fn dataset_alias(name: &str) -> &str {
    match name {
        "CA" | "ca" => "california",
        other => other,
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt_text<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::Dot => "dot",
        Similarity::L2 => "l2",
    }
}

fn value_name(v: ValueKind) -> &'static str {
    match v {
        ValueKind::Wv => "wv",
        ValueKind::WyWv => "wy+wv",
        ValueKind::WyT => "wy+t",
    }
}

fn policy_name(p: NumPolicy) -> &'static str {
    match p {
        NumPolicy::Quantile => "quantile",
        NumPolicy::Standardize => "standardize",
        NumPolicy::None => "none",
    }
}

fn scheme_name(s: EmbeddingScheme) -> &'static str {
    match s {
        EmbeddingScheme::None => "none",
        EmbeddingScheme::Lr => "lr",
        EmbeddingScheme::Plr => "plr",
        EmbeddingScheme::PlrLite => "plr-lite",
    }
}

/// Keys that `tabr-s` fixes.
const TABR_S_FIXED: [&str; 3] = ["model.n_encoder", "model.n_predictor", "model.embedding.scheme"];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ModelKind::TabrS,
            tabr: TabrConfig::tabr_s(),
            mlp: MlpConfig {
                n_layers: 3,
                width: 512,
                dropout: 0.1,
            },
            knn_k: 10,
            data: DataConfig {
                dir: None,
                name: "california".into(),
                policy: NumPolicy::Quantile,
                column_policies: BTreeMap::new(),
                train_fraction: 1.0,
            },
            train: TrainConfig::tabr_s(256, 0),
            eval: EvalConfig {
                seeds: 15,
                group_size: 5,
            },
        }
    }
}

impl RunConfig {
    /// Defaults for a model kind. The MLP preset trains with lr 3e-4 and
    /// weight decay 1e-5.
    pub fn for_kind(kind: ModelKind) -> Self {
        let mut c = RunConfig {
            kind,
            ..RunConfig::default()
        };
        if kind == ModelKind::Mlp {
            c.train.lr = 3e-4;
            c.train.weight_decay = 1e-5;
            c.train.track_delta_context = false;
        }
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(Error::Config(format!("key {k} given twice")));
            }
            pairs.push((k, v));
        }
        let kind = match pairs.iter().find(|(k, _)| k == "model.kind") {
            Some((_, v)) => v.parse()?,
            None => ModelKind::TabrS,
        };
        let mut c = RunConfig::for_kind(kind);
        if let Some((k, v)) = pairs.iter().find(|(k, _)| k == "model.retrieval.step") {
            let step: u8 = parse(k, v)?;
            c.tabr.retrieval = RetrievalConfig::step(step, c.tabr.retrieval.attention_dropout)?;
        }
        for (k, v) in &pairs {
            if k == "model.kind" || k == "model.retrieval.step" {
                continue;
            }
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.kind == ModelKind::TabrS && TABR_S_FIXED.contains(&key) {
            return Err(Error::Config(format!("{key} is fixed for tabr-s; use model.kind = tabr")));
        }
        let t = &mut self.tabr;
        let r = &mut t.retrieval;
        let e = &mut t.embedding;
        match key {
            "model.d" => t.d = parse(key, v)?,
            "model.n_encoder" => t.n_encoder = parse(key, v)?,
            "model.n_predictor" => t.n_predictor = parse(key, v)?,
            "model.dropout" => t.dropout = parse(key, v)?,
            "model.label_init" => t.label_init = parse_opt(key, v)?,
            "model.retrieval.similarity" => {
                r.similarity = match v {
                    "dot" => Similarity::Dot,
                    "l2" => Similarity::L2,
                    _ => return Err(Error::Config(format!("bad similarity '{v}' (dot, l2)"))),
                }
            }
            "model.retrieval.value" => {
                r.value = match v {
                    "wv" => ValueKind::Wv,
                    "wy+wv" => ValueKind::WyWv,
                    "wy+t" => ValueKind::WyT,
                    _ => return Err(Error::Config(format!("bad value kind '{v}' (wv, wy+wv, wy+t)"))),
                }
            }
            "model.retrieval.m" => r.m = parse(key, v)?,
            "model.retrieval.scale_by_sqrt_d" => r.scale_by_sqrt_d = parse_bool(key, v)?,
            "model.retrieval.include_self" => r.include_self = parse_bool(key, v)?,
            "model.retrieval.attention_dropout" => r.attention_dropout = parse(key, v)?,
            "model.retrieval.step" => {
                let step: u8 = parse(key, v)?;
                *r = RetrievalConfig::step(step, r.attention_dropout)?;
            }
            "model.embedding.scheme" => e.scheme = v.parse()?,
            "model.embedding.d_emb" => e.d_emb = parse(key, v)?,
            "model.embedding.n_frequencies" => e.n_frequencies = parse(key, v)?,
            "model.embedding.frequency_scale" => e.frequency_scale = parse(key, v)?,
            "model.mlp.n_layers" => self.mlp.n_layers = parse(key, v)?,
            "model.mlp.width" => self.mlp.width = parse(key, v)?,
            "model.mlp.dropout" => self.mlp.dropout = parse(key, v)?,
            "model.knn.k" => self.knn_k = parse(key, v)?,
            "data.dir" => self.data.dir = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "data.name" => self.data.name = dataset_alias(v).to_string(),
            "data.policy" => self.data.policy = v.parse()?,
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse_opt(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.freeze_after" => self.train.freeze_after = parse_opt(key, v)?,
            "train.track_delta_context" => self.train.track_delta_context = parse_bool(key, v)?,
            "train.candidate_cap" => self.train.candidate_cap = parse_opt(key, v)?,
            "eval.seeds" => self.eval.seeds = parse(key, v)?,
            "eval.group_size" => self.eval.group_size = parse(key, v)?,
            _ => {
                if let Some(col) = key.strip_prefix("data.policy.") {
                    let j: usize = parse(key, col)?;
                    self.data.column_policies.insert(j, v.parse()?);
                } else {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// A freshly initialized model of the configured kind.
    pub fn build_model(&self, task: Task, p_num: usize, p_other: usize, seed: u64) -> Result<Model> {
        match self.kind {
            ModelKind::Tabr | ModelKind::TabrS => Ok(Model::Tabr(Box::new(Tabr::new(
                self.tabr.clone(),
                task,
                p_num,
                p_other,
                seed,
            )?))),
            ModelKind::Mlp => Ok(Model::Mlp(MlpModel::new(self.mlp.clone(), task, p_num, p_other, seed)?)),
            ModelKind::Knn => Err(Error::Unsupported("knn has no learnable model".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::TabrS
            && (self.tabr.n_encoder != 0
                || self.tabr.n_predictor != 1
                || self.tabr.embedding.scheme != EmbeddingScheme::None)
        {
            return Err(Error::Config("tabr-s has no encoder blocks, one predictor block and no embeddings".into()));
        }
        self.tabr.validate()?;
        self.train.validate()?;
        if self.knn_k == 0 {
            return Err(Error::Config("model.knn.k must be positive".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::Config("data.train_fraction must be in (0, 1]".into()));
        }
        if self.eval.seeds == 0 || self.eval.group_size == 0 {
            return Err(Error::Config("eval.seeds and eval.group_size must be positive".into()));
        }
        Ok(())
    }

    /// Every resolved key, one per line; parsing the text gives back the
    /// same configuration.
    pub fn to_text(&self) -> String {
        let t = &self.tabr;
        let r = &t.retrieval;
        let e = &t.embedding;
        let mut lines: Vec<(String, String)> = vec![
            ("model.kind".into(), self.kind.name().into()),
            ("model.d".into(), t.d.to_string()),
            ("model.dropout".into(), t.dropout.to_string()),
            ("model.label_init".into(), opt_text(&t.label_init)),
            ("model.retrieval.similarity".into(), similarity_name(r.similarity).into()),
            ("model.retrieval.value".into(), value_name(r.value).into()),
            ("model.retrieval.m".into(), r.m.to_string()),
            ("model.retrieval.scale_by_sqrt_d".into(), r.scale_by_sqrt_d.to_string()),
            ("model.retrieval.include_self".into(), r.include_self.to_string()),
            ("model.retrieval.attention_dropout".into(), r.attention_dropout.to_string()),
            ("model.embedding.d_emb".into(), e.d_emb.to_string()),
            ("model.embedding.n_frequencies".into(), e.n_frequencies.to_string()),
            ("model.embedding.frequency_scale".into(), e.frequency_scale.to_string()),
            ("model.mlp.n_layers".into(), self.mlp.n_layers.to_string()),
            ("model.mlp.width".into(), self.mlp.width.to_string()),
            ("model.mlp.dropout".into(), self.mlp.dropout.to_string()),
            ("model.knn.k".into(), self.knn_k.to_string()),
            (
                "data.dir".into(),
                opt_text(&self.data.dir.as_ref().map(|d| d.display().to_string())),
            ),
            ("data.name".into(), self.data.name.clone()),
            ("data.policy".into(), policy_name(self.data.policy).into()),
            ("data.train_fraction".into(), self.data.train_fraction.to_string()),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.lr".into(), self.train.lr.to_string()),
            ("train.weight_decay".into(), self.train.weight_decay.to_string()),
            ("train.patience".into(), self.train.patience.to_string()),
            ("train.max_epochs".into(), opt_text(&self.train.max_epochs)),
            ("train.seed".into(), self.train.seed.to_string()),
            ("train.freeze_after".into(), opt_text(&self.train.freeze_after)),
            ("train.track_delta_context".into(), self.train.track_delta_context.to_string()),
            ("train.candidate_cap".into(), opt_text(&self.train.candidate_cap)),
            ("eval.seeds".into(), self.eval.seeds.to_string()),
            ("eval.group_size".into(), self.eval.group_size.to_string()),
        ];
        if self.kind != ModelKind::TabrS {
            lines.push(("model.n_encoder".into(), t.n_encoder.to_string()));
            lines.push(("model.n_predictor".into(), t.n_predictor.to_string()));
            lines.push(("model.embedding.scheme".into(), scheme_name(e.scheme).into()));
        }
        for (j, p) in &self.data.column_policies {
            lines.push((format!("data.policy.{j}"), policy_name(*p).into()));
        }
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_tabr_s_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.kind, ModelKind::TabrS);
        assert_eq!(c.tabr, TabrConfig::tabr_s());
        assert_eq!(c.train, TrainConfig::tabr_s(256, 0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("model.widht = 3").unwrap_err();
        assert!(err.to_string().contains("model.widht"), "{err}");
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("model.d = 3\nmodel.d = 4").is_err());
        assert!(RunConfig::parse("model.d = many").is_err());
    }

    #[test]
    fn step_applies_before_single_switches() {
        let c = RunConfig::parse("model.retrieval.include_self = false\nmodel.retrieval.step = 2\n").unwrap();
        assert_eq!(c.tabr.retrieval.similarity, Similarity::L2);
        assert_eq!(c.tabr.retrieval.value, ValueKind::WyWv);
        assert!(!c.tabr.retrieval.include_self);
        assert_eq!(c.tabr.retrieval.attention_dropout, 0.38920071545944357);
    }

    #[test]
    fn tabr_s_fixes_its_architecture() {
        assert!(RunConfig::parse("model.n_encoder = 1").is_err());
        let c = RunConfig::parse("model.kind = tabr\nmodel.n_encoder = 1\nmodel.embedding.scheme = plr").unwrap();
        assert_eq!(c.tabr.n_encoder, 1);
    }

    #[test]
    fn mlp_preset() {
        let c = RunConfig::parse("model.kind = mlp").unwrap();
        assert_eq!((c.mlp.n_layers, c.mlp.width, c.mlp.dropout), (3, 512, 0.1));
        assert_eq!((c.train.lr, c.train.weight_decay), (3e-4, 1e-5));
    }

    #[test]
    fn column_policies_and_aliases() {
        let c = RunConfig::parse("data.name = CA\ndata.policy = standardize\ndata.policy.2 = none").unwrap();
        assert_eq!(c.data.name, "california");
        assert_eq!(
            c.data.policies(3).unwrap(),
            vec![NumPolicy::Standardize, NumPolicy::Standardize, NumPolicy::None]
        );
        assert!(c.data.policies(2).is_err());
    }

    #[test]
    fn text_round_trips() {
        let src = "model.kind = tabr\nmodel.n_encoder = 2\nmodel.label_init = 0.5\ntrain.max_epochs = 7\n\
                   train.freeze_after = 4\ndata.policy.1 = none\ndata.dir = /tmp/x\n";
        let c = RunConfig::parse(src).unwrap();
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        let d = RunConfig::parse("").unwrap();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    proptest::proptest! {
        #[test]
        fn numeric_overrides_round_trip(d in 1usize..600, lr in 1e-6f64..1.0, m in 1usize..200, seed in 0u64..1000) {
            let src = format!("model.kind = tabr\nmodel.d = {d}\ntrain.lr = {lr}\nmodel.retrieval.m = {m}\ntrain.seed = {seed}");
            let c = RunConfig::parse(&src).unwrap();
            proptest::prop_assert_eq!(c.tabr.d, d);
            proptest::prop_assert_eq!(c.train.lr, lr);
            proptest::prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
