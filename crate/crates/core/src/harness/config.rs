//! Run configuration: a flat `key = value` file, `#` comments allowed,
//! unknown keys rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use numcore::Precision;

use crate::error::{Error, Result};
use crate::kb::HopMode;
use crate::memnet::AnswerScorer;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,

    pub word_dim: usize,
    pub det_hidden: usize,
    pub det_attention_hidden: usize,
    pub mem_dim: usize,
    pub mem_attention_hidden: usize,
    /// 0 selects the linear answer scorer.
    pub answer_hidden: usize,
    pub feat_dim: usize,
    pub objects: usize,
    pub max_question_len: usize,

    pub topk_sub: usize,
    pub topk_obj: usize,
    pub topk_rel: usize,
    pub hops: usize,
    pub hop_mode: HopMode,
    pub case_fold: bool,
    pub n_mem: usize,

    pub det_lr: f64,
    pub det_batch: usize,
    pub det_epochs: usize,
    pub mem_lr: f64,
    pub mem_batch: usize,
    pub mem_epochs: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub lambda_sub: f64,
    pub lambda_rel: f64,
    pub lambda_obj: f64,

    pub use_subject_clues: bool,
    pub use_object_clues: bool,
    pub relation_filter: bool,
    pub two_way_attention: bool,
    pub tie_embeddings: bool,
    pub eval_splits: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F64,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            word_dim: 300,
            det_hidden: 512,
            det_attention_hidden: 512,
            mem_dim: 128,
            mem_attention_hidden: 128,
            answer_hidden: 128,
            feat_dim: 2048,
            objects: 36,
            max_question_len: 20,
            topk_sub: 40,
            topk_obj: 40,
            topk_rel: 3,
            hops: 1,
            hop_mode: HopMode::Undirected,
            case_fold: true,
            n_mem: 96,
            det_lr: 1e-4,
            det_batch: 32,
            det_epochs: 10,
            mem_lr: 1e-3,
            mem_batch: 64,
            mem_epochs: 10,
            weight_decay: 1e-6,
            decoupled_weight_decay: true,
            lambda_sub: 1.0,
            lambda_rel: 1.0,
            lambda_obj: 1.0,
            use_subject_clues: true,
            use_object_clues: true,
            relation_filter: true,
            two_way_attention: true,
            tie_embeddings: false,
            eval_splits: vec!["test".to_string()],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse().map_err(|_| Error::config(format!("invalid precision `{v}`")))?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            "word_dim" => self.word_dim = parse(key, v)?,
            "det_hidden" => self.det_hidden = parse(key, v)?,
            "det_attention_hidden" => self.det_attention_hidden = parse(key, v)?,
            "mem_dim" => self.mem_dim = parse(key, v)?,
            "mem_attention_hidden" => self.mem_attention_hidden = parse(key, v)?,
            "answer_hidden" => self.answer_hidden = parse(key, v)?,
            "feat_dim" => self.feat_dim = parse(key, v)?,
            "objects" => self.objects = parse(key, v)?,
            "max_question_len" => self.max_question_len = parse(key, v)?,
            "topk_sub" => self.topk_sub = parse(key, v)?,
            "topk_obj" => self.topk_obj = parse(key, v)?,
            "topk_rel" => self.topk_rel = parse(key, v)?,
            "hops" => self.hops = parse(key, v)?,
            "hop_mode" => {
                self.hop_mode = match v {
                    "undirected" => HopMode::Undirected,
                    "directed" => HopMode::Directed,
                    _ => return Err(Error::config(format!("invalid hop_mode `{v}`"))),
                }
            }
            "case_fold" => self.case_fold = parse_bool(key, v)?,
            "n_mem" => self.n_mem = parse(key, v)?,
            "det_lr" => self.det_lr = parse(key, v)?,
            "det_batch" => self.det_batch = parse(key, v)?,
            "det_epochs" => self.det_epochs = parse(key, v)?,
            "mem_lr" => self.mem_lr = parse(key, v)?,
            "mem_batch" => self.mem_batch = parse(key, v)?,
            "mem_epochs" => self.mem_epochs = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "decoupled_weight_decay" => self.decoupled_weight_decay = parse_bool(key, v)?,
            "lambda_sub" => self.lambda_sub = parse(key, v)?,
            "lambda_rel" => self.lambda_rel = parse(key, v)?,
            "lambda_obj" => self.lambda_obj = parse(key, v)?,
            "use_subject_clues" => self.use_subject_clues = parse_bool(key, v)?,
            "use_object_clues" => self.use_object_clues = parse_bool(key, v)?,
            "relation_filter" => self.relation_filter = parse_bool(key, v)?,
            "two_way_attention" => self.two_way_attention = parse_bool(key, v)?,
            "tie_embeddings" => self.tie_embeddings = parse_bool(key, v)?,
            "eval_splits" => {
                self.eval_splits = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("word_dim", self.word_dim),
            ("det_hidden", self.det_hidden),
            ("det_attention_hidden", self.det_attention_hidden),
            ("mem_dim", self.mem_dim),
            ("mem_attention_hidden", self.mem_attention_hidden),
            ("feat_dim", self.feat_dim),
            ("objects", self.objects),
            ("max_question_len", self.max_question_len),
            ("topk_sub", self.topk_sub),
            ("topk_obj", self.topk_obj),
            ("topk_rel", self.topk_rel),
            ("n_mem", self.n_mem),
            ("det_batch", self.det_batch),
            ("mem_batch", self.mem_batch),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("`{k}` must be positive")));
        }
        if !self.mem_dim.is_multiple_of(2) {
            return Err(Error::config("`mem_dim` must be even (BiLSTM halves)"));
        }
        if !self.use_subject_clues && !self.use_object_clues {
            return Err(Error::config("at least one clue source must be enabled"));
        }
        for (k, v) in [("det_lr", self.det_lr), ("mem_lr", self.mem_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{k}` must be positive")));
            }
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_sub", self.lambda_sub),
            ("lambda_rel", self.lambda_rel),
            ("lambda_obj", self.lambda_obj),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{k}` must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn answer_scorer(&self) -> AnswerScorer {
        match self.answer_hidden {
            0 => AnswerScorer::Linear,
            n => AnswerScorer::Mlp(n),
        }
    }

    /// Every field as `key = value` lines, readable by [`RunConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put(
            "precision",
            match self.precision {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
        );
        put("data_dir", self.data_dir.display().to_string());
        put("run_dir", self.run_dir.display().to_string());
        put("word_dim", self.word_dim.to_string());
        put("det_hidden", self.det_hidden.to_string());
        put("det_attention_hidden", self.det_attention_hidden.to_string());
        put("mem_dim", self.mem_dim.to_string());
        put("mem_attention_hidden", self.mem_attention_hidden.to_string());
        put("answer_hidden", self.answer_hidden.to_string());
        put("feat_dim", self.feat_dim.to_string());
        put("objects", self.objects.to_string());
        put("max_question_len", self.max_question_len.to_string());
        put("topk_sub", self.topk_sub.to_string());
        put("topk_obj", self.topk_obj.to_string());
        put("topk_rel", self.topk_rel.to_string());
        put("hops", self.hops.to_string());
        put(
            "hop_mode",
            match self.hop_mode {
                HopMode::Undirected => "undirected".into(),
                HopMode::Directed => "directed".into(),
            },
        );
        put("case_fold", self.case_fold.to_string());
        put("n_mem", self.n_mem.to_string());
        put("det_lr", format!("{:e}", self.det_lr));
        put("det_batch", self.det_batch.to_string());
        put("det_epochs", self.det_epochs.to_string());
        put("mem_lr", format!("{:e}", self.mem_lr));
        put("mem_batch", self.mem_batch.to_string());
        put("mem_epochs", self.mem_epochs.to_string());
        put("weight_decay", format!("{:e}", self.weight_decay));
        put("decoupled_weight_decay", self.decoupled_weight_decay.to_string());
        put("lambda_sub", self.lambda_sub.to_string());
        put("lambda_rel", self.lambda_rel.to_string());
        put("lambda_obj", self.lambda_obj.to_string());
        put("use_subject_clues", self.use_subject_clues.to_string());
        put("use_object_clues", self.use_object_clues.to_string());
        put("relation_filter", self.relation_filter.to_string());
        put("two_way_attention", self.two_way_attention.to_string());
        put("tie_embeddings", self.tie_embeddings.to_string());
        put("eval_splits", self.eval_splits.join(","));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            seed: 7,
            det_lr: 3.5e-3,
            relation_filter: false,
            hop_mode: HopMode::Directed,
            eval_splits: vec!["test1".into(), "test2".into()],
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::parse_str("seed = 1\nbogus = 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(RunConfig::parse_str("n_mem = 0").is_err());
        assert!(RunConfig::parse_str("use_subject_clues = false\nuse_object_clues = false").is_err());
        assert!(RunConfig::parse_str("relation_filter = maybe").is_err());
        assert!(RunConfig::parse_str("# comment\n\nseed=3").is_ok());
    }
}
