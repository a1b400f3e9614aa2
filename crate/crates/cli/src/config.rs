//! Flat `key = value` run configuration with environment overrides.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use mmtg_core::data::SynthConfig;
use mmtg_core::decoder::GenerationConfig;
use mmtg_core::metrics::Disorder;
use mmtg_core::model::ModelConfig;
use mmtg_core::training::TrainConfig;
use mmtg_core::{Error, Result};

/// Prefix of environment variables that override file values.
pub const ENV_PREFIX: &str = "MMTG_";

/// Every setting a run needs. One root seed drives all randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub disorder: Disorder,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 7,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            disorder: Disorder::Rotate,
        };
        c.train.max_steps = Some(2000);
        c.sync();
        c
    }
}

/// Recognised keys, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "vocab_size",
    "embed_dim",
    "n_passages",
    "test_passages",
    "sentence_len",
    "n_concepts",
    "n_topics",
    "topic_words",
    "concepts_per_step",
    "noise_std",
    "hidden",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_sentence_len",
    "span_heads",
    "no_span_attention",
    "no_t_prompt",
    "no_image",
    "no_text",
    "sent_mul",
    "fusion_normalize",
    "no_cl",
    "no_neg",
    "lr",
    "batch_size",
    "epochs",
    "max_steps",
    "lambda_reg",
    "negatives_per_positive",
    "phase_boundaries",
    "top_k",
    "top_p",
    "temperature",
    "repetition_penalty",
    "samples_per_input",
    "max_len",
    "disorder",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Reads `path`, then applies `MMTG_<KEY>` environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Parses config text with `#` comments and blank lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("expected key = value, found {line:?}"),
                })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies every `MMTG_<KEY>` pair in `vars`. Unknown suffixes are errors.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), value.trim())
                    .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            }
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (s, m, t, g) = (&mut self.synth, &mut self.model, &mut self.train, &mut self.generation);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "steps" => s.steps = parse(key, v)?,
            "vocab_size" => s.vocab_size = parse(key, v)?,
            "embed_dim" => s.embed_dim = parse(key, v)?,
            "n_passages" => s.n_passages = parse(key, v)?,
            "test_passages" => s.test_passages = parse(key, v)?,
            "sentence_len" => s.sentence_len = parse(key, v)?,
            "n_concepts" => s.n_concepts = parse(key, v)?,
            "n_topics" => s.n_topics = parse(key, v)?,
            "topic_words" => s.topic_words = parse(key, v)?,
            "concepts_per_step" => s.concepts_per_step = parse(key, v)?,
            "noise_std" => s.noise_std = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "max_sentence_len" => m.max_sentence_len = parse(key, v)?,
            "span_heads" => m.span_heads = parse(key, v)?,
            "no_span_attention" => m.ablations.no_span_attention = parse_bool(key, v)?,
            "no_t_prompt" => m.ablations.no_t_prompt = parse_bool(key, v)?,
            "no_image" => m.ablations.no_image = parse_bool(key, v)?,
            "no_text" => m.ablations.no_text = parse_bool(key, v)?,
            "sent_mul" => m.ablations.sent_mul = parse_bool(key, v)?,
            "fusion_normalize" => m.ablations.fusion_normalize = parse_bool(key, v)?,
            "no_cl" => t.curriculum_enabled = !parse_bool(key, v)?,
            "no_neg" => t.neg_enabled = !parse_bool(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "max_steps" => t.max_steps = parse_optional(key, v)?,
            "lambda_reg" => t.lambda_reg = parse(key, v)?,
            "negatives_per_positive" => t.negatives_per_positive = parse(key, v)?,
            "phase_boundaries" => {
                t.phase_boundaries = if v == "auto" {
                    None
                } else {
                    let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                    match parts[..] {
                        [a, b] => Some([a, b]),
                        _ => return Err(Error::Config(format!("phase_boundaries needs two epochs, got {v:?}"))),
                    }
                }
            }
            "top_k" => g.top_k = parse(key, v)?,
            "top_p" => g.top_p = parse(key, v)?,
            "temperature" => g.temperature = parse(key, v)?,
            "repetition_penalty" => g.repetition_penalty = parse(key, v)?,
            "samples_per_input" => g.samples_per_input = parse(key, v)?,
            "max_len" => g.max_len = parse(key, v)?,
            "disorder" => {
                self.disorder = match v {
                    "rotate" => Disorder::Rotate,
                    "shuffle" => Disorder::Shuffle { seed: self.seed },
                    _ => return Err(Error::Config(format!("disorder must be rotate or shuffle, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Copies shared values into every sub-config.
    fn sync(&mut self) {
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.generation.seed = self.seed;
        self.model.steps = self.synth.steps;
        self.model.embed_dim = self.synth.embed_dim;
        self.model.vocab_size = self.synth.vocab_size;
        if let Disorder::Shuffle { seed } = &mut self.disorder {
            *seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.synth.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.generation.validate().map_err(wrap)?;
        if self.synth.sentence_len > self.model.max_sentence_len {
            return Err(Error::Config(format!(
                "sentence_len {} exceeds max_sentence_len {}",
                self.synth.sentence_len, self.model.max_sentence_len
            )));
        }
        if self.generation.max_len > self.model.max_sentence_len {
            return Err(Error::Config(format!(
                "max_len {} exceeds max_sentence_len {}",
                self.generation.max_len, self.model.max_sentence_len
            )));
        }
        Ok(())
    }

    /// Training settings with the step budget spread over the phases when
    /// `max_steps` is set and no explicit boundaries were given.
    pub fn train_config(&self, samples: usize) -> TrainConfig {
        match (self.train.max_steps, self.train.phase_boundaries) {
            (Some(steps), None) => self.train.clone().with_step_budget(steps, samples),
            _ => self.train.clone(),
        }
    }

    /// Config text that [`RunConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let (s, m, t, g) = (&self.synth, &self.model, &self.train, &self.generation);
        let a = &m.ablations;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("seed", self.seed.to_string());
        put("steps", s.steps.to_string());
        put("vocab_size", s.vocab_size.to_string());
        put("embed_dim", s.embed_dim.to_string());
        put("n_passages", s.n_passages.to_string());
        put("test_passages", s.test_passages.to_string());
        put("sentence_len", s.sentence_len.to_string());
        put("n_concepts", s.n_concepts.to_string());
        put("n_topics", s.n_topics.to_string());
        put("topic_words", s.topic_words.to_string());
        put("concepts_per_step", s.concepts_per_step.to_string());
        put("noise_std", s.noise_std.to_string());
        put("hidden", m.hidden.to_string());
        put("d_model", m.d_model.to_string());
        put("n_layers", m.n_layers.to_string());
        put("n_heads", m.n_heads.to_string());
        put("d_ff", m.d_ff.to_string());
        put("max_sentence_len", m.max_sentence_len.to_string());
        put("span_heads", m.span_heads.to_string());
        put("no_span_attention", a.no_span_attention.to_string());
        put("no_t_prompt", a.no_t_prompt.to_string());
        put("no_image", a.no_image.to_string());
        put("no_text", a.no_text.to_string());
        put("sent_mul", a.sent_mul.to_string());
        put("fusion_normalize", a.fusion_normalize.to_string());
        put("no_cl", (!t.curriculum_enabled).to_string());
        put("no_neg", (!t.neg_enabled).to_string());
        put("lr", t.lr.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("max_steps", t.max_steps.map_or("none".into(), |v| v.to_string()));
        put("lambda_reg", t.lambda_reg.to_string());
        put("negatives_per_positive", t.negatives_per_positive.to_string());
        put(
            "phase_boundaries",
            t.phase_boundaries.map_or("auto".into(), |[a, b]| format!("{a},{b}")),
        );
        put("top_k", g.top_k.to_string());
        put("top_p", g.top_p.to_string());
        put("temperature", g.temperature.to_string());
        put("repetition_penalty", g.repetition_penalty.to_string());
        put("samples_per_input", g.samples_per_input.to_string());
        put("max_len", g.max_len.to_string());
        put(
            "disorder",
            match self.disorder {
                Disorder::Rotate => "rotate".into(),
                Disorder::Shuffle { .. } => "shuffle".into(),
            },
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_and_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.set("no_cl", "true").unwrap();
        cfg.set("phase_boundaries", "2,4").unwrap();
        cfg.set("disorder", "shuffle").unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        let written: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(written, KEYS);
    }

    #[test]
    fn unknown_keys_and_bad_values_report_their_line() {
        assert!(matches!(RunConfig::parse("seed = 3\nbogus = 1"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("lr = fast"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("no_image = maybe"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn environment_overrides_file_values() {
        let mut cfg = RunConfig::parse("seed = 3\nlr = 0.01\n").unwrap();
        cfg.apply_env([("MMTG_LR".to_string(), "0.5".to_string()), ("HOME".to_string(), "/x".to_string())])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.model.seed, 3);
        assert!(cfg.apply_env([("MMTG_NOPE".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn root_seed_reaches_every_component() {
        let cfg = RunConfig::parse("seed = 99").unwrap();
        assert_eq!(
            [cfg.synth.seed, cfg.model.seed, cfg.train.seed, cfg.generation.seed],
            [99; 4]
        );
    }

    #[test]
    fn inconsistent_settings_are_config_errors() {
        assert!(matches!(RunConfig::parse("max_len = 40"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("n_heads = 3"), Err(Error::Config(_))));
    }
}
