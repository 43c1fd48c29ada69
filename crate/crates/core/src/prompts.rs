//! Prompt templates with named slots.
//!
//! Defaults are compiled in from `templates/`. A directory of `<name>.txt`
//! files overrides them one by one, so prompts can change without a rebuild.
//! Rendering is strict: a slot the caller did not fill is an error.

use std::path::Path;

use minijinja::{Environment, UndefinedBehavior};
use serde::Serialize;

use crate::error::ConfigError;

macro_rules! defaults {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../templates/", $name, ".txt")))),*]
    };
}

pub const DEFAULT_TEMPLATES: &[(&str, &str)] = defaults!(
    "persona",
    "experience_fragment",
    "fic_exp_gen",
    "patient_info",
    "doctor_system",
    "doc_gen",
    "empath_gen",
    "patient_system",
    "pat_gen",
    "prompt_gen_symptom",
    "prompt_gen_experience",
    "is_topic_end",
    "trigger_exp",
    "parse_exp",
    "dup_detect",
    "tool_system",
);

#[derive(Debug, thiserror::Error)]
#[error("template `{name}`: {message}")]
pub struct PromptError {
    pub name: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    env: Environment<'static>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let mut env = Environment::new();
        env.set_undefined_behavior(UndefinedBehavior::Strict);
        for (name, source) in DEFAULT_TEMPLATES {
            env.add_template(name, source)
                .unwrap_or_else(|e| panic!("built-in template {name} is invalid: {e}"));
        }
        Self { env }
    }
}

impl PromptSet {
    /// Built-in templates overridden by any `<name>.txt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, ConfigError> {
        let mut set = PromptSet::default();
        let entries = std::fs::read_dir(dir).map_err(|source| ConfigError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut files: Vec<_> = entries.flatten().map(|e| e.path()).collect();
        files.sort();
        for path in files {
            if path.extension().is_none_or(|e| e != "txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if !DEFAULT_TEMPLATES.iter().any(|(n, _)| *n == stem) {
                return Err(ConfigError::invalid(&path, format!("unknown template name `{stem}`")));
            }
            let source = crate::error::read_config(&path)?;
            set.override_template(stem, source)
                .map_err(|e| ConfigError::invalid(&path, e.message))?;
        }
        Ok(set)
    }

    pub fn override_template(&mut self, name: &str, source: String) -> Result<(), PromptError> {
        self.env
            .add_template_owned(name.to_string(), source)
            .map_err(|e| PromptError {
                name: name.to_string(),
                message: e.to_string(),
            })
    }

    pub fn render<S: Serialize>(&self, name: &str, ctx: S) -> Result<String, PromptError> {
        let err = |e: minijinja::Error| PromptError {
            name: name.to_string(),
            message: e.to_string(),
        };
        let template = self.env.get_template(name).map_err(err)?;
        template.render(ctx).map_err(err)
    }
}
