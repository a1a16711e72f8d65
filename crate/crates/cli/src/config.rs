use std::path::Path;

use dreamstory_core::benchmark::BenchConfig;
use dreamstory_core::director::DirectorConfig;
use dreamstory_core::pipeline::RenderConfig;
use dreamstory_core::{io, Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::{BenchBuildArgs, LlmArgs, RenderArgs};

pub const DEFAULT_LLM: &str = "mock";
pub const DEFAULT_BACKEND: &str = "mock";
pub const DEFAULT_METRICS: &str = "aes,clip_t,ds,dc_ds";

/// Contents of a `--config` file. Every table is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub llm: Option<String>,
    pub backend: Option<String>,
    pub workers: Option<usize>,
    pub metrics: Option<String>,
    pub render: RenderConfig,
    pub director: DirectorConfig,
    pub bench: BenchConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = io::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Settings after applying flags over the file over the defaults. This is
/// what gets stored in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub llm: String,
    pub backend: String,
    pub workers: usize,
    pub render: RenderConfig,
    pub director: DirectorConfig,
}

pub fn merge_render(file: &FileConfig, args: &RenderArgs) -> RenderConfig {
    let mut r = file.render.clone();
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                r.$field = v;
            }
        )*};
    }
    set!(seed, steps, guidance, width, height, lambda, dropout, mmsa_layers, mmca_layers, mask_refine);
    if let Some(style) = &args.style {
        r.style_suffix = style.clone();
    }
    if args.disable_mmsa {
        r.mmsa = false;
    }
    if args.disable_mmca {
        r.mmca = false;
    }
    if args.disable_rewrite {
        r.rewrite = false;
    }
    r
}

pub fn merge_director(file: &FileConfig, scenes: Option<usize>, workers: Option<usize>) -> DirectorConfig {
    let mut d = file.director.clone();
    if scenes.is_some() {
        d.n_scenes = scenes;
    }
    if let Some(w) = workers.or(file.workers) {
        d.workers = w;
    }
    d
}

pub fn merge_bench(file: &FileConfig, args: &BenchBuildArgs) -> BenchConfig {
    let mut b = file.bench.clone();
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                b.$field = v;
            }
        )*};
    }
    set!(pool_size, cases_per_group, groups, word_limit, seed);
    b
}

pub fn llm_spec(file: &FileConfig, args: &LlmArgs) -> String {
    args.llm.clone().or_else(|| file.llm.clone()).unwrap_or_else(|| DEFAULT_LLM.into())
}

pub fn effective(file: &FileConfig, render: &RenderArgs, llm: &str, scenes: Option<usize>) -> Effective {
    let workers = render.workers.or(file.workers).unwrap_or(1);
    Effective {
        llm: llm.to_string(),
        backend: render
            .backend
            .clone()
            .or_else(|| file.backend.clone())
            .unwrap_or_else(|| DEFAULT_BACKEND.into()),
        workers,
        render: merge_render(file, render),
        director: merge_director(file, scenes, Some(workers)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::Cli;
    use clap::Parser;

    fn render_args(extra: &[&str]) -> RenderArgs {
        let mut argv = vec!["dreamstory", "run", "--plan", "p.json", "--out", "o"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            crate::args::Command::Run(r) => r.render,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("workers = 3\n[render]\nsteps = 7\nlambda = 0.5\n").unwrap();
        let e = effective(&file, &render_args(&["--lambda", "0.2"]), "mock", None);
        assert_eq!(e.render.steps, 7);
        assert_eq!(e.render.lambda, 0.2);
        assert_eq!(e.render.guidance, 7.0);
        assert_eq!(e.workers, 3);
        assert_eq!(e.director.workers, 3);
    }

    #[test]
    fn ablation_flags_switch_modules_off() {
        let file = FileConfig::default();
        let r = merge_render(&file, &render_args(&["--disable-mmsa", "--disable-rewrite"]));
        assert!(!r.mmsa && r.mmca && !r.rewrite);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[render]\nlamda = 0.5\n").is_err());
        assert!(toml::from_str::<FileConfig>("colour = 1\n").is_err());
    }
}
