//! Shared fixtures for integration tests: tiny untrained models and the
//! scripted workflow scenarios under `fixtures/`.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use coma::agents::{default_vocabulary, ScriptedProvider, TranscriptEntry};
use coma::orchestrator::{run_pipeline, Models, PipelineFailure, PipelineOutput, Providers, WorkflowConfig};
use coma::spamgen::{GenConfig, GenModel, HashEmbedder};
use coma::spamvq::{RvqConfig, RvqModel};
use serde::Deserialize;

pub const TEXT_DIM: usize = 16;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn tiny_models(seed: u64) -> (RvqModel, GenModel) {
    let rvq = RvqModel::new(
        RvqConfig {
            num_layers: 2,
            codes_per_book: 8,
            code_dim: 4,
            width: 8,
            ..RvqConfig::desk()
        },
        seed,
    )
    .unwrap();
    let gen = GenModel::new(
        GenConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 8,
            steps: 3,
            text_dim: TEXT_DIM,
            max_len: 64,
            codes: 8,
            quant_layers: 2,
            ..GenConfig::desk()
        },
        seed,
    )
    .unwrap();
    (rvq, gen)
}

#[derive(Debug, Deserialize)]
pub struct Scenario {
    pub prompt: String,
    pub k: usize,
    pub expect: serde_json::Value,
    pub transcript: Vec<TranscriptEntry>,
}

pub fn scenario_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(fixtures_dir().join("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

pub fn load_scenario(name: &str) -> Scenario {
    let text = std::fs::read_to_string(fixtures_dir().join("scenarios").join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn henry() -> (String, Vec<TranscriptEntry>) {
    let dir = fixtures_dir();
    let prompt = std::fs::read_to_string(dir.join("henry_prompt.txt")).unwrap();
    let t = serde_json::from_str(&std::fs::read_to_string(dir.join("henry.json")).unwrap()).unwrap();
    (prompt.trim().to_string(), t)
}

/// Runs `prompt` against a fresh replay of `transcript`.
pub fn run_scripted(
    prompt: &str,
    transcript: &[TranscriptEntry],
    cfg: &WorkflowConfig,
    models: &(RvqModel, GenModel),
) -> Result<(PipelineOutput, usize), PipelineFailure> {
    let llm = ScriptedProvider::new(transcript.to_vec());
    let embedder = HashEmbedder::new(TEXT_DIM);
    let vocab = default_vocabulary();
    let providers = Providers {
        llm: &llm,
        vlm: &llm,
        embedder: &embedder,
        vocabulary: &vocab,
    };
    let m = Models {
        rvq: &models.0,
        gen: &models.1,
    };
    run_pipeline(prompt, &providers, &m, cfg).map(|o| (o, llm.remaining()))
}

pub fn config(k: usize, review_dir: &Path) -> WorkflowConfig {
    WorkflowConfig {
        k,
        seed: 7,
        review_dir: review_dir.to_path_buf(),
        ..WorkflowConfig::default()
    }
}
