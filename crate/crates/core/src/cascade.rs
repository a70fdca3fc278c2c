//! Prompting strategies and cascade execution.
//!
//! A strategy is an ordered list of stage templates. Stage 1's prompt is its
//! instantiated instruction; every later stage prompt is the previous prompt,
//! a newline, `Output: ` plus the previous response, a newline, then the
//! stage's own instruction. Each stage is an independent single-turn request.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Field, PersonaEntry};
use crate::llm::{ChatBackend, ChatRequest, FinishReason, LlmError, RunConfig, TokenUsage, DEFAULT_SYSTEM_MESSAGE};

pub const ECN_STAGE_1: &str = "Imagine you are {demographics}. Describe your detailed daily experiences, struggles, and triumphs, highlighting both emotional and practical challenges.";
pub const ECN_STAGE_2: &str = "What universal human emotions, such as hope, frustration, or joy, might someone in this situation feel? Provide examples and reasons for these emotions.";
pub const ECN_STAGE_3: &str = "How might these experiences and emotions shape this person's worldview, their biases, and their specific needs for support?";
pub const ECN_STAGE_4: &str = "Using all the insights gained above, craft an empathetic, reflective, and constructive response to the original query: {query}. Ensure you address emotional acknowledgment, perspective-taking, and offer actionable advice. Focus on:\n1. Acknowledging the user's emotions.\n2. Deepening understanding of their perspective.\n3. Providing specific, actionable advice.";

pub const BASIC_EMPATHY_INSTRUCTION: &str = "Respond empathetically to the following";
pub const DIVERSITY_AWARE_INSTRUCTION: &str = "Consider diverse perspectives when responding";

/// Entry context shown to every single-stage baseline.
pub const CONTEXT_BLOCK: &str = "Demographics: {demographics}\nDifficulties: {difficulties}\nQuery: {query}";

/// Line prefix introducing the previous stage's response.
pub const OUTPUT_PREFIX: &str = "Output: ";

pub const STANDARD: &str = "standard";
pub const BASIC_EMPATHY: &str = "basic_empathy";
pub const DIVERSITY_AWARE: &str = "diversity_aware";
pub const ECN: &str = "ecn";

/// Built-in strategy names in report order.
pub const BUILTIN_STRATEGIES: [&str; 4] = [STANDARD, BASIC_EMPATHY, DIVERSITY_AWARE, ECN];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CascadeError {
    #[error("unknown strategy `{0}` (built-ins: standard, basic_empathy, diversity_aware, ecn)")]
    UnknownStrategy(String),
    #[error("stage `{stage}`: {message}")]
    InvalidTemplate { stage: String, message: String },
    #[error("strategy `{0}` has no stages")]
    NoStages(String),
    #[error("stage index {index} out of range 1..={stages}")]
    StageIndex { index: usize, stages: usize },
    #[error("stage {index} needs {expected} prior transcripts, got {got}")]
    PriorMismatch { index: usize, expected: usize, got: usize },
    #[error("unresolved placeholder `{{{0}}}`")]
    UnresolvedPlaceholder(String),
    #[error("strategy file: {0}")]
    StrategyFile(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTemplate {
    pub name: String,
    pub instruction: String,
}

enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

/// Splits a template into literal text and `{name}` placeholders, where a
/// name is one or more ASCII alphanumerics or underscores. Any other brace
/// is literal.
fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
            .count();
        if name_len > 0 && after.as_bytes().get(name_len) == Some(&b'}') {
            if open > 0 {
                out.push(Segment::Text(&rest[..open]));
            }
            out.push(Segment::Placeholder(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            out.push(Segment::Text(&rest[..=open]));
            rest = after;
        }
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

fn placeholder_field(name: &str) -> Option<Field> {
    Field::ALL.into_iter().find(|f| f.name() == name)
}

impl StageTemplate {
    pub fn new(name: impl Into<String>, instruction: impl Into<String>) -> Result<Self, CascadeError> {
        let t = Self {
            name: name.into(),
            instruction: instruction.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.instruction.trim().is_empty() {
            return Err(CascadeError::InvalidTemplate {
                stage: self.name.clone(),
                message: "instruction is empty".into(),
            });
        }
        for seg in segments(&self.instruction) {
            if let Segment::Placeholder(p) = seg {
                if placeholder_field(p).is_none() {
                    return Err(CascadeError::InvalidTemplate {
                        stage: self.name.clone(),
                        message: format!(
                            "unknown placeholder `{{{p}}}` (allowed: {{demographics}}, {{difficulties}}, {{query}})"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Substitutes the entry's fields in a single pass; substituted text is
    /// never rescanned, so braces inside entry fields are left alone.
    pub fn instantiate(&self, entry: &PersonaEntry) -> Result<String, CascadeError> {
        let mut out = String::with_capacity(self.instruction.len() + 64);
        for seg in segments(&self.instruction) {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Placeholder(p) => {
                    let field =
                        placeholder_field(p).ok_or_else(|| CascadeError::UnresolvedPlaceholder(p.to_string()))?;
                    out.push_str(entry.field(field));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub strategy_name: String,
    pub stages: Vec<StageTemplate>,
    #[serde(default = "default_system_message")]
    pub system_message: String,
}

fn default_system_message() -> String {
    DEFAULT_SYSTEM_MESSAGE.to_string()
}

impl CascadeSpec {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.stages.is_empty() {
            return Err(CascadeError::NoStages(self.strategy_name.clone()));
        }
        self.stages.iter().try_for_each(StageTemplate::validate)
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// SHA-256 of the canonical JSON form; recorded in run manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn baseline(name: &str, instruction: Option<&str>) -> CascadeSpec {
    let template = match instruction {
        Some(i) => format!("{i}:\n{CONTEXT_BLOCK}"),
        None => CONTEXT_BLOCK.to_string(),
    };
    CascadeSpec {
        strategy_name: name.to_string(),
        stages: vec![StageTemplate {
            name: "response".into(),
            instruction: template,
        }],
        system_message: default_system_message(),
    }
}

pub fn builtin_strategy(name: &str) -> Result<CascadeSpec, CascadeError> {
    let spec = match name {
        STANDARD => baseline(STANDARD, None),
        BASIC_EMPATHY => baseline(BASIC_EMPATHY, Some(BASIC_EMPATHY_INSTRUCTION)),
        DIVERSITY_AWARE => baseline(DIVERSITY_AWARE, Some(DIVERSITY_AWARE_INSTRUCTION)),
        ECN => CascadeSpec {
            strategy_name: ECN.into(),
            stages: [
                ("perspective_adoption", ECN_STAGE_1),
                ("emotional_resonance", ECN_STAGE_2),
                ("reflective_understanding", ECN_STAGE_3),
                ("integrative_synthesis", ECN_STAGE_4),
            ]
            .into_iter()
            .map(|(n, i)| StageTemplate {
                name: n.into(),
                instruction: i.into(),
            })
            .collect(),
            system_message: default_system_message(),
        },
        other => return Err(CascadeError::UnknownStrategy(other.to_string())),
    };
    Ok(spec)
}

/// Human-readable row label for reports.
pub fn display_name(strategy: &str) -> String {
    match strategy {
        STANDARD => "Standard Prompt".into(),
        BASIC_EMPATHY => "Basic Empathy Prompt".into(),
        DIVERSITY_AWARE => "Diversity-Aware Prompt".into(),
        ECN => "ECN".into(),
        other => other.to_string(),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StrategyFile {
    List(Vec<CascadeSpec>),
    Wrapped { strategies: Vec<CascadeSpec> },
}

/// Parses a JSON strategy file: either a list of specs or `{"strategies": [...]}`.
pub fn parse_strategies(json: &str) -> Result<Vec<CascadeSpec>, CascadeError> {
    let file: StrategyFile = serde_json::from_str(json).map_err(|e| CascadeError::StrategyFile(e.to_string()))?;
    let specs = match file {
        StrategyFile::List(s) | StrategyFile::Wrapped { strategies: s } => s,
    };
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn load_strategy_file(path: &Path) -> Result<Vec<CascadeSpec>, CascadeError> {
    let text = fs::read_to_string(path).map_err(|e| CascadeError::StrategyFile(format!("{}: {e}", path.display())))?;
    parse_strategies(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTranscript {
    /// 1-based.
    pub stage_index: usize,
    pub prompt: String,
    pub response: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub token_usage: Option<TokenUsage>,
    #[serde(default = "one")]
    pub attempts: u32,
    #[serde(default)]
    pub latency_ms: f64,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub entry_id: String,
    pub strategy_name: String,
    pub model_name: String,
    pub run_index: u32,
    pub transcripts: Vec<StageTranscript>,
    pub final_response: String,
}

/// Renders the prompt for `stage_index` (1-based) given the transcripts of
/// all earlier stages.
pub fn render_stage_prompt(
    spec: &CascadeSpec,
    stage_index: usize,
    entry: &PersonaEntry,
    prior: &[StageTranscript],
) -> Result<String, CascadeError> {
    if stage_index == 0 || stage_index > spec.stage_count() {
        return Err(CascadeError::StageIndex {
            index: stage_index,
            stages: spec.stage_count(),
        });
    }
    if prior.len() != stage_index - 1 {
        return Err(CascadeError::PriorMismatch {
            index: stage_index,
            expected: stage_index - 1,
            got: prior.len(),
        });
    }
    let instruction = spec.stages[stage_index - 1].instantiate(entry)?;
    Ok(match prior.last() {
        None => instruction,
        Some(prev) => {
            let mut p = String::with_capacity(prev.prompt.len() + prev.response.len() + instruction.len() + 10);
            p.push_str(&prev.prompt);
            p.push('\n');
            p.push_str(OUTPUT_PREFIX);
            p.push_str(&prev.response);
            p.push('\n');
            p.push_str(&instruction);
            p
        }
    })
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RunCascadeError {
    #[error(transparent)]
    Render(#[from] CascadeError),
    /// A stage's request failed; earlier transcripts are kept in `completed`.
    #[error("stage {stage_index} failed: {source}")]
    Stage {
        stage_index: usize,
        source: LlmError,
        completed: Vec<StageTranscript>,
    },
}

impl RunCascadeError {
    pub fn stage_index(&self) -> Option<usize> {
        match self {
            RunCascadeError::Stage { stage_index, .. } => Some(*stage_index),
            RunCascadeError::Render(_) => None,
        }
    }

    pub fn completed(&self) -> &[StageTranscript] {
        match self {
            RunCascadeError::Stage { completed, .. } => completed,
            RunCascadeError::Render(_) => &[],
        }
    }
}

/// Runs every stage in order, one request per stage.
pub fn run_cascade(
    spec: &CascadeSpec,
    entry: &PersonaEntry,
    client: &dyn ChatBackend,
    config: &RunConfig,
    run_index: u32,
) -> Result<CascadeResult, RunCascadeError> {
    spec.validate()?;
    let mut transcripts: Vec<StageTranscript> = Vec::with_capacity(spec.stage_count());
    for stage_index in 1..=spec.stage_count() {
        let prompt = render_stage_prompt(spec, stage_index, entry, &transcripts)?;
        let request = ChatRequest::new(config, &spec.system_message, prompt);
        let response = match client.complete(&request) {
            Ok(r) => r,
            Err(source) => {
                return Err(RunCascadeError::Stage {
                    stage_index,
                    source,
                    completed: transcripts,
                })
            }
        };
        transcripts.push(StageTranscript {
            stage_index,
            prompt: request.user_message,
            response: response.text,
            finish_reason: response.finish_reason,
            token_usage: response.usage,
            attempts: response.attempts,
            latency_ms: response.latency.as_secs_f64() * 1e3,
        });
    }
    let final_response = transcripts.last().map(|t| t.response.clone()).unwrap_or_default();
    Ok(CascadeResult {
        entry_id: entry.id.clone(),
        strategy_name: spec.strategy_name.clone(),
        model_name: config.model_name.clone(),
        run_index,
        transcripts,
        final_response,
    })
}
