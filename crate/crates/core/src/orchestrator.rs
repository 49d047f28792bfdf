//! End-to-end agent workflow: rewrite, segment, then per segment decompose,
//! generate, edit, review/correct and map a trajectory, and finally blend.
//! Every agent action is recorded as a trace event; [`check_trace`] accepts
//! exactly the event sequences the workflow may produce.

use std::fmt;
use std::hash::Hasher;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, parse_base_motion, parse_bodypart_lines, parse_correction, parse_local_edits, parse_segment_attributes,
    parse_steps, render_for_review, render_template, AgentError, BodyPartLines, ChatMessage, ChatProvider,
    ChatRequest, CorrectionInstruction, PlanSegment, Role,
};
use crate::editops::{blend, edit_bodypart, EditError};
use crate::motiondata::{mean_root_speed, MotionSequence, Part};
use crate::spamgen::{GenError, GenModel, TextBundle, TextEmbedder};
use crate::spamvq::{RvqModel, TokenGrid, VqError};
use crate::trajedit::{
    apply_trajectory_with, derive_profile, extract_code_block, parse_curve_spec, resample_uniform, sample_curve,
    CurveSpec, TrajError, TrajectoryProfile, DEFAULT_SAMPLES,
};

/// Longest clip the generator is asked for, in frames.
pub const FRAME_CAP: usize = 196;

/// Appended to the conversation when a reply does not parse.
pub const REASK_MESSAGE: &str = "Your reply did not follow the required output format. Answer again and follow the output format exactly.";

#[derive(Debug, Error)]
pub enum OrchError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error("invalid workflow config: {0}")]
    Config(String),
    #[error("trace I/O on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug)]
pub struct PipelineFailure {
    pub error: OrchError,
    pub trace: WorkflowTrace,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} trace events)", self.error, self.trace.events.len())
    }
}

impl std::error::Error for PipelineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkflowConfig {
    /// Maximum self-correction rounds per segment.
    pub k: usize,
    pub fps: f32,
    pub enable_trajectory: bool,
    pub n_trans: usize,
    pub n_ctx: usize,
    /// Loosening ratio for the parts not being edited.
    pub rho: f64,
    pub seed: u64,
    /// Used when the planner gives no duration.
    pub default_duration_s: f64,
    pub frame_cap: usize,
    /// Worker threads for independent segments; 1 runs them in order.
    pub jobs: usize,
    /// Where review artifacts are written.
    pub review_dir: PathBuf,
    /// Also rescale root planar velocity to the trajectory speed.
    pub overwrite_speed: bool,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            k: 2,
            fps: 20.0,
            enable_trajectory: true,
            n_trans: 4,
            n_ctx: 4,
            rho: 0.15,
            seed: 0,
            default_duration_s: 4.0,
            frame_cap: FRAME_CAP,
            jobs: 1,
            review_dir: PathBuf::from("review"),
            overwrite_speed: false,
        }
    }
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<(), OrchError> {
        let bad = |m: &str| Err(OrchError::Config(m.into()));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if !(self.default_duration_s.is_finite() && self.default_duration_s > 0.0) {
            return bad("default_duration_s must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if self.frame_cap == 0 || self.jobs == 0 {
            return bad("frame_cap and jobs must be positive");
        }
        Ok(())
    }
}

/// Frame count for a duration: `round(seconds * fps)` clamped to
/// `[downscale, cap]`.
pub fn duration_to_frames(seconds: f64, fps: f32, cap: usize, downscale: usize) -> usize {
    let f = (seconds * fps as f64).round();
    let f = if f.is_finite() && f > 0.0 { f as usize } else { 0 };
    f.clamp(downscale, cap.max(downscale))
}

// Trace -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    TaskPlanner,
    MotionGenerator,
    MotionReviewer,
    TrajectoryEditor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Rewrite,
    Segment,
    Decompose,
    Generate,
    Edit,
    Render,
    Caption,
    Instruct,
    TrajGenerate,
    TrajMap,
    Blend,
}

impl Op {
    pub fn agent(self) -> AgentKind {
        match self {
            Op::Rewrite | Op::Segment | Op::Decompose => AgentKind::TaskPlanner,
            Op::Generate | Op::Edit | Op::Blend => AgentKind::MotionGenerator,
            Op::Render | Op::Caption | Op::Instruct => AgentKind::MotionReviewer,
            Op::TrajGenerate | Op::TrajMap => AgentKind::TrajectoryEditor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub agent: AgentKind,
    pub op: Op,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment: Option<usize>,
    /// Correction round, starting at 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    pub input_digest: String,
    pub output_digest: String,
    /// Provider calls made, re-asks and retries included.
    pub attempts: u32,
    /// Op-specific count: segments for Segment and Blend, non-empty local
    /// edits for Decompose, instruction fields for Instruct, parts for Edit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Op-specific marker: `traj` on a Decompose whose segment has a
    /// trajectory, `local`/`correction` on Edit, `fallback` on Rewrite.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub events: Vec<TraceEvent>,
}

impl WorkflowTrace {
    fn push(&mut self, mut e: TraceEvent) {
        e.seq = self.events.len();
        self.events.push(e);
    }

    pub fn ops(&self) -> Vec<Op> {
        self.events.iter().map(|e| e.op).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn write(&self, path: &Path) -> Result<(), OrchError> {
        let io = |e: std::io::Error| OrchError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }
}

fn event(op: Op, segment: Option<usize>, round: Option<usize>) -> TraceEvent {
    TraceEvent {
        seq: 0,
        agent: op.agent(),
        op,
        segment,
        round,
        input_digest: String::new(),
        output_digest: String::new(),
        attempts: 0,
        count: None,
        note: String::new(),
    }
}

/// 64-bit FNV-1a content hash as 16 hex digits.
pub fn digest(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

fn digest_parts(parts: &[&[u8]]) -> String {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(&(p.len() as u64).to_le_bytes());
        h.write(p);
    }
    format!("{:016x}", h.finish())
}

pub fn grid_digest(g: &TokenGrid) -> String {
    let mut bytes = Vec::with_capacity(g.data.len() * 4 + 24);
    for v in [g.layers, g.n, g.k] {
        bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for t in &g.data {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    digest(&bytes)
}

pub fn motion_digest(m: &MotionSequence) -> String {
    let bytes: Vec<u8> = m.data().iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
    digest(&bytes)
}

/// Independent seed for a tagged sub-task of a run.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(base);
    for t in tags {
        h.write_u64(*t);
    }
    h.finish()
}

const TAG_GENERATE: u64 = 1;
const TAG_LOCAL_EDIT: u64 = 2;
const TAG_CORRECTION: u64 = 3;
const TAG_BLEND: u64 = 4;

// Checker -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum St {
    Start,
    Rewritten,
    /// Waiting for the Decompose of segment `i`.
    SegStart { i: usize },
    Decomposed { i: usize, edits: bool, traj: bool },
    /// Base generated; the local edit must follow.
    AwaitLocalEdit { i: usize, traj: bool },
    /// Base generated (and locally edited if needed); review round `k` may
    /// start.
    Review { i: usize, k: usize, traj: bool },
    Rendered { i: usize, k: usize, traj: bool },
    Captioned { i: usize, k: usize, traj: bool },
    /// Instruction of round `k` was non-empty; an Edit must follow.
    Instructed { i: usize, k: usize, traj: bool },
    /// Correction loop finished for segment `i`.
    LoopDone { i: usize, traj: bool },
    TrajPlanned { i: usize },
    SegDone { i: usize },
    Blended,
}

/// Accepts exactly the traces of the workflow with segment count announced
/// by the Segment event and at most `k_max` review rounds per segment:
///
/// `Rewrite Segment(N) (Decompose Generate Edit? (Render Caption Instruct Edit?)* (TrajGenerate TrajMap)?){N} Blend(N)`
///
/// with a local Edit exactly when Decompose reported edits, a correction
/// Edit exactly after a non-empty Instruct, the loop stopping at the first
/// empty Instruct or after `k_max` rounds, and trajectory ops exactly when
/// Decompose reported a trajectory.
pub fn check_trace(trace: &WorkflowTrace, k_max: usize) -> Result<(), String> {
    let mut n = 0usize;
    let mut st = St::Start;
    for e in &trace.events {
        let fail = |why: &str| Err(format!("event {} ({:?}): {why} in state {st:?}", e.seq, e.op));
        if e.agent != e.op.agent() {
            return fail("wrong agent for op");
        }
        let seg_is = |i: usize| e.segment == Some(i);
        // Review round `k` is pending until the cap is reached.
        let loop_open = |k: usize| k <= k_max;
        st = match (st, e.op) {
            (St::Start, Op::Rewrite) => St::Rewritten,
            (St::Rewritten, Op::Segment) => match e.count {
                Some(c) if c > 0 => {
                    n = c;
                    St::SegStart { i: 0 }
                }
                _ => return fail("Segment must report a positive segment count"),
            },
            (St::SegStart { i }, Op::Decompose) if seg_is(i) => St::Decomposed {
                i,
                edits: e.count.unwrap_or(0) > 0,
                traj: e.note == "traj",
            },
            (St::Decomposed { i, edits, traj }, Op::Generate) if seg_is(i) => {
                if edits {
                    St::AwaitLocalEdit { i, traj }
                } else {
                    St::Review { i, k: 1, traj }
                }
            }
            (St::AwaitLocalEdit { i, traj }, Op::Edit) if seg_is(i) && e.note == "local" && e.round.is_none() => {
                St::Review { i, k: 1, traj }
            }
            (St::Review { i, k, traj }, Op::Render) if seg_is(i) && loop_open(k) && e.round == Some(k) => {
                St::Rendered { i, k, traj }
            }
            (St::Rendered { i, k, traj }, Op::Caption) if seg_is(i) && e.round == Some(k) => St::Captioned { i, k, traj },
            (St::Captioned { i, k, traj }, Op::Instruct) if seg_is(i) && e.round == Some(k) => {
                if e.count.unwrap_or(0) == 0 {
                    St::LoopDone { i, traj }
                } else {
                    St::Instructed { i, k, traj }
                }
            }
            (St::Instructed { i, k, traj }, Op::Edit) if seg_is(i) && e.round == Some(k) && e.note == "correction" => {
                if loop_open(k + 1) {
                    St::Review { i, k: k + 1, traj }
                } else {
                    St::LoopDone { i, traj }
                }
            }
            (St::Review { i, k, traj: true }, Op::TrajGenerate) if seg_is(i) && !loop_open(k) => St::TrajPlanned { i },
            (St::LoopDone { i, traj: true }, Op::TrajGenerate) if seg_is(i) => St::TrajPlanned { i },
            (St::TrajPlanned { i }, Op::TrajMap) if seg_is(i) => St::SegDone { i },
            (St::Review { i, k, traj: false }, Op::Decompose | Op::Blend) if !loop_open(k) => {
                segment_exit(i, n, e).map_err(|w| format!("event {} ({:?}): {w}", e.seq, e.op))?
            }
            (St::LoopDone { i, traj: false } | St::SegDone { i }, Op::Decompose | Op::Blend) => {
                segment_exit(i, n, e).map_err(|w| format!("event {} ({:?}): {w}", e.seq, e.op))?
            }
            _ => return fail("unexpected event"),
        };
    }
    if st != St::Blended {
        return Err(format!("trace ends in state {st:?}, expected a final Blend"));
    }
    Ok(())
}

/// Leaving segment `i`: the next segment's Decompose, or the final Blend.
fn segment_exit(i: usize, n: usize, e: &TraceEvent) -> Result<St, String> {
    match e.op {
        Op::Decompose if i + 1 < n && e.segment == Some(i + 1) => Ok(St::Decomposed {
            i: i + 1,
            edits: e.count.unwrap_or(0) > 0,
            traj: e.note == "traj",
        }),
        Op::Blend if i + 1 == n && e.count == Some(n) => Ok(St::Blended),
        _ => Err(format!("segment {i} of {n} cannot be followed by this event")),
    }
}

// Pipeline ----------------------------------------------------------------

pub struct Providers<'a> {
    pub llm: &'a dyn ChatProvider,
    /// Captioning model; receives the review artifact path as text.
    pub vlm: &'a dyn ChatProvider,
    pub embedder: &'a dyn TextEmbedder,
    pub vocabulary: &'a [String],
}

pub struct Models<'a> {
    pub rvq: &'a RvqModel,
    pub gen: &'a GenModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentState {
    pub index: usize,
    pub plan: PlanSegment,
    pub grid: TokenGrid,
    /// Review rounds executed.
    pub round: usize,
    pub captions: Vec<String>,
    pub instructions: Vec<CorrectionInstruction>,
    pub trajectory: Option<TrajectoryProfile>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub motion: MotionSequence,
    pub grid: TokenGrid,
    pub concrete_prompt: String,
    pub segments: Vec<SegmentState>,
    /// Frame range of each segment inside `motion`.
    pub segment_frames: Vec<Range<usize>>,
    pub trace: WorkflowTrace,
}

struct Asked<T> {
    value: T,
    attempts: u32,
    input: String,
    output: String,
}

/// One templated request, re-asked once if `parse` rejects the reply.
fn ask<T>(
    provider: &dyn ChatProvider,
    template_id: &str,
    bindings: &[(&str, &str)],
    segment: Option<usize>,
    parse: impl Fn(&str) -> Result<T, OrchError>,
) -> Result<Asked<T>, OrchError> {
    let prompt = render_template(agents::template(template_id)?, bindings)?;
    let mut messages = vec![ChatMessage::user(prompt.clone())?];
    let mut attempts = 0;
    let mut replies = Vec::new();
    loop {
        let reply = provider.chat(&ChatRequest {
            template_id,
            messages: &messages,
            segment,
        })?;
        attempts += reply.attempts;
        replies.push(reply.text.clone());
        match parse(&reply.text) {
            Ok(value) => {
                return Ok(Asked {
                    value,
                    attempts,
                    input: prompt,
                    output: replies.join("\u{1e}"),
                })
            }
            Err(e) if replies.len() == 1 => {
                log::warn!("{template_id} reply rejected ({e}); asking again");
                // An empty reply cannot be echoed back as a message.
                if !reply.text.trim().is_empty() {
                    messages.push(ChatMessage::new(Role::Assistant, reply.text)?);
                }
                messages.push(ChatMessage::user(REASK_MESSAGE)?);
            }
            Err(e) => return Err(e),
        }
    }
}

fn llm_event(op: Op, segment: Option<usize>, round: Option<usize>, a: &Asked<impl Sized>) -> TraceEvent {
    let mut e = event(op, segment, round);
    e.attempts = a.attempts;
    e.input_digest = digest(a.input.as_bytes());
    e.output_digest = digest(a.output.as_bytes());
    e
}

fn locals_from(edits: &[(Part, String)]) -> [Option<&str>; 4] {
    let mut locals = [None; 4];
    for (p, t) in edits {
        locals[p.index()] = Some(t.as_str());
    }
    locals
}

/// Text conditioning for `prompt` with per-part edit descriptions.
fn bundle(prompt: &str, edits: &[(Part, String)], embedder: &dyn TextEmbedder) -> Result<TextBundle, OrchError> {
    Ok(TextBundle::embed(prompt, locals_from(edits), embedder)?)
}

/// Planner decomposition of one step prompt.
fn decompose(
    step: &agents::StepPrompt,
    index: usize,
    providers: &Providers<'_>,
    cfg: &WorkflowConfig,
) -> Result<(PlanSegment, TraceEvent), OrchError> {
    let p = step.prompt.as_str();
    let seg = Some(index);
    let llm = providers.llm;
    let base = ask(llm, agents::BASE_MOTION, &[("input_prompt", p)], seg, |r| Ok(parse_base_motion(r)?))?;
    let edits = ask(llm, agents::LOCAL_EDITS, &[("input_prompt", p)], seg, |r| Ok(parse_local_edits(r)?))?;
    let attrs = ask(llm, agents::SEGMENT_ATTRIBUTES, &[("input_prompt", p)], seg, |r| {
        Ok(parse_segment_attributes(r)?)
    })?;
    let traj = if cfg.enable_trajectory { attrs.value.traj } else { None };
    let plan = PlanSegment {
        prompt: step.prompt.clone(),
        original_prompt: step.original_prompt.clone(),
        base: base.value,
        local_edits: edits.value,
        traj,
        duration_s: attrs.value.duration_s,
    };
    let mut e = event(Op::Decompose, seg, None);
    e.attempts = base.attempts + edits.attempts + attrs.attempts;
    e.input_digest = digest(p.as_bytes());
    e.output_digest = digest_parts(&[base.output.as_bytes(), edits.output.as_bytes(), attrs.output.as_bytes()]);
    e.count = Some(plan.local_edits.iter().filter(|l| l.description.is_some()).count());
    if plan.traj.is_some() {
        e.note = "traj".into();
    }
    Ok((plan, e))
}

/// `{'motion': ..., 'Right arm': ..., ...}` as the comparison prompt expects.
fn describe(motion: &str, parts: &BodyPartLines) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serializes");
    format!(
        "{{{}: {}, {}: {}, {}: {}, {}: {}, {}: {}}}",
        q("motion"),
        q(motion),
        q("Right arm"),
        q(&parts.right_arm),
        q("Left arm"),
        q(&parts.left_arm),
        q("Right leg"),
        q(&parts.right_leg),
        q("Left leg"),
        q(&parts.left_leg)
    )
}

fn bodypart_lines(
    llm: &dyn ChatProvider,
    text: &str,
    segment: Option<usize>,
) -> Result<Asked<BodyPartLines>, OrchError> {
    let input = format!("Motion Description: {text}");
    ask(llm, agents::BODYPART_LINES, &[("input_prompt", &input)], segment, |r| {
        let (lines, warnings) = parse_bodypart_lines(r)?;
        for w in warnings {
            log::warn!("{w}");
        }
        Ok(lines)
    })
}

/// Review/correct rounds for one segment: render, caption, compare against
/// the segment prompt and apply the resulting body-part edit, stopping at
/// the first empty instruction or after `cfg.k` rounds.
pub fn correction_loop(
    mut state: SegmentState,
    providers: &Providers<'_>,
    models: &Models<'_>,
    cfg: &WorkflowConfig,
    events: &mut Vec<TraceEvent>,
) -> Result<SegmentState, OrchError> {
    let i = state.index;
    let seg = Some(i);
    // The reference side of the comparison does not change between rounds.
    let mut reference: Option<String> = None;
    for k in 1..=cfg.k {
        state.round = k;
        let motion = models.rvq.detokenize(&state.grid, cfg.fps)?;
        let path = cfg.review_dir.join(format!("segment{i}_round{k}.json"));
        render_for_review(&motion, &path)?;
        let mut e = event(Op::Render, seg, Some(k));
        e.input_digest = grid_digest(&state.grid);
        e.output_digest = motion_digest(&motion);
        let rendered = e.output_digest.clone();
        events.push(e);

        let video = path.display().to_string();
        let cap = ask(providers.vlm, agents::CAPTION, &[("video", &video)], seg, |r| {
            let t = r.trim();
            if t.is_empty() {
                Err(AgentError::EmptyReply(agents::CAPTION.into()).into())
            } else {
                Ok(t.to_string())
            }
        })?;
        let mut e = llm_event(Op::Caption, seg, Some(k), &cap);
        // The prompt embeds the artifact path; digest what was rendered so
        // traces do not depend on the output directory.
        e.input_digest = rendered;
        events.push(e);
        state.captions.push(cap.value.clone());

        let mut attempts = 0;
        let mut outputs = Vec::new();
        let reference_desc = match &reference {
            Some(r) => r.clone(),
            None => {
                let lines = bodypart_lines(providers.llm, &state.plan.prompt, seg)?;
                attempts += lines.attempts;
                outputs.push(lines.output.clone());
                let d = describe(&state.plan.prompt, &lines.value);
                reference = Some(d.clone());
                d
            }
        };
        let observed = bodypart_lines(providers.llm, &cap.value, seg)?;
        attempts += observed.attempts;
        outputs.push(observed.output.clone());
        let input = format!(
            "Motion Description1: {reference_desc}\n\nMotion Description2: {}",
            describe(&cap.value, &observed.value)
        );
        let instr = ask(providers.llm, agents::COMPARE, &[("input_prompt", &input)], seg, |r| {
            Ok(parse_correction(r)?)
        })?;
        attempts += instr.attempts;
        outputs.push(instr.output.clone());
        let edits = instr.value.edits();
        let mut e = event(Op::Instruct, seg, Some(k));
        e.attempts = attempts;
        e.input_digest = digest(input.as_bytes());
        e.output_digest = digest_parts(&outputs.iter().map(|s| s.as_bytes()).collect::<Vec<_>>());
        e.count = Some(edits.len());
        events.push(e);
        state.instructions.push(instr.value.clone());
        if edits.is_empty() {
            break;
        }

        let per_part: Vec<(Part, String)> = edits
            .iter()
            .flat_map(|(parts, text)| parts.iter().map(move |p| (*p, text.clone())))
            .collect();
        let parts: Vec<Part> = per_part.iter().map(|(p, _)| *p).collect();
        let text = bundle(&state.plan.prompt, &per_part, providers.embedder)?;
        let seed = derive_seed(cfg.seed, &[TAG_CORRECTION, i as u64, k as u64]);
        let before = grid_digest(&state.grid);
        state.grid = edit_bodypart(&state.grid, &parts, &text, cfg.rho, models.gen, seed)?;
        let mut e = event(Op::Edit, seg, Some(k));
        e.input_digest = before;
        e.output_digest = grid_digest(&state.grid);
        e.count = Some(parts.len());
        e.note = "correction".into();
        events.push(e);
    }
    Ok(state)
}

/// Everything for one segment after planning: generate, edit, review, and
/// plan the trajectory.
fn run_segment(
    index: usize,
    plan: PlanSegment,
    providers: &Providers<'_>,
    models: &Models<'_>,
    cfg: &WorkflowConfig,
    events: &mut Vec<TraceEvent>,
) -> Result<SegmentState, OrchError> {
    let seg = Some(index);
    let ds = models.rvq.cfg.downscale;
    let seconds = plan.duration_s.unwrap_or(cfg.default_duration_s);
    let frames = duration_to_frames(seconds, cfg.fps, cfg.frame_cap, ds);
    let n = frames / ds;

    let text = bundle(&plan.base, &[], providers.embedder)?;
    let seed = derive_seed(cfg.seed, &[TAG_GENERATE, index as u64]);
    let grid = models.gen.generate(&text, n, seed)?;
    let mut e = event(Op::Generate, seg, None);
    e.input_digest = digest_parts(&[plan.base.as_bytes(), &seed.to_le_bytes(), &(n as u64).to_le_bytes()]);
    e.output_digest = grid_digest(&grid);
    e.count = Some(n);
    events.push(e);

    let mut state = SegmentState {
        index,
        plan,
        grid,
        round: 0,
        captions: Vec::new(),
        instructions: Vec::new(),
        trajectory: None,
    };

    let local: Vec<(Part, String)> = state
        .plan
        .local_edits
        .iter()
        .filter_map(|l| l.description.clone().map(|d| (l.limb.part(), d)))
        .collect();
    if !local.is_empty() {
        let parts: Vec<Part> = local.iter().map(|(p, _)| *p).collect();
        let text = bundle(&state.plan.prompt, &local, providers.embedder)?;
        let seed = derive_seed(cfg.seed, &[TAG_LOCAL_EDIT, index as u64]);
        let before = grid_digest(&state.grid);
        state.grid = edit_bodypart(&state.grid, &parts, &text, cfg.rho, models.gen, seed)?;
        let mut e = event(Op::Edit, seg, None);
        e.input_digest = before;
        e.output_digest = grid_digest(&state.grid);
        e.count = Some(parts.len());
        e.note = "local".into();
        events.push(e);
    }

    let mut state = correction_loop(state, providers, models, cfg, events)?;

    if let Some(traj_text) = state.plan.traj.clone() {
        let spec = ask(providers.llm, agents::TRAJECTORY, &[("input_prompt", &traj_text)], seg, |r| {
            let code = extract_code_block(r)?;
            let spec = parse_curve_spec(&code)?;
            Ok((code, spec))
        })?;
        events.push(llm_event(Op::TrajGenerate, seg, None, &spec));
        let (_, curve): (String, CurveSpec) = spec.value;

        let motion = models.rvq.detokenize(&state.grid, cfg.fps)?;
        let profile = trajectory_profile(&curve, &motion)?;
        let mapped = apply_trajectory_with(&motion, &profile, cfg.overwrite_speed)?;
        let mut e = event(Op::TrajMap, seg, None);
        e.input_digest = motion_digest(&motion);
        e.output_digest = motion_digest(&mapped);
        e.count = Some(profile.len());
        events.push(e);
        state.trajectory = Some(profile);
    }
    Ok(state)
}

/// Heading profile of `curve` sized for `motion`, at the motion's own mean
/// root speed.
fn trajectory_profile(curve: &CurveSpec, motion: &MotionSequence) -> Result<TrajectoryProfile, OrchError> {
    let poly = sample_curve(curve, DEFAULT_SAMPLES)?;
    let uniform = resample_uniform(&poly, motion.len())?;
    // A motion standing still would give speed 0, which profiles reject;
    // the speed only matters when it overwrites the root velocity.
    let v = mean_root_speed(motion);
    let v = if v.is_finite() && v > 0.0 { v } else { 1e-6 };
    Ok(derive_profile(&uniform, v)?)
}

/// Runs the whole workflow on prompt `p`.
pub fn run_pipeline(
    p: &str,
    providers: &Providers<'_>,
    models: &Models<'_>,
    cfg: &WorkflowConfig,
) -> Result<PipelineOutput, PipelineFailure> {
    let mut trace = WorkflowTrace::default();
    match pipeline_inner(p, providers, models, cfg, &mut trace) {
        Ok(mut out) => {
            out.trace = trace;
            Ok(out)
        }
        Err(error) => Err(PipelineFailure { error, trace }),
    }
}

fn pipeline_inner(
    p: &str,
    providers: &Providers<'_>,
    models: &Models<'_>,
    cfg: &WorkflowConfig,
    trace: &mut WorkflowTrace,
) -> Result<PipelineOutput, OrchError> {
    cfg.validate()?;
    if models.gen.cfg.codes != models.rvq.cfg.codes_per_book || models.gen.cfg.quant_layers != models.rvq.cfg.num_layers
    {
        return Err(OrchError::Config("generator and tokenizer disagree on codebook shape".into()));
    }

    let words = agents::format_words_list(providers.vocabulary);
    let rw = ask(
        providers.llm,
        agents::REWRITE,
        &[("words_list", &words), ("input_prompt", p)],
        None,
        |r| Ok(agents::extract_rewrite(r)?),
    )?;
    let mut e = llm_event(Op::Rewrite, None, None, &rw);
    if rw.value.fallback {
        log::warn!("rewrite reply has no line starting with \"A person\"; using the whole reply");
        e.note = "fallback".into();
    }
    trace.push(e);
    let concrete = rw.value.text;

    let steps = ask(
        providers.llm,
        agents::SEGMENT,
        &[("original_action", p), ("input_prompt", &concrete)],
        None,
        |r| Ok(parse_steps(r, p)?),
    )?;
    let mut e = llm_event(Op::Segment, None, None, &steps);
    e.count = Some(steps.value.len());
    trace.push(e);

    let run_one = |(i, step): (usize, &agents::StepPrompt)| {
        let mut events = Vec::new();
        let res = decompose(step, i, providers, cfg).and_then(|(plan, e)| {
            events.push(e);
            run_segment(i, plan, providers, models, cfg, &mut events)
        });
        (events, res)
    };
    let results: Vec<(Vec<TraceEvent>, Result<SegmentState, OrchError>)> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| OrchError::Config(e.to_string()))?;
        pool.install(|| steps.value.par_iter().enumerate().map(run_one).collect())
    } else {
        let mut v = Vec::new();
        for item in steps.value.iter().enumerate() {
            let r = run_one(item);
            let failed = r.1.is_err();
            v.push(r);
            if failed {
                break;
            }
        }
        v
    };
    let mut segments = Vec::new();
    for (events, res) in results {
        for e in events {
            trace.push(e);
        }
        segments.push(res?);
    }

    // Fold the segments left to right, remembering where each lands.
    let ds = models.rvq.cfg.downscale;
    let mut token_ranges: Vec<std::ops::Range<usize>> = Vec::with_capacity(segments.len());
    token_ranges.push(0..segments[0].grid.n);
    let mut grid = segments[0].grid.clone();
    let mut inputs: Vec<u8> = Vec::new();
    for s in &segments {
        inputs.extend_from_slice(grid_digest(&s.grid).as_bytes());
    }
    for (j, s) in segments.iter().enumerate().skip(1) {
        let n_ctx = cfg.n_ctx.min(grid.n).min(s.grid.n);
        let prompt = format!("{} {}", segments[j - 1].plan.prompt, s.plan.prompt);
        let text = bundle(&prompt, &[], providers.embedder)?;
        let seed = derive_seed(cfg.seed, &[TAG_BLEND, j as u64]);
        let start = grid.n + cfg.n_trans;
        grid = blend(&grid, &s.grid, cfg.n_trans, n_ctx, &text, models.gen, seed)?;
        token_ranges.push(start..start + s.grid.n);
    }
    let mut e = event(Op::Blend, None, None);
    e.input_digest = digest(&inputs);
    e.output_digest = grid_digest(&grid);
    e.count = Some(segments.len());
    trace.push(e);

    let mut motion = models.rvq.detokenize(&grid, cfg.fps)?;
    let segment_frames: Vec<Range<usize>> = token_ranges
        .iter()
        .map(|r| (r.start * ds).min(motion.len())..(r.end * ds).min(motion.len()))
        .collect();
    // Trajectories only touch the root rotational velocity, so they are
    // applied to the decoded blend over each segment's own frames.
    for (s, fr) in segments.iter().zip(&segment_frames) {
        let Some(profile) = &s.trajectory else { continue };
        let part = motion.slice_frames(fr.clone()).map_err(VqError::from)?;
        let profile = if profile.len() + 1 == part.len() {
            profile.clone()
        } else {
            crate::trajedit::resample_profile(profile, part.len().saturating_sub(1))?
        };
        let mapped = apply_trajectory_with(&part, &profile, cfg.overwrite_speed)?;
        for (t, f) in fr.clone().enumerate() {
            motion.frame_mut(f).copy_from_slice(mapped.frame(t));
        }
    }

    Ok(PipelineOutput {
        motion,
        grid,
        concrete_prompt: concrete,
        segments,
        segment_frames,
        trace: WorkflowTrace::default(),
    })
}
