//! Proposer backed by an OpenAI-compatible `/chat/completions` endpoint.
//!
//! Each role sends a system prompt describing the role and a user message
//! holding a JSON context, and expects a JSON object back:
//!
//! | role      | reply                                                                   |
//! |-----------|-------------------------------------------------------------------------|
//! | distiller | `{"skills": [{"title", "principle", "when_to_apply"}]}`                 |
//! | diagnoser | `{"verdict": "keep"\|"rewrite"\|"remove", "rewritten": {..}?}`          |
//! | planner   | `{"candidates": [{"adds": [i], "rewrites": [i], "removes": [i]}]}`      |
//!
//! A malformed reply is retried once; a second failure surfaces as
//! [`Error::Proposer`] with the raw payload attached.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    CaseRecord, EditPools, EditSelection, EvidencePair, EvidenceSummary, Proposer, Verdict,
    VerdictKind,
};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::skill::{Origin, Provenance, Skill, SkillBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_token_env() -> String {
    "SKILLBANK_API_TOKEN".into()
}

fn default_timeout() -> u64 {
    120
}

const DISTILLER_PROMPT: &str = "You are a skill distiller for a frozen task-solving agent. \
You receive failed trajectories that ran without any retrieved skill, plus successful ones as \
positive references. First identify the capabilities the agent was missing, then write one \
reusable skill per missing capability. Reply with JSON: {\"skills\": [{\"title\": str, \
\"principle\": str, \"when_to_apply\": str}]}.";

const DIAGNOSER_PROMPT: &str = "You are a skill diagnoser. You receive one skill and, for every \
task that retrieved it, the reward with the skill and the reward when the skill was left out. \
Decide whether to keep the skill, rewrite it, or remove it. Reply with JSON: {\"verdict\": \
\"keep\" | \"rewrite\" | \"remove\", \"rewritten\": {\"title\": str, \"principle\": str, \
\"when_to_apply\": str}} where `rewritten` is required only for \"rewrite\".";

const PLANNER_PROMPT: &str = "You are an edit planner for a skill bank. You receive the current \
bank and indexed pools of proposed additions, rewrites and removals. Compose up to K distinct \
candidate banks, each a subset of the proposed edits. Skills marked keep are protected and are \
never edited. Reply with JSON: {\"candidates\": [{\"adds\": [int], \"rewrites\": [int], \
\"removes\": [int]}]}.";

pub struct RemoteProposer {
    config: RemoteConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
    embedder: Arc<dyn EmbeddingProvider>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct SkillText {
    title: String,
    principle: String,
    when_to_apply: String,
}

impl RemoteProposer {
    pub fn new(config: RemoteConfig, embedder: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        let token = std::env::var(&config.token_env).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            config,
            token,
            client,
            embedder,
            seed: None,
        })
    }

    /// Sampling seed forwarded to endpoints that honour one.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn complete(&self, system: &str, context: &Value) -> Result<String> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut body = json!({
            "model": self.config.model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": context.to_string()},
            ],
        });
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        let mut req = self.client.post(&url).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| transport("request", e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| transport("response", e))?;
        if !status.is_success() {
            return Err(Error::Proposer {
                role: "remote",
                message: format!("endpoint returned {status}"),
                raw: Some(text),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Proposer {
            role: "remote",
            message: format!("response is not JSON: {e}"),
            raw: Some(text.clone()),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| Error::Proposer {
                role: "remote",
                message: "response has no message content".into(),
                raw: Some(text),
            })
    }

    /// Ask once, retry once if the reply does not parse.
    fn ask<T>(
        &self,
        role: &'static str,
        system: &str,
        context: &Value,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let mut last = None;
        for attempt in 0..2 {
            let content = self.complete(system, context)?;
            match parse(&content) {
                Ok(v) => return Ok(v),
                Err(msg) => {
                    log::warn!("{role} reply malformed (attempt {}): {msg}", attempt + 1);
                    last = Some((msg, content));
                }
            }
        }
        let (message, raw) = last.expect("two attempts made");
        Err(Error::Proposer {
            role,
            message,
            raw: Some(raw),
        })
    }

    fn skill_from_text(&self, t: SkillText, origin: Origin, round: u32) -> Result<Skill> {
        Skill::new(
            t.title,
            t.principle,
            t.when_to_apply,
            Provenance {
                round_created: round,
                origin,
            },
            self.embedder.as_ref(),
        )
    }
}

fn transport(what: &str, e: reqwest::Error) -> Error {
    Error::Proposer {
        role: "remote",
        message: format!("{what} failed: {e}"),
        raw: None,
    }
}

fn case_json(c: &CaseRecord) -> Value {
    json!({
        "task_id": c.task.task_id,
        "task": c.task.text,
        "reward": c.trajectory.reward,
        "success": c.trajectory.success,
    })
}

fn skill_json(s: &Skill) -> Value {
    json!({
        "id": s.id(),
        "title": s.title(),
        "principle": s.principle(),
        "when_to_apply": s.when_to_apply(),
    })
}

fn parse_json(content: &str) -> std::result::Result<Value, String> {
    serde_json::from_str(content).map_err(|e| format!("reply is not JSON: {e}"))
}

impl Proposer for RemoteProposer {
    fn distill(
        &self,
        failures: &[CaseRecord],
        successes: &[CaseRecord],
        origin: Origin,
        round: u32,
    ) -> Result<Vec<Skill>> {
        if failures.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = json!({
            "failures": failures.iter().map(case_json).collect::<Vec<_>>(),
            "successes": successes.iter().map(case_json).collect::<Vec<_>>(),
        });
        let texts = self.ask("distiller", DISTILLER_PROMPT, &ctx, |c| {
            let v = parse_json(c)?;
            let skills = v.get("skills").ok_or("missing `skills`")?.clone();
            serde_json::from_value::<Vec<SkillText>>(skills).map_err(|e| e.to_string())
        })?;
        let mut out: Vec<Skill> = Vec::with_capacity(texts.len());
        for t in texts {
            let s = self.skill_from_text(t, origin, round)?;
            if !out.iter().any(|o| o.id() == s.id()) {
                out.push(s);
            }
        }
        Ok(out)
    }

    fn diagnose(&self, skill: &Skill, pairs: &[EvidencePair], round: u32) -> Result<Verdict> {
        if pairs.is_empty() {
            return Err(Error::invalid(format!(
                "skill {} has no counterfactual evidence",
                skill.id()
            )));
        }
        let ctx = json!({
            "skill": skill_json(skill),
            "evidence": pairs.iter().map(|p| json!({
                "task": p.task.text,
                "reward_with_skill": p.factual.reward,
                "reward_without_skill": p.counterfactual.reward,
            })).collect::<Vec<_>>(),
        });
        let (kind, text) = self.ask("diagnoser", DIAGNOSER_PROMPT, &ctx, |c| {
            let v = parse_json(c)?;
            let kind = match v.get("verdict").and_then(Value::as_str) {
                Some("keep") => VerdictKind::Keep,
                Some("rewrite") => VerdictKind::Rewrite,
                Some("remove") => VerdictKind::Remove,
                other => return Err(format!("bad verdict {other:?}")),
            };
            let text = match (kind, v.get("rewritten")) {
                (VerdictKind::Rewrite, Some(r)) => Some(
                    serde_json::from_value::<SkillText>(r.clone()).map_err(|e| e.to_string())?,
                ),
                (VerdictKind::Rewrite, None) => return Err("rewrite without `rewritten`".into()),
                _ => None,
            };
            Ok((kind, text))
        })?;
        let rewritten = text
            .map(|t| self.skill_from_text(t, Origin::Rewrite, round))
            .transpose()?;
        let verdict = Verdict {
            skill_id: skill.id().clone(),
            kind,
            rewritten,
            evidence_summary: EvidenceSummary::of(pairs),
        };
        verdict.validate().map_err(|e| Error::Proposer {
            role: "diagnoser",
            message: e.to_string(),
            raw: None,
        })?;
        Ok(verdict)
    }

    fn plan(&self, bank: &SkillBank, pools: &EditPools, k: usize) -> Result<Vec<EditSelection>> {
        let ctx = json!({
            "K": k,
            "bank": bank.skills().iter().map(skill_json).collect::<Vec<_>>(),
            "keep": pools.keep,
            "adds": pools.add.iter().map(skill_json).collect::<Vec<_>>(),
            "rewrites": pools.rewrite.iter().map(|(orig, new)| json!({
                "original": orig, "replacement": skill_json(new),
            })).collect::<Vec<_>>(),
            "removes": pools.remove,
        });
        self.ask("planner", PLANNER_PROMPT, &ctx, |c| {
            let v = parse_json(c)?;
            let cands = v.get("candidates").ok_or("missing `candidates`")?.clone();
            let sels: Vec<EditSelection> =
                serde_json::from_value(cands).map_err(|e| e.to_string())?;
            let in_range = |idx: &[usize], n: usize| idx.iter().all(|&i| i < n);
            if sels.iter().all(|s| {
                in_range(&s.adds, pools.add.len())
                    && in_range(&s.rewrites, pools.rewrite.len())
                    && in_range(&s.removes, pools.remove.len())
            }) {
                Ok(sels)
            } else {
                Err("selection index out of range".into())
            }
        })
    }
}
