//! A deterministic mock backend backed by a reply lookup table.
//!
//! Resolution order: exact match on the request content digest, then the
//! first substring rule matching the conversation text, then the default
//! reply. A request nothing matches is an error, which keeps tests honest
//! about exactly which calls a pipeline makes.

use super::{Backend, BackendError, GenerationRequest, GenerationResponse};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One substring-triggered reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Matches when the joined conversation text contains this fragment.
    pub contains: String,
    pub reply: String,
}

/// The reply table for a [`ScriptedBackend`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub by_digest: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_reply: Option<String>,
}

impl Script {
    pub fn with_default(reply: impl Into<String>) -> Self {
        Self {
            default_reply: Some(reply.into()),
            ..Self::default()
        }
    }

    pub fn rule(mut self, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            contains: contains.into(),
            reply: reply.into(),
        });
        self
    }

    /// Pins an exact reply for one concrete request.
    pub fn reply_for(mut self, request: &GenerationRequest, reply: impl Into<String>) -> Self {
        self.by_digest.insert(request.content_digest(), reply.into());
        self
    }
}

pub struct ScriptedBackend {
    script: Script,
    max_in_flight: usize,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            max_in_flight: 8,
        }
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.max_in_flight = max_in_flight.max(1);
        self
    }

    fn resolve(&self, request: &GenerationRequest) -> Result<&str, BackendError> {
        let digest = request.content_digest();
        if let Some(reply) = self.script.by_digest.get(&digest) {
            return Ok(reply);
        }
        let text = request.joined_text();
        for rule in &self.script.rules {
            if text.contains(&rule.contains) {
                return Ok(&rule.reply);
            }
        }
        if let Some(reply) = &self.script.default_reply {
            return Ok(reply);
        }
        Err(BackendError::NoScriptEntry { digest })
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let reply = self.resolve(request)?;
        Ok(GenerationResponse {
            texts: vec![reply.to_string(); request.num_samples.max(1) as usize],
            model_id: self.id(),
            usage: None,
        })
    }

    fn id(&self) -> String {
        "scripted".into()
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::complete_batch;

    #[test]
    fn digest_entries_beat_rules_beat_default() {
        let pinned = GenerationRequest::from_user_text("pin me");
        let script = Script::with_default("fallback")
            .rule("pin", "rule hit")
            .reply_for(&pinned, "exact hit");
        let backend = ScriptedBackend::new(script);

        assert_eq!(backend.complete(&pinned).unwrap().texts[0], "exact hit");
        let ruled = GenerationRequest::from_user_text("other pin text");
        assert_eq!(backend.complete(&ruled).unwrap().texts[0], "rule hit");
        let defaulted = GenerationRequest::from_user_text("nothing matches");
        assert_eq!(backend.complete(&defaulted).unwrap().texts[0], "fallback");
    }

    #[test]
    fn unmatched_request_is_an_error() {
        let backend = ScriptedBackend::new(Script::default());
        let req = GenerationRequest::from_user_text("anything");
        match backend.complete(&req) {
            Err(BackendError::NoScriptEntry { digest }) => {
                assert_eq!(digest, req.content_digest());
            }
            other => panic!("expected NoScriptEntry, got {other:?}"),
        }
    }

    #[test]
    fn num_samples_repeats_the_reply() {
        let backend = ScriptedBackend::new(Script::with_default("r"));
        let req = GenerationRequest::from_user_text("x").with_num_samples(3);
        assert_eq!(backend.complete(&req).unwrap().texts, vec!["r", "r", "r"]);
    }

    #[test]
    fn first_matching_rule_wins() {
        let script = Script::default()
            .rule("alpha", "first")
            .rule("alpha beta", "second");
        let backend = ScriptedBackend::new(script);
        let req = GenerationRequest::from_user_text("alpha beta");
        assert_eq!(backend.complete(&req).unwrap().texts[0], "first");
    }

    #[test]
    fn batch_results_stay_aligned_under_parallelism() {
        // 100 distinct requests, each with its own pinned reply; results must
        // land at their request's index no matter which worker ran them.
        let mut script = Script::default();
        let requests: Vec<GenerationRequest> = (0..100)
            .map(|i| GenerationRequest::from_user_text(format!("req {i}")))
            .collect();
        for (i, req) in requests.iter().enumerate() {
            script = script.reply_for(req, format!("reply {i}"));
        }
        let backend = ScriptedBackend::new(script).with_max_in_flight(8);
        let results = complete_batch(&backend, &requests);
        assert_eq!(results.len(), 100);
        for (i, result) in results.iter().enumerate() {
            assert_eq!(result.as_ref().unwrap().texts[0], format!("reply {i}"));
        }
    }

    #[test]
    fn batch_failures_stay_in_their_slot() {
        let good = GenerationRequest::from_user_text("known");
        let script = Script::default().reply_for(&good, "ok");
        let backend = ScriptedBackend::new(script);
        let bad = GenerationRequest::from_user_text("unknown");
        let results = complete_batch(&backend, &[good, bad]);
        assert!(results[0].is_ok());
        assert!(matches!(
            results[1],
            Err(BackendError::NoScriptEntry { .. })
        ));
    }
}
