//! Chat-completions wire format: request rendering and response parsing.
//!
//! Requests serialize with a fixed key order, so the same
//! [`GenerationRequest`] always renders to identical bytes; tests pin a
//! golden fixture against this. Text-only messages use plain string content,
//! while messages carrying an image use the content-parts array with the
//! image inlined as a base64 data URI (servers never see local paths).

use super::{BackendError, GenerationRequest, GenerationResponse, Message, Role, TokenUsage};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct WireMessage {
    pub role: &'static str,
    pub content: WireContent,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum WireContent {
    Text(String),
    Parts(Vec<WirePart>),
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WirePart {
    Text { text: String },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Debug, Serialize)]
pub struct WireImageUrl {
    pub url: String,
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn mime_for(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        _ => "image/png",
    }
}

/// Reads an image file and encodes it as a `data:` URI.
pub fn data_uri_for(path: &str) -> Result<String, BackendError> {
    let bytes = std::fs::read(path).map_err(|e| BackendError::ImageUnreadable {
        path: path.to_string(),
        detail: e.to_string(),
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
    Ok(format!("data:{};base64,{}", mime_for(path), encoded))
}

fn render_message(message: &Message) -> Result<WireMessage, BackendError> {
    let content = match &message.image_ref {
        None => WireContent::Text(message.text.clone()),
        Some(image_ref) => WireContent::Parts(vec![
            WirePart::Text {
                text: message.text.clone(),
            },
            WirePart::ImageUrl {
                image_url: WireImageUrl {
                    url: data_uri_for(image_ref)?,
                },
            },
        ]),
    };
    Ok(WireMessage {
        role: role_name(message.role),
        content,
    })
}

/// Renders a request into the wire shape for `model`.
pub fn render_request(
    request: &GenerationRequest,
    model: &str,
) -> Result<WireRequest, BackendError> {
    Ok(WireRequest {
        model: model.to_string(),
        messages: request
            .messages
            .iter()
            .map(render_message)
            .collect::<Result<_, _>>()?,
        max_tokens: request.max_new_tokens,
        temperature: request.temperature,
        top_k: request.top_k,
        repetition_penalty: request.repetition_penalty,
        n: request.num_samples,
        seed: request.seed,
    })
}

/// Renders a request to its canonical JSON bytes.
pub fn render_request_bytes(
    request: &GenerationRequest,
    model: &str,
) -> Result<Vec<u8>, BackendError> {
    let wire = render_request(request, model)?;
    serde_json::to_vec(&wire).map_err(|e| BackendError::MalformedResponse(e.to_string()))
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: Option<u32>,
    message: WireChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Parses a chat-completions response body. Choices are ordered by their
/// `index` field when present; a body with no choices is an error.
pub fn parse_response(bytes: &[u8]) -> Result<GenerationResponse, BackendError> {
    let parsed: WireResponse = serde_json::from_slice(bytes)
        .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    if parsed.choices.is_empty() {
        return Err(BackendError::MalformedResponse(
            "response has no choices".into(),
        ));
    }
    let mut indexed: Vec<(u32, String)> = parsed
        .choices
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c.index.unwrap_or(i as u32), c.message.content))
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    Ok(GenerationResponse {
        texts: indexed.into_iter().map(|(_, t)| t).collect(),
        model_id: parsed.model.unwrap_or_default(),
        usage: parsed.usage.map(|u| TokenUsage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn golden_request_bytes() {
        let req = GenerationRequest {
            messages: vec![
                Message::system("be brief"),
                Message::user("what is 2+2?"),
            ],
            max_new_tokens: 64,
            temperature: 0.3,
            top_k: 5,
            repetition_penalty: 1.05,
            num_samples: 2,
            seed: Some(7),
        };
        let bytes = render_request_bytes(&req, "test-model").unwrap();
        let expected = concat!(
            r#"{"model":"test-model","messages":[{"role":"system","content":"be brief"},"#,
            r#"{"role":"user","content":"what is 2+2?"}],"max_tokens":64,"temperature":0.3,"#,
            r#""top_k":5,"repetition_penalty":1.05,"n":2,"seed":7}"#
        );
        assert_eq!(String::from_utf8(bytes).unwrap(), expected);
    }

    #[test]
    fn image_message_becomes_data_uri_parts() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("two.png");
        std::fs::File::create(&img)
            .unwrap()
            .write_all(&[0x01, 0x02])
            .unwrap();
        let req = GenerationRequest::from_messages(vec![
            Message::user("describe").with_image(img.to_str().unwrap())
        ]);
        let wire = render_request(&req, "m").unwrap();
        let json = serde_json::to_value(&wire).unwrap();
        let content = &json["messages"][0]["content"];
        assert!(content.is_array());
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        // base64 of [0x01, 0x02] is "AQI=".
        assert_eq!(
            content[1]["image_url"]["url"],
            "data:image/png;base64,AQI="
        );
    }

    #[test]
    fn missing_image_file_errors_with_path() {
        let req = GenerationRequest::from_messages(vec![
            Message::user("x").with_image("/definitely/not/here.png")
        ]);
        match render_request(&req, "m") {
            Err(BackendError::ImageUnreadable { path, .. }) => {
                assert!(path.contains("not/here.png"));
            }
            other => panic!("expected ImageUnreadable, got {other:?}"),
        }
    }

    #[test]
    fn parse_response_orders_by_index() {
        let body = serde_json::json!({
            "model": "served",
            "choices": [
                {"index": 1, "message": {"role": "assistant", "content": "second"}},
                {"index": 0, "message": {"role": "assistant", "content": "first"}}
            ],
            "usage": {"prompt_tokens": 3, "completion_tokens": 9, "total_tokens": 12}
        });
        let resp = parse_response(body.to_string().as_bytes()).unwrap();
        assert_eq!(resp.texts, vec!["first", "second"]);
        assert_eq!(resp.model_id, "served");
        assert_eq!(
            resp.usage,
            Some(TokenUsage {
                prompt_tokens: 3,
                completion_tokens: 9
            })
        );
    }

    #[test]
    fn parse_response_rejects_empty_choices() {
        let body = r#"{"model": "m", "choices": []}"#;
        assert!(matches!(
            parse_response(body.as_bytes()),
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_response(b"not json"),
            Err(BackendError::MalformedResponse(_))
        ));
    }

    #[test]
    fn round_trip_renders_identically_for_equal_requests() {
        let req = GenerationRequest::from_user_text("same");
        let a = render_request_bytes(&req, "m").unwrap();
        let b = render_request_bytes(&req.clone(), "m").unwrap();
        assert_eq!(a, b);
    }
}
