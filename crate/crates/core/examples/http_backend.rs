//! Talk to an OpenAI-compatible chat endpoint.
//!
//! With `EXTRACT_BASE_URL` (and optionally `EXTRACT_MODEL`, plus the key in
//! `EXTRACT_API_KEY`) the request goes to that server. Without it a tiny
//! local stub answers, so the example runs offline.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use synoptic_reflect::backend::{Backend, BackendConfig, CallTag, HttpChatBackend};
use synoptic_reflect::prompt::{parse_model_json, render_one_by_one, ParseMode, PromptSet};
use synoptic_reflect::schema::TemplateSchema;

fn stub_server() -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten().take(1) {
            let mut reader = BufReader::new(stream.try_clone().expect("clone"));
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).expect("read");
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).expect("body");
            let reply = serde_json::json!({
                "choices": [{
                    "message": {"role": "assistant", "content": "{\"Tumor Site\": \"Cecum\", \"Tumor Site - Belief Degree\": 0.9}"},
                    "finish_reason": "stop"
                }]
            })
            .to_string();
            let mut s = stream;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{reply}", reply.len())
                .expect("write");
        }
    });
    Ok(format!("http://{addr}/v1"))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base_url = match std::env::var("EXTRACT_BASE_URL") {
        Ok(url) => url,
        Err(_) => stub_server()?,
    };
    let model = std::env::var("EXTRACT_MODEL").unwrap_or_else(|_| "local-model".into());
    let config = BackendConfig {
        max_retries: 1,
        retry_backoff_ms: 200,
        ..BackendConfig::http_chat(base_url, model)
    };
    println!("config: {}", config.redacted());
    let backend = HttpChatBackend::new(config)?;

    let schema = TemplateSchema::from_json_str(r#"{"Tumor Site": ["Cecum", "Ascending colon", "Rectum"]}"#)?;
    let spec = schema.get("Tumor Site")?;
    let prompt = render_one_by_one(
        &PromptSet::default().one_by_one,
        &spec.name,
        &spec.prompt_values(),
        "Right hemicolectomy. A 4.2 cm mass is centered in the cecum.",
    )?;
    let reply = backend.complete(&prompt, &CallTag::one_by_one("CRC-001", "Tumor Site"))?;
    println!("reply: {reply}");
    let parsed = parse_model_json(&reply, &schema, ParseMode::SingleVar("Tumor Site"))?;
    println!("parsed: {:?}", parsed.vector.value("Tumor Site"));
    Ok(())
}
