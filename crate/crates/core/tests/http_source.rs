use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use normcharts::labeling::Label;
use normcharts::report::{Report, Sex};
use normcharts::stepwise::{run_inquiry, AnswerSource, HttpSource, InquiryMode, InquiryOptions, QuestionId, Verdict};

/// Minimal JSON endpoint. The first `fail_first` requests get a 500.
fn serve(fail_first: usize, answer: &'static str) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/answer", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    let count = Arc::new(AtomicUsize::new(0));
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let seen = Arc::clone(&seen);
            let count = Arc::clone(&count);
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                seen.lock().unwrap().push(String::from_utf8(body).unwrap());
                let reply = if count.fetch_add(1, Ordering::SeqCst) < fail_first {
                    "HTTP/1.1 500 Internal Server Error\r\ncontent-length: 0\r\nconnection: close\r\n\r\n".to_string()
                } else {
                    let json = serde_json::json!({ "text": answer }).to_string();
                    format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{json}",
                        json.len()
                    )
                };
                stream.write_all(reply.as_bytes()).unwrap();
            });
        }
    });
    (url, bodies)
}

fn report() -> Report {
    Report::new(
        "r1",
        "FINDINGS: Unremarkable.\nIMPRESSION: Normal MRI of the brain.",
        2022,
        "SITE_A",
        400,
        Sex::F,
        "MRI BRAIN",
    )
    .unwrap()
}

fn source(url: String) -> HttpSource {
    HttpSource { url, model: "m1".into(), token: None, timeout: Duration::from_secs(5) }
}

#[test]
fn posts_prompt_and_model() {
    let (url, bodies) = serve(0, "No. Reasoning: nothing abnormal.");
    let text = source(url).answer("r1", QuestionId::Q1, "prompt body").unwrap();
    assert!(text.starts_with("No."));
    let body: serde_json::Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "m1");
    assert_eq!(body["prompt"], "prompt body");
}

#[test]
fn stepwise_over_http() {
    let (url, bodies) = serve(0, "No");
    let rec = run_inquiry(&report(), InquiryMode::Stepwise, &source(url), &InquiryOptions::default());
    assert_eq!(bodies.lock().unwrap().len(), 5);
    assert!(rec.answers.values().all(|v| *v == Verdict::No));
    assert_eq!(rec.label, Label::Normal);
}

#[test]
fn retries_after_server_error() {
    let (url, bodies) = serve(2, "Yes");
    let rec = run_inquiry(&report(), InquiryMode::Direct, &source(url), &InquiryOptions { retries: 2 });
    assert_eq!(bodies.lock().unwrap().len(), 3);
    assert_eq!(rec.answers[&QuestionId::Q1], Verdict::Yes);
}

#[test]
fn exhausted_retries_are_unparsed() {
    let (url, _) = serve(usize::MAX, "Yes");
    let rec = run_inquiry(&report(), InquiryMode::Direct, &source(url), &InquiryOptions { retries: 1 });
    assert_eq!(rec.answers[&QuestionId::Q1], Verdict::Unparsed);
    assert_eq!(rec.label, Label::Abnormal);
}
