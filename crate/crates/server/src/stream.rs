//! Live preview stream. Each connection follows one playhead frame and
//! receives a fresh render whenever the session's track changes. Only the
//! newest track is rendered: a change cancels any render in flight.
//!
//! Server to client, per delivered frame: a text message
//! `{"type":"frame","version","frame","width","height","sha256"}` followed by
//! a binary message holding the PNG. Failures arrive as
//! `{"type":"error","version","frame","error"}`. Client to server:
//! `{"frame": n}` moves the playhead.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket};
use serde::Deserialize;
use serde_json::json;
use tokio::task::JoinHandle;

use reshoot_core::scene_io::sha256_hex;
use reshoot_core::Result;

use crate::session::{PreviewFrame, Session, TrackState};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Control {
    frame: usize,
}

struct Job {
    version: u64,
    frame: usize,
    cancel: Arc<AtomicBool>,
    handle: JoinHandle<Result<Option<PreviewFrame>>>,
}

impl Job {
    fn start(session: &Arc<Session>, state: Arc<TrackState>, frame: usize) -> Self {
        let cancel = Arc::new(AtomicBool::new(false));
        let (s, flag) = (session.clone(), cancel.clone());
        let version = state.version;
        let handle = tokio::task::spawn_blocking(move || s.render_preview(&state, frame, Some(&flag)));
        Job {
            version,
            frame,
            cancel,
            handle,
        }
    }

    fn cancel(self) {
        self.cancel.store(true, Ordering::Relaxed);
        self.handle.abort();
    }
}

fn error_message(version: u64, frame: usize, error: String) -> Message {
    Message::Text(
        json!({"type": "error", "version": version, "frame": frame, "error": error})
            .to_string()
            .into(),
    )
}

pub(crate) async fn run(mut socket: WebSocket, session: Arc<Session>) {
    let mut tracks = session.subscribe();
    let mut frame = 0usize;
    let mut job = Some(Job::start(&session, session.current(), frame));
    loop {
        let outgoing: Vec<Message> = tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<Control>(&text) {
                    Ok(c) => {
                        frame = c.frame;
                        if let Some(old) = job.take() {
                            old.cancel();
                        }
                        job = Some(Job::start(&session, tracks.borrow().clone(), frame));
                        Vec::new()
                    }
                    Err(e) => vec![error_message(
                        tracks.borrow().version,
                        frame,
                        format!("invalid control message: {e}"),
                    )],
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => Vec::new(),
            },
            changed = tracks.changed() => {
                if changed.is_err() {
                    break;
                }
                let state = tracks.borrow_and_update().clone();
                if let Some(old) = job.take() {
                    old.cancel();
                }
                job = Some(Job::start(&session, state, frame));
                Vec::new()
            },
            res = async {
                match job.as_mut() {
                    Some(j) => (&mut j.handle).await,
                    None => std::future::pending().await,
                }
            } => {
                let done = job.take().expect("branch only runs with a job");
                if done.version != tracks.borrow().version {
                    Vec::new()
                } else {
                    match res {
                        Ok(Ok(Some(f))) => vec![
                            Message::Text(
                                json!({
                                    "type": "frame",
                                    "version": f.version,
                                    "frame": f.frame,
                                    "width": f.width,
                                    "height": f.height,
                                    "sha256": sha256_hex(&f.png),
                                })
                                .to_string()
                                .into(),
                            ),
                            Message::Binary(f.png.into()),
                        ],
                        Ok(Ok(None)) => Vec::new(),
                        Ok(Err(e)) => vec![error_message(done.version, done.frame, e.to_string())],
                        Err(e) => vec![error_message(
                            done.version,
                            done.frame,
                            format!("render task failed: {e}"),
                        )],
                    }
                }
            },
        };
        for m in outgoing {
            if socket.send(m).await.is_err() {
                return;
            }
        }
    }
    if let Some(j) = job {
        j.cancel();
    }
}
