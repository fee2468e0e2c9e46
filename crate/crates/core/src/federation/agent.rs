//! Site agent: connects to a coordinator, answers compute rounds against
//! local data, and records how the session ended.
//!
//! The agent owns the raw site rows. The train/validation partition is
//! derived locally from the split parameters in `CONFIG` using the same
//! splitter the in-process mode uses, so rows never leave the site and the
//! two execution modes stay bit-identical.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::coordinator::train_validation_split;
use crate::error::{Error, Result};
use crate::federation::codec::{
    decode_message, frame_message, max_frame_bytes, FrameReader,
};
use crate::federation::message::{Message, ResultPayload, SessionConfig, PROTOCOL_VERSION};
use crate::model::{SiteData, Theta};
use crate::site::SiteEngine;

/// Agent session settings.
#[derive(Clone, Debug)]
pub struct AgentOptions {
    /// Connection attempts before giving up (exponential backoff between).
    pub connect_attempts: u32,
    /// Backoff before the second attempt; doubles per retry.
    pub initial_backoff: Duration,
    pub max_frame_bytes: usize,
    /// Cooperative cancellation; checked between reads, sends `ABORT`.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Append a line per frame sent or received to this file.
    pub capture_path: Option<PathBuf>,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions {
            connect_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            max_frame_bytes: max_frame_bytes(),
            cancel: None,
            capture_path: None,
        }
    }
}

/// What happened during one agent session.
#[derive(Clone, Debug)]
pub struct SessionLog {
    pub site_id: String,
    /// Compute rounds answered.
    pub rounds: u64,
    /// Final model broadcast by the coordinator, when the fit succeeded.
    pub result: Option<ResultPayload>,
}

fn connect(addr: &str, options: &AgentOptions) -> Result<TcpStream> {
    let attempts = options.connect_attempts.max(1);
    let mut backoff = options.initial_backoff;
    let mut last_err: Option<std::io::Error> = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(backoff);
            backoff *= 2;
        }
        match TcpStream::connect(addr) {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                log::warn!("connect to {addr} failed (attempt {}): {e}", attempt + 1);
                last_err = Some(e);
            }
        }
    }
    Err(last_err.map_or_else(
        || Error::protocol(format!("could not connect to {addr}")),
        Error::Io,
    ))
}

fn capture_line(file: &mut Option<File>, direction: char, body: &[u8]) {
    if let Some(f) = file {
        let text = String::from_utf8_lossy(body);
        let _ = writeln!(f, "{direction} coordinator {}", text.escape_default());
    }
}

fn send(
    stream: &mut TcpStream,
    msg: &Message,
    capture: &mut Option<File>,
) -> Result<()> {
    let frame = frame_message(msg);
    capture_line(capture, '>', &frame[4..]);
    stream.write_all(&frame)?;
    stream.flush()?;
    Ok(())
}

/// Run one site's side of a fitting session.
///
/// Connects (with retries), introduces the site, then answers `COMPUTE`
/// rounds until `BYE`. A coordinator `ABORT` or a broken connection is an
/// error; cancellation sends `ABORT` and errors out.
pub fn run_site(addr: &str, data: SiteData, options: &AgentOptions) -> Result<SessionLog> {
    let mut capture = match &options.capture_path {
        None => None,
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
    };
    let mut stream = connect(addr, options)?;
    stream.set_nodelay(true)?;
    // Short read timeout so cancellation is polled between frames.
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;

    let site_id = data.site_id().to_string();
    send(
        &mut stream,
        &Message::Hello {
            site_id: site_id.clone(),
            n_i: data.len() as u64,
            p: data.dim() as u64,
            protocol_version: PROTOCOL_VERSION,
        },
        &mut capture,
    )?;

    let mut reader = FrameReader::new(options.max_frame_bytes);
    let mut log = SessionLog { site_id: site_id.clone(), rounds: 0, result: None };
    let mut session: Option<(SessionConfig, SiteEngine)> = None;
    let mut last_round: u64 = 0;
    let mut chunk = [0u8; 65536];

    loop {
        let body = loop {
            if let Some(body) = reader.next_frame()? {
                break body;
            }
            if options.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed)) {
                let _ = send(
                    &mut stream,
                    &Message::Abort { reason: "site interrupted".to_string() },
                    &mut capture,
                );
                return Err(Error::Aborted("interrupted by signal".to_string()));
            }
            match stream.read(&mut chunk) {
                Ok(0) => {
                    return Err(Error::protocol("coordinator closed the connection"));
                }
                Ok(n) => reader.feed(&chunk[..n])?,
                Err(e)
                    if matches!(
                        e.kind(),
                        std::io::ErrorKind::WouldBlock
                            | std::io::ErrorKind::TimedOut
                            | std::io::ErrorKind::Interrupted
                    ) => {}
                Err(e) => return Err(e.into()),
            }
        };
        capture_line(&mut capture, '<', &body);
        match decode_message(&body)? {
            Message::Config(config) => {
                let rebuild = match &session {
                    None => true,
                    Some((old, _)) => {
                        old.split_ratio != config.split_ratio
                            || old.split_seed != config.split_seed
                    }
                };
                if rebuild {
                    let mut split = train_validation_split(
                        std::slice::from_ref(&data),
                        config.split_ratio,
                        config.split_seed,
                    )?;
                    let s = split.pop().expect("one site in, one split out");
                    session = Some((config, SiteEngine::new(s.train, s.validation)));
                } else if let Some((old, _)) = &mut session {
                    *old = config;
                }
            }
            Message::Compute { round, beta, tau } => {
                let Some((config, engine)) = &mut session else {
                    let _ = send(
                        &mut stream,
                        &Message::Abort { reason: "COMPUTE before CONFIG".to_string() },
                        &mut capture,
                    );
                    return Err(Error::protocol("COMPUTE before CONFIG"));
                };
                if round <= last_round {
                    let _ = send(
                        &mut stream,
                        &Message::Abort { reason: "round number did not increase".to_string() },
                        &mut capture,
                    );
                    return Err(Error::protocol(format!(
                        "round {round} after round {last_round}"
                    )));
                }
                last_round = round;
                let theta = Theta::new(beta, tau)?;
                let payload = match engine.summary(
                    &theta,
                    config.method,
                    config.lambda,
                    config.penalize_intercept,
                    config.partition,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        let _ = send(
                            &mut stream,
                            &Message::Abort { reason: e.to_string() },
                            &mut capture,
                        );
                        return Err(e);
                    }
                };
                log.rounds += 1;
                send(&mut stream, &Message::Summary { round, payload }, &mut capture)?;
            }
            Message::Result(result) => {
                log.result = Some(result);
            }
            Message::Bye => return Ok(log),
            Message::Abort { reason } => {
                return Err(Error::Aborted(format!("coordinator aborted: {reason}")));
            }
            other => {
                return Err(Error::protocol(format!(
                    "unexpected {} from coordinator",
                    other.tag()
                )));
            }
        }
    }
}
