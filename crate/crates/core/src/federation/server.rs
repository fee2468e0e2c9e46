//! TCP coordinator: accepts site connections, drives the fit through a
//! network-backed [`SummaryProvider`], and closes the session with
//! `RESULT` + `BYE` or a broadcast `ABORT`.
//!
//! The coordinator is single-threaded. Sockets run nonblocking and each
//! connection owns a resumable frame reader, so one slow site never blocks
//! reads from the others; determinism comes from aggregating summaries in
//! ascending site-id order regardless of arrival order.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::coordinator::{fit, FitResult, ModelConfig, SummaryProvider};
use crate::error::{Error, Result};
use crate::federation::codec::{
    decode_message, frame_message, max_frame_bytes, FrameReader,
};
use crate::federation::message::{Message, ResultPayload, SessionConfig, PROTOCOL_VERSION};
use crate::model::Theta;
use crate::site::{Partition, SiteSummary};

/// Environment variable overriding the per-round summary timeout (seconds).
pub const ROUND_TIMEOUT_ENV: &str = "FEDGLMM_ROUND_TIMEOUT_SECS";

fn default_round_timeout() -> Duration {
    let secs = std::env::var(ROUND_TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(300);
    Duration::from_secs(secs)
}

/// Coordinator session settings.
#[derive(Clone, Debug)]
pub struct CoordinatorOptions {
    /// Number of sites that must connect before fitting starts.
    pub expected_sites: usize,
    /// How long to wait for the full roster.
    pub accept_timeout: Duration,
    /// How long to wait for all summaries within one round.
    pub round_timeout: Duration,
    pub max_frame_bytes: usize,
    /// Cooperative cancellation (e.g. a SIGINT flag); checked between
    /// socket operations, triggers a broadcast `ABORT`.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Append a line per frame sent or received to this file.
    pub capture_path: Option<PathBuf>,
}

impl CoordinatorOptions {
    pub fn new(expected_sites: usize) -> Self {
        CoordinatorOptions {
            expected_sites,
            accept_timeout: Duration::from_secs(120),
            round_timeout: default_round_timeout(),
            max_frame_bytes: max_frame_bytes(),
            cancel: None,
            capture_path: None,
        }
    }
}

struct Conn {
    stream: TcpStream,
    reader: FrameReader,
    site_id: String,
}

fn cancelled(cancel: &Option<Arc<AtomicBool>>) -> bool {
    cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed))
}

/// Write a whole frame to a nonblocking stream, spinning on WouldBlock.
fn write_frame(stream: &mut TcpStream, bytes: &[u8], deadline: Instant) -> Result<()> {
    let mut written = 0;
    while written < bytes.len() {
        match stream.write(&bytes[written..]) {
            Ok(0) => return Err(Error::protocol("peer closed connection during write")),
            Ok(n) => written += n,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(Error::RoundTimeout { round: 0, waited_secs: 0.0 });
                }
                std::thread::sleep(Duration::from_micros(100));
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let _ = stream.flush();
    Ok(())
}

fn open_capture(path: &Option<PathBuf>) -> Result<Option<File>> {
    match path {
        None => Ok(None),
        Some(p) => Ok(Some(OpenOptions::new().create(true).append(true).open(p)?)),
    }
}

fn capture_line(file: &mut Option<File>, direction: char, peer: &str, body: &[u8]) {
    if let Some(f) = file {
        let text = String::from_utf8_lossy(body);
        let _ = writeln!(f, "{direction} {peer} {}", text.escape_default());
    }
}

/// Wait for `expected_sites` HELLOs, enforcing protocol version, unique
/// site ids, and a consistent coefficient dimension.
fn accept_sites(
    listener: &TcpListener,
    options: &CoordinatorOptions,
    capture: &mut Option<File>,
) -> Result<(Vec<Conn>, usize)> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + options.accept_timeout;
    let mut pending: Vec<(TcpStream, FrameReader)> = Vec::new();
    let mut conns: Vec<Conn> = Vec::new();
    let mut dim: Option<u64> = None;

    while conns.len() < options.expected_sites {
        if cancelled(&options.cancel) {
            abort_conns(&mut conns, "interrupted", capture);
            return Err(Error::Aborted("interrupted while waiting for sites".to_string()));
        }
        if Instant::now() > deadline {
            abort_conns(&mut conns, "roster incomplete", capture);
            return Err(Error::RoundTimeout {
                round: 0,
                waited_secs: options.accept_timeout.as_secs_f64(),
            });
        }
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(true)?;
                stream.set_nodelay(true)?;
                pending.push((stream, FrameReader::new(options.max_frame_bytes)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }

        let mut i = 0;
        while i < pending.len() {
            match poll_hello(&mut pending[i]) {
                Ok(None) => {
                    i += 1;
                }
                Ok(Some((site_id, n_i, p, version))) => {
                    let (mut stream, reader) = pending.swap_remove(i);
                    if version != PROTOCOL_VERSION {
                        let abort = Message::Abort {
                            reason: format!(
                                "protocol version {version} not supported, expected {PROTOCOL_VERSION}"
                            ),
                        };
                        let _ = write_frame(
                            &mut stream,
                            &frame_message(&abort),
                            Instant::now() + Duration::from_secs(1),
                        );
                        abort_conns(&mut conns, "version mismatch in roster", capture);
                        return Err(Error::VersionMismatch { peer: version, expected: PROTOCOL_VERSION });
                    }
                    if conns.iter().any(|c| c.site_id == site_id) {
                        log::warn!("duplicate site id '{site_id}', rejecting the new connection");
                        let abort = Message::Abort {
                            reason: format!("site id '{site_id}' already connected"),
                        };
                        let _ = write_frame(
                            &mut stream,
                            &frame_message(&abort),
                            Instant::now() + Duration::from_secs(1),
                        );
                        continue;
                    }
                    if n_i == 0 {
                        let abort =
                            Message::Abort { reason: "site reported zero rows".to_string() };
                        let _ = write_frame(
                            &mut stream,
                            &frame_message(&abort),
                            Instant::now() + Duration::from_secs(1),
                        );
                        continue;
                    }
                    match dim {
                        None => dim = Some(p),
                        Some(d) if d != p => {
                            abort_conns(&mut conns, "inconsistent covariate dimensions", capture);
                            return Err(Error::protocol(format!(
                                "site '{site_id}' reports p = {p}, roster has p = {d}"
                            )));
                        }
                        _ => {}
                    }
                    log::info!("site '{site_id}' joined ({n_i} rows, p = {p})");
                    conns.push(Conn { stream, reader, site_id });
                }
                Err(e) => {
                    log::warn!("connection dropped before HELLO: {e}");
                    pending.swap_remove(i);
                }
            }
        }
        std::thread::sleep(Duration::from_micros(500));
    }
    conns.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    let p = usize::try_from(dim.expect("roster is non-empty"))
        .map_err(|_| Error::protocol("covariate dimension out of range"))?;
    Ok((conns, p))
}

fn poll_hello(slot: &mut (TcpStream, FrameReader)) -> Result<Option<(String, u64, u64, u64)>> {
    let (stream, reader) = slot;
    let mut chunk = [0u8; 4096];
    match stream.read(&mut chunk) {
        Ok(0) => return Err(Error::protocol("connection closed before HELLO")),
        Ok(n) => reader.feed(&chunk[..n])?,
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
        Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
        Err(e) => return Err(e.into()),
    }
    match reader.next_frame()? {
        None => Ok(None),
        Some(body) => match decode_message(&body)? {
            Message::Hello { site_id, n_i, p, protocol_version } => {
                Ok(Some((site_id, n_i, p, protocol_version)))
            }
            other => Err(Error::protocol(format!(
                "expected HELLO, got {}",
                other.tag()
            ))),
        },
    }
}

fn abort_conns(conns: &mut [Conn], reason: &str, capture: &mut Option<File>) {
    let frame = frame_message(&Message::Abort { reason: reason.to_string() });
    for conn in conns {
        capture_line(capture, '>', &conn.site_id, &frame[4..]);
        let _ = write_frame(
            &mut conn.stream,
            &frame,
            Instant::now() + Duration::from_secs(1),
        );
    }
}

struct NetworkProvider {
    conns: Vec<Conn>,
    p: usize,
    round: u64,
    current: Option<(f64, Partition)>,
    base: SessionConfig,
    round_timeout: Duration,
    cancel: Option<Arc<AtomicBool>>,
    capture: Option<File>,
}

impl NetworkProvider {
    fn broadcast(&mut self, msg: &Message) -> Result<()> {
        let frame = frame_message(msg);
        let deadline = Instant::now() + self.round_timeout;
        for conn in &mut self.conns {
            capture_line(&mut self.capture, '>', &conn.site_id, &frame[4..]);
            write_frame(&mut conn.stream, &frame, deadline)?;
        }
        Ok(())
    }

    fn abort_all(&mut self, reason: &str) {
        abort_conns(&mut self.conns, reason, &mut self.capture);
    }

    fn gather_round(&mut self, round: u64, theta: &Theta, lambda: f64) -> Result<Vec<SiteSummary>> {
        let deadline = Instant::now() + self.round_timeout;
        let mut slots: Vec<Option<SiteSummary>> = vec![None; self.conns.len()];
        let mut chunk = [0u8; 65536];
        while slots.iter().any(Option::is_none) {
            if cancelled(&self.cancel) {
                self.abort_all("interrupted");
                return Err(Error::Aborted("interrupted during round".to_string()));
            }
            if Instant::now() > deadline {
                self.abort_all("round timed out");
                return Err(Error::RoundTimeout {
                    round,
                    waited_secs: self.round_timeout.as_secs_f64(),
                });
            }
            let mut progressed = false;
            for (i, conn) in self.conns.iter_mut().enumerate() {
                if slots[i].is_some() {
                    continue;
                }
                match conn.stream.read(&mut chunk) {
                    Ok(0) => {
                        let id = conn.site_id.clone();
                        self.abort_all("a site disconnected");
                        return Err(Error::protocol(format!("site '{id}' disconnected mid-round")));
                    }
                    Ok(n) => {
                        progressed = true;
                        conn.reader.feed(&chunk[..n])?;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                    Err(e) => {
                        let id = conn.site_id.clone();
                        self.abort_all("socket error");
                        return Err(Error::protocol(format!("site '{id}': {e}")));
                    }
                }
                while let Some(body) = conn.reader.next_frame()? {
                    capture_line(&mut self.capture, '<', &conn.site_id, &body);
                    match decode_message(&body)? {
                        Message::Summary { round: r, payload } => {
                            if r != round {
                                let id = conn.site_id.clone();
                                self.abort_all("round desynchronized");
                                return Err(Error::protocol(format!(
                                    "site '{id}' answered round {r}, expected {round}"
                                )));
                            }
                            if payload.p != self.p
                                || payload.beta_echo != theta.beta
                                || payload.lambda_echo != lambda
                            {
                                let id = conn.site_id.clone();
                                self.abort_all("summary echo mismatch");
                                return Err(Error::protocol(format!(
                                    "site '{id}' echoed stale parameters"
                                )));
                            }
                            slots[i] = Some(payload);
                        }
                        Message::Abort { reason } => {
                            let id = conn.site_id.clone();
                            self.abort_all("a site aborted");
                            return Err(Error::Aborted(format!("site '{id}': {reason}")));
                        }
                        other => {
                            let id = conn.site_id.clone();
                            self.abort_all("unexpected message");
                            return Err(Error::protocol(format!(
                                "site '{id}' sent {} mid-round",
                                other.tag()
                            )));
                        }
                    }
                }
            }
            if !progressed {
                std::thread::sleep(Duration::from_micros(200));
            }
        }
        Ok(slots.into_iter().map(Option::unwrap).collect())
    }
}

impl SummaryProvider for NetworkProvider {
    fn site_count(&self) -> usize {
        self.conns.len()
    }

    fn dim(&self) -> usize {
        self.p
    }

    fn site_ids(&self) -> Vec<String> {
        self.conns.iter().map(|c| c.site_id.clone()).collect()
    }

    fn collect(
        &mut self,
        theta: &Theta,
        lambda: f64,
        partition: Partition,
    ) -> Result<Vec<SiteSummary>> {
        if cancelled(&self.cancel) {
            self.abort_all("interrupted");
            return Err(Error::Aborted("interrupted before round".to_string()));
        }
        if self.current != Some((lambda, partition)) {
            let mut config = self.base.clone();
            config.lambda = lambda;
            config.partition = partition;
            self.broadcast(&Message::Config(config))?;
            self.current = Some((lambda, partition));
        }
        self.round += 1;
        let round = self.round;
        self.broadcast(&Message::Compute { round, beta: theta.beta.clone(), tau: theta.tau })?;
        self.gather_round(round, theta, lambda)
    }
}

/// Run a full coordinator session on an already-bound listener.
///
/// Waits for the expected roster, fits the model over the connected sites,
/// then broadcasts `RESULT` and `BYE` (or `ABORT` with the error). The
/// listener is consumed; its port closes once the roster is complete.
pub fn run_coordinator(
    listener: TcpListener,
    options: CoordinatorOptions,
    config: &ModelConfig,
) -> Result<FitResult> {
    if options.expected_sites == 0 {
        return Err(Error::invalid_argument("coordinator expects at least one site"));
    }
    config.validate()?;
    let mut capture = open_capture(&options.capture_path)?;
    let (conns, p) = accept_sites(&listener, &options, &mut capture)?;
    drop(listener);

    let mut provider = NetworkProvider {
        conns,
        p,
        round: 0,
        current: None,
        base: SessionConfig {
            method: config.method,
            lambda: 0.0,
            penalize_intercept: config.penalize_intercept,
            partition: Partition::Train,
            split_ratio: config.split_ratio,
            split_seed: config.split_seed,
        },
        round_timeout: options.round_timeout,
        cancel: options.cancel.clone(),
        capture,
    };
    match fit(&mut provider, config) {
        Ok(result) => {
            provider.broadcast(&Message::Result(ResultPayload::from(&result)))?;
            provider.broadcast(&Message::Bye)?;
            Ok(result)
        }
        Err(e) => {
            provider.abort_all(&e.to_string());
            Err(e)
        }
    }
}
