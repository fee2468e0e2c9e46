//! Canonical wire codec.
//!
//! A frame is a little-endian u32 byte length followed by a UTF-8 body of
//! the form `TAG[key=value;key=value]`. Encoding is canonical: keys appear
//! in a fixed sorted order per tag, floats print with 17 significant
//! digits (`{:.16e}`, exact round trip), strings are double-quoted with
//! backslash escapes, vectors are `[a,b]`, matrices `[[a,b],[c,d]]`, and
//! the summary payload nests as `{key=value;…}`. Decoding is
//! schema-directed and strict: a missing, duplicated, reordered, or
//! unknown key is a malformed frame, as is any trailing content.
//!
//! The length field of an incoming frame is validated against the size cap
//! before any buffer is sized from it.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::federation::message::{Message, ResultPayload, SessionConfig};
use crate::site::{ApproximationMethod, Partition, SiteSummary};

/// Default cap on one frame's body size: 64 MiB.
pub const DEFAULT_MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

/// Environment variable overriding the frame size cap (bytes).
pub const MAX_FRAME_BYTES_ENV: &str = "FEDGLMM_MAX_FRAME_BYTES";

/// Effective frame cap: the override when set and parseable, else default.
pub fn max_frame_bytes() -> usize {
    std::env::var(MAX_FRAME_BYTES_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 16)
        .unwrap_or(DEFAULT_MAX_FRAME_BYTES)
}

fn push_f64(out: &mut String, v: f64) {
    // {:.16e} prints 17 significant digits: enough for an exact round
    // trip, including -0.0, subnormals, infinities, and NaN.
    let _ = write!(out, "{v:.16e}");
}

fn push_str(out: &mut String, s: &str) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            _ => out.push(ch),
        }
    }
    out.push('"');
}

fn push_vector(out: &mut String, v: &DVector<f64>) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_f64(out, *x);
    }
    out.push(']');
}

fn push_matrix(out: &mut String, m: &DMatrix<f64>) {
    out.push('[');
    for r in 0..m.nrows() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            push_f64(out, m[(r, c)]);
        }
        out.push(']');
    }
    out.push(']');
}

fn push_summary(out: &mut String, s: &SiteSummary) {
    out.push('{');
    let _ = write!(out, "beta_echo=");
    push_vector(out, &s.beta_echo);
    let _ = write!(out, ";dtau=");
    push_f64(out, s.dtau);
    let _ = write!(out, ";hessian=");
    push_matrix(out, &s.hessian);
    let _ = write!(out, ";k_echo={}", s.k_echo);
    let _ = write!(out, ";lambda_echo=");
    push_f64(out, s.lambda_echo);
    let _ = write!(out, ";loglik=");
    push_f64(out, s.loglik);
    let _ = write!(out, ";mu_hat=");
    push_f64(out, s.mu_hat);
    let _ = write!(out, ";n_i={};p={}", s.n_i, s.p);
    let _ = write!(out, ";score=");
    push_vector(out, &s.score);
    out.push('}');
}

/// Encode a message body (no length prefix).
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(msg.tag());
    out.push('[');
    match msg {
        Message::Hello { site_id, n_i, p, protocol_version } => {
            let _ = write!(out, "n_i={n_i};p={p};protocol_version={protocol_version};site_id=");
            push_str(&mut out, site_id);
        }
        Message::Config(c) => {
            let _ = write!(out, "k={};lambda=", c.method.quadrature_order());
            push_f64(&mut out, c.lambda);
            let _ = write!(out, ";method=");
            push_str(&mut out, c.method.label());
            let _ = write!(out, ";partition=");
            push_str(&mut out, c.partition.label());
            let _ = write!(out, ";penalize_intercept={};split_ratio=", c.penalize_intercept);
            push_f64(&mut out, c.split_ratio);
            let _ = write!(out, ";split_seed={}", c.split_seed);
        }
        Message::Compute { round, beta, tau } => {
            let _ = write!(out, "beta=");
            push_vector(&mut out, beta);
            let _ = write!(out, ";round={round};tau=");
            push_f64(&mut out, *tau);
        }
        Message::Summary { round, payload } => {
            let _ = write!(out, "payload=");
            push_summary(&mut out, payload);
            let _ = write!(out, ";round={round}");
        }
        Message::Result(r) => {
            let _ = write!(out, "aic=");
            push_f64(&mut out, r.aic);
            let _ = write!(out, ";beta=");
            push_vector(&mut out, &r.beta);
            let _ = write!(out, ";bic=");
            push_f64(&mut out, r.bic);
            let _ = write!(out, ";ci_lower=");
            push_vector(&mut out, &r.ci_lower);
            let _ = write!(out, ";ci_upper=");
            push_vector(&mut out, &r.ci_upper);
            let _ = write!(out, ";converged={};iterations={};lambda=", r.converged, r.iterations);
            push_f64(&mut out, r.lambda);
            let _ = write!(out, ";loglik=");
            push_f64(&mut out, r.loglik);
            let _ = write!(out, ";n_train={};n_validation={};p_values=", r.n_train, r.n_validation);
            push_vector(&mut out, &r.p_values);
            let _ = write!(out, ";se=");
            push_vector(&mut out, &r.se);
            let _ = write!(out, ";tau=");
            push_f64(&mut out, r.tau);
            let _ = write!(out, ";val_aic=");
            push_f64(&mut out, r.val_aic);
            let _ = write!(out, ";val_bic=");
            push_f64(&mut out, r.val_bic);
            let _ = write!(out, ";val_loglik=");
            push_f64(&mut out, r.val_loglik);
            let _ = write!(out, ";z=");
            push_vector(&mut out, &r.z);
        }
        Message::Abort { reason } => {
            let _ = write!(out, "reason=");
            push_str(&mut out, reason);
        }
        Message::Bye => {}
    }
    out.push(']');
    out.into_bytes()
}

/// Encode with the length prefix, ready to write to a stream.
pub fn frame_message(msg: &Message) -> Vec<u8> {
    let body = encode_message(msg);
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Cursor { s, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn lit(&mut self, lit: &str) -> Result<()> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(Error::malformed(format!(
                "expected '{lit}' at byte {} of '{}'",
                self.pos,
                truncate(self.s)
            )))
        }
    }

    fn key(&mut self, name: &str) -> Result<()> {
        self.lit(name)?;
        self.lit("=")
    }

    fn sep(&mut self) -> Result<()> {
        self.lit(";")
    }

    /// Scalar token: bytes up to the next delimiter.
    fn token(&mut self) -> Result<&'a str> {
        let rest = self.rest();
        let end = rest
            .find(|c| matches!(c, ';' | ']' | '}' | ','))
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(Error::malformed(format!("empty value at byte {}", self.pos)));
        }
        self.pos += end;
        Ok(&rest[..end])
    }

    fn u64_value(&mut self) -> Result<u64> {
        let t = self.token()?;
        if !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::malformed(format!("'{t}' is not an unsigned integer")));
        }
        t.parse::<u64>().map_err(|_| Error::malformed(format!("integer '{t}' out of range")))
    }

    fn f64_value(&mut self) -> Result<f64> {
        let t = self.token()?;
        t.parse::<f64>().map_err(|_| Error::malformed(format!("'{t}' is not a float")))
    }

    fn bool_value(&mut self) -> Result<bool> {
        match self.token()? {
            "true" => Ok(true),
            "false" => Ok(false),
            t => Err(Error::malformed(format!("'{t}' is not a boolean"))),
        }
    }

    fn string_value(&mut self) -> Result<String> {
        self.lit("\"")?;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        loop {
            let Some((i, ch)) = chars.next() else {
                return Err(Error::malformed("unterminated string"));
            };
            match ch {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, '"')) => out.push('"'),
                    Some((_, '\\')) => out.push('\\'),
                    _ => return Err(Error::malformed("invalid string escape")),
                },
                _ => out.push(ch),
            }
        }
    }

    fn vector_value(&mut self) -> Result<DVector<f64>> {
        self.lit("[")?;
        let mut vals = Vec::new();
        loop {
            vals.push(self.f64_value()?);
            if self.rest().starts_with(',') {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.lit("]")?;
        Ok(DVector::from_vec(vals))
    }

    fn matrix_value(&mut self) -> Result<DMatrix<f64>> {
        self.lit("[")?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        loop {
            self.lit("[")?;
            let mut row = Vec::new();
            loop {
                row.push(self.f64_value()?);
                if self.rest().starts_with(',') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            self.lit("]")?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::malformed("ragged matrix rows"));
                }
            }
            rows.push(row);
            if self.rest().starts_with(',') {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.lit("]")?;
        let r = rows.len();
        let c = rows[0].len();
        Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
    }

    fn summary_value(&mut self) -> Result<SiteSummary> {
        self.lit("{")?;
        self.key("beta_echo")?;
        let beta_echo = self.vector_value()?;
        self.sep()?;
        self.key("dtau")?;
        let dtau = self.f64_value()?;
        self.sep()?;
        self.key("hessian")?;
        let hessian = self.matrix_value()?;
        self.sep()?;
        self.key("k_echo")?;
        let k_echo = self.u64_value()?;
        self.sep()?;
        self.key("lambda_echo")?;
        let lambda_echo = self.f64_value()?;
        self.sep()?;
        self.key("loglik")?;
        let loglik = self.f64_value()?;
        self.sep()?;
        self.key("mu_hat")?;
        let mu_hat = self.f64_value()?;
        self.sep()?;
        self.key("n_i")?;
        let n_i = self.u64_value()?;
        self.sep()?;
        self.key("p")?;
        let p = self.u64_value()?;
        self.sep()?;
        self.key("score")?;
        let score = self.vector_value()?;
        self.lit("}")?;
        let p = usize::try_from(p).map_err(|_| Error::malformed("p out of range"))?;
        if beta_echo.len() != p || score.len() != p || hessian.nrows() != p || hessian.ncols() != p {
            return Err(Error::malformed("summary dimensions do not match p"));
        }
        Ok(SiteSummary {
            p,
            n_i: usize::try_from(n_i).map_err(|_| Error::malformed("n_i out of range"))?,
            loglik,
            score,
            hessian,
            mu_hat,
            dtau,
            beta_echo,
            lambda_echo,
            k_echo: usize::try_from(k_echo).map_err(|_| Error::malformed("k_echo out of range"))?,
        })
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.s.len() {
            Ok(())
        } else {
            Err(Error::malformed(format!(
                "trailing content after frame body: '{}'",
                truncate(self.rest())
            )))
        }
    }
}

fn truncate(s: &str) -> String {
    if s.len() <= 48 {
        s.to_string()
    } else {
        let mut end = 48;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

/// Decode one frame body into a message. Strict: schema violations of any
/// kind are an error, never a lossy parse.
pub fn decode_message(body: &[u8]) -> Result<Message> {
    let text = std::str::from_utf8(body)
        .map_err(|_| Error::malformed("frame body is not valid UTF-8"))?;
    let open = text
        .find('[')
        .ok_or_else(|| Error::malformed("frame body has no opening bracket"))?;
    let tag = &text[..open];
    let mut c = Cursor::new(text);
    c.pos = open + 1;
    let msg = match tag {
        "HELLO" => {
            c.key("n_i")?;
            let n_i = c.u64_value()?;
            c.sep()?;
            c.key("p")?;
            let p = c.u64_value()?;
            c.sep()?;
            c.key("protocol_version")?;
            let protocol_version = c.u64_value()?;
            c.sep()?;
            c.key("site_id")?;
            let site_id = c.string_value()?;
            Message::Hello { site_id, n_i, p, protocol_version }
        }
        "CONFIG" => {
            c.key("k")?;
            let k = c.u64_value()?;
            c.sep()?;
            c.key("lambda")?;
            let lambda = c.f64_value()?;
            c.sep()?;
            c.key("method")?;
            let method_label = c.string_value()?;
            c.sep()?;
            c.key("partition")?;
            let partition_label = c.string_value()?;
            c.sep()?;
            c.key("penalize_intercept")?;
            let penalize_intercept = c.bool_value()?;
            c.sep()?;
            c.key("split_ratio")?;
            let split_ratio = c.f64_value()?;
            c.sep()?;
            c.key("split_seed")?;
            let split_seed = c.u64_value()?;
            let k = usize::try_from(k).map_err(|_| Error::malformed("k out of range"))?;
            let method = match method_label.as_str() {
                "la" if k == 1 => ApproximationMethod::Laplace,
                "la" => return Err(Error::malformed(format!("method la requires k=1, got {k}"))),
                "gh" => ApproximationMethod::GaussHermite(k),
                other => return Err(Error::malformed(format!("unknown method '{other}'"))),
            };
            let partition = match partition_label.as_str() {
                "train" => Partition::Train,
                "validation" => Partition::Validation,
                other => return Err(Error::malformed(format!("unknown partition '{other}'"))),
            };
            Message::Config(SessionConfig {
                method,
                lambda,
                penalize_intercept,
                partition,
                split_ratio,
                split_seed,
            })
        }
        "COMPUTE" => {
            c.key("beta")?;
            let beta = c.vector_value()?;
            c.sep()?;
            c.key("round")?;
            let round = c.u64_value()?;
            c.sep()?;
            c.key("tau")?;
            let tau = c.f64_value()?;
            Message::Compute { round, beta, tau }
        }
        "SUMMARY" => {
            c.key("payload")?;
            let payload = c.summary_value()?;
            c.sep()?;
            c.key("round")?;
            let round = c.u64_value()?;
            Message::Summary { round, payload }
        }
        "RESULT" => {
            c.key("aic")?;
            let aic = c.f64_value()?;
            c.sep()?;
            c.key("beta")?;
            let beta = c.vector_value()?;
            c.sep()?;
            c.key("bic")?;
            let bic = c.f64_value()?;
            c.sep()?;
            c.key("ci_lower")?;
            let ci_lower = c.vector_value()?;
            c.sep()?;
            c.key("ci_upper")?;
            let ci_upper = c.vector_value()?;
            c.sep()?;
            c.key("converged")?;
            let converged = c.bool_value()?;
            c.sep()?;
            c.key("iterations")?;
            let iterations = c.u64_value()?;
            c.sep()?;
            c.key("lambda")?;
            let lambda = c.f64_value()?;
            c.sep()?;
            c.key("loglik")?;
            let loglik = c.f64_value()?;
            c.sep()?;
            c.key("n_train")?;
            let n_train = c.u64_value()?;
            c.sep()?;
            c.key("n_validation")?;
            let n_validation = c.u64_value()?;
            c.sep()?;
            c.key("p_values")?;
            let p_values = c.vector_value()?;
            c.sep()?;
            c.key("se")?;
            let se = c.vector_value()?;
            c.sep()?;
            c.key("tau")?;
            let tau = c.f64_value()?;
            c.sep()?;
            c.key("val_aic")?;
            let val_aic = c.f64_value()?;
            c.sep()?;
            c.key("val_bic")?;
            let val_bic = c.f64_value()?;
            c.sep()?;
            c.key("val_loglik")?;
            let val_loglik = c.f64_value()?;
            c.sep()?;
            c.key("z")?;
            let z = c.vector_value()?;
            let p = beta.len();
            if [&ci_lower, &ci_upper, &p_values, &se, &z].iter().any(|v| v.len() != p) {
                return Err(Error::malformed("result vectors have mismatched lengths"));
            }
            Message::Result(ResultPayload {
                beta,
                tau,
                lambda,
                loglik,
                aic,
                bic,
                val_loglik,
                val_aic,
                val_bic,
                se,
                z,
                p_values,
                ci_lower,
                ci_upper,
                n_train,
                n_validation,
                iterations,
                converged,
            })
        }
        "ABORT" => {
            c.key("reason")?;
            let reason = c.string_value()?;
            Message::Abort { reason }
        }
        "BYE" => Message::Bye,
        other => return Err(Error::malformed(format!("unknown tag '{}'", truncate(other)))),
    };
    c.lit("]")?;
    c.done()?;
    Ok(msg)
}

/// Incremental frame assembler for nonblocking streams.
///
/// Feed it raw bytes as they arrive; it yields complete frame bodies in
/// order. The length prefix of the pending frame is validated against the
/// cap as soon as the four header bytes are present, before any body-sized
/// buffer exists.
#[derive(Debug)]
pub struct FrameReader {
    cap: usize,
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new(cap: usize) -> Self {
        FrameReader { cap, buf: Vec::new() }
    }

    fn pending_len(&self) -> Result<Option<usize>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > self.cap {
            return Err(Error::FrameTooLarge { len: len as u64, cap: self.cap as u64 });
        }
        Ok(Some(len))
    }

    /// Append raw bytes. Fails fast when the pending frame's declared
    /// length exceeds the cap.
    pub fn feed(&mut self, bytes: &[u8]) -> Result<()> {
        self.buf.extend_from_slice(bytes);
        self.pending_len().map(|_| ())
    }

    /// Pop the next complete frame body, if one is buffered.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>> {
        match self.pending_len()? {
            Some(len) if self.buf.len() >= 4 + len => {
                let body = self.buf[4..4 + len].to_vec();
                self.buf.drain(..4 + len);
                Ok(Some(body))
            }
            _ => Ok(None),
        }
    }

    /// Bytes buffered but not yet consumed.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Write one framed message to a blocking stream.
pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&frame_message(msg))?;
    w.flush()?;
    Ok(())
}

/// Read one framed message from a blocking stream.
pub fn read_message(r: &mut impl Read, cap: usize) -> Result<Message> {
    let mut header = [0u8; 4];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes(header) as usize;
    if len > cap {
        return Err(Error::FrameTooLarge { len: len as u64, cap: cap as u64 });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_message(&body)
}
