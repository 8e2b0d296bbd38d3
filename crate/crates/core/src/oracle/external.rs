//! Client side of the wire protocol, over a child process's stdio or TCP.
//!
//! Requests are tagged with increasing ids and may be pipelined; a reader
//! thread routes every response to the caller waiting on its id, so replies
//! may arrive in any order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::protocol::{encode, Request, Response, PROTOCOL_VERSION};
use super::Oracle;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Shell command whose stdin/stdout carry the frames.
    Exec(String),
    /// `host:port`
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(Error::InvalidParams("empty exec command".into()));
            }
            Ok(Endpoint::Exec(cmd.to_string()))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else {
            Err(Error::InvalidParams(format!(
                "endpoint {s:?} must start with exec: or tcp:"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalOptions {
    pub timeout: Duration,
    /// When set, sequences are sent as token strings instead of ids.
    pub vocab: Option<Vocabulary>,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            vocab: None,
        }
    }
}

#[derive(Debug)]
enum Reply {
    LogOdds(f64),
    Logits(Vec<f64>),
}

type Pending = Arc<Mutex<HashMap<u64, Sender<Result<Reply>>>>>;

struct Shared {
    pending: Pending,
    /// Set once the stream is gone; new requests fail immediately.
    closed: Mutex<Option<String>>,
}

pub struct ExternalOracle {
    writer: Mutex<Box<dyn Write + Send>>,
    shared: Arc<Shared>,
    next_id: AtomicU64,
    classes: usize,
    opts: ExternalOptions,
    child: Mutex<Option<Child>>,
    tcp: Option<TcpStream>,
    reader: Option<JoinHandle<()>>,
}

impl ExternalOracle {
    pub fn connect(endpoint: &Endpoint, opts: ExternalOptions) -> Result<Self> {
        match endpoint {
            Endpoint::Exec(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(format!("exec {cmd}"))
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::OracleUnavailable(format!("spawn {cmd:?}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::handshake(Box::new(stdin), stdout, Some(child), None, opts)
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::OracleUnavailable(format!("connect {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read_half = stream.try_clone()?;
                let write_half = stream.try_clone()?;
                Self::handshake(Box::new(write_half), read_half, None, Some(stream), opts)
            }
        }
    }

    /// Speaks the protocol over an arbitrary byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, opts: ExternalOptions) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(Box::new(writer), reader, None, None, opts)
    }

    fn handshake<R: Read + Send + 'static>(
        writer: Box<dyn Write + Send>,
        reader: R,
        child: Option<Child>,
        tcp: Option<TcpStream>,
        opts: ExternalOptions,
    ) -> Result<Self> {
        let shared = Arc::new(Shared {
            pending: Arc::new(Mutex::new(HashMap::new())),
            closed: Mutex::new(None),
        });
        let (hello_tx, hello_rx) = mpsc::channel();
        let handle = {
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || read_loop(BufReader::new(reader), shared, hello_tx))
        };
        let mut oracle = Self {
            writer: Mutex::new(writer),
            shared,
            next_id: AtomicU64::new(1),
            classes: 0,
            opts,
            child: Mutex::new(child),
            tcp,
            reader: Some(handle),
        };
        oracle.send(&[Request::Hello {
            version: PROTOCOL_VERSION,
        }])?;
        let classes = match hello_rx.recv_timeout(oracle.opts.timeout) {
            Ok(Ok(classes)) => classes,
            Ok(Err(e)) => return Err(e),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Timeout(oracle.opts.timeout.as_millis() as u64))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::OracleUnavailable(
                    "stream closed during handshake".into(),
                ))
            }
        };
        if classes < 2 {
            return Err(Error::Protocol(format!(
                "handshake reports {classes} classes"
            )));
        }
        oracle.classes = classes;
        Ok(oracle)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn send(&self, frames: &[Request]) -> Result<()> {
        let mut w = self.writer.lock().expect("writer lock");
        for f in frames {
            w.write_all(encode(f)?.as_bytes())
                .map_err(|e| Error::OracleUnavailable(format!("write: {e}")))?;
        }
        w.flush()
            .map_err(|e| Error::OracleUnavailable(format!("write: {e}")))
    }

    fn request(&self, seq: &[TokenId]) -> Result<Request> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        Ok(match &self.opts.vocab {
            None => Request::Score {
                id,
                ids: Some(seq.to_vec()),
                tokens: None,
            },
            Some(vocab) => {
                let tokens = seq
                    .iter()
                    .map(|&t| {
                        vocab.token(t).map(str::to_string).ok_or(Error::OutOfVocab {
                            id: t,
                            size: vocab.len(),
                        })
                    })
                    .collect::<Result<_>>()?;
                Request::Score {
                    id,
                    ids: None,
                    tokens: Some(tokens),
                }
            }
        })
    }

    /// Sends all requests back to back, then collects the replies in request order.
    fn roundtrip(&self, seqs: &[&[TokenId]]) -> Result<Vec<Reply>> {
        if let Some(msg) = self.shared.closed.lock().expect("closed lock").clone() {
            return Err(Error::OracleUnavailable(msg));
        }
        let frames = seqs
            .iter()
            .map(|s| self.request(s))
            .collect::<Result<Vec<_>>>()?;
        let mut waits: Vec<(u64, Receiver<Result<Reply>>)> = Vec::with_capacity(frames.len());
        {
            let mut pending = self.shared.pending.lock().expect("pending lock");
            for f in &frames {
                let Request::Score { id, .. } = f else {
                    unreachable!()
                };
                let (tx, rx) = mpsc::channel();
                pending.insert(*id, tx);
                waits.push((*id, rx));
            }
        }
        if let Err(e) = self.send(&frames) {
            self.forget(waits.iter().map(|(id, _)| *id));
            return Err(e);
        }
        let deadline = Instant::now() + self.opts.timeout;
        let mut out = Vec::with_capacity(waits.len());
        for (i, (_, rx)) in waits.iter().enumerate() {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(r) => match r {
                    Ok(reply) => out.push(reply),
                    Err(e) => {
                        self.forget(waits[i..].iter().map(|(id, _)| *id));
                        return Err(e);
                    }
                },
                Err(RecvTimeoutError::Timeout) => {
                    self.forget(waits[i..].iter().map(|(id, _)| *id));
                    return Err(Error::Timeout(self.opts.timeout.as_millis() as u64));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let msg = self.shared.closed.lock().expect("closed lock").clone();
                    return Err(Error::OracleUnavailable(
                        msg.unwrap_or_else(|| "closed".into()),
                    ));
                }
            }
        }
        Ok(out)
    }

    fn forget(&self, ids: impl Iterator<Item = u64>) {
        let mut pending = self.shared.pending.lock().expect("pending lock");
        for id in ids {
            pending.remove(&id);
        }
    }

    fn to_log_odds(&self, reply: Reply) -> Result<f64> {
        match reply {
            Reply::LogOdds(x) => Ok(x),
            Reply::Logits(l) if l.len() == 2 => Ok(l[1] - l[0]),
            Reply::Logits(l) => Err(Error::Protocol(format!(
                "{} logits returned where two-class log odds are required",
                l.len()
            ))),
        }
    }

    /// Raw class logits. Two-class log odds replies are returned as `[0, x]`.
    pub fn score_logits(&self, seq: &[TokenId]) -> Result<Vec<f64>> {
        match self.roundtrip(&[seq])?.pop().expect("one reply") {
            Reply::Logits(l) => Ok(l),
            Reply::LogOdds(x) => Ok(vec![0.0, x]),
        }
    }
}

impl Oracle<f64> for ExternalOracle {
    fn score(&self, seq: &[TokenId]) -> Result<f64> {
        let reply = self.roundtrip(&[seq])?.pop().expect("one reply");
        self.to_log_odds(reply)
    }

    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<f64>> {
        let refs: Vec<&[TokenId]> = seqs.iter().map(|s| &s[..]).collect();
        self.roundtrip(&refs)?
            .into_iter()
            .map(|r| self.to_log_odds(r))
            .collect()
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let _ = self.send(&[Request::Shutdown]);
        if let Some(tcp) = &self.tcp {
            let _ = tcp.shutdown(Shutdown::Write);
        }
        let owned_stream =
            self.tcp.is_some() || self.child.lock().map(|c| c.is_some()).unwrap_or(false);
        if let Some(mut child) = self.child.lock().ok().and_then(|mut c| c.take()) {
            // closing stdin lets well-behaved servers exit on EOF as well
            *self.writer.lock().expect("writer lock") = Box::new(std::io::sink());
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(10))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        if let Some(tcp) = &self.tcp {
            let _ = tcp.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.reader.take() {
            if owned_stream || h.is_finished() {
                let _ = h.join();
            }
        }
    }
}

fn read_loop<R: BufRead>(reader: R, shared: Arc<Shared>, hello: Sender<Result<usize>>) {
    let mut hello = Some(hello);
    let mut reason = String::from("oracle closed the stream");
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                reason = format!("read: {e}");
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let frame: Response = match serde_json::from_str(&line) {
            Ok(f) => f,
            Err(e) => {
                reason = format!("malformed frame {line:?}: {e}");
                break;
            }
        };
        match frame {
            Response::Hello { version, classes } => {
                if let Some(tx) = hello.take() {
                    let r = if version == PROTOCOL_VERSION {
                        Ok(classes)
                    } else {
                        Err(Error::Protocol(format!("server speaks version {version}")))
                    };
                    let _ = tx.send(r);
                }
            }
            Response::Score {
                id,
                log_odds,
                logits,
            } => {
                let reply = match (log_odds, logits) {
                    (Some(x), None) if x.is_finite() => Ok(Reply::LogOdds(x)),
                    (None, Some(l)) if !l.is_empty() && l.iter().all(|x| x.is_finite()) => {
                        Ok(Reply::Logits(l))
                    }
                    _ => Err(Error::Protocol(format!("invalid score frame {line:?}"))),
                };
                deliver(&shared, id, reply);
            }
            Response::Error {
                id: Some(id),
                message,
            } => {
                deliver(&shared, id, Err(Error::Protocol(message)));
            }
            Response::Error { id: None, message } => {
                if let Some(tx) = hello.take() {
                    let _ = tx.send(Err(Error::Protocol(message)));
                }
            }
        }
    }
    *shared.closed.lock().expect("closed lock") = Some(reason.clone());
    if let Some(tx) = hello.take() {
        let _ = tx.send(Err(Error::OracleUnavailable(reason.clone())));
    }
    let mut pending = shared.pending.lock().expect("pending lock");
    for (_, tx) in pending.drain() {
        let _ = tx.send(Err(Error::OracleUnavailable(reason.clone())));
    }
}

/// Replies for unknown or timed-out ids are dropped.
fn deliver(shared: &Shared, id: u64, reply: Result<Reply>) {
    if let Some(tx) = shared.pending.lock().expect("pending lock").remove(&id) {
        let _ = tx.send(reply);
    }
}
