//! Line-delimited JSON scoring protocol.
//!
//! Request: `{"id": k, "inputs": [[...], ...]}`; response:
//! `{"id": k, "probs": [p1, ...]}`. One response line per request line, in
//! order, with one probability in `[0, 1]` per input row.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ModelHandle;
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// How to launch an external scoring process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessSpec {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ProcessSpec {
    pub fn new(program: impl Into<String>) -> Self {
        ProcessSpec {
            program: program.into(),
            args: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Builds a spec from an argv-style list.
    pub fn from_argv(argv: &[String]) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("external command is empty".into()))?;
        Ok(ProcessSpec {
            program: program.clone(),
            args: args.to_vec(),
            timeout: DEFAULT_TIMEOUT,
        })
    }

    fn display(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Serialize, Deserialize)]
struct Request<'a> {
    id: u64,
    #[serde(borrow)]
    inputs: std::borrow::Cow<'a, [Vec<f64>]>,
}

#[derive(Serialize, Deserialize)]
struct Response {
    id: u64,
    probs: Vec<f64>,
}

pub(super) struct ExternalOracle {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    timeout: Duration,
}

impl ExternalOracle {
    pub(super) fn spawn(spec: &ProcessSpec) -> Result<Self> {
        let mut child = Command::new(&spec.program)
            .args(&spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| Error::Spawn {
                command: spec.display(),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalOracle {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            timeout: spec.timeout,
        })
    }

    pub(super) fn score(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&Request {
            id,
            inputs: batch.into(),
        })?;
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()?;

        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol("oracle closed its output".into()))
            }
        };
        let resp: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("malformed response line: {e}")))?;
        if resp.id != id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {id}",
                resp.id
            )));
        }
        if resp.probs.len() != batch.len() {
            return Err(Error::Protocol(format!(
                "expected {} probabilities, got {}",
                batch.len(),
                resp.probs.len()
            )));
        }
        if let Some(p) = resp.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Protocol(format!("probability {p} outside [0, 1]")));
        }
        Ok(resp.probs)
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Answers protocol requests with `handle` until `input` is exhausted.
pub fn serve(handle: &ModelHandle, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("malformed request line: {e}")))?;
        let probs = handle.forward(&req.inputs)?;
        serde_json::to_writer(&mut output, &Response { id: req.id, probs })?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
