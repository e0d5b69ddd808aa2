//! External-process oracle: any executable that speaks the line-delimited
//! protocol over stdin/stdout can serve as the black box. One message per
//! line, one outstanding request at a time.
//!
//! Handshake: engine sends `{"hello":{"h":H,"w":W,"c":C}}`, the oracle
//! replies `{"ready":{"classes":K}}`. Requests are
//! `{"id":u64,"pixels":[H·W·C reals]}`, responses
//! `{"id":u64,"probs":[K reals]}`. The engine sends `{"bye":true}` and
//! closes the stream on shutdown. Any deviation is a protocol error.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use crate::tensor::{ImageTensor, ProbabilityVector};

use super::{ClassifierOracle, OracleError};

/// Wire messages of the oracle protocol.
pub mod protocol {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ShapeSpec {
        pub h: usize,
        pub w: usize,
        pub c: usize,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Hello {
        pub hello: ShapeSpec,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ClassCount {
        pub classes: usize,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Ready {
        pub ready: ClassCount,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ClassifyRequest {
        pub id: u64,
        pub pixels: Vec<f64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ClassifyResponse {
        pub id: u64,
        pub probs: Vec<f64>,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Bye {
        pub bye: bool,
    }
}

/// A child process speaking the oracle protocol. Single-stream: one
/// outstanding request at a time; concurrent attacks each spawn their own
/// process.
pub struct ExternalOracle {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
    num_classes: usize,
    input_shape: (usize, usize, usize),
}

impl ExternalOracle {
    /// Spawns `command` (via `sh -c`) and completes the handshake,
    /// adopting whatever class count the oracle declares.
    pub fn spawn(command: &str, input_shape: (usize, usize, usize)) -> Result<Self, OracleError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| OracleError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout was piped"));
        let mut oracle = Self {
            child,
            stdin: Some(stdin),
            stdout,
            next_id: 0,
            num_classes: 0,
            input_shape,
        };

        let (h, w, c) = input_shape;
        oracle.send_line(
            &protocol::Hello {
                hello: protocol::ShapeSpec { h, w, c },
            },
            "handshake",
        )?;
        let line = oracle.read_line("handshake")?;
        let ready: protocol::Ready = serde_json::from_str(&line)
            .map_err(|e| OracleError::Handshake(format!("bad ready line `{}`: {e}", line.trim())))?;
        if ready.ready.classes == 0 {
            return Err(OracleError::Handshake(
                "oracle declared zero classes".to_string(),
            ));
        }
        oracle.num_classes = ready.ready.classes;
        Ok(oracle)
    }

    fn send_line<T: serde::Serialize>(
        &mut self,
        message: &T,
        stage: &'static str,
    ) -> Result<(), OracleError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or(OracleError::ChildExited { stage })?;
        let line = serde_json::to_string(message).expect("protocol messages serialize");
        let write = stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush());
        write.map_err(|source| {
            if source.kind() == std::io::ErrorKind::BrokenPipe {
                OracleError::ChildExited { stage }
            } else {
                OracleError::RequestWrite(source)
            }
        })
    }

    fn read_line(&mut self, stage: &'static str) -> Result<String, OracleError> {
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(OracleError::ResponseRead)?;
        if n == 0 {
            return Err(OracleError::ChildExited { stage });
        }
        Ok(line)
    }
}

impl ClassifierOracle for ExternalOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn classify(&mut self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        if image.shape() != self.input_shape {
            return Err(OracleError::ShapeMismatch {
                expected: self.input_shape,
                got: image.shape(),
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.send_line(
            &protocol::ClassifyRequest {
                id,
                pixels: image.data().to_vec(),
            },
            "request",
        )?;
        let line = self.read_line("response")?;
        let response: protocol::ClassifyResponse = serde_json::from_str(&line)
            .map_err(|e| OracleError::MalformedResponse(format!("`{}`: {e}", line.trim())))?;
        if response.id != id {
            return Err(OracleError::IdMismatch {
                expected: id,
                got: response.id,
            });
        }
        if response.probs.len() != self.num_classes {
            return Err(OracleError::ClassCountMismatch {
                expected: self.num_classes,
                got: response.probs.len(),
            });
        }
        Ok(ProbabilityVector::new(response.probs)?)
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = writeln!(stdin, "{}", serde_json::to_string(&protocol::Bye { bye: true }).unwrap());
            let _ = stdin.flush();
            // dropping stdin closes the stream
        }
        for _ in 0..100 {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) => std::thread::sleep(Duration::from_millis(20)),
                Err(_) => break,
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Spawns an external oracle and checks that its declared class count
/// matches the expected one.
pub fn spawn_external_oracle(
    command: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<ExternalOracle, OracleError> {
    let oracle = ExternalOracle::spawn(command, input_shape)?;
    if oracle.num_classes() != num_classes {
        return Err(OracleError::HandshakeClassMismatch {
            expected: num_classes,
            declared: oracle.num_classes(),
        });
    }
    Ok(oracle)
}
