//! Subprocess plugins.
//!
//! Evaluator: the request document is written to stdin as one JSON object
//! `{"artifact_dir", "examples": [{"example_id", "payload_ref"}]}`; the
//! plugin answers with one JSON object per stdout line
//! `{"example_id", "score", "fingerprint"?, "diagnostics"?, "agent_stdout"?}`
//! and exits 0.
//!
//! Mutator: invoked as `<command...> <session_dir> <create|refine>`; exit 0
//! means success.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::evaluation::{Evaluator, ExampleRef, ScoredExample};

pub const DEFAULT_EVALUATE_TIMEOUT: Duration = Duration::from_secs(600);
pub const DEFAULT_CREATE_TIMEOUT: Duration = Duration::from_secs(1800);
pub const DEFAULT_REFINE_TIMEOUT: Duration = Duration::from_secs(900);

const STDERR_TAIL_BYTES: usize = 2048;

#[derive(Debug, Serialize)]
struct EvalRequestDoc<'a> {
    artifact_dir: String,
    examples: &'a [ExampleRef],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationPhase {
    Create,
    Refine,
}

impl MutationPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            MutationPhase::Create => "create",
            MutationPhase::Refine => "refine",
        }
    }
}

impl fmt::Display for MutationPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Produces or revises an artifact inside a session directory.
///
/// Create must leave files under `session_dir/artifact`; refine may modify
/// them in place (leaving them untouched means "no revision").
pub trait Mutator: Send + Sync {
    fn mutate(&self, session_dir: &Path, phase: MutationPhase) -> Result<(), String>;
}

struct Finished {
    status: ExitStatus,
    stdout: String,
    stderr: String,
}

fn run_with_timeout(
    argv: &[String],
    extra_args: &[&str],
    stdin: Option<Vec<u8>>,
    timeout: Duration,
) -> Result<Finished, String> {
    let (program, args) = argv.split_first().ok_or("empty plugin command")?;
    let mut child = Command::new(program)
        .args(args)
        .args(extra_args)
        .stdin(if stdin.is_some() {
            Stdio::piped()
        } else {
            Stdio::null()
        })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("failed to launch {program}: {e}"))?;

    let writer = child.stdin.take().zip(stdin).map(|(mut pipe, bytes)| {
        thread::spawn(move || {
            // A plugin that exits without reading stdin closes the pipe; that
            // is reported through its exit status, not here.
            let _ = pipe.write_all(&bytes);
        })
    });
    let mut out_pipe = child.stdout.take().ok_or("stdout unavailable")?;
    let mut err_pipe = child.stderr.take().ok_or("stderr unavailable")?;
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let status = match child.wait_timeout(timeout).map_err(|e| e.to_string())? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(format!("timed out after {} s", timeout.as_secs_f64()));
        }
    };
    if let Some(w) = writer {
        let _ = w.join();
    }
    let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    Ok(Finished {
        status,
        stdout,
        stderr,
    })
}

fn tail(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

fn failure_message(done: &Finished) -> String {
    let stderr = tail(done.stderr.trim(), STDERR_TAIL_BYTES);
    if stderr.is_empty() {
        format!("plugin exited with {}", done.status)
    } else {
        format!("plugin exited with {}: {stderr}", done.status)
    }
}

#[derive(Debug, Clone)]
pub struct SubprocessEvaluator {
    command: Vec<String>,
    timeout: Duration,
}

impl SubprocessEvaluator {
    pub fn new(command: Vec<String>, timeout: Duration) -> Self {
        SubprocessEvaluator { command, timeout }
    }
}

impl Evaluator for SubprocessEvaluator {
    fn evaluate(
        &self,
        artifact_dir: &Path,
        examples: &[ExampleRef],
    ) -> Result<Vec<ScoredExample>, String> {
        let request = EvalRequestDoc {
            artifact_dir: artifact_dir.display().to_string(),
            examples,
        };
        let body = serde_json::to_vec(&request).map_err(|e| e.to_string())?;
        let done = run_with_timeout(&self.command, &[], Some(body), self.timeout)?;
        if !done.status.success() {
            return Err(failure_message(&done));
        }
        let mut lines = Vec::new();
        for (number, line) in done.stdout.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ScoredExample>(line) {
                Ok(scored) => lines.push(scored),
                Err(e) => log::warn!("evaluator output line {} ignored: {e}", number + 1),
            }
        }
        Ok(lines)
    }
}

#[derive(Debug, Clone)]
pub struct SubprocessMutator {
    command: Vec<String>,
    create_timeout: Duration,
    refine_timeout: Duration,
}

impl SubprocessMutator {
    pub fn new(command: Vec<String>, create_timeout: Duration, refine_timeout: Duration) -> Self {
        SubprocessMutator {
            command,
            create_timeout,
            refine_timeout,
        }
    }
}

impl Mutator for SubprocessMutator {
    fn mutate(&self, session_dir: &Path, phase: MutationPhase) -> Result<(), String> {
        let timeout = match phase {
            MutationPhase::Create => self.create_timeout,
            MutationPhase::Refine => self.refine_timeout,
        };
        let dir = session_dir.display().to_string();
        let done = run_with_timeout(&self.command, &[&dir, phase.as_str()], None, timeout)?;
        if done.status.success() {
            Ok(())
        } else {
            Err(failure_message(&done))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn examples() -> Vec<ExampleRef> {
        vec![ExampleRef::new("e1", "p1"), ExampleRef::new("e2", "p2")]
    }

    #[test]
    fn evaluator_parses_reply_lines() {
        let eval = SubprocessEvaluator::new(
            sh(
                r#"cat >/dev/null; echo '{"example_id":"e1","score":1,"fingerprint":"x"}'; echo 'garbage'; echo '{"example_id":"e2","score":0.9,"agent_stdout":"dbg"}'"#,
            ),
            Duration::from_secs(10),
        );
        let lines = eval.evaluate(Path::new("/tmp"), &examples()).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].fingerprint.as_deref(), Some("x"));
        assert_eq!(lines[1].agent_stdout.as_deref(), Some("dbg"));
    }

    #[test]
    fn evaluator_receives_request_document() {
        let eval = SubprocessEvaluator::new(
            sh(
                r#"read req; case "$req" in *'"artifact_dir":"/some/dir"'*'"example_id":"e2"'*) echo '{"example_id":"e2","score":1}';; esac"#,
            ),
            Duration::from_secs(10),
        );
        let lines = eval.evaluate(Path::new("/some/dir"), &examples()).unwrap();
        assert_eq!(lines.len(), 1);
    }

    #[test]
    fn evaluator_crash_is_an_error() {
        let eval = SubprocessEvaluator::new(sh("echo broken >&2; exit 3"), Duration::from_secs(10));
        let err = eval.evaluate(Path::new("/tmp"), &examples()).unwrap_err();
        assert!(err.contains("broken"), "{err}");
    }

    #[test]
    fn evaluator_timeout_is_an_error() {
        let eval = SubprocessEvaluator::new(sh("sleep 5"), Duration::from_millis(200));
        let err = eval.evaluate(Path::new("/tmp"), &examples()).unwrap_err();
        assert!(err.contains("timed out"));
    }

    #[test]
    fn missing_program_is_an_error() {
        let eval =
            SubprocessEvaluator::new(vec!["/definitely/not/here".into()], Duration::from_secs(1));
        assert!(eval.evaluate(Path::new("/tmp"), &examples()).is_err());
    }

    #[test]
    fn mutator_gets_session_and_phase() {
        let dir = tempfile::tempdir().unwrap();
        let m = SubprocessMutator::new(
            sh(r#"echo "$1" > "$0/phase""#),
            Duration::from_secs(10),
            Duration::from_secs(10),
        );
        m.mutate(dir.path(), MutationPhase::Refine).unwrap();
        let phase = std::fs::read_to_string(dir.path().join("phase")).unwrap();
        assert_eq!(phase.trim(), "refine");
        let failing = SubprocessMutator::new(
            sh("exit 1"),
            Duration::from_secs(10),
            Duration::from_secs(10),
        );
        assert!(failing.mutate(dir.path(), MutationPhase::Create).is_err());
    }
}
