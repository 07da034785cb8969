//! File-exchange hook for estimators that live outside this process.
//!
//! Protocol, all inside the exchange directory:
//!
//! 1. `input.pgm` (depth), `input_hha.ppm` (when an HHA image is present)
//!    and `landmarks.txt` (when landmarks are present) are written.
//! 2. The command runs as `sh -c <command> pendepth-estimator <dir>` with the
//!    exchange directory as working directory and as `$1`.
//! 3. On exit status 0, `params.txt` is read: pose (7), shape (K) and
//!    expression (L) values, one decimal per line, coefficients in
//!    normalized units.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use super::{EstimateError, Estimator, EstimatorInput, EstimatorOutput, FailureKind};
use crate::model::MorphableModel;
use crate::textio::{
    encode_depth_pgm, encode_hha_ppm, format_landmarks, parse_params, write_file, FormatError,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const PARAMS_FILE: &str = "params.txt";
const NAME: &str = "external";

#[derive(Debug, Clone)]
pub struct ExternalEstimator {
    pub command: String,
    pub exchange_dir: PathBuf,
    pub timeout: Duration,
}

impl ExternalEstimator {
    pub fn new(command: impl Into<String>, exchange_dir: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            exchange_dir: exchange_dir.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// One lock per exchange directory, shared across the process.
fn dir_lock(dir: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    let mut map = LOCKS.get_or_init(Default::default).lock().unwrap();
    map.entry(key).or_default().clone()
}

fn io_failure(e: impl std::fmt::Display) -> EstimateError {
    EstimateError::failed(NAME, FailureKind::Io, e.to_string())
}

impl Estimator for ExternalEstimator {
    fn name(&self) -> &str {
        NAME
    }

    fn estimate(
        &self,
        input: &EstimatorInput,
        model: &MorphableModel,
    ) -> Result<EstimatorOutput, EstimateError> {
        input.validate(model)?;
        let dir = &self.exchange_dir;
        fs::create_dir_all(dir).map_err(io_failure)?;
        let lock = dir_lock(dir);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());

        let params_path = dir.join(PARAMS_FILE);
        match fs::remove_file(&params_path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_failure(e)),
        }
        let depth_bytes = encode_depth_pgm(&input.depth).map_err(io_failure)?;
        write_file(&dir.join("input.pgm"), &depth_bytes).map_err(io_failure)?;
        if let Some(hha) = &input.hha {
            write_file(&dir.join("input_hha.ppm"), &encode_hha_ppm(hha)).map_err(io_failure)?;
        }
        if let Some(lms) = &input.landmarks {
            write_file(&dir.join("landmarks.txt"), format_landmarks(lms).as_bytes())
                .map_err(io_failure)?;
        }

        let stderr_path = dir.join("estimator.stderr");
        let stderr = fs::File::create(&stderr_path).map_err(io_failure)?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .arg("pendepth-estimator")
            .arg(dir)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::from(stderr))
            .spawn()
            .map_err(|e| {
                EstimateError::failed(NAME, FailureKind::CommandFailed, format!("spawn: {e}"))
            })?;

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait().map_err(io_failure)? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(EstimateError::failed(
                        NAME,
                        FailureKind::Timeout,
                        format!("command exceeded {:?}", self.timeout),
                    ));
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        };
        if !status.success() {
            let tail = fs::read_to_string(&stderr_path).unwrap_or_default();
            return Err(EstimateError::failed(
                NAME,
                FailureKind::CommandFailed,
                format!("{status}: {}", tail.trim()),
            ));
        }

        let text = fs::read_to_string(&params_path).map_err(|e| {
            EstimateError::failed(NAME, FailureKind::Malformed, format!("{PARAMS_FILE}: {e}"))
        })?;
        let params = parse_params(&text, model).map_err(|e| {
            let message = match &e {
                FormatError::Length { expected, found } => {
                    format!("{PARAMS_FILE} has {found} values, expected {expected}")
                }
                other => format!("{PARAMS_FILE}: {other}"),
            };
            EstimateError::failed(NAME, FailureKind::Malformed, message)
        })?;
        Ok(EstimatorOutput {
            params,
            converged: true,
            iterations: 1,
            final_residual: None,
            objective_log: Vec::new(),
        })
    }
}
