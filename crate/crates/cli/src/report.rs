use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use minbal::dual_solver::SolveDiagnostics;
use minbal::{KktEntry, SolveResult};
use serde::Serialize;

/// A failed run, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data { code: &'static str, message: String },
    NonConvergence(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data { .. } => 2,
            Failure::NonConvergence(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    pub fn report(&self) -> ExitCode {
        match self {
            Failure::Usage(m) => eprintln!("error[usage]: {m}"),
            Failure::Data { code, message } => eprintln!("error[data:{code}]: {message}"),
            Failure::NonConvergence(m) => eprintln!("error[nonconvergence]: {m}"),
            Failure::Internal(m) => eprintln!("error[internal]: {m}"),
        }
        ExitCode::from(self.exit_code())
    }
}

impl From<minbal::Error> for Failure {
    fn from(e: minbal::Error) -> Self {
        use minbal::Error as E;
        let message = e.to_string();
        match e {
            E::Usage(m) => Failure::Usage(m),
            E::Data(d) => Failure::Data { code: d.code(), message },
            E::Io(_) => Failure::Data { code: "E_IO", message },
            E::InvalidInput(_) | E::Dimension { .. } | E::Domain(_) => Failure::Data { code: "E_INPUT", message },
            E::SingularGram { .. } => Failure::Data { code: "E_SINGULAR", message },
            E::Tuning(_) | E::NonFiniteIterate { .. } | E::Bracket { .. } => Failure::NonConvergence(message),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data {
            code: "E_IO",
            message: e.to_string(),
        }
    }
}

/// Common report envelope.
#[derive(Serialize)]
pub struct Envelope<'a, C: Serialize, P: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub config: &'a C,
    #[serde(flatten)]
    pub payload: P,
}

pub fn envelope<'a, C: Serialize, P: Serialize>(command: &'static str, deterministic: bool, config: &'a C, payload: P) -> Envelope<'a, C, P> {
    let generated_at = (!deterministic).then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    Envelope {
        command,
        version: env!("CARGO_PKG_VERSION"),
        generated_at,
        config,
        payload,
    }
}

/// Pretty JSON to `path`, or stdout when absent.
pub fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
pub struct LambdaEntry {
    pub name: String,
    pub value: f64,
}

/// Solution for one weighted group.
#[derive(Serialize)]
pub struct ArmReport {
    pub arm: &'static str,
    pub units: usize,
    pub delta: f64,
    pub converged: bool,
    pub status: String,
    pub iterations: usize,
    pub objective: f64,
    pub lambda: Vec<LambdaEntry>,
    pub kkt: Vec<KktEntry>,
    pub diagnostics: SolveDiagnostics,
    /// Weights over all units, zero outside the group; they sum to 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// `n * w`, on the inverse-propensity scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaled_weights: Option<Vec<f64>>,
}

impl ArmReport {
    pub fn new(arm: &'static str, units: usize, delta: f64, res: &SolveResult, names: &[String], with_weights: bool) -> Self {
        ArmReport {
            arm,
            units,
            delta,
            converged: res.converged,
            status: res.status().to_string(),
            iterations: res.iterations,
            objective: res.objective_value,
            lambda: names
                .iter()
                .zip(res.lambda.iter())
                .map(|(n, v)| LambdaEntry { name: n.clone(), value: *v })
                .collect(),
            kkt: res.kkt.clone(),
            diagnostics: res.diagnostics.clone(),
            weights: with_weights.then(|| res.weights.to_vec()),
            scaled_weights: with_weights.then(|| res.scaled_weights().to_vec()),
        }
    }
}
