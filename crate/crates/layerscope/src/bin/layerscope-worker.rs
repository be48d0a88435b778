//! Secure-worker process for partitioned training.
//!
//! Usage: `layerscope-worker <init.json> <params-in.blob> <params-out.blob>`
//! with the frame protocol on stdin/stdout. Exit codes: 0 on a clean finish,
//! 5 when the secure region exceeds its memory budget, 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use layerscope::enclave::protocol::WorkerInit;
use layerscope::enclave::run_worker;
use layerscope::error::Error;

fn run() -> Result<(), Error> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 3 {
        return Err(Error::InvalidArg(
            "usage: layerscope-worker <init.json> <params-in.blob> <params-out.blob>".into(),
        ));
    }
    let init: WorkerInit = serde_json::from_reader(std::fs::File::open(&args[0])?)?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    run_worker(
        &init,
        &PathBuf::from(&args[1]),
        &PathBuf::from(&args[2]),
        stdin,
        stdout,
    )
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::BudgetExceeded { .. }) => {
            eprintln!("layerscope-worker: {e}");
            ExitCode::from(5)
        }
        Err(e) => {
            eprintln!("layerscope-worker: {e}");
            ExitCode::from(1)
        }
    }
}
