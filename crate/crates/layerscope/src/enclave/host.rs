//! Host side of partitioned training: spawn the secure worker, drive the
//! lock-step per-batch protocol, reassemble the final model, and report
//! timing, boundary traffic, and memory accounting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::enclave::plan::{cut_label, validate_plan, MemoryAccount, PartitionPlan};
use crate::enclave::protocol::{Framed, Message, WorkerInit};
use crate::error::{Error, Result};
use crate::model::{backward_layers, forward_layers, write_param_blob, BatchCtx, Model};
use crate::ops::DropoutMode;
use crate::tensor::Tensor;
use crate::train::{self, train, EpochStats, SgdMomentum, TrainConfig};

/// Env var naming the worker executable, overriding sibling discovery.
pub const WORKER_ENV: &str = "LAYERSCOPE_WORKER";

/// Logical boundary crossings per batch: activations forward at the cut,
/// activation gradients backward. Bookkeeping frames ride along with these.
pub const CROSSINGS_PER_BATCH: u32 = 2;

#[derive(Debug)]
pub struct PartitionOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub account: MemoryAccount,
    pub wall_partitioned_s: f64,
    /// Bytes moved across the boundary during the first batch, both
    /// directions, framing included.
    pub boundary_bytes_per_batch: u64,
    pub crossings_per_batch: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub cut_label: String,
    pub cut_index: usize,
    pub param_layers_secure: usize,
    pub wall_time_monolithic_s: f64,
    pub wall_time_partitioned_s: f64,
    pub overhead_fraction: f64,
    pub boundary_bytes_per_batch: u64,
    pub crossings_per_batch: u32,
    pub memory_account: MemoryAccount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedCut {
    pub cut_label: String,
    pub cut_index: usize,
    pub total_bytes: u64,
    pub budget_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub arch: String,
    pub dataset: String,
    pub budget_bytes: u64,
    pub batch_size: usize,
    pub wall_monolithic_s: f64,
    pub reports: Vec<CostReport>,
    pub skipped: Vec<SkippedCut>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per feasible cut; skipped cuts live only in the JSON report.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cut_label,param_layers_secure,secure_bytes,copied_front_bytes,\
             wall_monolithic_s,wall_partitioned_s,overhead_fraction,bytes_per_batch\n",
        );
        for r in &self.reports {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.cut_label,
                r.param_layers_secure,
                r.memory_account.total_bytes,
                r.memory_account.copied_front_bytes(),
                r.wall_time_monolithic_s,
                r.wall_time_partitioned_s,
                r.overhead_fraction,
                r.boundary_bytes_per_batch,
            ));
        }
        out
    }
}

/// Locate the worker binary: `LAYERSCOPE_WORKER` if set, otherwise a
/// sibling of the current executable (also checking one directory up, where
/// cargo puts binaries relative to test executables).
pub fn worker_exe() -> Result<PathBuf> {
    if let Ok(p) = std::env::var(WORKER_ENV) {
        return Ok(PathBuf::from(p));
    }
    let name = format!("layerscope-worker{}", std::env::consts::EXE_SUFFIX);
    let exe = std::env::current_exe()?;
    let mut dir = exe.parent();
    while let Some(d) = dir {
        let candidate = d.join(&name);
        if candidate.is_file() {
            return Ok(candidate);
        }
        if !d.ends_with("deps") {
            break;
        }
        dir = d.parent();
    }
    Err(Error::Protocol(format!(
        "cannot locate {name} next to {}; set {WORKER_ENV}",
        exe.display()
    )))
}

static SCRATCH_SEQ: AtomicU64 = AtomicU64::new(0);

struct Scratch {
    init: PathBuf,
    params_in: PathBuf,
    params_out: PathBuf,
}

impl Scratch {
    fn new() -> Scratch {
        let dir = std::env::temp_dir();
        let tag = format!(
            "layerscope-{}-{}",
            std::process::id(),
            SCRATCH_SEQ.fetch_add(1, Ordering::Relaxed)
        );
        Scratch {
            init: dir.join(format!("{tag}-init.json")),
            params_in: dir.join(format!("{tag}-params-in.blob")),
            params_out: dir.join(format!("{tag}-params-out.blob")),
        }
    }

    fn cleanup(&self) {
        for p in [&self.init, &self.params_in, &self.params_out] {
            let _ = std::fs::remove_file(p);
        }
    }
}

struct WorkerSession {
    child: Child,
    framed: Framed<ChildStdout, ChildStdin>,
    scratch: Scratch,
    reaped: bool,
}

impl WorkerSession {
    fn expect(&mut self, want: &str) -> Result<Message> {
        match self.framed.recv() {
            Ok(m) => Ok(m),
            Err(e) => {
                // Pull the exit status into the error so a worker that
                // died (budget recheck, crash) is distinguishable.
                let status = self.child.wait();
                self.reaped = true;
                Err(Error::Protocol(format!(
                    "worker stream failed while waiting for {want}: {e} (worker status: {status:?})"
                )))
            }
        }
    }

    fn shutdown(mut self) -> Result<Scratch> {
        self.framed.send(&Message::Shutdown)?;
        match self.expect("shutdown ack")? {
            Message::StepDone => {}
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected message type {} as shutdown ack",
                    other.type_byte()
                )))
            }
        }
        let status = self.child.wait()?;
        self.reaped = true;
        if !status.success() {
            return Err(Error::Protocol(format!("worker exited with {status}")));
        }
        // Hand the scratch files to the caller so the final parameters can
        // be read before cleanup; mem::forget-free ownership transfer.
        let scratch = Scratch {
            init: self.scratch.init.clone(),
            params_in: self.scratch.params_in.clone(),
            params_out: self.scratch.params_out.clone(),
        };
        self.scratch = Scratch {
            init: PathBuf::new(),
            params_in: PathBuf::new(),
            params_out: PathBuf::new(),
        };
        Ok(scratch)
    }
}

impl Drop for WorkerSession {
    fn drop(&mut self) {
        if !self.reaped {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        self.scratch.cleanup();
    }
}

fn spawn_worker(model: &Model, plan: &PartitionPlan, cfg: &TrainConfig) -> Result<WorkerSession> {
    let scratch = Scratch::new();
    let init = WorkerInit {
        arch: model.arch_string(),
        input_shape: model.input_shape(),
        cut_index: plan.cut_index,
        budget_bytes: plan.budget_bytes,
        batch_size: plan.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        root_seed: cfg.seed,
    };
    let write = || -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(&scratch.init)?), &init)?;
        let tensors: Vec<&Tensor> = model.layers()[plan.cut_index..]
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [&p.weights.value, &p.bias.value])
            .collect();
        let mut w = BufWriter::new(File::create(&scratch.params_in)?);
        write_param_blob(&mut w, &tensors)?;
        w.flush()?;
        Ok(())
    };
    if let Err(e) = write() {
        scratch.cleanup();
        return Err(e);
    }

    let exe = worker_exe()?;
    let mut child = match Command::new(&exe)
        .arg(&scratch.init)
        .arg(&scratch.params_in)
        .arg(&scratch.params_out)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => {
            scratch.cleanup();
            return Err(Error::Protocol(format!(
                "failed to spawn {}: {e}",
                exe.display()
            )));
        }
    };
    let stdout = child.stdout.take().expect("piped stdout");
    let stdin = child.stdin.take().expect("piped stdin");
    let mut session = WorkerSession {
        child,
        framed: Framed::new(stdout, stdin),
        scratch,
        reaped: false,
    };
    match session.expect("ready")? {
        Message::StepDone => Ok(session),
        other => Err(Error::Protocol(format!(
            "unexpected message type {} as ready ack",
            other.type_byte()
        ))),
    }
}

fn import_suffix(model: &mut Model, cut: usize, path: &Path) -> Result<()> {
    let tensors = crate::model::read_param_blob(&mut BufReader::new(File::open(path)?))?;
    let mut supply = tensors.into_iter();
    for layer in &mut model.layers_mut()[cut..] {
        if let Some(p) = layer.params.as_mut() {
            for slot in [&mut p.weights, &mut p.bias] {
                let t = supply
                    .next()
                    .ok_or_else(|| Error::Protocol("final parameter blob too short".into()))?;
                if t.shape() != slot.value.shape() {
                    return Err(Error::Protocol(format!(
                        "final parameter shape {:?} does not match layer slot {:?}",
                        t.shape(),
                        slot.value.shape()
                    )));
                }
                slot.value = t;
            }
        }
    }
    if supply.next().is_some() {
        return Err(Error::Protocol("final parameter blob has extra tensors".into()));
    }
    Ok(())
}

/// Train with the stack split at `plan.cut_index`: the prefix in this
/// process, the suffix plus cost computation in a budget-checked worker
/// subprocess. With the same config this produces the same parameters as
/// [`train`], bit for bit — the cut only changes which process runs which
/// layers. The wall clock covers the training loop, not worker spawn or
/// parameter shipping.
pub fn run_partitioned_training(
    model: &Model,
    plan: &PartitionPlan,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<PartitionOutcome> {
    cfg.validate()?;
    if plan.batch_size != cfg.batch_size {
        return Err(Error::InvalidArg(format!(
            "plan is sized for batch {}, training config uses {}",
            plan.batch_size, cfg.batch_size
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArg("cannot train on an empty dataset".into()));
    }
    let account = validate_plan(model, plan)?;
    let stack_len = model.layers().len();

    if plan.cut_index > stack_len {
        // Empty secure region: degenerate to monolithic, nothing crosses.
        let mut m = model.clone();
        let t0 = Instant::now();
        let history = train(&mut m, dataset, cfg)?;
        return Ok(PartitionOutcome {
            model: m,
            history,
            account,
            wall_partitioned_s: t0.elapsed().as_secs_f64(),
            boundary_bytes_per_batch: 0,
            crossings_per_batch: 0,
        });
    }

    let cut = plan.cut_index;
    let mut session = spawn_worker(model, plan, cfg)?;
    let mut host_model = model.clone();
    let mut opt = SgdMomentum::for_layers(
        &host_model.layers()[..cut],
        cfg.learning_rate,
        cfg.momentum,
    );

    let n = dataset.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut boundary_bytes_per_batch = 0u64;
    let t0 = Instant::now();
    for epoch in 0..cfg.epochs {
        let order = train::epoch_order(n, cfg, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = dataset.batch(batch_indices);
            let ctx = BatchCtx {
                root_seed: cfg.seed,
                epoch: epoch as u64,
                batch: bi as u64,
            };
            let (act, caches) = forward_layers(
                &host_model.layers()[..cut],
                0,
                &x,
                DropoutMode::Train,
                &ctx,
                true,
            )?;
            let before = session.framed.bytes_total();
            session.framed.send(&Message::ForwardAct {
                epoch: epoch as u64,
                batch: bi as u64,
                labels: labels.iter().map(|&l| l as u32).collect(),
                act,
            })?;
            let (batch_loss, batch_correct) = match session.expect("loss")? {
                Message::Loss { loss_sum, correct } => (loss_sum, correct),
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected message type {} instead of loss",
                        other.type_byte()
                    )))
                }
            };
            let grad_cut = match session.expect("cut gradient")? {
                Message::BackwardGrad { grad } => grad,
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected message type {} instead of the cut gradient",
                        other.type_byte()
                    )))
                }
            };
            match session.expect("step ack")? {
                Message::StepDone => {}
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected message type {} as step ack",
                        other.type_byte()
                    )))
                }
            }
            if epoch == 0 && bi == 0 {
                boundary_bytes_per_batch = session.framed.bytes_total() - before;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            loss_sum += batch_loss;
            correct += batch_correct as usize;

            backward_layers(&mut host_model.layers_mut()[..cut], &caches, &grad_cut, false)?;
            opt.step(&mut host_model.layers_mut()[..cut]);
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    let wall_partitioned_s = t0.elapsed().as_secs_f64();

    let scratch = session.shutdown()?;
    let result = import_suffix(&mut host_model, cut, &scratch.params_out);
    scratch.cleanup();
    result?;

    Ok(PartitionOutcome {
        model: host_model,
        history,
        account,
        wall_partitioned_s,
        boundary_bytes_per_batch,
        crossings_per_batch: CROSSINGS_PER_BATCH,
    })
}

/// Time a plain monolithic run of the same training for comparison.
pub fn monolithic_baseline(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>, f64)> {
    let mut m = model.clone();
    let t0 = Instant::now();
    let history = train(&mut m, dataset, cfg)?;
    Ok((m, history, t0.elapsed().as_secs_f64()))
}

/// Try every cut from the last layer backwards under `budget_bytes`,
/// training through each feasible one and recording the rest as skipped.
/// The monolithic baseline is trained and timed once and shared by every
/// cut's overhead figure.
pub fn sweep_cuts(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    budget_bytes: u64,
) -> Result<SweepReport> {
    sweep_cuts_verified(model, dataset, cfg, budget_bytes, false)
}

/// [`sweep_cuts`] with an optional cross-check: when `verify` is set, every
/// feasible cut's final parameters are compared bitwise against the
/// monolithic baseline and any mismatch aborts the sweep.
pub fn sweep_cuts_verified(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    budget_bytes: u64,
    verify: bool,
) -> Result<SweepReport> {
    let (mono, _, wall_monolithic_s) = monolithic_baseline(model, dataset, cfg)?;
    let mono_params = mono.export_params();
    let stack_len = model.layers().len();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for cut_index in (0..stack_len).rev() {
        let plan = PartitionPlan {
            cut_index,
            budget_bytes,
            batch_size: cfg.batch_size,
        };
        let label = cut_label(model.arch(), cut_index);
        match validate_plan(model, &plan) {
            Err(Error::BudgetExceeded {
                total_bytes,
                budget_bytes,
            }) => {
                skipped.push(SkippedCut {
                    cut_label: label,
                    cut_index,
                    total_bytes,
                    budget_bytes,
                });
                continue;
            }
            Err(other) => return Err(other),
            Ok(_) => {}
        }
        let outcome = run_partitioned_training(model, &plan, dataset, cfg)?;
        if verify {
            let params = outcome.model.export_params();
            let ok = params.len() == mono_params.len()
                && params.iter().zip(&mono_params).all(|(a, b)| a.bits_eq(b));
            if !ok {
                return Err(Error::Protocol(format!(
                    "verification failed: cut {cut_index} ({label}) parameters \
                     differ from the monolithic baseline"
                )));
            }
        }
        reports.push(CostReport {
            cut_label: label,
            cut_index,
            param_layers_secure: outcome.account.param_layers_secure(),
            wall_time_monolithic_s: wall_monolithic_s,
            wall_time_partitioned_s: outcome.wall_partitioned_s,
            overhead_fraction: (outcome.wall_partitioned_s - wall_monolithic_s)
                / wall_monolithic_s,
            boundary_bytes_per_batch: outcome.boundary_bytes_per_batch,
            crossings_per_batch: outcome.crossings_per_batch,
            memory_account: outcome.account,
        });
    }
    Ok(SweepReport {
        arch: model.arch_string(),
        dataset: dataset.name.clone(),
        budget_bytes,
        batch_size: cfg.batch_size,
        wall_monolithic_s,
        reports,
        skipped,
    })
}
