//! Secure-worker side of partitioned training.
//!
//! The worker owns only the layers from the cut to the output plus the cost
//! computation. It re-checks its memory budget from the layer shapes before
//! allocating anything, then serves lock-step batch requests: forward the
//! received cut activations, report the loss, send back the cut gradient,
//! and apply its own SGD step. On SHUTDOWN it persists its parameters for
//! the host to reassemble. A bare end-of-stream between frames is a clean
//! stop without persisting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::arch::parse_arch;
use crate::enclave::plan::{validate_from_specs, PartitionPlan};
use crate::enclave::protocol::{Framed, Message, WorkerInit};
use crate::error::{Error, Result};
use crate::model::{
    backward_layers, forward_layers, layer_shapes, read_param_blob, write_param_blob, BatchCtx,
    LayerParams, LayerState,
};
use crate::ops::{softmax_cross_entropy, softmax_cross_entropy_backward, DropoutMode};
use crate::tensor::{ParamTensor, Tensor};
use crate::train::{count_correct, SgdMomentum};

/// Build the secure suffix stack from specs and a parameter blob holding
/// (weights, bias) pairs for each parameterized suffix layer in depth order.
fn build_suffix(init: &WorkerInit, params: Vec<Tensor>) -> Result<Vec<LayerState>> {
    let specs = parse_arch(&init.arch)?;
    let shapes = layer_shapes(&specs, init.input_shape)?;
    let cut = init.cut_index;
    let mut supply = params.into_iter();
    let mut layers = Vec::with_capacity(specs.len() - cut);
    for (spec, (in_shape, out_shape)) in specs[cut..].iter().zip(shapes[cut..].iter().cloned()) {
        let params = if spec.is_parameterized() {
            let weights = supply
                .next()
                .ok_or_else(|| Error::Protocol("parameter blob too short".into()))?;
            let bias = supply
                .next()
                .ok_or_else(|| Error::Protocol("parameter blob too short".into()))?;
            Some(LayerParams {
                weights: ParamTensor::new(weights),
                bias: ParamTensor::new(bias),
            })
        } else {
            None
        };
        layers.push(LayerState {
            spec: *spec,
            in_shape,
            out_shape,
            params,
        });
    }
    if supply.next().is_some() {
        return Err(Error::Protocol("parameter blob has extra tensors".into()));
    }
    Ok(layers)
}

/// Serve one training run over the given streams. Returns after a SHUTDOWN
/// handshake or a clean end-of-stream.
pub fn run_worker<R: Read, W: Write>(
    init: &WorkerInit,
    params_in: &Path,
    params_out: &Path,
    input: R,
    output: W,
) -> Result<()> {
    let specs = parse_arch(&init.arch)?;
    if init.cut_index > specs.len() {
        return Err(Error::Protocol(format!(
            "cut index {} is past the {}-layer stack; an empty region needs no worker",
            init.cut_index,
            specs.len()
        )));
    }
    // Budget recheck from shapes alone, before any parameter allocation.
    let plan = PartitionPlan {
        cut_index: init.cut_index,
        budget_bytes: init.budget_bytes,
        batch_size: init.batch_size,
    };
    validate_from_specs(&specs, init.input_shape, &plan)?;

    let blob = read_param_blob(&mut BufReader::new(File::open(params_in)?))?;
    let mut layers = build_suffix(init, blob)?;
    let mut opt = SgdMomentum::for_layers(&layers, init.learning_rate, init.momentum);

    let mut framed = Framed::new(input, output);
    framed.send(&Message::StepDone)?; // ready
    loop {
        match framed.recv_opt()? {
            Some(Message::ForwardAct {
                epoch,
                batch,
                labels,
                act,
            }) => {
                let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
                let ctx = BatchCtx {
                    root_seed: init.root_seed,
                    epoch,
                    batch,
                };
                let (logits, caches) =
                    forward_layers(&layers, init.cut_index, &act, DropoutMode::Train, &ctx, true)?;
                let sx = softmax_cross_entropy(&logits, &labels)?;
                framed.send(&Message::Loss {
                    loss_sum: sx.per_example.iter().sum(),
                    correct: count_correct(&sx.probs, &labels) as u64,
                })?;
                let grad_logits = softmax_cross_entropy_backward(&sx.probs, &labels);
                let grad_cut = backward_layers(&mut layers, &caches, &grad_logits, true)?
                    .expect("input gradient was requested");
                framed.send(&Message::BackwardGrad { grad: grad_cut })?;
                opt.step(&mut layers);
                framed.send(&Message::StepDone)?;
            }
            Some(Message::Shutdown) => {
                let tensors: Vec<&Tensor> = layers
                    .iter()
                    .filter_map(|l| l.params.as_ref())
                    .flat_map(|p| [&p.weights.value, &p.bias.value])
                    .collect();
                let mut w = BufWriter::new(File::create(params_out)?);
                write_param_blob(&mut w, &tensors)?;
                w.flush()?;
                framed.send(&Message::StepDone)?;
                return Ok(());
            }
            None => return Ok(()),
            Some(other) => {
                return Err(Error::Protocol(format!(
                    "unexpected message type {} from host",
                    other.type_byte()
                )));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use tempfile::tempdir;

    fn init_for(model: &Model, cut: usize, batch: usize) -> WorkerInit {
        WorkerInit {
            arch: model.arch_string(),
            input_shape: model.input_shape(),
            cut_index: cut,
            budget_bytes: 16 * 1024 * 1024,
            batch_size: batch,
            learning_rate: 0.01,
            momentum: 0.9,
            root_seed: 7,
        }
    }

    fn write_suffix_blob(model: &Model, cut: usize, path: &Path) {
        let tensors: Vec<&Tensor> = model.layers()[cut..]
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [&p.weights.value, &p.bias.value])
            .collect();
        let mut w = BufWriter::new(File::create(path).unwrap());
        write_param_blob(&mut w, &tensors).unwrap();
    }

    #[test]
    fn worker_over_budget_refuses_before_reading_params() {
        let m = Model::new("4C3-MP-8FC-3SM", [1, 6, 6], 1).unwrap();
        let mut init = init_for(&m, 0, 8);
        init.budget_bytes = 16;
        // The params file deliberately does not exist: the budget check
        // must fire first.
        let err = run_worker(
            &init,
            Path::new("/nonexistent/params.blob"),
            Path::new("/nonexistent/out.blob"),
            std::io::empty(),
            std::io::sink(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn clean_eof_without_shutdown_writes_nothing() {
        let dir = tempdir().unwrap();
        let m = Model::new("4C3-MP-8FC-3SM", [1, 6, 6], 1).unwrap();
        let cut = 2;
        let pin = dir.path().join("pin.blob");
        let pout = dir.path().join("pout.blob");
        write_suffix_blob(&m, cut, &pin);

        let mut out = Vec::new();
        run_worker(&init_for(&m, cut, 8), &pin, &pout, std::io::empty(), &mut out).unwrap();
        assert!(!pout.exists());
        // The ready ack is the single frame on the wire.
        let mut rx = Framed::new(out.as_slice(), std::io::sink());
        assert!(matches!(rx.recv().unwrap(), Message::StepDone));
        assert!(matches!(rx.recv_opt().unwrap(), None));
    }

    #[test]
    fn shutdown_handshake_persists_identical_params() {
        let dir = tempdir().unwrap();
        let m = Model::new("4C3-MP-8FC-3SM", [1, 6, 6], 5).unwrap();
        let cut = 3;
        let pin = dir.path().join("pin.blob");
        let pout = dir.path().join("pout.blob");
        write_suffix_blob(&m, cut, &pin);

        let mut wire = Vec::new();
        Framed::new(std::io::empty(), &mut wire)
            .send(&Message::Shutdown)
            .unwrap();
        let mut out = Vec::new();
        run_worker(&init_for(&m, cut, 8), &pin, &pout, wire.as_slice(), &mut out).unwrap();

        // No training steps happened, so the persisted suffix must be
        // bit-identical to what went in.
        let expect: Vec<&Tensor> = m.layers()[cut..]
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [&p.weights.value, &p.bias.value])
            .collect();
        let got = read_param_blob(&mut BufReader::new(File::open(&pout).unwrap())).unwrap();
        assert_eq!(expect.len(), got.len());
        for (a, b) in expect.iter().zip(&got) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn truncated_param_blob_rejected() {
        let dir = tempdir().unwrap();
        let m = Model::new("4C3-MP-8FC-3SM", [1, 6, 6], 5).unwrap();
        let pin = dir.path().join("pin.blob");
        // Blob for the head only, but the cut wants FC + head.
        write_suffix_blob(&m, 3, &pin);
        let err = run_worker(
            &init_for(&m, 2, 8),
            &pin,
            &dir.path().join("pout.blob"),
            std::io::empty(),
            std::io::sink(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
