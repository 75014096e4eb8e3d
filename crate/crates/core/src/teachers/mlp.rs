use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, Params};
use crate::tensor::{Adam, CosineSchedule, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpTrainConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without an improvement of `min_delta` in training loss before
    /// stopping.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        MlpTrainConfig {
            hidden: [128, 64],
            dropout: 0.2,
            epochs: 200,
            batch_size: 128,
            learning_rate: 0.001,
            patience: 20,
            min_delta: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpTrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
}

/// Mean cross-entropy of softmax(`logits`) against 0/1 labels, recorded.
pub fn cross_entropy(tape: &mut Tape, logits: crate::tensor::Var, y: &[u8]) -> Result<crate::tensor::Var> {
    let n = y.len();
    let mut onehot = vec![0.0; n * 2];
    for (i, &c) in y.iter().enumerate() {
        onehot[i * 2 + c as usize] = 1.0;
    }
    let target = tape.constant(Tensor::new(n, 2, onehot)?);
    let p = tape.softmax(logits, 1.0)?;
    let p = tape.clamp_min(p, 1e-12);
    let lp = tape.ln(p);
    let m = tape.mul(lp, target)?;
    let s = tape.sum(m);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Trains an `F -> hidden[0] -> hidden[1] -> 2` rectifier network with
/// dropout by minibatch cross-entropy.
pub fn train_mlp(x: &Tensor, y: &[u8], cfg: &MlpTrainConfig, seed: u64) -> Result<(Mlp, MlpTrainReport)> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = x.cols();
    let mut net = Mlp::new(&[f, cfg.hidden[0], cfg.hidden[1], 2], cfg.dropout, &mut rng);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = Adam::new(CosineSchedule::new(
        cfg.learning_rate,
        (cfg.epochs * batches_per_epoch) as u64,
    ));
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut report = MlpTrainReport {
        epochs_run: 0,
        final_loss: f64::NAN,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * f);
            for &i in chunk {
                data.extend_from_slice(x.row_slice(i));
            }
            let yb: Vec<u8> = chunk.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(chunk.len(), f, data)?);
            let fwd = net.forward(&mut tape, xv, Params::Trainable, Some(&mut rng))?;
            let loss = cross_entropy(&mut tape, fwd.output, &yb)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss(format!("teacher epoch {epoch}: {lv}")));
            }
            total += lv * chunk.len() as f64;
            tape.backward(loss)?;
            net.apply_gradients(&tape, &fwd, &mut opt)?;
        }
        let epoch_loss = total / n as f64;
        report.epochs_run = epoch + 1;
        report.final_loss = epoch_loss;
        if epoch_loss < best - cfg.min_delta {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                debug!("teacher plateaued at epoch {epoch} (loss {epoch_loss:.5})");
                break;
            }
        }
    }
    Ok((net, report))
}
