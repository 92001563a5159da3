//! Physics-structured composite model and its matched black-box baseline.
//!
//! The composite mirrors the plant's vessel topology: one LSTM block per
//! vessel, each fed its own actuator channels plus the previous-step output
//! of the upstream block (reactor 1 sees the separator's recycle, reactor 2
//! sees reactor 1, the separator sees reactor 2). Concentration output
//! channels are wrapped in a logistic so they land in (0,1) — physical
//! fractions — structurally, independent of the weights.
//!
//! The black-box baseline is a plain stack of LSTM layers with a linear
//! output head and the same total unit count.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sequence};
use crate::models::{
    lstm_cell_backward, lstm_cell_forward, sigmoid, LstmCellCache, LstmCellParams, LstmParams,
    ModelError,
};
use crate::plant::Normalizer;
use crate::rng::{substream, Stream};
use crate::training::{EpochRecord, OptState, TrainConfig, TrainError, TrainTrace};

/// Input ports of one block: actuator channels taken from the full input
/// vector, plus upstream blocks whose previous-step outputs are appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWiring {
    pub u_channels: Vec<usize>,
    pub feedback_blocks: Vec<usize>,
}

/// Wiring of the whole composite; `blocks[i]` describes block i's inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub blocks: Vec<BlockWiring>,
}

impl Wiring {
    /// The benchmark topology: block 1 ← (Q1, Ff1) and block 3's output;
    /// block 2 ← (Q2, Ff2) and block 1; block 3 ← (Q3, Fr) and block 2.
    pub fn benchmark() -> Self {
        Wiring {
            blocks: vec![
                BlockWiring { u_channels: vec![0, 3], feedback_blocks: vec![2] },
                BlockWiring { u_channels: vec![1, 4], feedback_blocks: vec![0] },
                BlockWiring { u_channels: vec![2, 5], feedback_blocks: vec![1] },
            ],
        }
    }
}

/// Output-channel activation: identity heads predict normalized values,
/// sigmoid heads predict physical fractions in (0,1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Composite of wired LSTM blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeModel {
    pub blocks: Vec<LstmParams>,
    pub wiring: Wiring,
    /// Per block, per output channel.
    pub sigma: Vec<Vec<OutputActivation>>,
    /// Width of the full input vector.
    pub n_u: usize,
}

/// Composite state: each block's `[χ; ξ]` plus the previous-step outputs
/// the wiring consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeState {
    pub cells: Vec<(Array1<f64>, Array1<f64>)>,
    pub prev_y: Vec<Array1<f64>>,
}

impl CompositeModel {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_output_width(&self, b: usize) -> usize {
        self.blocks[b].b_y.len()
    }

    pub fn total_output_width(&self) -> usize {
        (0..self.n_blocks()).map(|b| self.block_output_width(b)).sum()
    }

    pub fn total_units(&self) -> usize {
        self.blocks.iter().map(|b| b.cell.units()).sum()
    }

    fn output_offset(&self, b: usize) -> usize {
        (0..b).map(|i| self.block_output_width(i)).sum()
    }

    /// Activation of a global output channel.
    pub fn channel_activation(&self, global_ch: usize) -> OutputActivation {
        let mut ch = global_ch;
        for b in 0..self.n_blocks() {
            let w = self.block_output_width(b);
            if ch < w {
                return self.sigma[b][ch];
            }
            ch -= w;
        }
        panic!("output channel {global_ch} out of range");
    }

    /// Input width block `b`'s cell must accept.
    fn wired_input_width(&self, b: usize) -> usize {
        let w = &self.wiring.blocks[b];
        w.u_channels.len()
            + w.feedback_blocks.iter().map(|&src| self.block_output_width(src)).sum::<usize>()
    }

    pub fn zero_state(&self) -> CompositeState {
        CompositeState {
            cells: self
                .blocks
                .iter()
                .map(|blk| {
                    let n = blk.cell.units();
                    (Array1::zeros(n), Array1::zeros(n))
                })
                .collect(),
            prev_y: (0..self.n_blocks())
                .map(|b| Array1::zeros(self.block_output_width(b)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks.len() != self.wiring.blocks.len() || self.blocks.len() != self.sigma.len() {
            return Err(ModelError::InvalidParams {
                what: "blocks, wiring, and sigma lists must have equal length".into(),
            });
        }
        for b in 0..self.n_blocks() {
            let want = self.wired_input_width(b);
            let got = self.blocks[b].cell.input_width();
            if want != got {
                return Err(ModelError::InvalidParams {
                    what: format!("block {b} input port expects width {want}, cell accepts {got}"),
                });
            }
            if self.sigma[b].len() != self.block_output_width(b) {
                return Err(ModelError::InvalidParams {
                    what: format!("block {b} sigma length mismatch"),
                });
            }
            for &src in &self.wiring.blocks[b].feedback_blocks {
                if src >= self.n_blocks() {
                    return Err(ModelError::InvalidParams {
                        what: format!("block {b} wires from unknown block {src}"),
                    });
                }
            }
            for &ch in &self.wiring.blocks[b].u_channels {
                if ch >= self.n_u {
                    return Err(ModelError::InvalidParams {
                        what: format!("block {b} wires from unknown input channel {ch}"),
                    });
                }
            }
        }
        Ok(())
    }

    fn assemble_input(&self, b: usize, u: &Array1<f64>, prev_y: &[Array1<f64>]) -> Array1<f64> {
        let w = &self.wiring.blocks[b];
        let mut v = Vec::with_capacity(self.wired_input_width(b));
        for &ch in &w.u_channels {
            v.push(u[ch]);
        }
        for &src in &w.feedback_blocks {
            v.extend(prev_y[src].iter().copied());
        }
        Array1::from(v)
    }

    fn block_output(&self, b: usize, h: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let blk = &self.blocks[b];
        let v = blk.u_y.dot(h) + &blk.b_y;
        let y = Array1::from_iter(v.iter().zip(&self.sigma[b]).map(|(x, act)| match act {
            OutputActivation::Identity => *x,
            OutputActivation::Sigmoid => sigmoid(*x),
        }));
        (y, v)
    }
}

/// One composite step: every block emits its output from the current state,
/// then steps with its wired input assembled from `u` and the stored
/// previous-step outputs.
pub fn composite_step(
    cm: &CompositeModel,
    state: &CompositeState,
    u: &Array1<f64>,
) -> Result<(CompositeState, Array1<f64>), ModelError> {
    if u.len() != cm.n_u {
        return Err(ModelError::DimensionMismatch { matrix: "u", expected: cm.n_u, got: u.len() });
    }
    let n_out = cm.total_output_width();
    let mut y_full = Array1::zeros(n_out);
    let mut new_prev = Vec::with_capacity(cm.n_blocks());
    let mut new_cells = Vec::with_capacity(cm.n_blocks());
    for b in 0..cm.n_blocks() {
        let (y_b, _) = cm.block_output(b, &state.cells[b].1);
        let off = cm.output_offset(b);
        y_full.slice_mut(s![off..off + y_b.len()]).assign(&y_b);
        new_prev.push(y_b);
    }
    for b in 0..cm.n_blocks() {
        let wired = cm.assemble_input(b, u, &state.prev_y);
        if wired.len() != cm.blocks[b].cell.input_width() {
            return Err(ModelError::InvalidParams {
                what: format!("block {b} wiring produced width {}", wired.len()),
            });
        }
        let (c, h) = &state.cells[b];
        let (cn, hn, _) = lstm_cell_forward(&cm.blocks[b].cell, &wired, c, h);
        new_cells.push((cn, hn));
    }
    Ok((CompositeState { cells: new_cells, prev_y: new_prev }, y_full))
}

/// Composite simulation over a full input sequence.
pub fn composite_simulate(
    cm: &CompositeModel,
    state0: &CompositeState,
    u_seq: &[Array1<f64>],
) -> Result<Vec<Array1<f64>>, ModelError> {
    let mut state = state0.clone();
    let mut ys = Vec::with_capacity(u_seq.len());
    for (k, u) in u_seq.iter().enumerate() {
        let (sn, y) = composite_step(cm, &state, u)
            .map_err(|e| ModelError::AtStep { step: k, source: Box::new(e) })?;
        ys.push(y);
        state = sn;
    }
    Ok(ys)
}

struct CompositeStepCache {
    cell: Vec<LstmCellCache>,
    /// Pre-activation of each block's output head.
    head_pre: Vec<Array1<f64>>,
}

/// BPTT through the wired graph. `loss_tail[k]` holds ∂L/∂y_k over the full
/// concatenated output; gradients flow through the inter-block connections.
pub fn composite_bptt(
    cm: &CompositeModel,
    state0: &CompositeState,
    u_seq: &[Array1<f64>],
    loss_tail: &[Array1<f64>],
) -> Result<Vec<LstmParams>, ModelError> {
    let t_len = u_seq.len();
    assert_eq!(loss_tail.len(), t_len, "loss tail length mismatch");
    let nb = cm.n_blocks();

    // Forward, caching cell internals, head pre-activations, consumed prev_y.
    let mut state = state0.clone();
    let mut caches: Vec<CompositeStepCache> = Vec::with_capacity(t_len);
    for (k, u) in u_seq.iter().enumerate() {
        let mut head_pre = Vec::with_capacity(nb);
        let mut new_prev = Vec::with_capacity(nb);
        for b in 0..nb {
            let (y_b, v_b) = cm.block_output(b, &state.cells[b].1);
            head_pre.push(v_b);
            new_prev.push(y_b);
        }
        let mut cell_caches = Vec::with_capacity(nb);
        let mut new_cells = Vec::with_capacity(nb);
        for b in 0..nb {
            let wired = cm.assemble_input(b, u, &state.prev_y);
            let (c, h) = &state.cells[b];
            let (cn, hn, cache) = lstm_cell_forward(&cm.blocks[b].cell, &wired, c, h);
            if cn.iter().chain(hn.iter()).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { step: k });
            }
            cell_caches.push(cache);
            new_cells.push((cn, hn));
        }
        caches.push(CompositeStepCache { cell: cell_caches, head_pre });
        state = CompositeState { cells: new_cells, prev_y: new_prev };
    }

    let mut grads: Vec<LstmParams> = cm
        .blocks
        .iter()
        .map(|blk| LstmParams {
            cell: LstmCellParams::zeros(blk.cell.units(), blk.cell.input_width()),
            u_y: Array2::zeros(blk.u_y.dim()),
            b_y: Array1::zeros(blk.b_y.len()),
        })
        .collect();

    // Adjoints carried across time: block states and the prev_y slots.
    let mut dc: Vec<Array1<f64>> =
        cm.blocks.iter().map(|b| Array1::zeros(b.cell.units())).collect();
    let mut dh: Vec<Array1<f64>> =
        cm.blocks.iter().map(|b| Array1::zeros(b.cell.units())).collect();
    let mut dprev: Vec<Array1<f64>> =
        (0..nb).map(|b| Array1::zeros(cm.block_output_width(b))).collect();

    for k in (0..t_len).rev() {
        let cache = &caches[k];
        let mut dprev_cur: Vec<Array1<f64>> =
            (0..nb).map(|b| Array1::zeros(cm.block_output_width(b))).collect();

        // Output heads read the pre-update hidden states h_k, so their
        // adjoint contribution lands after the cell backward below.
        let mut dh_from_output: Vec<Array1<f64>> = Vec::with_capacity(nb);
        for b in 0..nb {
            // y_{k,b} feeds the loss directly and becomes prev_y at k+1.
            let off = cm.output_offset(b);
            let w = cm.block_output_width(b);
            let mut dy = loss_tail[k].slice(s![off..off + w]).to_owned();
            dy += &dprev[b];
            // Through the output activation to the head pre-activation.
            let v = &cache.head_pre[b];
            let dv = Array1::from_iter(dy.iter().zip(v.iter()).zip(&cm.sigma[b]).map(
                |((dyj, vj), act)| match act {
                    OutputActivation::Identity => *dyj,
                    OutputActivation::Sigmoid => {
                        let s = sigmoid(*vj);
                        dyj * s * (1.0 - s)
                    }
                },
            ));
            let h_k = &cache.cell[b].h_prev;
            crate::models::accumulate_outer_pub(&mut grads[b].u_y, &dv, h_k);
            grads[b].b_y += &dv;
            dh_from_output.push(cm.blocks[b].u_y.t().dot(&dv));
        }

        for b in 0..nb {
            let (dc_prev, dh_prev, du) =
                lstm_cell_backward(&cm.blocks[b].cell, &cache.cell[b], &dc[b], &dh[b], &mut grads[b].cell);
            // Split the wired-input adjoint back into its source ports.
            let wiring = &cm.wiring.blocks[b];
            let mut pos = wiring.u_channels.len();
            for &src in &wiring.feedback_blocks {
                let wsrc = cm.block_output_width(src);
                let slice = du.slice(s![pos..pos + wsrc]).to_owned();
                dprev_cur[src] += &slice;
                pos += wsrc;
            }
            dc[b] = dc_prev;
            dh[b] = dh_prev + &dh_from_output[b];
        }
        dprev = dprev_cur;
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Composite construction and loss
// ---------------------------------------------------------------------------

/// Builds the benchmark composite: three 10-unit blocks with 4 outputs each
/// (level, two concentrations, temperature) and sigmoid concentration heads.
pub fn build_composite(units: usize, seed: u64) -> CompositeModel {
    let wiring = Wiring::benchmark();
    let mut rng = substream(seed, Stream::Init, 101);
    // Two actuator channels plus one upstream block's four outputs.
    let blocks: Vec<LstmParams> =
        (0..3).map(|_| random_lstm(units, 6, 4, &mut rng)).collect();
    let sigma = vec![
        vec![
            OutputActivation::Identity,
            OutputActivation::Sigmoid,
            OutputActivation::Sigmoid,
            OutputActivation::Identity,
        ];
        3
    ];
    CompositeModel { blocks, wiring, sigma, n_u: 6 }
}

fn random_lstm(units: usize, n_in: usize, n_out: usize, rng: &mut impl Rng) -> LstmParams {
    let fan = n_in + units;
    let mut mat = |rows: usize, cols: usize, fan_in: usize| {
        let s = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-s..=s))
    };
    LstmParams {
        cell: LstmCellParams {
            w_f: mat(units, n_in, fan),
            u_f: mat(units, units, fan),
            b_f: Array1::zeros(units),
            w_i: mat(units, n_in, fan),
            u_i: mat(units, units, fan),
            b_i: Array1::zeros(units),
            w_c: mat(units, n_in, fan),
            u_c: mat(units, units, fan),
            b_c: Array1::zeros(units),
            w_o: mat(units, n_in, fan),
            u_o: mat(units, units, fan),
            b_o: Array1::zeros(units),
        },
        u_y: mat(n_out, units, units),
        b_y: Array1::zeros(n_out),
    }
}

/// Per-channel target in the channel's native space: identity channels
/// compare against normalized data, sigmoid channels against de-normalized
/// (physical) data, where the model's logistic output already lives.
fn mixed_target(cm: &CompositeModel, normalizer: &Normalizer, ch: usize, y_norm: f64) -> f64 {
    match cm.channel_activation(ch) {
        OutputActivation::Identity => y_norm,
        OutputActivation::Sigmoid => normalizer.y[ch].invert(y_norm),
    }
}

/// Composite loss: washout-aware MSE (each channel in its native space)
/// plus `w` times the mean concentration-consistency hinge
/// max(x_A + x_B − 1, 0) per vessel, evaluated on the physical fractions.
pub fn composite_loss(
    cm: &CompositeModel,
    sequences: &[&Sequence],
    w: f64,
    t_w: usize,
    normalizer: &Normalizer,
) -> Result<f64, TrainError> {
    let t_s = sequences[0].len();
    let count = (sequences.len() * (t_s - t_w)) as f64;
    let mut mse = 0.0;
    let mut hinge = 0.0;
    for seq in sequences {
        let ys = composite_simulate(cm, &cm.zero_state(), &seq.u_rows())?;
        for k in t_w..t_s {
            for ch in 0..cm.total_output_width() {
                let target = mixed_target(cm, normalizer, ch, seq.y[[k, ch]]);
                let d = ys[k][ch] - target;
                mse += d * d;
            }
            for b in 0..cm.n_blocks() {
                let off = cm.output_offset(b);
                // Channels 1 and 2 of each block are the concentrations.
                let sum = ys[k][off + 1] + ys[k][off + 2];
                hinge += (sum - 1.0).max(0.0);
            }
        }
    }
    Ok(mse / count + w * hinge / count)
}

fn composite_loss_tails(
    cm: &CompositeModel,
    seq: &Sequence,
    ys: &[Array1<f64>],
    w: f64,
    t_w: usize,
    scale: f64,
    normalizer: &Normalizer,
) -> Vec<Array1<f64>> {
    let t_s = seq.len();
    let n_out = cm.total_output_width();
    (0..t_s)
        .map(|k| {
            let mut tail = Array1::zeros(n_out);
            if k < t_w {
                return tail;
            }
            for ch in 0..n_out {
                let target = mixed_target(cm, normalizer, ch, seq.y[[k, ch]]);
                tail[ch] = 2.0 * (ys[k][ch] - target) * scale;
            }
            for b in 0..cm.n_blocks() {
                let off = cm.output_offset(b);
                let sum = ys[k][off + 1] + ys[k][off + 2];
                if sum > 1.0 {
                    tail[off + 1] += w * scale;
                    tail[off + 2] += w * scale;
                }
            }
            tail
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Composite training
// ---------------------------------------------------------------------------

fn flatten_blocks(blocks: &[LstmParams]) -> Vec<f64> {
    let mut out = Vec::new();
    for b in blocks {
        out.extend(flatten_cell(&b.cell));
        out.extend(b.u_y.iter().copied());
        out.extend(b.b_y.iter().copied());
    }
    out
}

fn flatten_cell(c: &LstmCellParams) -> Vec<f64> {
    let mut out = Vec::new();
    for m in [&c.w_f, &c.u_f] {
        out.extend(m.iter().copied());
    }
    out.extend(c.b_f.iter().copied());
    for m in [&c.w_i, &c.u_i] {
        out.extend(m.iter().copied());
    }
    out.extend(c.b_i.iter().copied());
    for m in [&c.w_c, &c.u_c] {
        out.extend(m.iter().copied());
    }
    out.extend(c.b_c.iter().copied());
    for m in [&c.w_o, &c.u_o] {
        out.extend(m.iter().copied());
    }
    out.extend(c.b_o.iter().copied());
    out
}

fn assign_cell(c: &mut LstmCellParams, vals: &[f64], pos: &mut usize) {
    for m in [&mut c.w_f, &mut c.u_f] {
        for x in m.iter_mut() {
            *x = vals[*pos];
            *pos += 1;
        }
    }
    for x in c.b_f.iter_mut() {
        *x = vals[*pos];
        *pos += 1;
    }
    for m in [&mut c.w_i, &mut c.u_i] {
        for x in m.iter_mut() {
            *x = vals[*pos];
            *pos += 1;
        }
    }
    for x in c.b_i.iter_mut() {
        *x = vals[*pos];
        *pos += 1;
    }
    for m in [&mut c.w_c, &mut c.u_c] {
        for x in m.iter_mut() {
            *x = vals[*pos];
            *pos += 1;
        }
    }
    for x in c.b_c.iter_mut() {
        *x = vals[*pos];
        *pos += 1;
    }
    for m in [&mut c.w_o, &mut c.u_o] {
        for x in m.iter_mut() {
            *x = vals[*pos];
            *pos += 1;
        }
    }
    for x in c.b_o.iter_mut() {
        *x = vals[*pos];
        *pos += 1;
    }
}

fn assign_blocks(blocks: &mut [LstmParams], vals: &[f64]) {
    let mut pos = 0;
    for b in blocks {
        assign_cell(&mut b.cell, vals, &mut pos);
        for x in b.u_y.iter_mut() {
            *x = vals[pos];
            pos += 1;
        }
        for x in b.b_y.iter_mut() {
            *x = vals[pos];
            pos += 1;
        }
    }
    assert_eq!(pos, vals.len());
}

fn block_param_ranges(blocks: &[LstmParams]) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::with_capacity(blocks.len());
    let mut pos = 0;
    for b in blocks {
        let len = flatten_cell(&b.cell).len() + b.u_y.len() + b.b_y.len();
        ranges.push(pos..pos + len);
        pos += len;
    }
    ranges
}

/// Joint gradient training of all blocks through the wired graph.
///
/// `freeze[b]` pins block b's parameters (its gradient is masked out).
pub fn train_composite(
    cm0: &CompositeModel,
    dataset: &Dataset,
    config: &TrainConfig,
    hinge_weight: f64,
    freeze: &[bool],
) -> Result<(CompositeModel, TrainTrace), TrainError> {
    cm0.validate()?;
    let split = &dataset.split;
    let train_seqs = dataset.subset(&split.training);
    if train_seqs.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    let t_s = train_seqs[0].len();
    let t_w = split.t_w;
    if t_w >= t_s {
        return Err(TrainError::WashoutTooLong { t_w, t_s });
    }
    let val_seqs = dataset.subset(&split.validation);
    let normalizer = &dataset.normalizer;

    let mut cm = cm0.clone();
    let mut flat = flatten_blocks(&cm.blocks);
    let ranges = block_param_ranges(&cm.blocks);
    let mut opt_state = OptState::new(flat.len());
    let mut trace = TrainTrace::default();
    let mut best: Option<CompositeModel> = None;
    let mut best_val = f64::INFINITY;
    let mut epochs_since_improve = 0usize;

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        let mut ids = split.training.clone();
        let mut rng = substream(config.seed, Stream::Minibatch, epoch as u64);
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        for chunk in ids.chunks(config.batch_size.max(1)) {
            let mut batch_ids = chunk.to_vec();
            batch_ids.sort_unstable();
            let scale = 1.0 / (batch_ids.len() as f64 * (t_s - t_w) as f64);
            let mut grad = vec![0.0; flat.len()];
            for &id in &batch_ids {
                let seq = dataset.by_id(id);
                let u_rows = seq.u_rows();
                let ys = composite_simulate(&cm, &cm.zero_state(), &u_rows)?;
                let tails =
                    composite_loss_tails(&cm, seq, &ys, hinge_weight, t_w, scale, normalizer);
                let g = composite_bptt(&cm, &cm.zero_state(), &u_rows, &tails)?;
                for (a, b) in grad.iter_mut().zip(flatten_blocks(&g)) {
                    *a += b;
                }
            }
            for (b, range) in ranges.iter().enumerate() {
                if freeze.get(b).copied().unwrap_or(false) {
                    grad[range.clone()].fill(0.0);
                }
            }
            opt_state.update(&config.optimizer, &mut flat, &grad);
            assign_blocks(&mut cm.blocks, &flat);
        }

        let train_loss = composite_loss(&cm, &train_seqs, hinge_weight, t_w, normalizer)?;
        let val_loss = if val_seqs.is_empty() {
            train_loss
        } else {
            composite_loss(&cm, &val_seqs, hinge_weight, t_w, normalizer)?
        };
        trace.epochs.push(EpochRecord {
            epoch,
            train_mse: train_loss,
            val_mse: val_loss,
            margins: vec![],
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = Some(cm.clone());
            epochs_since_improve = 0;
        } else {
            epochs_since_improve += 1;
        }
        if epochs_since_improve >= config.patience {
            break;
        }
    }
    Ok((best.unwrap_or(cm), trace))
}

// ---------------------------------------------------------------------------
// Black-box baseline
// ---------------------------------------------------------------------------

/// Stacked LSTM layers with a linear output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackBoxModel {
    pub layers: Vec<LstmCellParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub n_u: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxState {
    pub cells: Vec<(Array1<f64>, Array1<f64>)>,
}

impl BlackBoxModel {
    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.units()).sum()
    }

    pub fn n_y(&self) -> usize {
        self.head_b.len()
    }

    pub fn parameter_count(&self) -> usize {
        flatten_bb(self).len()
    }

    pub fn zero_state(&self) -> BlackBoxState {
        BlackBoxState {
            cells: self
                .layers
                .iter()
                .map(|l| (Array1::zeros(l.units()), Array1::zeros(l.units())))
                .collect(),
        }
    }
}

/// Builds a stacked LSTM; `units[l]` is layer l's width, the head is linear.
pub fn build_blackbox(n_u: usize, n_y: usize, units: &[usize], seed: u64) -> BlackBoxModel {
    let mut rng = substream(seed, Stream::Init, 202);
    let mut layers = Vec::with_capacity(units.len());
    let mut in_width = n_u;
    for &n in units {
        layers.push(random_lstm(n, in_width, 1, &mut rng).cell);
        in_width = n;
    }
    let fan = *units.last().expect("at least one layer");
    let s = 1.0 / (fan as f64).sqrt();
    let head_w = Array2::from_shape_fn((n_y, fan), |_| rng.random_range(-s..=s));
    BlackBoxModel { layers, head_w, head_b: Array1::zeros(n_y), n_u }
}

/// One stacked step: the output reads the top layer's pre-update hidden
/// state (so a single-layer stack reproduces the plain LSTM exactly), then
/// updates cascade upward through the just-updated lower layers.
pub fn blackbox_step(
    bb: &BlackBoxModel,
    state: &BlackBoxState,
    u: &Array1<f64>,
) -> Result<(BlackBoxState, Array1<f64>), ModelError> {
    if u.len() != bb.n_u {
        return Err(ModelError::DimensionMismatch { matrix: "u", expected: bb.n_u, got: u.len() });
    }
    let y = bb.head_w.dot(&state.cells.last().unwrap().1) + &bb.head_b;
    let mut cells = Vec::with_capacity(bb.layers.len());
    let mut input = u.clone();
    for (l, layer) in bb.layers.iter().enumerate() {
        let (c, h) = &state.cells[l];
        let (cn, hn, _) = lstm_cell_forward(layer, &input, c, h);
        input = hn.clone();
        cells.push((cn, hn));
    }
    Ok((BlackBoxState { cells }, y))
}

pub fn blackbox_simulate(
    bb: &BlackBoxModel,
    state0: &BlackBoxState,
    u_seq: &[Array1<f64>],
) -> Result<Vec<Array1<f64>>, ModelError> {
    let mut state = state0.clone();
    let mut ys = Vec::with_capacity(u_seq.len());
    for (k, u) in u_seq.iter().enumerate() {
        let (sn, y) = blackbox_step(bb, &state, u)
            .map_err(|e| ModelError::AtStep { step: k, source: Box::new(e) })?;
        ys.push(y);
        state = sn;
    }
    Ok(ys)
}

/// Stacked-layer BPTT for the black-box model.
pub fn blackbox_bptt(
    bb: &BlackBoxModel,
    state0: &BlackBoxState,
    u_seq: &[Array1<f64>],
    loss_tail: &[Array1<f64>],
) -> Result<BlackBoxModel, ModelError> {
    let t_len = u_seq.len();
    let nl = bb.layers.len();

    // Forward with caches per layer per step.
    let mut state = state0.clone();
    let mut caches: Vec<Vec<LstmCellCache>> = Vec::with_capacity(t_len);
    let mut top_h: Vec<Array1<f64>> = Vec::with_capacity(t_len);
    for (k, u) in u_seq.iter().enumerate() {
        top_h.push(state.cells.last().unwrap().1.clone());
        let mut step_caches = Vec::with_capacity(nl);
        let mut cells = Vec::with_capacity(nl);
        let mut input = u.clone();
        for (l, layer) in bb.layers.iter().enumerate() {
            let (c, h) = &state.cells[l];
            let (cn, hn, cache) = lstm_cell_forward(layer, &input, c, h);
            if cn.iter().chain(hn.iter()).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { step: k });
            }
            input = hn.clone();
            step_caches.push(cache);
            cells.push((cn, hn));
        }
        caches.push(step_caches);
        state = BlackBoxState { cells };
    }

    let mut grads = BlackBoxModel {
        layers: bb.layers.iter().map(|l| LstmCellParams::zeros(l.units(), l.input_width())).collect(),
        head_w: Array2::zeros(bb.head_w.dim()),
        head_b: Array1::zeros(bb.head_b.len()),
        n_u: bb.n_u,
    };
    let mut dc: Vec<Array1<f64>> = bb.layers.iter().map(|l| Array1::zeros(l.units())).collect();
    let mut dh: Vec<Array1<f64>> = bb.layers.iter().map(|l| Array1::zeros(l.units())).collect();
    for k in (0..t_len).rev() {
        // The head reads the top layer's pre-update hidden state, so its
        // adjoint joins dh[nl-1] only after this step's cell backward.
        let dy = &loss_tail[k];
        crate::models::accumulate_outer_pub(&mut grads.head_w, dy, &top_h[k]);
        grads.head_b += dy;
        let dh_head = bb.head_w.t().dot(dy);

        // Backward through the cascade, top layer first: each layer's input
        // adjoint lands on the just-updated hidden state of the layer below.
        let mut dinput: Option<Array1<f64>> = None;
        for l in (0..nl).rev() {
            if let Some(di) = dinput.take() {
                dh[l] += &di;
            }
            let (dc_prev, dh_prev, du) =
                lstm_cell_backward(&bb.layers[l], &caches[k][l], &dc[l], &dh[l], &mut grads.layers[l]);
            dc[l] = dc_prev;
            dh[l] = dh_prev;
            dinput = Some(du);
        }
        // The bottom layer's input adjoint is ∂L/∂u_k; inputs are data.
        dh[nl - 1] += &dh_head;
    }
    Ok(grads)
}

fn flatten_bb(bb: &BlackBoxModel) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &bb.layers {
        out.extend(flatten_cell(l));
    }
    out.extend(bb.head_w.iter().copied());
    out.extend(bb.head_b.iter().copied());
    out
}

fn assign_bb(bb: &mut BlackBoxModel, vals: &[f64]) {
    let mut pos = 0;
    for l in &mut bb.layers {
        assign_cell(l, vals, &mut pos);
    }
    for x in bb.head_w.iter_mut() {
        *x = vals[pos];
        pos += 1;
    }
    for x in bb.head_b.iter_mut() {
        *x = vals[pos];
        pos += 1;
    }
    assert_eq!(pos, vals.len());
}

/// Black-box MSE on normalized data (washout-aware).
pub fn blackbox_mse(
    bb: &BlackBoxModel,
    sequences: &[&Sequence],
    t_w: usize,
) -> Result<f64, TrainError> {
    let t_s = sequences[0].len();
    let count = (sequences.len() * (t_s - t_w)) as f64;
    let mut total = 0.0;
    for seq in sequences {
        let ys = blackbox_simulate(bb, &bb.zero_state(), &seq.u_rows())?;
        for k in t_w..t_s {
            let diff = &ys[k] - &seq.y.row(k);
            total += diff.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(total / count)
}

/// Trains the black-box stack on normalized data with the same loop shape
/// as the composite (no hinge, no certificates).
pub fn train_blackbox(
    bb0: &BlackBoxModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(BlackBoxModel, TrainTrace), TrainError> {
    let split = &dataset.split;
    let train_seqs = dataset.subset(&split.training);
    if train_seqs.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    let t_s = train_seqs[0].len();
    let t_w = split.t_w;
    if t_w >= t_s {
        return Err(TrainError::WashoutTooLong { t_w, t_s });
    }
    let val_seqs = dataset.subset(&split.validation);

    let mut bb = bb0.clone();
    let mut flat = flatten_bb(&bb);
    let mut opt_state = OptState::new(flat.len());
    let mut trace = TrainTrace::default();
    let mut best: Option<BlackBoxModel> = None;
    let mut best_val = f64::INFINITY;
    let mut epochs_since_improve = 0usize;

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        let mut ids = split.training.clone();
        let mut rng = substream(config.seed, Stream::Minibatch, epoch as u64);
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        for chunk in ids.chunks(config.batch_size.max(1)) {
            let mut batch_ids = chunk.to_vec();
            batch_ids.sort_unstable();
            let scale = 2.0 / (batch_ids.len() as f64 * (t_s - t_w) as f64);
            let mut grad = vec![0.0; flat.len()];
            for &id in &batch_ids {
                let seq = dataset.by_id(id);
                let u_rows = seq.u_rows();
                let ys = blackbox_simulate(&bb, &bb.zero_state(), &u_rows)?;
                let tails: Vec<Array1<f64>> = (0..t_s)
                    .map(|k| {
                        if k < t_w {
                            Array1::zeros(bb.n_y())
                        } else {
                            (&ys[k] - &seq.y.row(k)) * scale
                        }
                    })
                    .collect();
                let g = blackbox_bptt(&bb, &bb.zero_state(), &u_rows, &tails)?;
                for (a, b) in grad.iter_mut().zip(flatten_bb(&g)) {
                    *a += b;
                }
            }
            opt_state.update(&config.optimizer, &mut flat, &grad);
            assign_bb(&mut bb, &flat);
        }

        let train_mse = blackbox_mse(&bb, &train_seqs, t_w)?;
        let val_mse = if val_seqs.is_empty() {
            train_mse
        } else {
            blackbox_mse(&bb, &val_seqs, t_w)?
        };
        trace.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            margins: vec![],
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        if val_mse < best_val {
            best_val = val_mse;
            best = Some(bb.clone());
            epochs_since_improve = 0;
        } else {
            epochs_since_improve += 1;
        }
        if epochs_since_improve >= config.patience {
            break;
        }
    }
    Ok((best.unwrap_or(bb), trace))
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Per-channel FIT rows for a set of models on the same test subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub channel_names: Vec<String>,
    /// (model name, per-channel FIT, overall FIT)
    pub rows: Vec<(String, Vec<f64>, f64)>,
}

/// Evaluates every model's per-channel and overall FIT on the test subset,
/// in physical units.
pub fn compare(
    models: &[(String, crate::predict::AnyModel)],
    dataset: &Dataset,
    ids: &[usize],
) -> Result<ComparisonTable, TrainError> {
    let n_y = dataset.sequences[0].n_y();
    let channel_names: Vec<String> = if n_y == crate::plant::N_STATES {
        crate::plant::STATE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_y).map(|j| format!("y{}", j + 1)).collect()
    };
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        if model.n_y() != n_y || model.n_u() != dataset.sequences[0].n_u() {
            return Err(TrainError::DataMismatch(format!(
                "model '{name}' is {}x{} channels, dataset is {}x{}",
                model.n_u(),
                model.n_y(),
                dataset.sequences[0].n_u(),
                n_y
            )));
        }
        let fit = model.fit(dataset, ids)?;
        rows.push((name.clone(), fit.per_channel, fit.overall));
    }
    Ok(ComparisonTable { channel_names, rows })
}
