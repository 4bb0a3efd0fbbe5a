use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{spectrogram_to_sequence, ModelError, ModelOutput};
use crate::featurizer::Spectrogram;
use crate::numcore::{BoundParams, NodeId, NumError, ParamId, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub input_bins: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub reg_lambda: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            input_bins: 64,
            lstm_layers: 2,
            lstm_hidden: 32,
            attn_layers: 3,
            attn_heads: 2,
            num_classes: 20,
            dropout_rate: 0.1,
            reg_lambda: 1e-4,
        }
    }
}

impl TeacherConfig {
    /// Concatenated bidirectional width feeding the encoder.
    pub fn model_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lstm_layers < 1 || self.attn_layers < 1 {
            return Err(ModelError::BadConfig(
                "lstm_layers and attn_layers must be >= 1".into(),
            ));
        }
        if self.model_dim() % self.attn_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} not divisible by attn_heads {}",
                self.model_dim(),
                self.attn_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || self.reg_lambda < 0.0 {
            return Err(ModelError::BadConfig(
                "dropout_rate in [0,1), reg_lambda >= 0".into(),
            ));
        }
        Ok(())
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// One LSTM direction: per-gate input, recurrent, and bias tensors.
#[derive(Clone, Debug)]
pub(crate) struct LstmDir {
    pub wx: [ParamId; 4],
    pub wh: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmDir {
    pub(crate) fn new<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut wx = Vec::new();
        let mut wh = Vec::new();
        let mut b = Vec::new();
        for gate in GATES {
            wx.push(params.register(
                format!("{prefix}.wx_{gate}"),
                Tensor::glorot_uniform(&[input, hidden], input, hidden, rng),
            ));
            wh.push(params.register(
                format!("{prefix}.wh_{gate}"),
                Tensor::orthogonal(hidden, hidden, rng),
            ));
            // forget-gate bias starts at 1
            let bias = if gate == "f" {
                Tensor::ones(&[1, hidden])
            } else {
                Tensor::zeros(&[1, hidden])
            };
            b.push(params.register(format!("{prefix}.b_{gate}"), bias));
        }
        LstmDir {
            wx: wx.try_into().unwrap(),
            wh: wh.try_into().unwrap(),
            b: b.try_into().unwrap(),
        }
    }
}

#[derive(Clone, Debug)]
struct AttnLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct TeacherIds {
    lstm: Vec<(LstmDir, LstmDir)>,
    attn: Vec<AttnLayer>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub cfg: TeacherConfig,
    pub params: ParamSet,
    ids: TeacherIds,
}

impl Teacher {
    pub fn new<R: Rng>(cfg: TeacherConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let h = cfg.lstm_hidden;
        let d = cfg.model_dim();
        let mut lstm = Vec::new();
        for layer in 0..cfg.lstm_layers {
            let input = if layer == 0 { cfg.input_bins } else { d };
            let fwd = LstmDir::new(&mut params, &format!("lstm{layer}.fwd"), input, h, rng);
            let bwd = LstmDir::new(&mut params, &format!("lstm{layer}.bwd"), input, h, rng);
            lstm.push((fwd, bwd));
        }
        let dk = d / cfg.attn_heads;
        let mut attn = Vec::new();
        for layer in 0..cfg.attn_layers {
            let p = format!("attn{layer}");
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for head in 0..cfg.attn_heads {
                wq.push(params.register(
                    format!("{p}.h{head}.wq"),
                    Tensor::glorot_uniform(&[d, dk], d, dk, rng),
                ));
                wk.push(params.register(
                    format!("{p}.h{head}.wk"),
                    Tensor::glorot_uniform(&[d, dk], d, dk, rng),
                ));
                wv.push(params.register(
                    format!("{p}.h{head}.wv"),
                    Tensor::glorot_uniform(&[d, dk], d, dk, rng),
                ));
            }
            attn.push(AttnLayer {
                ln1_g: params.register(format!("{p}.ln1.g"), Tensor::ones(&[1, d])),
                ln1_b: params.register(format!("{p}.ln1.b"), Tensor::zeros(&[1, d])),
                wq,
                wk,
                wv,
                wo: params.register(
                    format!("{p}.wo"),
                    Tensor::glorot_uniform(&[d, d], d, d, rng),
                ),
                ln2_g: params.register(format!("{p}.ln2.g"), Tensor::ones(&[1, d])),
                ln2_b: params.register(format!("{p}.ln2.b"), Tensor::zeros(&[1, d])),
                w1: params.register(
                    format!("{p}.ffn.w1"),
                    Tensor::glorot_uniform(&[d, 2 * d], d, 2 * d, rng),
                ),
                b1: params.register(format!("{p}.ffn.b1"), Tensor::zeros(&[1, 2 * d])),
                w2: params.register(
                    format!("{p}.ffn.w2"),
                    Tensor::glorot_uniform(&[2 * d, d], 2 * d, d, rng),
                ),
                b2: params.register(format!("{p}.ffn.b2"), Tensor::zeros(&[1, d])),
            });
        }
        let l = cfg.num_classes;
        let ids = TeacherIds {
            lstm,
            attn,
            fc1_w: params.register("head.fc1.w", Tensor::glorot_uniform(&[d, d], d, d, rng)),
            fc1_b: params.register("head.fc1.b", Tensor::zeros(&[1, d])),
            fc2_w: params.register("head.fc2.w", Tensor::glorot_uniform(&[d, l], d, l, rng)),
            fc2_b: params.register("head.fc2.b", Tensor::zeros(&[1, l])),
        };
        Ok(Teacher { cfg, params, ids })
    }

    /// Classifier-head weight matrices covered by the Frobenius term.
    pub fn head_weights(&self) -> Vec<ParamId> {
        vec![self.ids.fc1_w, self.ids.fc2_w]
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Forward pass for one spectrogram; `dropout_rng` is consulted only in
    /// train mode.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &Spectrogram,
        train_mode: bool,
        dropout_rng: &mut R,
    ) -> Result<ModelOutput, NumError> {
        let x = tape.constant(spectrogram_to_sequence(spec));
        let seq = self.embed(tape, bound, x, train_mode, dropout_rng)?;
        let encoded = self.encode(tape, bound, seq, train_mode, dropout_rng)?;
        // global average pooling along the temporal dimension
        let pooled = tape.mean_axis(encoded, 0);
        let fc1w = bound.node(self.ids.fc1_w);
        let fc1b = bound.node(self.ids.fc1_b);
        let h = tape.matmul(pooled, fc1w)?;
        let h = tape.add(h, fc1b)?;
        let feature = tape.relu(h);
        let fc2w = bound.node(self.ids.fc2_w);
        let fc2b = bound.node(self.ids.fc2_b);
        let logits = tape.matmul(feature, fc2w)?;
        let logits = tape.add(logits, fc2b)?;
        Ok(ModelOutput { logits, feature })
    }

    /// Stacked bidirectional embedding: T x F input to T x 2H features.
    pub(crate) fn embed<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        mut x: NodeId,
        train_mode: bool,
        dropout_rng: &mut R,
    ) -> Result<NodeId, NumError> {
        for (fwd, bwd) in &self.ids.lstm {
            x = bilstm_layer(tape, bound, x, fwd, bwd, self.cfg.lstm_hidden)?;
            if train_mode && self.cfg.dropout_rate > 0.0 {
                x = tape.dropout(x, self.cfg.dropout_rate, dropout_rng)?;
            }
        }
        Ok(x)
    }

    fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        mut x: NodeId,
        train_mode: bool,
        dropout_rng: &mut R,
    ) -> Result<NodeId, NumError> {
        let dk = self.cfg.model_dim() / self.cfg.attn_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for layer in &self.ids.attn {
            // pre-norm multi-head self-attention with residual
            let normed = tape.layer_norm_rows(x, 1e-5);
            let g1 = bound.node(layer.ln1_g);
            let b1 = bound.node(layer.ln1_b);
            let normed = tape.mul_row_broadcast(normed, g1)?;
            let normed = tape.add_row_broadcast(normed, b1)?;
            let mut heads = Vec::new();
            for h in 0..self.cfg.attn_heads {
                let q = tape.matmul(normed, bound.node(layer.wq[h]))?;
                let k = tape.matmul(normed, bound.node(layer.wk[h]))?;
                let v = tape.matmul(normed, bound.node(layer.wv[h]))?;
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                heads.push(tape.matmul(attn, v)?);
            }
            let mut concat = heads[0];
            for &h in &heads[1..] {
                concat = tape.concat_cols(concat, h)?;
            }
            let projected = tape.matmul(concat, bound.node(layer.wo))?;
            x = tape.add(x, projected)?;

            // pre-norm feed-forward with residual
            let normed = tape.layer_norm_rows(x, 1e-5);
            let g2 = bound.node(layer.ln2_g);
            let b2 = bound.node(layer.ln2_b);
            let normed = tape.mul_row_broadcast(normed, g2)?;
            let normed = tape.add_row_broadcast(normed, b2)?;
            let f1 = tape.matmul(normed, bound.node(layer.w1))?;
            let f1 = tape.add_row_broadcast(f1, bound.node(layer.b1))?;
            let f1 = tape.relu(f1);
            let f2 = tape.matmul(f1, bound.node(layer.w2))?;
            let mut f2 = tape.add_row_broadcast(f2, bound.node(layer.b2))?;
            if train_mode && self.cfg.dropout_rate > 0.0 {
                f2 = tape.dropout(f2, self.cfg.dropout_rate, dropout_rng)?;
            }
            x = tape.add(x, f2)?;
        }
        Ok(x)
    }
}

fn lstm_cell(
    tape: &mut Tape,
    bound: &BoundParams,
    dir: &LstmDir,
    x_t: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId), NumError> {
    let mut gates = Vec::with_capacity(4);
    for g in 0..4 {
        let xw = tape.matmul(x_t, bound.node(dir.wx[g]))?;
        let hw = tape.matmul(h, bound.node(dir.wh[g]))?;
        let s = tape.add(xw, hw)?;
        gates.push(tape.add(s, bound.node(dir.b[g]))?);
    }
    let i = tape.sigmoid(gates[0]);
    let f = tape.sigmoid(gates[1]);
    let g = tape.tanh(gates[2]);
    let o = tape.sigmoid(gates[3]);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o, ct)?;
    Ok((h_new, c_new))
}

/// One bidirectional layer: forward recursion left-to-right, backward
/// right-to-left, states concatenated per time step.
pub(crate) fn bilstm_layer(
    tape: &mut Tape,
    bound: &BoundParams,
    x: NodeId,
    fwd: &LstmDir,
    bwd: &LstmDir,
    hidden: usize,
) -> Result<NodeId, NumError> {
    let t_steps = tape.value(x).rows();
    let zero = Tensor::zeros(&[1, hidden]);
    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero.clone());
    let mut fwd_states = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let x_t = tape.row(x, t);
        let (h2, c2) = lstm_cell(tape, bound, fwd, x_t, h, c)?;
        h = h2;
        c = c2;
        fwd_states.push(h);
    }
    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero);
    let mut bwd_states = vec![NodeId(0); t_steps];
    for t in (0..t_steps).rev() {
        let x_t = tape.row(x, t);
        let (h2, c2) = lstm_cell(tape, bound, bwd, x_t, h, c)?;
        h = h2;
        c = c2;
        bwd_states[t] = h;
    }
    let fwd_mat = tape.stack_rows(&fwd_states)?;
    let bwd_mat = tape.stack_rows(&bwd_states)?;
    tape.concat_cols(fwd_mat, bwd_mat)
}
