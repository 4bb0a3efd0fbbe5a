use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{spectrogram_to_image, ModelError, ModelOutput};
use crate::featurizer::Spectrogram;
use crate::numcore::{BoundParams, NumError, ParamId, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentConfig {
    /// (output channels, stride) per conv stage.
    pub stages: Vec<(usize, usize)>,
    pub kernel: usize,
    pub num_classes: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            stages: vec![(8, 2), (16, 2), (32, 2)],
            kernel: 3,
            num_classes: 20,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages.is_empty() || self.kernel == 0 || self.num_classes < 2 {
            return Err(ModelError::BadConfig(
                "student needs >= 1 conv stage, kernel >= 1, >= 2 classes".into(),
            ));
        }
        if self.stages.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(ModelError::BadConfig("zero channel width or stride".into()));
        }
        Ok(())
    }

    /// Closed-form trainable-scalar count:
    /// sum over stages of (k^2 * c_in * c_out + c_out) plus the linear head.
    pub fn expected_param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = 1;
        for &(c_out, _) in &self.stages {
            total += self.kernel * self.kernel * c_in * c_out + c_out;
            c_in = c_out;
        }
        total + c_in * self.num_classes + self.num_classes
    }
}

#[derive(Clone, Debug)]
struct StudentIds {
    convs: Vec<(ParamId, ParamId)>,
    strides: Vec<usize>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Student {
    pub cfg: StudentConfig,
    pub params: ParamSet,
    ids: StudentIds,
}

impl Student {
    pub fn new<R: Rng>(cfg: StudentConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let k = cfg.kernel;
        let mut convs = Vec::new();
        let mut strides = Vec::new();
        let mut c_in = 1;
        for (i, &(c_out, stride)) in cfg.stages.iter().enumerate() {
            let fan_in = k * k * c_in;
            let fan_out = k * k * c_out;
            let w = params.register(
                format!("conv{i}.w"),
                Tensor::glorot_uniform(&[c_out, c_in, k, k], fan_in, fan_out, rng),
            );
            let b = params.register(format!("conv{i}.b"), Tensor::zeros(&[c_out]));
            convs.push((w, b));
            strides.push(stride);
            c_in = c_out;
        }
        let l = cfg.num_classes;
        let ids = StudentIds {
            convs,
            strides,
            head_w: params.register(
                "head.w",
                Tensor::glorot_uniform(&[c_in, l], c_in, l, rng),
            ),
            head_b: params.register("head.b", Tensor::zeros(&[1, l])),
        };
        Ok(Student { cfg, params, ids })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &Spectrogram,
    ) -> Result<ModelOutput, NumError> {
        let mut x = tape.constant(spectrogram_to_image(spec));
        for ((w, b), &stride) in self.ids.convs.iter().zip(&self.ids.strides) {
            let conv = tape.conv2d(x, bound.node(*w), bound.node(*b), stride)?;
            x = tape.relu(conv);
        }
        let feature = tape.spatial_mean(x)?;
        let logits = tape.matmul(feature, bound.node(self.ids.head_w))?;
        let logits = tape.add(logits, bound.node(self.ids.head_b))?;
        Ok(ModelOutput { logits, feature })
    }

    /// Single-sample inference returning the logits as plain values.
    pub fn predict_logits(&self, spec: &Spectrogram) -> Result<Vec<f64>, NumError> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&self.params, &mut tape);
        let out = self.forward(&mut tape, &bound, spec)?;
        Ok(tape.value(out.logits).data().to_vec())
    }
}
