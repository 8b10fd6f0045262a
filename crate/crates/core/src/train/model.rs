use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dqr::{dqr_forward, DqrOutput, DqrParams, DqrShape, DqrTrace};
use crate::encoder::{EncoderShape, FeatureNorm, Prompt, PromptEncoder, PromptRole, PromptSpec, Vocabulary};
use crate::error::ModelError;
use crate::heads::{
    decode, density_loss, focal_loss, localization_loss, match_points, splat_plan, total_loss, DecodedVars, Decoder,
    DensityHead, LossBreakdown, LossParts, LossWeights, MatchResult, PredictionSet,
};
use crate::scalar::Scalar;
use crate::scene::{render_density, Scene};
use crate::tensor::{Binding, Graph, Matrix, ParamStore, RngStream, Var};

/// Which optional prompt parts are supplied; the positive text is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub pos_exemplars: bool,
    pub neg_text: bool,
    pub neg_exemplars: bool,
}

impl ModalityMask {
    pub const POS_ONLY: Self = Self { pos_exemplars: false, neg_text: false, neg_exemplars: false };
    pub const POS_EXEMPLARS: Self = Self { pos_exemplars: true, neg_text: false, neg_exemplars: false };
    pub const POS_NEG_TEXT: Self = Self { pos_exemplars: false, neg_text: true, neg_exemplars: false };
    pub const ALL: Self = Self { pos_exemplars: true, neg_text: true, neg_exemplars: true };

    /// The four rows of the modality ablation, in table order.
    pub const ABLATION: [Self; 4] = [Self::POS_ONLY, Self::POS_EXEMPLARS, Self::POS_NEG_TEXT, Self::ALL];

    pub fn has_negative(&self) -> bool {
        self.neg_text || self.neg_exemplars
    }

    pub fn label(&self) -> String {
        let mut parts = vec!["T_pos"];
        if self.pos_exemplars {
            parts.push("E_pos");
        }
        if self.neg_text {
            parts.push("T_neg");
        }
        if self.neg_exemplars {
            parts.push("E_neg");
        }
        parts.join("+")
    }

    /// Inverse of [`label`](Self::label); parts may come in any order.
    pub fn from_label(label: &str) -> Result<Self, ModelError> {
        let mut mask = Self::POS_ONLY;
        let mut has_pos = false;
        for part in label.split('+').map(str::trim) {
            match part {
                "T_pos" => has_pos = true,
                "E_pos" => mask.pos_exemplars = true,
                "T_neg" => mask.neg_text = true,
                "E_neg" => mask.neg_exemplars = true,
                other => return Err(ModelError::Config(format!("unknown prompt modality {other:?} in {label:?}"))),
            }
        }
        if !has_pos {
            return Err(ModelError::Config(format!("modality mask {label:?} must include T_pos")));
        }
        Ok(mask)
    }
}

/// Prompts for counting `target` while excluding `negative`, as far as `mask` allows.
pub fn build_prompts(scene: &Scene, target: &str, negative: &str, mask: ModalityMask) -> PromptSpec {
    let positive = Prompt {
        category: Some(target.to_string()),
        exemplars: if mask.pos_exemplars { scene.exemplars(target) } else { Vec::new() },
    };
    let neg = Prompt {
        category: mask.neg_text.then(|| negative.to_string()),
        exemplars: if mask.neg_exemplars { scene.exemplars(negative) } else { Vec::new() },
    };
    PromptSpec { positive, negative: (!neg.is_empty()).then_some(neg) }
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub decoded: DecodedVars,
    pub dqr: DqrOutput,
    /// Flattened `(H*W) x 1` density estimate; `None` for an empty scene.
    pub density: Option<Var>,
    pub anchors: Vec<Option<usize>>,
}

/// Encoder, refinement module and heads over one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: Config,
    pub store: ParamStore<T>,
    pub encoder: PromptEncoder,
    pub dqr: DqrParams,
    pub decoder: Decoder,
    pub density: DensityHead,
    pub tau: f64,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &Config) -> Result<Self, ModelError> {
        cfg.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        let rng = RngStream::new(cfg.seed, "init");
        let dim = cfg.feature_dim();
        let mut store = ParamStore::new();
        let encoder = PromptEncoder::new(
            &mut store,
            &rng,
            EncoderShape {
                queries: cfg.queries,
                dim,
                feature_dim: dim,
                heads: cfg.heads,
                vocab: Vocabulary { families: cfg.families, attributes: cfg.attributes },
            },
        )?;
        let dqr = DqrParams::new(
            &mut store,
            &rng,
            DqrShape {
                dim,
                heads: cfg.heads,
                prototypes: cfg.prototypes,
                exclusive: cfg.exclusive_count(),
                dropout: cfg.dropout,
                projection: cfg.projection,
                prototype_residual: cfg.prototype_residual,
                refine_null_slot: cfg.refine_null_slot,
            },
        )?;
        let decoder = Decoder::new(&mut store, &rng, dim);
        let density = DensityHead::new(&mut store, &rng, dim);
        Ok(Self { config: cfg.clone(), store, encoder, dqr, decoder, density, tau: 0.5 })
    }

    /// Full forward pass; `rng` enables dropout, `replay` pins the refinement
    /// module's discrete choices.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        scene: &Scene,
        prompts: &PromptSpec,
        rng: Option<&mut ChaCha8Rng>,
        replay: Option<&DqrTrace>,
    ) -> Result<ForwardPass, ModelError> {
        prompts.validate()?;
        let tokens = self.encoder.instance_tokens(g, bind, scene)?;
        let s_pos = self.encoder.encode_prompt_spec(g, bind, &prompts.positive)?;
        let q_pos = self.encoder.encode_queries(g, bind, scene, tokens, s_pos, PromptRole::Positive)?;
        let q_neg = match &prompts.negative {
            Some(p) => {
                let s_neg = self.encoder.encode_prompt_spec(g, bind, p)?;
                Some(self.encoder.encode_queries(g, bind, scene, tokens, s_neg, PromptRole::Negative)?.queries)
            }
            None => None,
        };
        let dqr = dqr_forward(g, bind, &self.dqr, q_pos.queries, q_neg, rng, replay)?;
        let rows = g.shape(s_pos).0;
        let avg = g.constant(Matrix::filled(1, rows, T::one() / T::of(rows as f64)));
        let prompt = g.matmul(avg, s_pos)?;
        let decoded = decode(g, bind, &self.decoder, dqr.refined, &q_pos.centers, prompt)?;
        let density = match tokens {
            Some(x) => {
                let plan = Arc::new(splat_plan(scene, self.config.kernel_sigma));
                Some(self.density.forward(g, bind, x, prompt, plan)?)
            }
            None => None,
        };
        Ok(ForwardPass { decoded, dqr, density, anchors: q_pos.anchors })
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, scene: &Scene, prompts: &PromptSpec) -> Result<PredictionSet, ModelError> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let pass = self.forward(&mut g, &bind, scene, prompts, None, None)?;
        Ok(PredictionSet::from_graph(&g, &pass.decoded))
    }

    pub fn count(&self, scene: &Scene, prompts: &PromptSpec) -> Result<usize, ModelError> {
        Ok(self.predict(scene, prompts)?.count(self.tau))
    }

    /// Training loss of one scene for counting `prompts.positive`.
    pub fn scene_loss(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        scene: &Scene,
        prompts: &PromptSpec,
        rng: Option<&mut ChaCha8Rng>,
        step: usize,
    ) -> Result<(Var, LossBreakdown, ScenePass), ModelError> {
        let pass = self.forward(g, bind, scene, prompts, rng, None)?;
        let (total, breakdown, matching) = self.loss_from_pass(g, scene, prompts, &pass, None, step)?;
        Ok((total, breakdown, ScenePass { pass, matching }))
    }

    /// Losses on an existing pass; `matching` pins the assignment.
    pub fn loss_from_pass(
        &self,
        g: &mut Graph<T>,
        scene: &Scene,
        prompts: &PromptSpec,
        pass: &ForwardPass,
        matching: Option<&MatchResult>,
        step: usize,
    ) -> Result<(Var, LossBreakdown, MatchResult), ModelError> {
        let cfg = &self.config;
        let target = prompts.positive.category.as_deref().unwrap_or_default();
        let points: Vec<[f64; 2]> =
            scene.instances.iter().filter(|i| i.category == target).map(|i| i.center).collect();
        let matching = match matching {
            Some(m) => m.clone(),
            None => match_points(&PredictionSet::from_graph(g, &pass.decoded), &points),
        };
        let labels = matching.labels(cfg.queries);
        let cls = focal_loss(g, pass.decoded.scores, &labels, cfg.focal_alpha, cfg.focal_gamma)?;
        let loc = localization_loss(g, pass.decoded.centers, &matching, &points)?;
        let den = match pass.density {
            Some(d) => {
                let map = render_density(scene, target, cfg.kernel_sigma)?;
                let flat: Vec<T> = map.grid.data().iter().map(|&v| T::of(v)).collect();
                let truth = g.constant(Matrix::column_vector(&flat));
                density_loss(g, d, truth)?
            }
            None => g.constant(Matrix::scalar(T::zero())),
        };
        let parts = LossParts { cls, loc, den, share: pass.dqr.share, div: pass.dqr.div };
        let (total, breakdown) = total_loss(g, &parts, &LossWeights::from_config(cfg), step)?;
        Ok((total, breakdown, matching))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tau: self.tau,
            feature_norm: self.encoder.feature_norm.clone(),
            params: self
                .store
                .iter()
                .map(|(name, m)| NamedParam {
                    name: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Self::new(&ck.config)?;
        if ck.params.len() != model.store.len() {
            return Err(ModelError::Contract(format!(
                "checkpoint has {} parameters, model has {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for p in &ck.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| ModelError::Contract(format!("unknown parameter {}", p.name)))?;
            if model.store.get(id).shape() != (p.rows, p.cols) {
                return Err(ModelError::Contract(format!("shape mismatch for {}", p.name)));
            }
            let values = p.data.iter().map(|&v| T::of(v)).collect();
            *model.store.get_mut(id) = Matrix::from_vec(p.rows, p.cols, values)?;
        }
        if ck.feature_norm.mean.len() != model.encoder.shape.feature_dim
            || ck.feature_norm.scale.len() != model.encoder.shape.feature_dim
        {
            return Err(ModelError::Contract("feature normalization has the wrong width".into()));
        }
        model.encoder.feature_norm = ck.feature_norm.clone();
        model.tau = ck.tau;
        Ok(model)
    }
}

/// Forward pass plus the assignment used for its loss.
#[derive(Clone, Debug)]
pub struct ScenePass {
    pub pass: ForwardPass,
    pub matching: MatchResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serializable trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: Config,
    pub tau: f64,
    pub feature_norm: FeatureNorm,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Contract(format!("bad checkpoint: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_labels_round_trip() {
        for m in ModalityMask::ABLATION {
            assert_eq!(ModalityMask::from_label(&m.label()).unwrap(), m);
        }
        assert_eq!(ModalityMask::from_label("T_pos + T_neg").unwrap(), ModalityMask::POS_NEG_TEXT);
        assert!(ModalityMask::from_label("E_pos").is_err());
        assert!(ModalityMask::from_label("T_pos+X").is_err());
    }
}
