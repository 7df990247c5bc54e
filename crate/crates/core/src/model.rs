//! Encoder plus vocabulary: turns instances into relation representations
//! and runs batched forward/backward passes for the training stages.

use std::collections::BTreeSet;

use crate::corpus::{Instance, RelationId};
use crate::encoder::{
    relation_representation, representation_grad_into, Checkpoint, Encoder, ForwardPass, Mode,
    RelationRepresentation,
};
use crate::error::{LpdError, Result};
use crate::rng::SeededRng;
use crate::tokenizer::{encode_instance, EncodedInput, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub encoder: Encoder<f32>,
    pub vocab: Vocab,
    /// Relation labels used so far to fit the weights.
    pub seen_relations: BTreeSet<RelationId>,
}

/// Forward results for a batch of sequences, kept for the backward pass.
pub struct BatchPass {
    pub inputs: Vec<EncodedInput>,
    pub passes: Vec<ForwardPass<f32>>,
    pub reps: Vec<RelationRepresentation>,
}

impl RelationModel {
    pub fn new(encoder: Encoder<f32>, vocab: Vocab) -> Result<Self> {
        if encoder.config.vocab_size != vocab.len() {
            return Err(LpdError::Shape(format!(
                "encoder vocab_size {} but vocabulary has {} tokens",
                encoder.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(RelationModel {
            encoder,
            vocab,
            seen_relations: BTreeSet::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, vocab: Vocab) -> Result<Self> {
        let mut model = Self::new(ckpt.encoder, vocab)?;
        model.seen_relations = ckpt.seen_relations;
        Ok(model)
    }

    pub fn max_length(&self) -> usize {
        self.encoder.config.max_length
    }

    pub fn encode(&self, instance: &Instance, prompt: Option<&str>) -> Result<EncodedInput> {
        encode_instance(instance, prompt, &self.vocab, self.max_length())
    }

    /// Evaluation-mode representation of an encoded input.
    pub fn represent_encoded(&self, encoded: &EncodedInput) -> Result<RelationRepresentation> {
        let pass = self.encoder.forward(&encoded.token_ids, Mode::Eval)?;
        relation_representation(pass.hidden(), pass.width(), encoded)
    }

    pub fn represent(&self, instance: &Instance, prompt: Option<&str>) -> Result<RelationRepresentation> {
        self.represent_encoded(&self.encode(instance, prompt)?)
    }

    pub fn forward_batch(&self, inputs: Vec<EncodedInput>, rng: &mut SeededRng) -> Result<BatchPass> {
        let mut passes = Vec::with_capacity(inputs.len());
        let mut reps = Vec::with_capacity(inputs.len());
        for input in &inputs {
            let pass = self.encoder.forward(&input.token_ids, Mode::Train(rng))?;
            reps.push(relation_representation(pass.hidden(), pass.width(), input)?);
            passes.push(pass);
        }
        Ok(BatchPass { inputs, passes, reps })
    }

    /// Parameter gradients given per-sequence representation gradients and,
    /// optionally, per-sequence MLM logit gradients (rows ordered like the
    /// sequence's `mlm_targets`).
    pub fn backward_batch(
        &self,
        batch: &BatchPass,
        d_reps: &[Vec<f64>],
        d_mlm_logits: Option<&[Vec<f32>]>,
    ) -> Result<Vec<f32>> {
        if d_reps.len() != batch.passes.len() {
            return Err(LpdError::Shape("one representation gradient per sequence required".into()));
        }
        let width = self.encoder.config.hidden;
        let mut grads = self.encoder.params.zeros_like();
        for (i, (pass, input)) in batch.passes.iter().zip(&batch.inputs).enumerate() {
            let mut d_hidden = vec![0.0f32; pass.hidden().len()];
            representation_grad_into(&d_reps[i], input, width, &mut d_hidden);
            if let Some(d_mlm) = d_mlm_logits {
                let positions: Vec<usize> = input.mlm_targets.iter().map(|&(p, _)| p).collect();
                self.encoder
                    .mlm_backward(pass.hidden(), &positions, &d_mlm[i], &mut d_hidden, &mut grads)?;
            }
            self.encoder.backward(pass, &d_hidden, &mut grads)?;
        }
        Ok(grads)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            seen_relations: self.seen_relations.clone(),
            labels: Default::default(),
        }
    }
}
