//! Batch assembly: decode, augment, stack, and (for frozen backbones) a
//! per-image feature cache shared by training and validation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::Tensor;
use rayon::prelude::*;

use crate::augment::Pipeline;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::imageio::load_model_input;
use crate::metriclearn::EmbeddingSource;
use crate::modelzoo::Model;

const FROZEN_CHUNK: usize = 4;

/// Decode `records` at `size`, run each through `pipeline` keyed by
/// `(epoch, sample_ids[i])`, and stack to `(B, 3, size, size)`.
pub fn load_batch(
    records: &[&ImageRecord],
    sample_ids: &[u64],
    pipeline: &Pipeline,
    epoch: u64,
    size: u32,
    model: &Model,
) -> Result<Tensor> {
    debug_assert_eq!(records.len(), sample_ids.len());
    let images: Vec<Vec<f32>> = records
        .par_iter()
        .zip(sample_ids.par_iter())
        .map(|(r, &s)| {
            let img = load_model_input(r.model_input_path(), size)?;
            Ok(pipeline.apply(&img, epoch, s).data)
        })
        .collect::<Result<_>>()?;
    let s = size as usize;
    let flat: Vec<f32> = images.concat();
    Ok(Tensor::from_vec(flat, (records.len(), 3, s, s), model.device())?)
}

/// Backbone features for model inputs. When the backbone is frozen, features
/// of un-augmented images are memoized by path.
pub struct FeatureSource<'m> {
    pub model: &'m Model,
    pub input_size: u32,
    pub batch_size: usize,
    eval: Pipeline,
    cache: Option<RefCell<HashMap<PathBuf, Vec<f32>>>>,
}

impl<'m> FeatureSource<'m> {
    pub fn new(model: &'m Model, input_size: u32, batch_size: usize, eval: Pipeline, cache: bool) -> Self {
        let cache = (cache && model.features_are_static() && !eval.is_stochastic())
            .then(|| RefCell::new(HashMap::new()));
        FeatureSource {
            model,
            input_size,
            batch_size: batch_size.max(1),
            eval,
            cache,
        }
    }

    pub fn caching(&self) -> bool {
        self.cache.is_some()
    }

    /// Inference-mode features, `(N, feature_dim)`.
    pub fn eval_features(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        let Some(cache) = &self.cache else {
            return self.compute(records, None, 0, false);
        };
        let missing: Vec<&ImageRecord> = {
            let c = cache.borrow();
            records.iter().copied().filter(|r| !c.contains_key(&r.path)).collect()
        };
        for chunk in missing.chunks(self.batch_size) {
            let f = self.compute(chunk, None, 0, false)?.to_vec2::<f32>()?;
            let mut c = cache.borrow_mut();
            for (r, row) in chunk.iter().zip(f) {
                c.insert(r.path.clone(), row);
            }
        }
        let c = cache.borrow();
        let dim = self.model.feature_dim();
        let mut flat = Vec::with_capacity(records.len() * dim);
        for r in records {
            flat.extend_from_slice(&c[&r.path]);
        }
        Ok(Tensor::from_vec(flat, (records.len(), dim), self.model.device())?)
    }

    /// Training-mode features. A deterministic train pipeline over a frozen
    /// backbone yields exactly the inference features, so those are reused.
    pub fn train_features(
        &self,
        records: &[&ImageRecord],
        sample_ids: &[u64],
        pipeline: &Pipeline,
        epoch: u64,
    ) -> Result<Tensor> {
        if self.cache.is_some() && !pipeline.is_stochastic() {
            return self.eval_features(records);
        }
        self.compute(records, Some((sample_ids, pipeline)), epoch, true)
    }

    fn compute(
        &self,
        records: &[&ImageRecord],
        train: Option<(&[u64], &Pipeline)>,
        epoch: u64,
        train_mode: bool,
    ) -> Result<Tensor> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let zeros = vec![0u64; records.len()];
        let (ids, pipeline) = train.unwrap_or((&zeros, &self.eval));
        // A frozen backbone's outputs do not depend on the batch, so it runs
        // in small chunks to bound the memory held by the autograd graph.
        let chunk = if self.model.features_are_static() {
            FROZEN_CHUNK
        } else {
            records.len()
        };
        let parts = records
            .chunks(chunk)
            .zip(ids.chunks(chunk))
            .map(|(r, i)| {
                let x = load_batch(r, i, pipeline, epoch, self.input_size, self.model)?;
                self.model.features(&x, train_mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Inference-mode head outputs, computed in batches.
    pub fn eval_outputs(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        let parts = records
            .chunks(self.batch_size)
            .map(|c| self.model.head_forward(&self.eval_features(c)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }
}

impl EmbeddingSource for FeatureSource<'_> {
    fn embed_dim(&self) -> usize {
        self.model.head.width()
    }

    fn embed(&self, records: &[&ImageRecord]) -> Result<Vec<Vec<f32>>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.eval_outputs(records)?.to_vec2::<f32>()?)
    }
}
