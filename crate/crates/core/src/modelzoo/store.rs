//! A `VarMap`-backed var builder whose fresh variables are drawn from a
//! stream keyed by `(seed, variable name)`, so initialization does not depend
//! on construction order or on the process-global RNG.

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand_distr::{Distribution, Normal, Uniform};

use crate::rng;

pub struct SeededStore {
    pub varmap: VarMap,
    seed: u64,
}

impl SeededStore {
    pub fn new(varmap: VarMap, seed: u64) -> Self {
        SeededStore { varmap, seed }
    }

    pub fn builder(varmap: &VarMap, seed: u64, dev: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(
            Box::new(SeededStore::new(varmap.clone(), seed)),
            DType::F32,
            dev.clone(),
        )
    }

    fn sample(&self, shape: &Shape, name: &str, init: Init) -> Vec<f32> {
        let n = shape.elem_count();
        let mut rng = rng::stream(self.seed, &format!("init/{name}"));
        let normal = |mean: f64, std: f64, rng: &mut rng::StreamRng| -> Vec<f32> {
            let d = Normal::new(mean, std).expect("std >= 0");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        };
        let uniform = |lo: f64, up: f64, rng: &mut rng::StreamRng| -> Vec<f32> {
            if up <= lo {
                return vec![lo as f32; n];
            }
            let d = Uniform::new(lo, up).expect("lo < up");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        };
        match init {
            Init::Const(v) => vec![v as f32; n],
            Init::Uniform { lo, up } => uniform(lo, up, &mut rng),
            Init::Randn { mean, stdev } => normal(mean, stdev, &mut rng),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan.for_shape(shape).max(1);
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(0.0, std, &mut rng),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(-bound, bound, &mut rng)
                    }
                }
            }
        }
    }
}

impl SimpleBackend for SeededStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("varmap lock");
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "shape mismatch for {name}: stored {:?}, requested {:?}",
                    var.shape(),
                    s
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.sample(&s, name, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.varmap.data().lock().expect("varmap lock");
        match data.get(name) {
            Some(v) => v.as_tensor().to_device(dev)?.to_dtype(dtype),
            None => candle_core::bail!("no variable named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock").contains_key(name)
    }
}
