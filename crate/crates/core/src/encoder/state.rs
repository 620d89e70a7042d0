use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cnn, lora, slice_adapter, vit, Backbone, EncoderConfig, InputMode};
use crate::training::optim::OptimizerState;
use crate::{Error, Result};

/// Exported backbone weights (safetensors) and their expected sha256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsRef {
    pub path: PathBuf,
    #[serde(default)]
    pub sha256: Option<String>,
}

#[derive(Debug)]
pub enum Param {
    Trainable(Var),
    Frozen(Tensor),
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Param::Trainable(v) => v.as_tensor(),
            Param::Frozen(t) => t,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Param::Trainable(_))
    }

    fn deep_copy(&self) -> Result<Param> {
        Ok(match self {
            Param::Trainable(v) => Param::Trainable(Var::from_tensor(&v.as_tensor().copy()?)?),
            Param::Frozen(t) => Param::Frozen(t.copy()?),
        })
    }
}

/// All encoder parameters plus optimizer state and the step counter.
///
/// Parameter names are namespaced: `backbone.*` for base weights,
/// `lora.*` for low-rank adapters and `adapter.*` for the slice adapter.
#[derive(Debug)]
pub struct ModelState {
    pub config: EncoderConfig,
    params: BTreeMap<String, Param>,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl Clone for ModelState {
    /// Deep copy: trainable variables do not share storage with the original.
    fn clone(&self) -> Self {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), p.deep_copy().expect("cpu tensor copy")))
                .collect(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }
}

pub(crate) struct ParamInit<'a> {
    pub params: &'a mut BTreeMap<String, Param>,
    pub rng: ChaCha8Rng,
}

impl ParamInit<'_> {
    pub fn add(&mut self, name: String, values: Vec<f32>, shape: &[usize]) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        self.params.insert(name, Param::Trainable(Var::from_tensor(&t)?));
        Ok(())
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        use rand_distr::{Distribution, Normal};
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let v = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.add(name, v, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<()> {
        let n: usize = shape.iter().product();
        self.add(name, vec![value; n], shape)
    }
}

impl ModelState {
    /// Builds the parameters for `config`: pretrained backbone weights when a
    /// weights file is configured, seeded random initialization otherwise.
    /// Low-rank adapters from the config are attached last.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut init = ParamInit {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        match &config.backbone {
            Backbone::DilatedCnn(c) => cnn::init(c, &mut init)?,
            Backbone::FoundationVit(v) => vit::init(v, &mut init)?,
        }
        if config.input_mode == InputMode::SliceAdapter {
            slice_adapter::init(&mut init)?;
        }
        let mut state = ModelState {
            config: config.clone(),
            params,
            optimizer: OptimizerState::default(),
            step: 0,
        };
        if let Some(w) = &config.weights {
            state.load_backbone_weights(w)?;
        }
        if let Some(spec) = &config.lora {
            let mut bare = state;
            bare.config.lora = None;
            state = lora::wrap_with_low_rank_adapters(bare, spec)?;
        }
        Ok(state)
    }

    fn load_backbone_weights(&mut self, w: &WeightsRef) -> Result<()> {
        if !w.path.exists() {
            return Err(Error::MissingFile(w.path.clone()));
        }
        if let Some(expected) = &w.sha256 {
            let bytes = std::fs::read(&w.path).map_err(|e| Error::io(&w.path, e))?;
            let got = hex::encode(Sha256::digest(&bytes));
            if !got.eq_ignore_ascii_case(expected) {
                return Err(Error::InvalidConfig(format!(
                    "weights {} have sha256 {got}, expected {expected}",
                    w.path.display()
                )));
            }
        }
        let loaded = candle_core::safetensors::load(&w.path, &Device::Cpu)?;
        for (name, param) in self.params.iter_mut() {
            let Some(key) = name.strip_prefix("backbone.") else {
                continue;
            };
            let t = loaded.get(key).ok_or_else(|| {
                Error::InvalidConfig(format!("weights file lacks tensor `{key}`"))
            })?;
            let t = t.to_dtype(DType::F32)?;
            if t.dims() != param.tensor().dims() {
                return Err(Error::ShapeMismatch(format!(
                    "weights tensor `{key}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    param.tensor().dims()
                )));
            }
            *param = Param::Trainable(Var::from_tensor(&t)?);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(Param::tensor)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.params
            .iter()
            .filter_map(|(k, p)| match p {
                Param::Trainable(v) => Some((k.as_str(), v)),
                Param::Frozen(_) => None,
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub(crate) fn insert(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }

    /// Detaches every parameter whose name starts with `prefix`.
    pub fn freeze(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                if let Param::Trainable(v) = p {
                    *p = Param::Frozen(v.as_tensor().detach());
                }
            }
        }
    }

    fn digest_where(&self, keep: impl Fn(&str, &Param) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if !keep(name, p) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0]);
            let v = p.tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Digest of the backbone base weights.
    pub fn base_digest(&self) -> Result<String> {
        self.digest_where(|n, _| n.starts_with("backbone."))
    }

    /// Digest of every parameter; equal digests mean bitwise-equal weights.
    pub fn weights_digest(&self) -> Result<String> {
        self.digest_where(|_, _| true)
    }

    fn collect(&self, keep: impl Fn(&Param) -> bool) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| keep(p))
            .map(|(k, p)| (k.clone(), p.tensor().clone()))
            .collect()
    }

    /// Writes `trainable.safetensors`, `frozen.safetensors` (unless the base
    /// comes from a weights file), `optimizer.safetensors` and `state.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trainable = self.collect(Param::is_trainable);
        candle_core::safetensors::save(&trainable, dir.join("trainable.safetensors"))?;
        let frozen = self.collect(|p| !p.is_trainable());
        if self.config.weights.is_none() && !frozen.is_empty() {
            candle_core::safetensors::save(&frozen, dir.join("frozen.safetensors"))?;
        }
        let momentum: HashMap<String, Tensor> = self.optimizer.momentum.clone().into_iter().collect();
        if !momentum.is_empty() {
            candle_core::safetensors::save(&momentum, dir.join("optimizer.safetensors"))?;
        }
        let meta = CheckpointMeta {
            step: self.step,
            optimizer_steps: self.optimizer.steps,
            config: self.config.clone(),
            base_digest: self.base_digest()?,
            weights_digest: self.weights_digest()?,
        };
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("state.json");
        if !meta_path.exists() {
            return Err(Error::MissingFile(meta_path));
        }
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let mut state = ModelState::init(&meta.config)?;
        let load = |name: &str| -> Result<HashMap<String, Tensor>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(candle_core::safetensors::load(&p, &Device::Cpu)?)
            } else {
                Ok(HashMap::new())
            }
        };
        for (name, t) in load("trainable.safetensors")? {
            state.params.insert(name, Param::Trainable(Var::from_tensor(&t)?));
        }
        for (name, t) in load("frozen.safetensors")? {
            state.params.insert(name, Param::Frozen(t));
        }
        state.optimizer = OptimizerState {
            momentum: load("optimizer.safetensors")?.into_iter().collect(),
            steps: meta.optimizer_steps,
        };
        state.step = meta.step;
        if state.weights_digest()? != meta.weights_digest {
            return Err(Error::InvalidInput(format!(
                "checkpoint {} does not reproduce its recorded weights digest",
                dir.display()
            )));
        }
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    optimizer_steps: u64,
    config: EncoderConfig,
    base_digest: String,
    weights_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut cfg = EncoderConfig::cnn_default();
        cfg.train_resolution = (16, 16);
        cfg.test_resolution = (16, 16);
        cfg.input_mode = InputMode::SliceAdapter;
        let mut state = ModelState::init(&cfg).unwrap();
        state.step = 7;
        let dir = tempfile::tempdir().unwrap();
        state.save_checkpoint(dir.path()).unwrap();
        let back = ModelState::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.weights_digest().unwrap(), state.weights_digest().unwrap());
        assert!(back.contains("adapter.weight"));
    }

    #[test]
    fn clone_is_deep() {
        let cfg = EncoderConfig::cnn_default();
        let state = ModelState::init(&cfg).unwrap();
        let copy = state.clone();
        let (name, var) = state.trainable().into_iter().find(|(n, _)| n.ends_with("weight")).unwrap();
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        assert_ne!(
            copy.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            state.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
