//! Versioned safetensors checkpoints.
//!
//! Tensor names are namespaced: `gen/` (generator), `opt_g/m/` and
//! `opt_g/v/` (its Adam moments), `disc/` and `opt_d/…` for the
//! discriminator. Scalars and configs live in the string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use posexfer_tensor::Tensor;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::discriminator::{DiscriminatorBank, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::network::{Autoencoder, NetworkConfig};
use crate::nn::{Adam, AdamConfig, AdamSlot, Module};

pub const FORMAT: &str = "posexfer-checkpoint";
pub const VERSION: &str = "1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: Autoencoder<f32>,
    pub gen_opt: Adam<f32>,
    pub discriminator: Option<(DiscriminatorBank<f32>, Adam<f32>, DiscriminatorConfig)>,
    pub level: usize,
    /// Steps completed within `level`.
    pub step: u64,
    /// Steps completed over the whole run.
    pub global_step: u64,
    pub sigma: f32,
    /// Number of training samples drawn so far; the next sample index.
    pub sample_cursor: u64,
    /// Free-form metadata, e.g. the serialized training config.
    pub extra: BTreeMap<String, String>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub(crate) fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor<f32>> {
    let shape = view.shape().to_vec();
    let bytes = view.data();
    let data: Vec<f32> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        other => {
            return Err(Error::Config(format!("unsupported tensor dtype {other:?}")));
        }
    };
    if data.len() != shape.iter().product::<usize>() {
        return Err(Error::Config(format!("tensor data does not match shape {shape:?}")));
    }
    Ok(Tensor::from_vec(&shape, data))
}

struct Writer {
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
}

impl Writer {
    fn put(&mut self, name: String, t: &Tensor<f32>) {
        let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors.push((name, t.shape().to_vec(), bytes));
    }

    fn put_module<M: Module<f32>>(&mut self, prefix: &str, m: &M) {
        m.visit(&mut |n, t, _| self.put(format!("{prefix}{n}"), t));
    }

    fn put_adam(&mut self, prefix: &str, opt: &Adam<f32>) -> BTreeMap<String, u64> {
        let mut steps = BTreeMap::new();
        let mut names: Vec<_> = opt.slots.keys().collect();
        names.sort();
        for n in names {
            let s = &opt.slots[n];
            self.put(format!("{prefix}m/{n}"), &s.m);
            self.put(format!("{prefix}v/{n}"), &s.v);
            steps.insert(n.clone(), s.step);
        }
        steps
    }
}

impl Checkpoint {
    pub fn network_config(&self) -> NetworkConfig {
        *self.generator.config()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer { tensors: Vec::new() };
        let mut meta: HashMap<String, String> = HashMap::new();
        w.put_module("gen/", &self.generator);
        let gsteps = w.put_adam("opt_g/", &self.gen_opt);
        meta.insert("format".into(), FORMAT.into());
        meta.insert("version".into(), VERSION.into());
        meta.insert("level".into(), self.level.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("global_step".into(), self.global_step.to_string());
        meta.insert("sigma".into(), self.sigma.to_string());
        meta.insert("sample_cursor".into(), self.sample_cursor.to_string());
        meta.insert("network".into(), to_json(self.generator.config()));
        meta.insert("opt_g".into(), to_json(&self.gen_opt.config));
        meta.insert("opt_g_steps".into(), to_json(&gsteps));
        if let Some((d, opt, cfg)) = &self.discriminator {
            w.put_module("disc/", d);
            let dsteps = w.put_adam("opt_d/", opt);
            meta.insert("discriminator".into(), to_json(cfg));
            meta.insert("disc_crop_side".into(), d.crop_side().to_string());
            meta.insert("opt_d".into(), to_json(&opt.config));
            meta.insert("opt_d_steps".into(), to_json(&dsteps));
        }
        for (k, v) in &self.extra {
            meta.insert(format!("extra.{k}"), v.clone());
        }
        let views: Vec<(String, TensorView<'_>)> = w
            .tensors
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| ckpt_err(path, e.to_string()))?)))
            .collect::<Result<_>>()?;
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| ckpt_err(path, e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, format!("unreadable: {e}")))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(ckpt_err(path, "not a posexfer checkpoint"));
        }
        let version = meta.get("version").cloned().unwrap_or_default();
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION.into(),
            });
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, format!("truncated or corrupt: {e}")))?;
        let get = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("metadata `{k}` missing")));
        let parse_num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| ckpt_err(path, format!("metadata `{k}` is not a number")))
        };
        let from_json = |k: &str| -> Result<serde_json::Value> {
            serde_json::from_str(get(k)?).map_err(|e| ckpt_err(path, format!("metadata `{k}`: {e}")))
        };

        let tensors: HashMap<String, Tensor<f32>> = st
            .tensors()
            .into_iter()
            .map(|(n, v)| Ok((n, tensor_from_view(&v)?)))
            .collect::<Result<_>>()?;
        let level = parse_num("level")? as usize;
        let network: NetworkConfig = serde_json::from_value(from_json("network")?)
            .map_err(|e| ckpt_err(path, format!("network config: {e}")))?;
        let mut generator = Autoencoder::new(level, network)?;
        generator
            .load_tensors(|n| tensors.get(&format!("gen/{n}")).cloned())
            .map_err(|e| ckpt_err(path, e.to_string()))?;
        let adam = |prefix: &str, cfg_key: &str, steps_key: &str| -> Result<Adam<f32>> {
            let config: AdamConfig = serde_json::from_value(from_json(cfg_key)?)
                .map_err(|e| ckpt_err(path, format!("{cfg_key}: {e}")))?;
            let steps: BTreeMap<String, u64> = serde_json::from_value(from_json(steps_key)?)
                .map_err(|e| ckpt_err(path, format!("{steps_key}: {e}")))?;
            let mut opt = Adam::new(config);
            for (n, step) in steps {
                let m = tensors.get(&format!("{prefix}m/{n}"));
                let v = tensors.get(&format!("{prefix}v/{n}"));
                let (Some(m), Some(v)) = (m, v) else {
                    return Err(ckpt_err(path, format!("optimizer state for {n} is missing")));
                };
                opt.slots.insert(n, AdamSlot { m: m.clone(), v: v.clone(), step });
            }
            Ok(opt)
        };
        let gen_opt = adam("opt_g/", "opt_g", "opt_g_steps")?;
        let discriminator = if meta.contains_key("discriminator") {
            let cfg: DiscriminatorConfig = serde_json::from_value(from_json("discriminator")?)
                .map_err(|e| ckpt_err(path, format!("discriminator config: {e}")))?;
            let side = parse_num("disc_crop_side")? as usize;
            let mut bank = DiscriminatorBank::new(side, &cfg)?;
            let mut missing = None;
            bank.visit_mut(&mut |n, t, _| match tensors.get(&format!("disc/{n}")) {
                Some(v) if v.shape() == t.shape() => *t = std::sync::Arc::new(v.clone()),
                _ => missing = Some(n.to_string()),
            });
            if let Some(n) = missing {
                return Err(ckpt_err(path, format!("discriminator tensor {n} missing or misshapen")));
            }
            Some((bank, adam("opt_d/", "opt_d", "opt_d_steps")?, cfg))
        } else {
            None
        };
        let extra = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            generator,
            gen_opt,
            discriminator,
            level,
            step: parse_num("step")?,
            global_step: parse_num("global_step")?,
            sample_cursor: parse_num("sample_cursor")?,
            sigma: get("sigma")?
                .parse()
                .map_err(|_| ckpt_err(path, "metadata `sigma` is not a number"))?,
            extra,
        })
    }

    /// Loads and checks that the stored model is at `level`.
    pub fn load_at_level(path: &Path, level: usize) -> Result<Self> {
        let c = Self::load(path)?;
        if c.level != level {
            return Err(Error::LevelMismatch(format!(
                "{} holds a level-{} model, expected level {level}",
                path.display(),
                c.level
            )));
        }
        Ok(c)
    }
}

fn to_json<S: serde::Serialize + ?Sized>(v: &S) -> String {
    serde_json::to_string(v).expect("config serializes")
}

/// `dir/ckpt_L{level}_S{global_step}.safetensors`
pub fn checkpoint_path(dir: &Path, level: usize, global_step: u64) -> PathBuf {
    dir.join(format!("ckpt_L{level}_S{global_step:08}.safetensors"))
}
