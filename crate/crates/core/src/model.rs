//! Parameter layout of the full generator and its initialization.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{derive, Stream};
use crate::tape::{Mat, Tape, Var};

/// Parameter handles of one self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_offset: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_offset: ParamId,
}

/// The same block with its parameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_offset: Var,
    pub ln2_gain: Var,
    pub ln2_offset: Var,
}

impl LayerIds {
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> LayerVars {
        LayerVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
            ln1_gain: tape.param(store, self.ln1_gain),
            ln1_offset: tape.param(store, self.ln1_offset),
            ln2_gain: tape.param(store, self.ln2_gain),
            ln2_offset: tape.param(store, self.ln2_offset),
        }
    }

    fn ids(&self) -> [ParamId; 11] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gain,
            self.ln1_offset,
            self.ln2_gain,
            self.ln2_offset,
        ]
    }
}

/// Owned parameters of one block, for direct use outside a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln1_gain: Mat,
    pub ln1_offset: Mat,
    pub ln2_gain: Mat,
    pub ln2_offset: Mat,
}

impl LayerParams {
    pub fn to_tape(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
            ln1_gain: tape.constant(self.ln1_gain.clone()),
            ln1_offset: tape.constant(self.ln1_offset.clone()),
            ln2_gain: tape.constant(self.ln2_gain.clone()),
            ln2_offset: tape.constant(self.ln2_offset.clone()),
        }
    }

    pub fn from_store(ids: &LayerIds, store: &ParamStore) -> Self {
        let g = |id| store.value(id).clone();
        LayerParams {
            wq: g(ids.wq),
            wk: g(ids.wk),
            wv: g(ids.wv),
            w1: g(ids.w1),
            b1: g(ids.b1),
            w2: g(ids.w2),
            b2: g(ids.b2),
            ln1_gain: g(ids.ln1_gain),
            ln1_offset: g(ids.ln1_offset),
            ln2_gain: g(ids.ln2_gain),
            ln2_offset: g(ids.ln2_offset),
        }
    }
}

/// A linear map `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelIds {
    pub item_embedding: ParamId,
    pub position_embedding: ParamId,
    pub encoder: Vec<LayerIds>,
    pub mu_head: LinearIds,
    pub sigma_head: LinearIds,
    pub sigma2_head: LinearIds,
    pub decoder: Vec<LayerIds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

fn layer_names(prefix: &str, l: usize) -> [String; 11] {
    [
        "wq",
        "wk",
        "wv",
        "w1",
        "b1",
        "w2",
        "b2",
        "ln1_gain",
        "ln1_offset",
        "ln2_gain",
        "ln2_offset",
    ]
    .map(|n| format!("{prefix}.{l}.{n}"))
}

impl Model {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = derive(config.seed, Stream::Init, &[]);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let bound = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::default();

        let mut item = Mat::from_shape_fn((config.num_items + 1, d), |_| normal.sample(&mut rng));
        item.row_mut(0).fill(0.0);
        let item_embedding = store.add("item_embedding", item, ParamGroup::Main);
        let pos = Mat::from_shape_fn((config.max_len, d), |_| normal.sample(&mut rng));
        let position_embedding = store.add("position_embedding", pos, ParamGroup::Main);

        let uniform = |rows, cols, rng: &mut crate::rng::Rng| {
            Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let add_layers = |store: &mut ParamStore, rng: &mut crate::rng::Rng, prefix: &str, n: usize| {
            (0..n)
                .map(|l| {
                    let names = layer_names(prefix, l);
                    let mut mk = |i: usize, m: Mat| store.add(names[i].clone(), m, ParamGroup::Main);
                    LayerIds {
                        wq: mk(0, uniform(d, d, rng)),
                        wk: mk(1, uniform(d, d, rng)),
                        wv: mk(2, uniform(d, d, rng)),
                        w1: mk(3, uniform(d, d, rng)),
                        b1: mk(4, Mat::zeros((1, d))),
                        w2: mk(5, uniform(d, d, rng)),
                        b2: mk(6, Mat::zeros((1, d))),
                        ln1_gain: mk(7, Mat::ones((1, d))),
                        ln1_offset: mk(8, Mat::zeros((1, d))),
                        ln2_gain: mk(9, Mat::ones((1, d))),
                        ln2_offset: mk(10, Mat::zeros((1, d))),
                    }
                })
                .collect::<Vec<_>>()
        };
        let encoder = add_layers(&mut store, &mut rng, "enc", config.enc_layers);

        let head = |store: &mut ParamStore, rng: &mut crate::rng::Rng, name: &str, group| LinearIds {
            weight: store.add(
                format!("head.{name}.weight"),
                Mat::from_shape_fn((d, d), |_| rng.random_range(-bound..bound)),
                group,
            ),
            bias: store.add(format!("head.{name}.bias"), Mat::zeros((1, d)), group),
        };
        let mu_head = head(&mut store, &mut rng, "mu", ParamGroup::Main);
        let sigma_head = head(&mut store, &mut rng, "sigma", ParamGroup::Main);
        let sigma2_head = head(&mut store, &mut rng, "sigma2", ParamGroup::SigmaPrime);
        let decoder = add_layers(&mut store, &mut rng, "dec", config.dec_layers);

        Ok(Model {
            config,
            params: store,
            ids: ModelIds {
                item_embedding,
                position_embedding,
                encoder,
                mu_head,
                sigma_head,
                sigma2_head,
                decoder,
            },
        })
    }

    /// Rebuilds handles for a parameter set loaded from disk; names and
    /// shapes must match what [`Model::new`] would produce for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Model::new(config.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.entries().iter().zip(params.entries()) {
            if a.name != b.name || a.value.dim() != b.value.dim() || a.group != b.group {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.dim(),
                    a.name,
                    a.value.dim()
                )));
            }
        }
        Ok(Model {
            config,
            params,
            ids: template.ids,
        })
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn item_table(&self) -> &Mat {
        self.params.value(self.ids.item_embedding)
    }

    /// Parameter family label used in diagnostics: `embedding`, `attention`,
    /// `ffn`, `norm`, `head`, with an `enc`/`dec` prefix for block params.
    pub fn family(&self, id: ParamId) -> String {
        let name = self.params.name(id);
        if name.ends_with("embedding") {
            return "embedding".into();
        }
        if name.starts_with("head.") {
            return name.trim_end_matches(".weight").trim_end_matches(".bias").to_string();
        }
        let part = name.rsplit('.').next().unwrap_or("");
        let kind = match part {
            "wq" | "wk" | "wv" => "attention",
            "w1" | "b1" | "w2" | "b2" => "ffn",
            _ => "norm",
        };
        format!("{}.{}", &name[..3], kind)
    }

    /// Every handle in the block lists, for stage-isolation checks.
    pub fn layer_param_ids(&self) -> Vec<ParamId> {
        self.ids
            .encoder
            .iter()
            .chain(&self.ids.decoder)
            .flat_map(|l| l.ids())
            .collect()
    }

    /// Forces the padding row of the item table back to zero.
    pub(crate) fn zero_padding_row(&mut self) {
        let id = self.ids.item_embedding;
        self.params.value_mut(id).row_mut(0).fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_items: 7,
            max_len: 5,
            hidden_dim: 4,
            num_heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            ..Default::default()
        }
    }

    #[test]
    fn layout_and_groups() {
        let m = Model::new(tiny()).unwrap();
        assert_eq!(m.item_table().dim(), (8, 4));
        assert!(m.item_table().row(0).iter().all(|&v| v == 0.0));
        assert_eq!(m.params.value(m.ids.position_embedding).dim(), (5, 4));
        assert_eq!(m.ids.encoder.len(), 2);
        assert_eq!(m.ids.decoder.len(), 1);
        let sigma2: Vec<_> = m
            .params
            .ids()
            .filter(|&id| m.params.group(id) == ParamGroup::SigmaPrime)
            .collect();
        assert_eq!(sigma2, vec![m.ids.sigma2_head.weight, m.ids.sigma2_head.bias]);
        assert_ne!(m.ids.sigma_head.weight, m.ids.sigma2_head.weight);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(tiny()).unwrap();
        let b = Model::new(tiny()).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = Model::new(ModelConfig { seed: 9, ..tiny() }).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn from_params_round_trip_and_mismatch() {
        let a = Model::new(tiny()).unwrap();
        let b = Model::from_params(a.config.clone(), a.params.clone()).unwrap();
        assert_eq!(a, b);
        let other = ModelConfig {
            hidden_dim: 6,
            ..tiny()
        };
        assert!(Model::from_params(other, a.params.clone()).is_err());
    }

    #[test]
    fn families_cover_names() {
        let m = Model::new(tiny()).unwrap();
        assert_eq!(m.family(m.ids.item_embedding), "embedding");
        assert_eq!(m.family(m.ids.encoder[0].wq), "enc.attention");
        assert_eq!(m.family(m.ids.decoder[0].b2), "dec.ffn");
        assert_eq!(m.family(m.ids.sigma2_head.bias), "head.sigma2");
    }
}
