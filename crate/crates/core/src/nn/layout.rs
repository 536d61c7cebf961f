//! Named tensors packed into one flat buffer.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let offset = self.total;
        let info = TensorInfo {
            name,
            shape: shape.to_vec(),
            offset,
            init,
        };
        self.total += info.numel();
        self.tensors.push(info);
        offset
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (d, v, s) = (c.d_model, c.vocab_size, c.max_seq_len);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let wte = b.add("wte".into(), &[v, d], Init::Normal);
        let wpe = b.add("wpe".into(), &[s, d], Init::Normal);
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = |n: &str| format!("h.{l}.{n}");
                LayerOffsets {
                    ln1_g: b.add(p("ln_1.weight"), &[d], Init::Ones),
                    ln1_b: b.add(p("ln_1.bias"), &[d], Init::Zeros),
                    qkv_w: b.add(p("attn.c_attn.weight"), &[d, 3 * d], Init::Normal),
                    qkv_b: b.add(p("attn.c_attn.bias"), &[3 * d], Init::Zeros),
                    proj_w: b.add(p("attn.c_proj.weight"), &[d, d], Init::Normal),
                    proj_b: b.add(p("attn.c_proj.bias"), &[d], Init::Zeros),
                    ln2_g: b.add(p("ln_2.weight"), &[d], Init::Ones),
                    ln2_b: b.add(p("ln_2.bias"), &[d], Init::Zeros),
                    fc_w: b.add(p("mlp.c_fc.weight"), &[d, 4 * d], Init::Normal),
                    fc_b: b.add(p("mlp.c_fc.bias"), &[4 * d], Init::Zeros),
                    out_w: b.add(p("mlp.c_proj.weight"), &[4 * d, d], Init::Normal),
                    out_b: b.add(p("mlp.c_proj.bias"), &[d], Init::Zeros),
                }
            })
            .collect();
        let lnf_g = b.add("ln_f.weight".into(), &[d], Init::Ones);
        let lnf_b = b.add("ln_f.bias".into(), &[d], Init::Zeros);
        let head_w = b.add("lm_head.weight".into(), &[d, v], Init::Normal);
        Layout {
            tensors: b.tensors,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            total: b.total,
        }
    }
}
