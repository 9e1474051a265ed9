use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CvaeConfig, CvaeModel, NormStats};
use crate::adapters::{load_tensors, save_tensors, Layout, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::numkit::{Activation, Dense, Matrix, Mlp};
use crate::repository::Repository;

pub const MODEL_FORMAT: &str = "sglora-cvae/1";
const HEADER: &str = "header.json";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: CvaeConfig,
    layout: Layout,
    layout_hash: String,
    repository_hash: String,
    /// Hidden-layer counts of encoder, prior mapper and decoder.
    depths: [usize; 3],
}

const STATS: [&str; 4] = [
    "stats.cond_mean",
    "stats.cond_std",
    "stats.resid_mean",
    "stats.resid_std",
];

/// Writes a `header.json` byte tensor, the four normalization vectors and
/// every weight tensor into one blob container.
pub fn save_model(model: &CvaeModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        format: MODEL_FORMAT.to_string(),
        config: model.config.clone(),
        layout: model.layout.clone(),
        layout_hash: model.layout.hash(),
        repository_hash: model.repository_hash.clone(),
        depths: [
            model.encoder.layers.len(),
            model.prior.layers.len(),
            model.decoder.layers.len(),
        ],
    };
    let mut tensors = vec![Tensor::bytes(HEADER, serde_json::to_vec(&header)?)];
    let s = &model.stats;
    for (name, v) in STATS
        .iter()
        .zip([&s.cond_mean, &s.cond_std, &s.resid_mean, &s.resid_std])
    {
        tensors.push(Tensor::f32(*name, vec![v.len() as u64], v.clone()));
    }
    push_dense(&mut tensors, "projector", &model.projector);
    for (name, mlp) in [
        ("encoder", &model.encoder),
        ("prior", &model.prior),
        ("decoder", &model.decoder),
    ] {
        for (i, layer) in mlp.layers.iter().enumerate() {
            push_dense(&mut tensors, &format!("{name}.{i}"), layer);
        }
    }
    save_tensors(path, &tensors)
}

fn push_dense(out: &mut Vec<Tensor>, prefix: &str, layer: &Dense<f32>) {
    out.push(Tensor::from_matrix(format!("{prefix}.w"), &layer.weights));
    out.push(Tensor::from_matrix(format!("{prefix}.b"), &layer.bias));
}

/// Loads a model and checks that it was trained against `repo`'s layout and
/// experts.
pub fn load_model(path: impl AsRef<Path>, repo: &Repository) -> Result<CvaeModel<f32>> {
    let model = read_model(path.as_ref())?;
    let layout_hash = repo.layout().hash();
    if model.layout.hash() != layout_hash {
        return Err(Error::HashMismatch {
            what: "layout",
            expected: model.layout.hash(),
            found: layout_hash,
        });
    }
    let repo_hash = repo.hash();
    if model.repository_hash != repo_hash {
        return Err(Error::HashMismatch {
            what: "repository",
            expected: model.repository_hash,
            found: repo_hash,
        });
    }
    Ok(model)
}

fn read_model(path: &Path) -> Result<CvaeModel<f32>> {
    let tensors = load_tensors(path)?;
    let mut it = tensors.into_iter();
    let header = match it.next() {
        Some(Tensor {
            name,
            data: TensorData::Bytes(bytes),
            ..
        }) if name == HEADER => bytes,
        _ => {
            return Err(Error::Schema {
                path: path.display().to_string(),
                message: format!("first tensor must be {HEADER}"),
            })
        }
    };
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Schema {
        path: format!("{}:{HEADER}", path.display()),
        message: e.to_string(),
    })?;
    if header.format != MODEL_FORMAT {
        return Err(Error::Schema {
            path: format!("{}:{HEADER}.format", path.display()),
            message: format!("expected {MODEL_FORMAT}, found {}", header.format),
        });
    }
    header.layout.validate()?;
    if header.layout.hash() != header.layout_hash {
        return Err(Error::HashMismatch {
            what: "layout",
            expected: header.layout_hash,
            found: header.layout.hash(),
        });
    }
    let rest: Vec<Tensor> = it.collect();
    let mut cur = Cursor { tensors: &rest, at: 0 };
    let mut stats = Vec::with_capacity(4);
    for name in STATS {
        stats.push(cur.next(name)?.as_f32()?.to_vec());
    }
    let [cond_mean, cond_std, resid_mean, resid_std]: [Vec<f32>; 4] = stats.try_into().expect("four statistics");
    let projector = cur.dense("projector", Activation::Relu)?;
    let mut mlps = Vec::with_capacity(3);
    for (name, depth) in ["encoder", "prior", "decoder"].iter().zip(header.depths) {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let act = if i + 1 == depth {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(cur.dense(&format!("{name}.{i}"), act)?);
        }
        mlps.push(Mlp::new(layers)?);
    }
    let decoder = mlps.pop().expect("three networks");
    let prior = mlps.pop().expect("three networks");
    let encoder = mlps.pop().expect("three networks");
    let model = CvaeModel {
        config: header.config,
        layout: header.layout,
        repository_hash: header.repository_hash,
        stats: NormStats {
            cond_mean,
            cond_std,
            resid_mean,
            resid_std,
        },
        projector,
        encoder,
        prior,
        decoder,
    };
    check_shapes(&model)?;
    Ok(model)
}

/// Reads tensors in their fixed order, checking names.
struct Cursor<'a> {
    tensors: &'a [Tensor],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, name: &str) -> Result<&'a Tensor> {
        let t = self
            .tensors
            .get(self.at)
            .ok_or_else(|| Error::Truncated { what: name.to_string() })?;
        if t.name != name {
            return Err(Error::Schema {
                path: format!("tensor {}", self.at + 1),
                message: format!("expected {name}, found {}", t.name),
            });
        }
        self.at += 1;
        Ok(t)
    }

    fn dense(&mut self, prefix: &str, act: Activation) -> Result<Dense<f32>> {
        let w: Matrix<f32> = self.next(&format!("{prefix}.w"))?.to_matrix()?;
        let b: Matrix<f32> = self.next(&format!("{prefix}.b"))?.to_matrix()?;
        Dense::new(w, b, act)
    }
}

fn check_shapes(m: &CvaeModel<f32>) -> Result<()> {
    let d = m.param_len();
    let (l, c) = (m.config.latent_dim, m.config.cond_dim);
    let ok = m.stats.cond_mean.len() == d
        && m.stats.cond_std.len() == d
        && m.stats.resid_mean.len() == d
        && m.stats.resid_std.len() == d
        && m.projector.inputs() == 2 * d
        && m.projector.outputs() == c
        && m.encoder.inputs() == d + c
        && m.encoder.outputs() == 2 * l
        && m.prior.inputs() == c
        && m.prior.outputs() == 2 * l
        && m.decoder.inputs() == l + c
        && m.decoder.outputs() == d;
    if !ok {
        return Err(Error::shape("model tensors do not match its configuration"));
    }
    Ok(())
}
