//! Gaussian-embedding scoring heads: the CNN head over the sample-pair cube,
//! a mean-over-pairs head, and a point-embedding BPR baseline.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TrainBatch, TripletBatch};
use crate::ndcore::rng::{self, tag, Rng};
use crate::ndcore::{elu_plus_one_scalar, Graph, NdError, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gerec,
    Mog,
    MfBpr,
}

impl ModelKind {
    /// Whether entities are Gaussians (and so carry variances).
    pub fn is_gaussian(self) -> bool {
        !matches!(self, Self::MfBpr)
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gerec" => Ok(Self::Gerec),
            "mog" => Ok(Self::Mog),
            "mf-bpr" => Ok(Self::MfBpr),
            other => Err(format!(
                "unknown model `{other}` (expected gerec, mog or mf-bpr)"
            )),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gerec => "gerec",
            Self::Mog => "mog",
            Self::MfBpr => "mf-bpr",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding dimension `D`.
    pub dim: usize,
    /// Monte-Carlo samples per entity `K`.
    pub samples: usize,
    /// Filters per convolution layer `T`.
    pub filters: usize,
    /// Square kernel size per convolution layer.
    pub kernels: Vec<usize>,
    /// MLP output width `D′`.
    pub mlp_width: usize,
    pub num_users: usize,
    pub num_items: usize,
}

/// Default kernel schedule: a 1×1 layer then a 2×2 layer. With a single
/// sample the grid is 1×1, so the second kernel shrinks to fit.
pub fn default_kernels(samples: usize) -> Vec<usize> {
    vec![1, 2.min(samples.max(1))]
}

impl ModelConfig {
    pub fn new(kind: ModelKind, num_users: usize, num_items: usize) -> Self {
        Self {
            kind,
            dim: 64,
            samples: 9,
            filters: 64,
            kernels: default_kernels(9),
            mlp_width: 64,
            num_users,
            num_items,
        }
    }

    /// Sets `D`, `K` and `T`, resetting kernels to the default schedule.
    pub fn with_sizes(mut self, dim: usize, samples: usize, filters: usize) -> Self {
        self.dim = dim;
        self.samples = samples;
        self.filters = filters;
        self.kernels = default_kernels(samples);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("dim", self.dim),
            ("samples", self.samples),
            ("filters", self.filters),
            ("mlp_width", self.mlp_width),
            ("num_users", self.num_users),
            ("num_items", self.num_items),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.kind == ModelKind::Gerec {
            if self.kernels.is_empty() {
                return Err(ModelError::Config("at least one conv layer".into()));
            }
            let mut extent = self.samples;
            for (l, &k) in self.kernels.iter().enumerate() {
                if k == 0 || k > extent {
                    return Err(ModelError::Config(format!(
                        "kernel {k} of layer {} does not fit a {extent}×{extent} grid",
                        l + 1
                    )));
                }
                extent = extent - k + 1;
            }
        }
        Ok(())
    }

    /// Spatial extent after each conv layer.
    pub fn conv_extents(&self) -> Vec<usize> {
        let mut extent = self.samples;
        self.kernels
            .iter()
            .map(|&k| {
                extent = extent + 1 - k;
                extent
            })
            .collect()
    }

    /// Length of the flattened feature maps fed to the MLP.
    pub fn flatten_dim(&self) -> usize {
        let e = self.conv_extents().last().copied().unwrap_or(self.samples);
        e * e * self.filters
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (m, n, d) = (self.num_users, self.num_items, self.dim);
        match self.kind {
            ModelKind::MfBpr => vec![
                ("user_embedding".into(), vec![m, d]),
                ("item_embedding".into(), vec![n, d]),
            ],
            kind => {
                let mut specs = vec![
                    ("user_mean".into(), vec![m, d]),
                    ("user_raw_variance".into(), vec![m, d]),
                    ("item_mean".into(), vec![n, d]),
                    ("item_raw_variance".into(), vec![n, d]),
                ];
                if kind == ModelKind::Mog {
                    specs.push(("pair_scale".into(), vec![1]));
                    specs.push(("pair_offset".into(), vec![1]));
                    return specs;
                }
                let mut channels = 2 * d;
                for (l, &k) in self.kernels.iter().enumerate() {
                    specs.push((format!("conv{}_filters", l + 1), vec![k, k, channels, self.filters]));
                    specs.push((format!("conv{}_bias", l + 1), vec![self.filters]));
                    channels = self.filters;
                }
                specs.push(("mlp_weight".into(), vec![self.flatten_dim(), self.mlp_width]));
                specs.push(("mlp_bias".into(), vec![self.mlp_width]));
                specs.push(("out_weight".into(), vec![self.mlp_width, 1]));
                specs.push(("out_bias".into(), vec![1]));
                specs
            }
        }
    }
}

const USER_MEAN: usize = 0;
const USER_RAW_VAR: usize = 1;
const ITEM_MEAN: usize = 2;
const ITEM_RAW_VAR: usize = 3;
const PAIR_SCALE: usize = 4;
const PAIR_OFFSET: usize = 5;
const FIRST_CONV: usize = 4;

/// Reparameterization noise for a batch: `[B×K×D]` per side.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub users: Tensor,
    pub items: Tensor,
}

impl Noise {
    pub fn draw(rng: &mut Rng, batch: usize, samples: usize, dim: usize) -> Self {
        let shape = [batch, samples, dim];
        let mut side = || {
            Tensor::new(shape.to_vec(), rng::standard_normal(rng, batch * samples * dim))
                .expect("shape matches length")
        };
        let users = side();
        let items = side();
        Self { users, items }
    }

    pub fn zeros(batch: usize, samples: usize, dim: usize) -> Self {
        let t = Tensor::zeros(&[batch, samples, dim]);
        Self {
            users: t.clone(),
            items: t,
        }
    }

    /// Repeats one `[K×D]` draw per side across `batch` rows.
    pub fn shared(eps_user: &[f64], eps_item: &[f64], batch: usize, samples: usize, dim: usize) -> Self {
        let tile = |eps: &[f64]| {
            Tensor::new(vec![batch, samples, dim], eps.repeat(batch)).expect("shape matches")
        };
        Self {
            users: tile(eps_user),
            items: tile(eps_item),
        }
    }
}

/// Intermediate node ids of one batched forward pass.
struct Trace {
    cube: Option<NodeId>,
    convs: Vec<NodeId>,
    flat: Option<NodeId>,
    pred: NodeId,
}

/// Shapes of the intermediate tensors for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardShapes {
    pub cube: Vec<usize>,
    pub convs: Vec<Vec<usize>>,
    pub flatten: usize,
}

/// A model: its configuration and parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Initializes parameters from `stream(seed, INIT)`.
    ///
    /// Means ~ N(0, 0.01²), raw variances 0, weights uniform in
    /// ±sqrt(6 / fan_in), biases 0, pair scale 1 and offset 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let specs = config.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("_mean") || name.ends_with("_embedding") {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with("_filters") || name.ends_with("_weight") {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            } else if name == "pair_scale" {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in specs.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` {:?} does not match expected `{want_name}` {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    /// Copy evaluated with a different sample count. Only heads whose
    /// parameters do not depend on `K` allow this.
    pub fn with_samples(&self, samples: usize) -> Result<Self, ModelError> {
        if self.config.kind == ModelKind::Gerec && samples != self.config.samples {
            return Err(ModelError::Config(
                "the CNN head's MLP width depends on the sample count; retrain instead".into(),
            ));
        }
        let mut m = self.clone();
        m.config.samples = samples;
        m.config.validate()?;
        Ok(m)
    }

    fn check_ids(&self, users: &[usize], items: &[usize]) -> Result<(), ModelError> {
        if let Some(&u) = users.iter().find(|&&u| u >= self.config.num_users) {
            return Err(NdError::Invalid(format!(
                "user id {u} out of range for {} users",
                self.config.num_users
            ))
            .into());
        }
        if let Some(&i) = items.iter().find(|&&i| i >= self.config.num_items) {
            return Err(NdError::Invalid(format!(
                "item id {i} out of range for {} items",
                self.config.num_items
            ))
            .into());
        }
        Ok(())
    }

    fn register<'p>(&'p self, g: &mut Graph<'p>) -> Vec<NodeId> {
        self.params
            .iter()
            .enumerate()
            .map(|(slot, p)| g.param(slot, p))
            .collect()
    }

    /// `[B×K×D]` samples `μ + sqrt(ELU(raw)+1) ⊙ ε` for the given rows.
    fn sample_side(
        g: &mut Graph<'_>,
        mean: NodeId,
        raw: NodeId,
        ids: &[usize],
        eps: &Tensor,
        samples: usize,
    ) -> Result<NodeId, ModelError> {
        let mu = g.gather_rows(mean, ids)?;
        let raw = g.gather_rows(raw, ids)?;
        let var = g.elu_plus_one(raw);
        let std = g.sqrt(var)?;
        let mu = g.tile_rows(mu, samples)?;
        let std = g.tile_rows(std, samples)?;
        let eps = g.constant(eps.clone());
        let spread = g.mul(std, eps)?;
        Ok(g.add(mu, spread)?)
    }

    fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        p: &[NodeId],
        users: &[usize],
        items: &[usize],
        noise: &Noise,
    ) -> Result<Trace, ModelError> {
        self.check_ids(users, items)?;
        let c = &self.config;
        let b = users.len();
        if items.len() != b {
            return Err(NdError::Shape {
                op: "forward",
                detail: format!("{b} users vs {} items", items.len()),
            }
            .into());
        }
        if c.kind == ModelKind::MfBpr {
            let u = g.gather_rows(p[0], users)?;
            let v = g.gather_rows(p[1], items)?;
            let pred = g.row_dot(u, v)?;
            return Ok(Trace {
                cube: None,
                convs: Vec::new(),
                flat: None,
                pred,
            });
        }
        let want = [b, c.samples, c.dim];
        if noise.users.shape() != want || noise.items.shape() != want {
            return Err(NdError::Shape {
                op: "forward",
                detail: format!(
                    "noise {:?}/{:?}, expected {want:?}",
                    noise.users.shape(),
                    noise.items.shape()
                ),
            }
            .into());
        }
        let zu = Self::sample_side(g, p[USER_MEAN], p[USER_RAW_VAR], users, &noise.users, c.samples)?;
        let zv = Self::sample_side(g, p[ITEM_MEAN], p[ITEM_RAW_VAR], items, &noise.items, c.samples)?;

        if c.kind == ModelKind::Mog {
            let dots = g.pairwise_dot(zu, zv)?;
            let scaled = g.scale_by(dots, p[PAIR_SCALE])?;
            let shifted = g.add_bias(scaled, p[PAIR_OFFSET])?;
            let probs = g.sigmoid(shifted);
            let flat = g.reshape(probs, &[b, c.samples * c.samples])?;
            let pred = g.mean_last(flat)?;
            return Ok(Trace {
                cube: None,
                convs: Vec::new(),
                flat: None,
                pred,
            });
        }

        let cube = g.pair_concat(zu, zv)?;
        let mut x = cube;
        let mut convs = Vec::with_capacity(c.kernels.len());
        for l in 0..c.kernels.len() {
            let y = g.conv2d(x, p[FIRST_CONV + 2 * l], p[FIRST_CONV + 2 * l + 1])?;
            x = g.relu(y);
            convs.push(x);
        }
        // flatten channel by channel: [B, H·W, T] → [B, T, H·W]
        let e = c.conv_extents().last().copied().unwrap_or(c.samples);
        let maps = g.reshape(x, &[b, e * e, c.filters])?;
        let maps = g.transpose_last2(maps)?;
        let flat = g.reshape(maps, &[b, c.flatten_dim()])?;
        let head = FIRST_CONV + 2 * c.kernels.len();
        let h = g.matmul(flat, p[head])?;
        let h = g.add_bias(h, p[head + 1])?;
        let s = g.relu(h);
        let logit = g.matmul(s, p[head + 2])?;
        let logit = g.add_bias(logit, p[head + 3])?;
        let logit = g.reshape(logit, &[b])?;
        let pred = g.sigmoid(logit);
        Ok(Trace {
            cube: Some(cube),
            convs,
            flat: Some(flat),
            pred,
        })
    }

    /// Scores a batch of (user, item) pairs under the given noise. For the
    /// Gaussian heads this is a probability; for MF-BPR a dot product.
    pub fn score_with_noise(
        &self,
        users: &[usize],
        items: &[usize],
        noise: &Noise,
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.register(&mut g);
        let t = self.forward(&mut g, &p, users, items, noise)?;
        Ok(g.value(t.pred).data().to_vec())
    }

    /// Scores a batch with fresh noise drawn from `rng`.
    pub fn score(&self, users: &[usize], items: &[usize], rng: &mut Rng) -> Result<Vec<f64>, ModelError> {
        let noise = self.draw_noise(rng, users.len());
        self.score_with_noise(users, items, &noise)
    }

    pub fn predict(&self, user: usize, item: usize, rng: &mut Rng) -> Result<f64, ModelError> {
        Ok(self.score(&[user], &[item], rng)?[0])
    }

    pub fn draw_noise(&self, rng: &mut Rng, batch: usize) -> Noise {
        if self.config.kind.is_gaussian() {
            Noise::draw(rng, batch, self.config.samples, self.config.dim)
        } else {
            Noise::zeros(batch, 0, 0)
        }
    }

    /// Summed BCE over a labeled batch and its gradient per parameter.
    pub fn pointwise_loss(&self, batch: &TrainBatch, noise: &Noise) -> Result<(f64, Vec<Tensor>), ModelError> {
        if self.config.kind == ModelKind::MfBpr {
            return Err(ModelError::Config("MF-BPR trains on triplets".into()));
        }
        let mut g = Graph::new();
        let p = self.register(&mut g);
        let t = self.forward(&mut g, &p, &batch.users, &batch.items, noise)?;
        let loss = g.bce_loss(t.pred, &batch.labels)?;
        self.finish(&g, loss)
    }

    /// Summed `−log σ(u·v⁺ − u·v⁻)` over triplets and its gradient.
    pub fn bpr_loss(&self, batch: &TripletBatch) -> Result<(f64, Vec<Tensor>), ModelError> {
        if self.config.kind != ModelKind::MfBpr {
            return Err(ModelError::Config("only MF-BPR trains on triplets".into()));
        }
        self.check_ids(&batch.users, &batch.positives)?;
        self.check_ids(&batch.users, &batch.negatives)?;
        let mut g = Graph::new();
        let p = self.register(&mut g);
        let u = g.gather_rows(p[0], &batch.users)?;
        let vp = g.gather_rows(p[1], &batch.positives)?;
        let vn = g.gather_rows(p[1], &batch.negatives)?;
        let sp = g.row_dot(u, vp)?;
        let sn = g.row_dot(u, vn)?;
        let diff = g.sub(sp, sn)?;
        let ls = g.log_sigmoid(diff);
        let total = g.sum(ls);
        let loss = g.scale(total, -1.0);
        self.finish(&g, loss)
    }

    fn finish(&self, g: &Graph<'_>, loss: NodeId) -> Result<(f64, Vec<Tensor>), ModelError> {
        let value = g.value(loss).item()?;
        let grads = g
            .backward(loss)?
            .into_slots()
            .into_iter()
            .zip(&self.params)
            .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Intermediate shapes of the CNN head for a single pair.
    pub fn forward_shapes(&self, user: usize, item: usize, noise: &Noise) -> Result<ForwardShapes, ModelError> {
        let mut g = Graph::new();
        let p = self.register(&mut g);
        let t = self.forward(&mut g, &p, &[user], &[item], noise)?;
        let (Some(cube), Some(flat)) = (t.cube, t.flat) else {
            return Err(ModelError::Config("only the CNN head builds a cube".into()));
        };
        // drop the batch axis
        let unbatched = |id: NodeId| g.value(id).shape()[1..].to_vec();
        Ok(ForwardShapes {
            cube: unbatched(cube),
            convs: t.convs.iter().map(|&c| unbatched(c)).collect(),
            flatten: g.value(flat).shape()[1],
        })
    }

    /// Activated variance rows of a Gaussian table: `"user"` or `"item"`.
    pub fn variances(&self, side: Side) -> Option<Tensor> {
        if !self.config.kind.is_gaussian() {
            return None;
        }
        let raw = match side {
            Side::User => &self.params[USER_RAW_VAR],
            Side::Item => &self.params[ITEM_RAW_VAR],
        };
        Some(raw.map(elu_plus_one_scalar))
    }

    /// `(mean, variance)` of one entity.
    pub fn lookup_gaussian(&self, side: Side, id: usize) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if !self.config.kind.is_gaussian() {
            return Err(ModelError::Config("point embeddings have no variance".into()));
        }
        let (mean, raw) = match side {
            Side::User => (&self.params[USER_MEAN], &self.params[USER_RAW_VAR]),
            Side::Item => (&self.params[ITEM_MEAN], &self.params[ITEM_RAW_VAR]),
        };
        lookup_gaussian(mean, raw, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// Mean row and activated variance `ELU(raw) + 1` of entity `id`.
pub fn lookup_gaussian(
    means: &Tensor,
    raw_variances: &Tensor,
    id: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mean = means.row(id)?.to_vec();
    let var = raw_variances
        .row(id)?
        .iter()
        .map(|&r| elu_plus_one_scalar(r))
        .collect();
    Ok((mean, var))
}

/// `K` reparameterized draws `mean + sqrt(variance) ⊙ ε`, shape `[K×D]`.
pub fn sample_embeddings(
    mean: &[f64],
    variance: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<Tensor, ModelError> {
    let d = mean.len();
    let eps = Tensor::new(vec![samples, d], rng::standard_normal(rng, samples * d))?;
    sample_with(mean, variance, &eps)
}

/// As [`sample_embeddings`] with explicit noise `eps: [K×D]`.
pub fn sample_with(mean: &[f64], variance: &[f64], eps: &Tensor) -> Result<Tensor, ModelError> {
    let d = mean.len();
    if variance.len() != d || eps.rank() != 2 || eps.shape()[1] != d {
        return Err(NdError::Shape {
            op: "sample_embeddings",
            detail: format!("mean {d}, variance {}, noise {:?}", variance.len(), eps.shape()),
        }
        .into());
    }
    let k = eps.shape()[0];
    let mut g = Graph::new();
    let mu = g.constant(Tensor::new(vec![1, d], mean.to_vec())?);
    let var = g.constant(Tensor::new(vec![1, d], variance.to_vec())?);
    let std = g.sqrt(var)?;
    let mu = g.tile_rows(mu, k)?;
    let std = g.tile_rows(std, k)?;
    let e = g.constant(eps.clone().reshape(&[1, k, d])?);
    let spread = g.mul(std, e)?;
    let z = g.add(mu, spread)?;
    Ok(g.value(z).clone().reshape(&[k, d])?)
}

/// `[K×K×2D]` cube whose cell `(i, j)` is `z_u[i] ⧺ z_v[j]`.
pub fn build_interaction_cube(z_u: &Tensor, z_v: &Tensor) -> Result<Tensor, ModelError> {
    if z_u.rank() != 2 || z_u.shape() != z_v.shape() {
        return Err(NdError::Shape {
            op: "build_interaction_cube",
            detail: format!("{:?} with {:?}", z_u.shape(), z_v.shape()),
        }
        .into());
    }
    let (k, d) = (z_u.shape()[0], z_u.shape()[1]);
    let mut g = Graph::new();
    let a = g.constant(z_u.clone().reshape(&[1, k, d])?);
    let b = g.constant(z_v.clone().reshape(&[1, k, d])?);
    let cube = g.pair_concat(a, b)?;
    Ok(g.value(cube).clone().reshape(&[k, k, 2 * d])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(kind: ModelKind) -> Model {
        let cfg = ModelConfig::new(kind, 5, 6).with_sizes(4, 2, 3);
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn lookup_activates_variance() {
        let means = Tensor::matrix(&[&[0.5, -0.5, 1.0]]).unwrap();
        let raw = Tensor::matrix(&[&[0.0, -10.0, 2.0]]).unwrap();
        let (m, v) = lookup_gaussian(&means, &raw, 0).unwrap();
        assert_eq!(m, vec![0.5, -0.5, 1.0]);
        assert_eq!(v[0], 1.0);
        assert_relative_eq!(v[1], (-10f64).exp(), max_relative = 1e-12);
        assert!(v[1] > 0.0);
        assert_eq!(v[2], 3.0);
        assert!(lookup_gaussian(&means, &raw, 1).is_err());
    }

    #[test]
    fn zero_noise_gives_the_mean() {
        let z = sample_with(&[1.0, -2.0], &[4.0, 9.0], &Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(z.data(), &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
    }

    #[test]
    fn samples_have_requested_shape_and_reject_bad_variance() {
        let mut rng = rng::seeded(0);
        let z = sample_embeddings(&[0.0; 64], &[1.0; 64], 9, &mut rng).unwrap();
        assert_eq!(z.shape(), &[9, 64]);
        assert!(sample_embeddings(&[0.0; 2], &[1.0, 0.0], 2, &mut rng).is_err());
        assert!(sample_embeddings(&[0.0; 2], &[1.0, -1.0], 2, &mut rng).is_err());
    }

    #[test]
    fn cube_cells_concatenate_sample_pairs() {
        let zu = Tensor::from_fn(&[9, 64], |i| i as f64);
        let zv = Tensor::from_fn(&[9, 64], |i| -(i as f64));
        let cube = build_interaction_cube(&zu, &zv).unwrap();
        assert_eq!(cube.shape(), &[9, 9, 128]);
        let cell = &cube.data()[(2 * 9 + 5) * 128..(2 * 9 + 6) * 128];
        assert_eq!(&cell[..64], zu.row(2).unwrap());
        assert_eq!(&cell[64..], zv.row(5).unwrap());
        let one = build_interaction_cube(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(one.shape(), &[1, 1, 6]);
        assert!(build_interaction_cube(&zu, &Tensor::zeros(&[9, 3])).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ModelConfig::new(ModelKind::Gerec, 3, 3);
        assert_eq!((c.dim, c.samples, c.filters, c.mlp_width), (64, 9, 64, 64));
        assert_eq!(c.kernels, vec![1, 2]);
        assert_eq!(c.flatten_dim(), 4096);
        let mut bad = c.clone();
        bad.kernels = vec![1, 10];
        assert!(bad.validate().is_err());
        assert!(c.clone().with_sizes(0, 2, 2).validate().is_err());
        let single = c.with_sizes(8, 1, 4);
        single.validate().unwrap();
        assert_eq!(single.flatten_dim(), 4);
    }

    #[test]
    fn zero_output_weights_give_sigmoid_of_bias() {
        let mut m = tiny(ModelKind::Gerec);
        m.param_mut("out_weight").unwrap().data_mut().fill(0.0);
        m.param_mut("out_bias").unwrap().data_mut()[0] = 0.7;
        let y = m.predict(1, 2, &mut rng::seeded(3)).unwrap();
        assert_relative_eq!(y, 1.0 / (1.0 + (-0.7f64).exp()), max_relative = 1e-12);
    }

    #[test]
    fn forward_is_reproducible_and_bounded() {
        let m = tiny(ModelKind::Gerec);
        let a = m.score(&[0, 1, 4], &[5, 0, 2], &mut rng::seeded(9)).unwrap();
        let b = m.score(&[0, 1, 4], &[5, 0, 2], &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&y| y > 0.0 && y < 1.0));
        assert!(m.predict(5, 0, &mut rng::seeded(0)).is_err());
        assert!(m.predict(0, 6, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn bce_of_a_half_is_ln2() {
        let mut m = tiny(ModelKind::Gerec);
        m.param_mut("out_weight").unwrap().data_mut().fill(0.0);
        let batch = TrainBatch {
            users: vec![0],
            items: vec![1],
            labels: vec![1.0],
        };
        let (loss, _) = m.pointwise_loss(&batch, &m.draw_noise(&mut rng::seeded(0), 1)).unwrap();
        assert_relative_eq!(loss, 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn duplicated_batch_doubles_loss() {
        let m = tiny(ModelKind::Gerec);
        let batch = TrainBatch {
            users: vec![0, 3],
            items: vec![1, 4],
            labels: vec![1.0, 0.0],
        };
        let noise = m.draw_noise(&mut rng::seeded(2), 2);
        let (single, _) = m.pointwise_loss(&batch, &noise).unwrap();
        let doubled = TrainBatch {
            users: [batch.users.clone(), batch.users.clone()].concat(),
            items: [batch.items.clone(), batch.items.clone()].concat(),
            labels: [batch.labels.clone(), batch.labels.clone()].concat(),
        };
        let noise2 = Noise {
            users: crate::ndcore::concat(&noise.users, &noise.users, 0).unwrap(),
            items: crate::ndcore::concat(&noise.items, &noise.items, 0).unwrap(),
        };
        let (double, _) = m.pointwise_loss(&doubled, &noise2).unwrap();
        assert_relative_eq!(double, 2.0 * single, max_relative = 1e-12);
    }

    #[test]
    fn zero_noise_single_sample_ignores_variance() {
        let cfg = ModelConfig::new(ModelKind::Gerec, 3, 3).with_sizes(4, 1, 3);
        let m = Model::init(cfg, 1).unwrap();
        let batch = TrainBatch {
            users: vec![0, 2],
            items: vec![1, 1],
            labels: vec![1.0, 0.0],
        };
        let (_, grads) = m.pointwise_loss(&batch, &Noise::zeros(2, 1, 4)).unwrap();
        for name in ["user_raw_variance", "item_raw_variance"] {
            let i = m.names().iter().position(|n| n == name).unwrap();
            assert!(grads[i].data().iter().all(|&g| g == 0.0), "{name}");
        }
    }

    #[test]
    fn mog_of_equal_pairs_and_permutations() {
        let m = tiny(ModelKind::Mog);
        let mut rng = rng::seeded(5);
        let noise = m.draw_noise(&mut rng, 1);
        let y = m.score_with_noise(&[2], &[3], &noise).unwrap()[0];
        assert!(y > 0.0 && y < 1.0);
        // swap the two user samples and the two item samples
        let swap = |t: &Tensor| {
            let d = t.shape()[2];
            let mut v = t.data()[d..].to_vec();
            v.extend_from_slice(&t.data()[..d]);
            Tensor::new(t.shape().to_vec(), v).unwrap()
        };
        let permuted = Noise {
            users: swap(&noise.users),
            items: swap(&noise.items),
        };
        let y2 = m.score_with_noise(&[2], &[3], &permuted).unwrap()[0];
        assert_relative_eq!(y, y2, max_relative = 1e-12);

        // a zero scale makes every pair probability sigmoid(c)
        let mut flat = m.clone();
        flat.param_mut("pair_scale").unwrap().data_mut()[0] = 0.0;
        flat.param_mut("pair_offset").unwrap().data_mut()[0] = 0.3;
        let y3 = flat.score_with_noise(&[2], &[3], &noise).unwrap()[0];
        assert_relative_eq!(y3, 1.0 / (1.0 + (-0.3f64).exp()), max_relative = 1e-12);
    }

    #[test]
    fn mog_collapses_to_point_score() {
        let mut m = tiny(ModelKind::Mog);
        // ELU(raw)+1 = 1e-12 at raw = ln(1e-12)
        let raw = (1e-12f64).ln();
        m.param_mut("user_raw_variance").unwrap().data_mut().fill(raw);
        m.param_mut("item_raw_variance").unwrap().data_mut().fill(raw);
        m.param_mut("pair_scale").unwrap().data_mut()[0] = 50.0;
        m.param_mut("pair_offset").unwrap().data_mut()[0] = -0.1;
        let y = m.predict(1, 4, &mut rng::seeded(8)).unwrap();
        let mu = m.param("user_mean").unwrap().row(1).unwrap();
        let mv = m.param("item_mean").unwrap().row(4).unwrap();
        let dot: f64 = mu.iter().zip(mv).map(|(a, b)| a * b).sum();
        let point = 1.0 / (1.0 + (-(50.0 * dot - 0.1)).exp());
        assert!((y - point).abs() < 1e-6, "{y} vs {point}");
    }

    #[test]
    fn bpr_loss_cases() {
        let cfg = ModelConfig::new(ModelKind::MfBpr, 1, 3).with_sizes(2, 1, 1);
        let named = vec![
            ("user_embedding".to_string(), Tensor::matrix(&[&[1.0, 0.5]]).unwrap()),
            (
                "item_embedding".to_string(),
                Tensor::matrix(&[&[0.2, 0.3], &[0.2, 0.3], &[40.0, 0.0]]).unwrap(),
            ),
        ];
        let mut m = Model::from_parts(cfg, named).unwrap();
        let tie = TripletBatch {
            users: vec![0],
            positives: vec![0],
            negatives: vec![1],
        };
        let (loss, _) = m.bpr_loss(&tie).unwrap();
        assert_relative_eq!(loss, 2f64.ln(), max_relative = 1e-12);
        let easy = TripletBatch {
            users: vec![0],
            positives: vec![2],
            negatives: vec![0],
        };
        assert!(m.bpr_loss(&easy).unwrap().0 < 1e-12);

        // one gradient step raises u·v⁺ − u·v⁻
        let hard = TripletBatch {
            users: vec![0],
            positives: vec![0],
            negatives: vec![2],
        };
        let margin = |m: &Model| {
            let s = m.score(&[0, 0], &[0, 2], &mut rng::seeded(0)).unwrap();
            s[0] - s[1]
        };
        let before = margin(&m);
        let (_, grads) = m.bpr_loss(&hard).unwrap();
        for (p, g) in m.params_mut().iter_mut().zip(&grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= 0.01 * d;
            }
        }
        assert!(margin(&m) > before);
    }

    #[test]
    fn law_of_large_numbers_for_samples() {
        let k = 10_000;
        let z = sample_embeddings(&[0.0], &[1.0], k, &mut rng::seeded(4)).unwrap();
        let mean = z.data().iter().sum::<f64>() / k as f64;
        let var = z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        // 3σ bounds: sd(mean) = 0.01, sd(var) ≈ sqrt(2/k) ≈ 0.0141
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.0425, "{var}");
    }

    #[test]
    fn from_parts_checks_layout() {
        let m = tiny(ModelKind::Gerec);
        let named: Vec<_> = m.names().iter().cloned().zip(m.params().iter().cloned()).collect();
        assert_eq!(Model::from_parts(m.config().clone(), named.clone()).unwrap(), m);
        let mut wrong = named;
        wrong.swap(0, 2);
        wrong[0].0 = "user_mean".into();
        wrong[2].0 = "item_mean".into();
        assert!(Model::from_parts(m.config().clone(), wrong).is_err());
    }

    #[test]
    fn gerec_rejects_new_sample_count_but_mog_accepts() {
        assert!(tiny(ModelKind::Gerec).with_samples(4).is_err());
        let mog = tiny(ModelKind::Mog).with_samples(16).unwrap();
        assert_eq!(mog.config().samples, 16);
        assert!(mog.predict(0, 0, &mut rng::seeded(1)).is_ok());
    }
}
