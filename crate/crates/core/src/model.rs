//! Projector stack mapping raw face and name embeddings into the shared space.
//!
//! Names go through a one-layer name projector (`d_n -> d_f`) and then the
//! common projector; faces go through the common projector directly. The
//! common projector is a three-layer MLP (`d_f -> h1 -> h2 -> d_p`). By default
//! both modalities share one set of common-projector weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, LinearGrads, LinearLayer, Matrix, Mlp, MlpCache, MlpGrads};
use crate::seed::rng_for;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_f: usize,
    pub d_n: usize,
    pub d_p: usize,
    /// Widths of the two hidden layers of the common projector.
    pub hidden: [usize; 2],
    /// One set of common-projector weights for both modalities.
    pub shared_common: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_f: 512,
            d_n: 768,
            d_p: 128,
            hidden: [512, 256],
            shared_common: true,
        }
    }
}

impl ModelDims {
    pub fn small(d_f: usize, d_n: usize, d_p: usize) -> Self {
        Self {
            d_f,
            d_n,
            d_p,
            hidden: [d_f, d_f],
            shared_common: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_n == 0 || self.d_p == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    fn common_widths(&self) -> [usize; 4] {
        [self.d_f, self.hidden[0], self.hidden[1], self.d_p]
    }
}

/// One caption name: surface text plus its raw embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NameRecord {
    pub text: String,
    pub embedding: Vec<f64>,
    pub is_noname: bool,
}

pub const NONAME_TEXT: &str = "NONAME";

impl NameRecord {
    pub fn new(text: impl Into<String>, embedding: Vec<f64>) -> Self {
        Self {
            text: text.into(),
            embedding,
            is_noname: false,
        }
    }

    pub fn noname(embedding: Vec<f64>) -> Self {
        Self {
            text: NONAME_TEXT.to_string(),
            embedding,
            is_noname: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorStack {
    dims: ModelDims,
    name_projector: LinearLayer,
    common: Mlp,
    /// Separate common projector for names when weights are not shared.
    common_name: Option<Mlp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads {
    pub name_projector: LinearGrads,
    pub common: MlpGrads,
    pub common_name: Option<MlpGrads>,
}

impl StackGrads {
    pub fn zeros_like(stack: &ProjectorStack) -> Self {
        Self {
            name_projector: LinearGrads::zeros_like(&stack.name_projector),
            common: MlpGrads::zeros_like(&stack.common),
            common_name: stack.common_name.as_ref().map(MlpGrads::zeros_like),
        }
    }

    pub fn add(&mut self, other: &StackGrads) {
        self.name_projector.add(&other.name_projector);
        self.common.add(&other.common);
        if let (Some(a), Some(b)) = (self.common_name.as_mut(), other.common_name.as_ref()) {
            a.add(b);
        }
    }

    /// Flattened views in the same order as [`ProjectorStack::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.name_projector.weight.as_slice(),
            &self.name_projector.bias,
        ];
        let mlps = std::iter::once(&self.common).chain(self.common_name.as_ref());
        for g in mlps {
            for l in &g.layers {
                out.push(l.weight.as_slice());
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl ProjectorStack {
    /// Seeded fan-in uniform initialisation.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng_for(seed, "projector-init");
        let name_projector = LinearLayer::init(dims.d_n, dims.d_f, &mut rng);
        let common = Mlp::init(&dims.common_widths(), &mut rng)?;
        let common_name = if dims.shared_common {
            None
        } else {
            Some(Mlp::init(&dims.common_widths(), &mut rng)?)
        };
        Ok(Self {
            dims,
            name_projector,
            common,
            common_name,
        })
    }

    pub fn from_parts(
        dims: ModelDims,
        name_projector: LinearLayer,
        common: Mlp,
        common_name: Option<Mlp>,
    ) -> Result<Self> {
        dims.validate()?;
        if dims.shared_common != common_name.is_none() {
            return Err(Error::shape(
                "separate name common projector present iff weights are unshared",
            ));
        }
        if name_projector.input_dim() != dims.d_n || name_projector.output_dim() != dims.d_f {
            return Err(Error::shape(format!(
                "name projector is {}->{}, expected {}->{}",
                name_projector.input_dim(),
                name_projector.output_dim(),
                dims.d_n,
                dims.d_f
            )));
        }
        for mlp in std::iter::once(&common).chain(common_name.as_ref()) {
            if mlp.layers().len() != 3 || mlp.input_dim() != dims.d_f || mlp.output_dim() != dims.d_p {
                return Err(Error::shape(format!(
                    "common projector must be a three-layer {}->{} stack",
                    dims.d_f, dims.d_p
                )));
            }
        }
        Ok(Self {
            dims,
            name_projector,
            common,
            common_name,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn name_projector(&self) -> &LinearLayer {
        &self.name_projector
    }

    pub fn common(&self) -> &Mlp {
        &self.common
    }

    pub fn common_name(&self) -> Option<&Mlp> {
        self.common_name.as_ref()
    }

    pub fn common_mut(&mut self) -> &mut Mlp {
        &mut self.common
    }

    fn name_common(&self) -> &Mlp {
        self.common_name.as_ref().unwrap_or(&self.common)
    }

    fn check_face(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.d_f {
            return Err(Error::shape(format!(
                "face embedding has {} dims, model expects {}",
                x.len(),
                self.dims.d_f
            )));
        }
        Ok(())
    }

    fn check_name(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.d_n {
            return Err(Error::shape(format!(
                "name embedding has {} dims, model expects {}",
                x.len(),
                self.dims.d_n
            )));
        }
        Ok(())
    }

    pub fn project_face(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_face(x)?;
        self.common.apply(x)
    }

    pub fn project_name(&self, name: &NameRecord) -> Result<Vec<f64>> {
        self.project_name_embedding(&name.embedding)
    }

    pub fn project_name_embedding(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_name(x)?;
        let h = self.name_projector.forward(x)?;
        self.name_common().apply(&h)
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.name_projector.weight.as_slice(),
            &self.name_projector.bias,
        ];
        for mlp in std::iter::once(&self.common).chain(self.common_name.as_ref()) {
            for l in mlp.layers() {
                out.push(l.weight.as_slice());
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.name_projector.weight.as_mut_slice(),
            &mut self.name_projector.bias,
        ];
        for mlp in std::iter::once(&mut self.common).chain(self.common_name.as_mut()) {
            for l in mlp.layers_mut() {
                out.push(l.weight.as_mut_slice());
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let mut layers = vec![LayerRecord::from_layer("name_projector", &self.name_projector)];
        for (i, l) in self.common.layers().iter().enumerate() {
            layers.push(LayerRecord::from_layer(&format!("common.{i}"), l));
        }
        if let Some(c) = &self.common_name {
            for (i, l) in c.layers().iter().enumerate() {
                layers.push(LayerRecord::from_layer(&format!("common_name.{i}"), l));
            }
        }
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: self.dims.clone(),
            layers,
            config,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let find = |role: &str| -> Result<LinearLayer> {
            ckpt.layers
                .iter()
                .find(|l| l.role == role)
                .ok_or_else(|| Error::Validation(format!("checkpoint is missing layer {role}")))?
                .to_layer()
        };
        let name_projector = find("name_projector")?;
        let common = Mlp::new((0..3).map(|i| find(&format!("common.{i}"))).collect::<Result<_>>()?)?;
        let common_name = if ckpt.dims.shared_common {
            None
        } else {
            Some(Mlp::new(
                (0..3)
                    .map(|i| find(&format!("common_name.{i}")))
                    .collect::<Result<_>>()?,
            )?)
        };
        let stack = Self::from_parts(ckpt.dims.clone(), name_projector, common, common_name)?;
        if !stack.is_finite() {
            return Err(Error::Validation("checkpoint contains non-finite weights".into()));
        }
        Ok(stack)
    }
}

/// On-disk checkpoint document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub layers: Vec<LayerRecord>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub role: String,
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LayerRecord {
    fn from_layer(role: &str, layer: &LinearLayer) -> Self {
        Self {
            role: role.to_string(),
            weight: layer.weight.to_rows(),
            bias: layer.bias.clone(),
        }
    }

    fn to_layer(&self) -> Result<LinearLayer> {
        LinearLayer::new(Matrix::from_rows(&self.weight)?, self.bias.clone())
    }
}

/// Dot-product similarity of two projected vectors.
pub fn pair_similarity(xf: &[f64], xn: &[f64]) -> Result<f64> {
    if xf.len() != xn.len() {
        return Err(Error::shape(format!(
            "cannot compare a {}-dim and a {}-dim vector",
            xf.len(),
            xn.len()
        )));
    }
    Ok(dot(xf, xn))
}

/// `A[i][j] = sim(face_i, name_j)`.
pub fn similarity_matrix(stack: &ProjectorStack, faces: &[Vec<f64>], names: &[NameRecord]) -> Result<Matrix> {
    if faces.is_empty() || names.is_empty() {
        return Err(Error::contract(format!(
            "similarity matrix needs at least one face and one name (got {} and {})",
            faces.len(),
            names.len()
        )));
    }
    let pf = faces
        .iter()
        .map(|f| stack.project_face(f))
        .collect::<Result<Vec<_>>>()?;
    let pn = names
        .iter()
        .map(|n| stack.project_name(n))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_fn(pf.len(), pn.len(), |i, j| dot(&pf[i], &pn[j])))
}

#[derive(Clone, Debug)]
enum ItemCache {
    Face(MlpCache),
    Name { input: Vec<f64>, common: MlpCache },
}

/// Records projected items and their forward caches so that gradients with
/// respect to projected vectors can be pushed back into the stack.
#[derive(Clone, Debug, Default)]
pub struct ProjectionTape {
    vectors: Vec<Vec<f64>>,
    caches: Vec<ItemCache>,
}

impl ProjectionTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn push_face(&mut self, stack: &ProjectorStack, x: &[f64]) -> Result<usize> {
        stack.check_face(x)?;
        let (y, cache) = stack.common.forward(x)?;
        self.vectors.push(y);
        self.caches.push(ItemCache::Face(cache));
        Ok(self.vectors.len() - 1)
    }

    pub fn push_name(&mut self, stack: &ProjectorStack, x: &[f64]) -> Result<usize> {
        stack.check_name(x)?;
        let h = stack.name_projector.forward(x)?;
        let (y, cache) = stack.name_common().forward(&h)?;
        self.vectors.push(y);
        self.caches.push(ItemCache::Name {
            input: x.to_vec(),
            common: cache,
        });
        Ok(self.vectors.len() - 1)
    }

    /// Sign of every ReLU input across all recorded items.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for cache in &self.caches {
            let c = match cache {
                ItemCache::Face(c) => c,
                ItemCache::Name { common, .. } => common,
            };
            let pre = c.pre_activations();
            for layer in &pre[..pre.len().saturating_sub(1)] {
                out.extend(layer.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Back-propagates per-item gradients (one per recorded vector) into a
    /// fresh gradient buffer for `stack`.
    pub fn backward(&self, stack: &ProjectorStack, item_grads: &[Vec<f64>]) -> Result<StackGrads> {
        if item_grads.len() != self.vectors.len() {
            return Err(Error::contract(format!(
                "{} item gradients for {} recorded items",
                item_grads.len(),
                self.vectors.len()
            )));
        }
        let mut grads = StackGrads::zeros_like(stack);
        for (cache, g) in self.caches.iter().zip(item_grads) {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match cache {
                ItemCache::Face(c) => {
                    stack.common.backward_into(c, g, &mut grads.common)?;
                }
                ItemCache::Name { input, common } => {
                    let dh = match (&stack.common_name, grads.common_name.as_mut()) {
                        (Some(mlp), Some(buf)) => mlp.backward_into(common, g, buf)?,
                        _ => stack.common.backward_into(common, g, &mut grads.common)?,
                    };
                    grads.name_projector.accumulate(&stack.name_projector, input, &dh);
                }
            }
        }
        Ok(grads)
    }
}
