//! Adapter schemes, the shared-parameter registry, and adapted linear layers.
//!
//! A scheme describes which modules get low-rank adapters, the rank `r`, the
//! scale `alpha`, and which of the two factors (if any) is shared across
//! layers. Sharing is realized by storing every matrix exactly once in a
//! [`SharedParamStore`] and letting all attachment sites reference the same
//! entry; the autodiff tape then sums the per-site gradient contributions
//! into that single entry.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::tensor::{matmul_raw, Tape, Tensor, TensorId};

/// Linear modules that can receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Q,
        ModuleKind::K,
        ModuleKind::V,
        ModuleKind::O,
        ModuleKind::Gate,
        ModuleKind::Up,
        ModuleKind::Down,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleKind::Q => "q",
            ModuleKind::K => "k",
            ModuleKind::V => "v",
            ModuleKind::O => "o",
            ModuleKind::Gate => "gate",
            ModuleKind::Up => "up",
            ModuleKind::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(ModuleKind::Q),
            "k" => Ok(ModuleKind::K),
            "v" => Ok(ModuleKind::V),
            "o" => Ok(ModuleKind::O),
            "gate" => Ok(ModuleKind::Gate),
            "up" => Ok(ModuleKind::Up),
            "down" => Ok(ModuleKind::Down),
            other => Err(Error::Config(format!("unknown target module '{other}'"))),
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, ModuleKind::Q | ModuleKind::K | ModuleKind::V | ModuleKind::O)
    }

    /// (in_dim, out_dim) of this module in the given architecture.
    pub fn dims(&self, spec: &ModelSpec) -> (usize, usize) {
        match self {
            ModuleKind::Q | ModuleKind::K | ModuleKind::V | ModuleKind::O => {
                (spec.hidden_dim, spec.hidden_dim)
            }
            ModuleKind::Gate | ModuleKind::Up => (spec.hidden_dim, spec.intermediate_dim),
            ModuleKind::Down => (spec.intermediate_dim, spec.hidden_dim),
        }
    }
}

impl std::fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    FullFt,
    Lora,
    LoraFa,
    ShareA,
    ShareB,
    ShareAb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareScope {
    /// Share across all layers for every target module type.
    PerModuleTypeAcrossLayers,
    /// Share only the q/k/v projection-down matrices; other targets keep
    /// ordinary per-layer adapter pairs.
    QkvOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingConvention {
    /// s = alpha / r (reference convention used by the experimental configs).
    AlphaOverRank,
    /// s = alpha (literal form of the update equations).
    Alpha,
}

/// Declarative description of an adapter configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterScheme {
    pub mode: AdapterMode,
    pub rank: usize,
    pub alpha: f64,
    pub target_modules: BTreeSet<ModuleKind>,
    pub share_scope: ShareScope,
    pub scaling: ScalingConvention,
}

impl AdapterScheme {
    pub fn new(mode: AdapterMode, rank: usize, alpha: f64, targets: &[ModuleKind]) -> Self {
        AdapterScheme {
            mode,
            rank,
            alpha,
            target_modules: targets.iter().copied().collect(),
            share_scope: ShareScope::PerModuleTypeAcrossLayers,
            scaling: ScalingConvention::AlphaOverRank,
        }
    }

    /// ShareA restricted to the attention q/k/v projection-down matrices.
    pub fn share_a_qkv(rank: usize, alpha: f64, targets: &[ModuleKind]) -> Self {
        let mut s = Self::new(AdapterMode::ShareA, rank, alpha, targets);
        s.share_scope = ShareScope::QkvOnly;
        s
    }

    /// Parse a scheme label as used on the command line.
    pub fn parse_label(label: &str, rank: usize, alpha: f64, targets: &[ModuleKind]) -> Result<Self> {
        match label {
            "fullft" => Ok(Self::new(AdapterMode::FullFt, rank, alpha, targets)),
            "lora" => Ok(Self::new(AdapterMode::Lora, rank, alpha, targets)),
            "lora_fa" => Ok(Self::new(AdapterMode::LoraFa, rank, alpha, targets)),
            "sharea" => Ok(Self::new(AdapterMode::ShareA, rank, alpha, targets)),
            "shareb" => Ok(Self::new(AdapterMode::ShareB, rank, alpha, targets)),
            "shareab" => Ok(Self::new(AdapterMode::ShareAb, rank, alpha, targets)),
            "sharea_qkv" => Ok(Self::share_a_qkv(rank, alpha, targets)),
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }

    pub fn label(&self) -> String {
        let base = match self.mode {
            AdapterMode::FullFt => "fullft",
            AdapterMode::Lora => "lora",
            AdapterMode::LoraFa => "lora_fa",
            AdapterMode::ShareA => match self.share_scope {
                ShareScope::QkvOnly => "sharea_qkv",
                ShareScope::PerModuleTypeAcrossLayers => "sharea",
            },
            AdapterMode::ShareB => "shareb",
            AdapterMode::ShareAb => "shareab",
        };
        base.to_string()
    }

    /// Resolved multiplier applied to the low-rank path.
    pub fn scale(&self) -> f64 {
        match self.scaling {
            ScalingConvention::AlphaOverRank => self.alpha / self.rank as f64,
            ScalingConvention::Alpha => self.alpha,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.mode != AdapterMode::FullFt && self.target_modules.is_empty() {
            return Err(Error::Config("adapter scheme needs at least one target module".into()));
        }
        if self.share_scope == ShareScope::QkvOnly {
            if self.mode != AdapterMode::ShareA {
                return Err(Error::Config("qkv_only sharing requires the sharea mode".into()));
            }
            for m in [ModuleKind::Q, ModuleKind::K, ModuleKind::V] {
                if !self.target_modules.contains(&m) {
                    return Err(Error::Config(format!(
                        "qkv_only sharing requires module '{m}' among the targets"
                    )));
                }
            }
        }
        for m in &self.target_modules {
            if !spec.has_gated_mlp && *m == ModuleKind::Gate {
                return Err(Error::Config(format!(
                    "module 'gate' does not exist in '{}' (no gated MLP)",
                    spec.name
                )));
            }
            let (i, o) = m.dims(spec);
            if self.rank > i.min(o) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min dimension {} of module '{m}'",
                    self.rank,
                    i.min(o)
                )));
            }
        }
        Ok(())
    }
}

/// Handle into a [`SharedParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Arena for all model and adapter parameters. Shared matrices are stored
/// exactly once, under a module-type key; every attachment site references
/// the same entry.
#[derive(Debug, Default)]
pub struct SharedParamStore {
    params: Vec<Parameter>,
    shared: BTreeMap<String, ParamId>,
    attachments: BTreeMap<ParamId, Vec<usize>>,
}

impl SharedParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            data,
            trainable,
        });
        id
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Shared entry for `key`, allocating it with `init` on first use.
    pub fn shared_or_insert(
        &mut self,
        key: &str,
        shape: &[usize],
        trainable: bool,
        init: impl FnOnce() -> Vec<f64>,
    ) -> ParamId {
        if let Some(&id) = self.shared.get(key) {
            return id;
        }
        let id = self.insert(format!("shared.{key}"), shape, init(), trainable);
        self.shared.insert(key.to_string(), id);
        id
    }

    pub fn shared_entry(&self, key: &str) -> Option<ParamId> {
        self.shared.get(key).copied()
    }

    pub fn shared_keys(&self) -> impl Iterator<Item = (&String, ParamId)> {
        self.shared.iter().map(|(k, &v)| (k, v))
    }

    pub fn record_attachment(&mut self, id: ParamId, layer: usize) {
        self.attachments.entry(id).or_default().push(layer);
    }

    pub fn attachment_sites(&self, id: ParamId) -> &[usize] {
        self.attachments.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Ids of trainable parameters, in insertion order. Shared matrices
    /// appear exactly once because the arena holds a single entry per key.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.params[id.0].trainable).collect()
    }

    pub fn trainable_count(&self) -> u64 {
        self.trainable_ids()
            .iter()
            .map(|id| self.param(*id).numel() as u64)
            .sum()
    }

    /// Snapshot of every parameter's data, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.data.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for p in &mut self.params {
            let data = snapshot
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{}'", p.name)))?;
            if data.len() != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has {} values, expected {}",
                    p.name,
                    data.len(),
                    p.data.len()
                )));
            }
            p.data.copy_from_slice(data);
        }
        Ok(())
    }
}

/// Reference to a matrix that is either shared across layers or owned by one
/// adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Shared(ParamId),
    Owned(ParamId),
}

impl ParamRef {
    pub fn id(&self) -> ParamId {
        match self {
            ParamRef::Shared(id) | ParamRef::Owned(id) => *id,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, ParamRef::Shared(_))
    }
}

/// One adapter attached to one (layer, module) site.
#[derive(Clone, Debug)]
pub struct LayerAdapter {
    pub layer_index: usize,
    pub module: ModuleKind,
    pub a: ParamRef,
    pub b: ParamRef,
    pub frozen_a: bool,
    pub rank: usize,
    pub scale: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Frozen base weight with an optional adapter on top.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub base: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub adapter: Option<LayerAdapter>,
}

/// Binds store parameters to tape leaves, inserting each parameter once per
/// tape so that shared matrices are a single graph node with summed gradients.
pub struct TapeBinding {
    map: BTreeMap<ParamId, TensorId>,
}

impl Default for TapeBinding {
    fn default() -> Self {
        Self::new()
    }
}

impl TapeBinding {
    pub fn new() -> Self {
        TapeBinding { map: BTreeMap::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &SharedParamStore, id: ParamId) -> TensorId {
        if let Some(&tid) = self.map.get(&id) {
            return tid;
        }
        let p = store.param(id);
        let mut t = Tensor {
            shape: p.shape.clone(),
            data: p.data.clone(),
            requires_grad: p.trainable,
            grad: None,
        };
        t.requires_grad = p.trainable;
        let tid = tape.leaf(t);
        self.map.insert(id, tid);
        tid
    }

    pub fn tensor_id(&self, id: ParamId) -> Option<TensorId> {
        self.map.get(&id).copied()
    }

    /// Collect gradients of all bound trainable parameters after backward.
    pub fn harvest(&self, tape: &Tape, store: &SharedParamStore) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (&pid, &tid) in &self.map {
            if !store.param(pid).trainable {
                continue;
            }
            let g = match tape.grad(tid) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.param(pid).numel()],
            };
            out.insert(pid, g);
        }
        out
    }
}

impl AdaptedLinear {
    /// `x[n, in] * W (+ s * (x * A) * B)`. The low-rank path is two skinny
    /// products; A*B is never materialized here.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        store: &SharedParamStore,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = bind.bind(tape, store, self.base);
        let mut out = tape.matmul(x, w)?;
        if let Some(ad) = &self.adapter {
            let a = bind.bind(tape, store, ad.a.id());
            let b = bind.bind(tape, store, ad.b.id());
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let delta = tape.scale(xab, ad.scale);
            out = tape.add(out, delta)?;
        }
        Ok(out)
    }

    /// Base-only forward, ignoring any adapter.
    pub fn forward_base(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        store: &SharedParamStore,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = bind.bind(tape, store, self.base);
        tape.matmul(x, w)
    }

    /// `s * A * B` as a dense `[in, out]` value.
    pub fn delta_weight(&self, store: &SharedParamStore) -> Result<Tensor> {
        let ad = self.adapter.as_ref().ok_or_else(|| {
            Error::Contract("delta_weight requires an adapter (full fine-tune has no low-rank update)".into())
        })?;
        let a = store.param(ad.a.id());
        let b = store.param(ad.b.id());
        let mut data = matmul_raw(&a.data, &b.data, ad.in_dim, ad.rank, ad.out_dim);
        for v in &mut data {
            *v *= ad.scale;
        }
        Tensor::from_vec(data, &[ad.in_dim, ad.out_dim])
    }

    /// Fold the adapter into the base weight, producing a plain frozen layer.
    pub fn merge(&self, store: &SharedParamStore) -> Result<MergedLinear> {
        let base = store.param(self.base);
        let mut weight = base.data.clone();
        if self.adapter.is_some() {
            let delta = self.delta_weight(store)?;
            for (w, d) in weight.iter_mut().zip(&delta.data) {
                *w += d;
            }
        }
        Ok(MergedLinear {
            weight: Tensor::from_vec(weight, &[self.in_dim, self.out_dim])?,
        })
    }
}

/// Plain frozen linear layer produced by merging.
#[derive(Clone, Debug)]
pub struct MergedLinear {
    pub weight: Tensor,
}

impl MergedLinear {
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = tape.constant(self.weight.data.clone(), &self.weight.shape)?;
        tape.matmul(x, w)
    }
}

/// Gaussian projection-down init with variance 1/in_dim; projection-up starts
/// at zero so every adapted model begins at the frozen base function.
fn init_a(rng: &mut ChaCha8Rng, in_dim: usize, rank: usize) -> Vec<f64> {
    gaussian_vec(rng, in_dim * rank, (1.0 / in_dim as f64).sqrt())
}

/// Box-Muller normals; hand-rolled so that seeded runs stay bit-reproducible
/// independent of distribution-crate internals.
pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen::<f64>();
            std * (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

/// Whether matrix A (resp. B) is shared for `module` under this scheme.
fn sharing_roles(scheme: &AdapterScheme, module: ModuleKind) -> (bool, bool) {
    match scheme.mode {
        AdapterMode::FullFt => (false, false),
        AdapterMode::Lora | AdapterMode::LoraFa => (false, false),
        AdapterMode::ShareA => match scheme.share_scope {
            ShareScope::PerModuleTypeAcrossLayers => (true, false),
            ShareScope::QkvOnly => (matches!(module, ModuleKind::Q | ModuleKind::K | ModuleKind::V), false),
        },
        AdapterMode::ShareB => (false, true),
        AdapterMode::ShareAb => (true, true),
    }
}

/// Create one adapter per (layer, target module) inside `store`.
///
/// Shared matrices are created once per module-type key; under qkv-only
/// sharing the non-attention targets receive ordinary per-layer pairs.
pub fn build_adapters_into(
    store: &mut SharedParamStore,
    spec: &ModelSpec,
    scheme: &AdapterScheme,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LayerAdapter>> {
    scheme.validate(spec)?;
    let mut out = Vec::new();
    if scheme.mode == AdapterMode::FullFt {
        return Ok(out);
    }
    let scale = scheme.scale();
    for layer in 0..spec.n_layers {
        for module in ModuleKind::ALL {
            if !scheme.target_modules.contains(&module) {
                continue;
            }
            let (in_dim, out_dim) = module.dims(spec);
            let (share_a, share_b) = sharing_roles(scheme, module);
            let a = if share_a {
                let key = format!("a.{module}");
                let id = store.shared_or_insert(&key, &[in_dim, scheme.rank], true, || {
                    init_a(rng, in_dim, scheme.rank)
                });
                store.record_attachment(id, layer);
                ParamRef::Shared(id)
            } else {
                let data = init_a(rng, in_dim, scheme.rank);
                let trainable = scheme.mode != AdapterMode::LoraFa;
                let id = store.insert(
                    format!("layers.{layer}.{module}.lora_a"),
                    &[in_dim, scheme.rank],
                    data,
                    trainable,
                );
                ParamRef::Owned(id)
            };
            let b = if share_b {
                let key = format!("b.{module}");
                let id = store.shared_or_insert(&key, &[scheme.rank, out_dim], true, || {
                    vec![0.0; scheme.rank * out_dim]
                });
                store.record_attachment(id, layer);
                ParamRef::Shared(id)
            } else {
                let id = store.insert(
                    format!("layers.{layer}.{module}.lora_b"),
                    &[scheme.rank, out_dim],
                    vec![0.0; scheme.rank * out_dim],
                    true,
                );
                ParamRef::Owned(id)
            };
            out.push(LayerAdapter {
                layer_index: layer,
                module,
                a,
                b,
                frozen_a: scheme.mode == AdapterMode::LoraFa,
                rank: scheme.rank,
                scale,
                in_dim,
                out_dim,
            });
        }
    }
    Ok(out)
}

/// Build adapters for a spec into a fresh store.
pub fn build_adapters(
    spec: &ModelSpec,
    scheme: &AdapterScheme,
    seed: u64,
) -> Result<(SharedParamStore, Vec<LayerAdapter>)> {
    use rand::SeedableRng;
    let mut store = SharedParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapters = build_adapters_into(&mut store, spec, scheme, &mut rng)?;
    Ok((store, adapters))
}

/// Flat list of trainable parameter ids: shared matrices once, frozen
/// matrices excluded. Under full fine-tuning this is every base weight.
pub fn trainable_parameters(store: &SharedParamStore) -> Vec<ParamId> {
    store.trainable_ids()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset_spec;
    use rand::SeedableRng;

    fn targets_all() -> Vec<ModuleKind> {
        ModuleKind::ALL.to_vec()
    }

    fn count(store: &SharedParamStore) -> u64 {
        store.trainable_count()
    }

    /// Enumeration oracle: walk (layer, module, role) tuples independently of
    /// the builder and count distinct matrices per the sharing rules.
    fn oracle_count(spec: &ModelSpec, scheme: &AdapterScheme) -> u64 {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut total = 0u64;
        for layer in 0..spec.n_layers {
            for m in ModuleKind::ALL {
                if !scheme.target_modules.contains(&m) {
                    continue;
                }
                let (i, o) = m.dims(spec);
                let (sa, sb) = sharing_roles(scheme, m);
                let a_key = if sa { format!("a.{m}") } else { format!("a.{layer}.{m}") };
                if seen.insert(a_key) && scheme.mode != AdapterMode::LoraFa {
                    total += (i * scheme.rank) as u64;
                }
                let b_key = if sb { format!("b.{m}") } else { format!("b.{layer}.{m}") };
                if seen.insert(b_key) {
                    total += (scheme.rank * o) as u64;
                }
            }
        }
        total
    }

    #[test]
    fn sharea_llama7b_matrix_census() {
        let spec = preset_spec("llama7b").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 64, 16.0, &targets_all());
        let (store, adapters) = build_adapters(&spec, &scheme, 0).unwrap();
        assert_eq!(adapters.len(), 32 * 7);
        let shared: Vec<_> = store.shared_keys().collect();
        assert_eq!(shared.len(), 7, "one shared A per module type");
        let owned_b = store
            .ids()
            .filter(|id| store.param(*id).name.ends_with("lora_b"))
            .count();
        assert_eq!(owned_b, 224);
        assert_eq!(count(&store), 89_309_184);
        assert_eq!(oracle_count(&spec, &scheme), 89_309_184);
    }

    #[test]
    fn lora_llama7b_matrix_census() {
        let spec = preset_spec("llama7b").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::Lora, 64, 16.0, &targets_all());
        let (store, _) = build_adapters(&spec, &scheme, 0).unwrap();
        let owned_a = store
            .ids()
            .filter(|id| store.param(*id).name.ends_with("lora_a"))
            .count();
        let owned_b = store
            .ids()
            .filter(|id| store.param(*id).name.ends_with("lora_b"))
            .count();
        assert_eq!((owned_a, owned_b), (224, 224));
        assert_eq!(count(&store), 159_907_840);
        assert_eq!(oracle_count(&spec, &scheme), 159_907_840);
    }

    #[test]
    fn shareab_roberta_large_census() {
        let spec = preset_spec("roberta_large").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareAb, 8, 8.0, &[ModuleKind::Q, ModuleKind::V]);
        let (store, _) = build_adapters(&spec, &scheme, 0).unwrap();
        let shared: Vec<_> = store.shared_keys().collect();
        assert_eq!(shared.len(), 4, "2 shared A + 2 shared B");
        assert_eq!(store.len(), 4, "no owned matrices at all");
        assert_eq!(count(&store), 32_768);
    }

    #[test]
    fn sharea_qkv_leaves_other_modules_per_layer() {
        let spec = preset_spec("llama7b").unwrap();
        let scheme = AdapterScheme::share_a_qkv(64, 16.0, &targets_all());
        let (store, _) = build_adapters(&spec, &scheme, 0).unwrap();
        assert_eq!(store.shared_keys().count(), 3);
        assert_eq!(count(&store), 135_528_448);
        assert_eq!(oracle_count(&spec, &scheme), 135_528_448);
    }

    #[test]
    fn shared_matrix_is_one_object_across_sites() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 4, 8.0, &targets_all());
        let (mut store, adapters) = build_adapters(&spec, &scheme, 1).unwrap();
        let q_adapters: Vec<_> = adapters.iter().filter(|a| a.module == ModuleKind::Q).collect();
        assert_eq!(q_adapters.len(), spec.n_layers);
        let first = q_adapters[0].a.id();
        for a in &q_adapters {
            assert!(a.a.is_shared());
            assert_eq!(a.a.id(), first);
            assert!(!a.b.is_shared());
        }
        assert_eq!(store.attachment_sites(first), &[0, 1]);

        // Mutation through the single entry is visible at every site.
        store.param_mut(first).data[0] = 42.0;
        for a in &q_adapters {
            assert_eq!(store.param(a.a.id()).data[0], 42.0);
        }
    }

    #[test]
    fn lora_fa_a_is_frozen() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::LoraFa, 4, 8.0, &[ModuleKind::Q, ModuleKind::V]);
        let (store, adapters) = build_adapters(&spec, &scheme, 1).unwrap();
        for a in &adapters {
            assert!(a.frozen_a);
            assert!(!store.param(a.a.id()).trainable);
            assert!(store.param(a.b.id()).trainable);
        }
        let expected_b: u64 = adapters.iter().map(|a| (a.rank * a.out_dim) as u64).sum();
        assert_eq!(count(&store), expected_b);
    }

    #[test]
    fn rank_exceeding_module_dim_is_config_error() {
        let spec = preset_spec("tiny").unwrap(); // hidden 16
        let scheme = AdapterScheme::new(AdapterMode::Lora, 17, 8.0, &[ModuleKind::Q]);
        let err = build_adapters(&spec, &scheme, 0).unwrap_err();
        assert!(err.to_string().contains("'q'"), "should name the module: {err}");
    }

    #[test]
    fn qkv_scope_requires_qkv_targets() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::share_a_qkv(4, 8.0, &[ModuleKind::Q, ModuleKind::V]);
        assert!(scheme.validate(&spec).is_err());
    }

    #[test]
    fn adapted_forward_matches_dense_product() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, din, dout, r) = (5usize, 6usize, 4usize, 3usize);
        let mut store = SharedParamStore::new();
        let w: Vec<f64> = (0..din * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..din * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..r * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = store.insert("w", &[din, dout], w.clone(), false);
        let aid = store.insert("a", &[din, r], a.clone(), true);
        let bid = store.insert("b", &[r, dout], b.clone(), true);
        let scale = 1.25;
        let layer = AdaptedLinear {
            base,
            in_dim: din,
            out_dim: dout,
            adapter: Some(LayerAdapter {
                layer_index: 0,
                module: ModuleKind::Q,
                a: ParamRef::Owned(aid),
                b: ParamRef::Owned(bid),
                frozen_a: false,
                rank: r,
                scale,
                in_dim: din,
                out_dim: dout,
            }),
        };

        let x: Vec<f64> = (0..n * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let xid = tape.constant(x.clone(), &[n, din]).unwrap();
        let out = layer.forward(&mut tape, &mut bind, &store, xid).unwrap();

        // Dense oracle: x * (W + s*A*B).
        let mut weff = w;
        let ab = matmul_raw(&a, &b, din, r, dout);
        for (we, d) in weff.iter_mut().zip(&ab) {
            *we += scale * d;
        }
        let expect = matmul_raw(&x, &weff, n, din, dout);
        for (y, e) in tape.data(out).iter().zip(&expect) {
            let denom = e.abs().max(1.0);
            assert!((y - e).abs() / denom < 1e-12);
        }
    }

    #[test]
    fn zero_init_adapter_forward_is_bit_identical_to_base() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::Lora, 4, 8.0, &[ModuleKind::Q]);
        let (store, adapters) = build_adapters(&spec, &scheme, 7).unwrap();
        let mut store = store;
        let base = store.insert("w", &[16, 16], (0..256).map(|i| (i as f64) * 0.01 - 1.2).collect(), false);
        let layer = AdaptedLinear {
            base,
            in_dim: 16,
            out_dim: 16,
            adapter: Some(adapters[0].clone()),
        };
        let x: Vec<f64> = (0..32).map(|i| (i as f64) * 0.3 - 4.0).collect();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let xid = tape.constant(x, &[2, 16]).unwrap();
        let adapted = layer.forward(&mut tape, &mut bind, &store, xid).unwrap();
        let plain = layer.forward_base(&mut tape, &mut bind, &store, xid).unwrap();
        for (a, b) in tape.data(adapted).iter().zip(tape.data(plain)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn delta_weight_examples() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (din, dout) = (6usize, 5usize);

        // B = 0 -> zero delta.
        let mut store = SharedParamStore::new();
        let base = store.insert("w", &[din, dout], vec![0.0; 30], false);
        let aid = store.insert("a", &[din, 1], (0..din).map(|i| i as f64).collect(), true);
        let bid = store.insert("b", &[1, dout], vec![0.0; dout], true);
        let mk = |a, b, scale, rank| AdaptedLinear {
            base,
            in_dim: din,
            out_dim: dout,
            adapter: Some(LayerAdapter {
                layer_index: 0,
                module: ModuleKind::V,
                a: ParamRef::Owned(a),
                b: ParamRef::Owned(b),
                frozen_a: false,
                rank,
                scale,
                in_dim: din,
                out_dim: dout,
            }),
        };
        let layer = mk(aid, bid, 2.0, 1);
        assert!(layer.delta_weight(&store).unwrap().data.iter().all(|&v| v == 0.0));

        // r = 1: outer-product oracle.
        let av: Vec<f64> = (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let aid = store.insert("a1", &[din, 1], av.clone(), true);
        let bid = store.insert("b1", &[1, dout], bv.clone(), true);
        let layer = mk(aid, bid, 0.5, 1);
        let d = layer.delta_weight(&store).unwrap();
        for i in 0..din {
            for j in 0..dout {
                let expect = 0.5 * av[i] * bv[j];
                assert!((d.data[i * dout + j] - expect).abs() < 1e-14);
            }
        }

        // Rank-r product equals the sum over k of rank-1 terms.
        let r = 3;
        let am: Vec<f64> = (0..din * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bm: Vec<f64> = (0..r * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let aid = store.insert("ar", &[din, r], am.clone(), true);
        let bid = store.insert("br", &[r, dout], bm.clone(), true);
        let layer = mk(aid, bid, 1.0, r);
        let d = layer.delta_weight(&store).unwrap();
        let mut rank1_sum = vec![0.0; din * dout];
        for k in 0..r {
            for i in 0..din {
                for j in 0..dout {
                    rank1_sum[i * dout + j] += am[i * r + k] * bm[k * dout + j];
                }
            }
        }
        for (x, y) in d.data.iter().zip(&rank1_sum) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_weight_without_adapter_is_contract_error() {
        let mut store = SharedParamStore::new();
        let base = store.insert("w", &[2, 2], vec![0.0; 4], true);
        let layer = AdaptedLinear { base, in_dim: 2, out_dim: 2, adapter: None };
        assert!(matches!(layer.delta_weight(&store), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_matches_adapted_forward() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, din, dout, r) = (4usize, 5usize, 7usize, 2usize);
        let mut store = SharedParamStore::new();
        let base = store.insert("w", &[din, dout], (0..din * dout).map(|_| rng.gen_range(-1.0..1.0)).collect(), false);
        let aid = store.insert("a", &[din, r], (0..din * r).map(|_| rng.gen_range(-1.0..1.0)).collect(), true);
        let bid = store.insert("b", &[r, dout], (0..r * dout).map(|_| rng.gen_range(-1.0..1.0)).collect(), true);
        let layer = AdaptedLinear {
            base,
            in_dim: din,
            out_dim: dout,
            adapter: Some(LayerAdapter {
                layer_index: 0,
                module: ModuleKind::O,
                a: ParamRef::Owned(aid),
                b: ParamRef::Owned(bid),
                frozen_a: false,
                rank: r,
                scale: 4.0,
                in_dim: din,
                out_dim: dout,
            }),
        };
        let merged = layer.merge(&store).unwrap();
        let x: Vec<f64> = (0..n * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let xid = tape.constant(x, &[n, din]).unwrap();
        let via_adapter = layer.forward(&mut tape, &mut bind, &store, xid).unwrap();
        let via_merge = merged.forward(&mut tape, xid).unwrap();
        for (a, b) in tape.data(via_adapter).iter().zip(tape.data(via_merge)) {
            let denom = b.abs().max(1.0);
            assert!((a - b).abs() / denom < 1e-10);
        }
    }

    #[test]
    fn merging_zero_adapter_is_exact_base() {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 4, 8.0, &[ModuleKind::Q]);
        let (mut store, adapters) = build_adapters(&spec, &scheme, 9).unwrap();
        let w: Vec<f64> = (0..256).map(|i| i as f64 * 0.37).collect();
        let base = store.insert("w", &[16, 16], w.clone(), false);
        let layer = AdaptedLinear { base, in_dim: 16, out_dim: 16, adapter: Some(adapters[0].clone()) };
        let merged = layer.merge(&store).unwrap();
        assert_eq!(merged.weight.data, w);
    }

    #[test]
    fn count_monotonicity_across_schemes() {
        for preset in ["tiny", "llama7b"] {
            let spec = preset_spec(preset).unwrap();
            let mk = |mode| AdapterScheme::new(mode, 4, 8.0, &targets_all());
            let shareab = oracle_count(&spec, &mk(AdapterMode::ShareAb));
            let sharea = oracle_count(&spec, &mk(AdapterMode::ShareA));
            let qkv = oracle_count(&spec, &AdapterScheme::share_a_qkv(4, 8.0, &targets_all()));
            let lora = oracle_count(&spec, &mk(AdapterMode::Lora));
            assert!(shareab <= sharea && sharea <= qkv && qkv <= lora);
        }
    }

    #[test]
    fn sharea_equals_shareb_iff_square_targets() {
        let spec = preset_spec("roberta_large").unwrap();
        let square = [ModuleKind::Q, ModuleKind::V];
        let a = oracle_count(&spec, &AdapterScheme::new(AdapterMode::ShareA, 8, 8.0, &square));
        let b = oracle_count(&spec, &AdapterScheme::new(AdapterMode::ShareB, 8, 8.0, &square));
        assert_eq!(a, b);

        let spec = preset_spec("llama7b").unwrap();
        let mixed = targets_all();
        let a = oracle_count(&spec, &AdapterScheme::new(AdapterMode::ShareA, 8, 8.0, &mixed));
        let b = oracle_count(&spec, &AdapterScheme::new(AdapterMode::ShareB, 8, 8.0, &mixed));
        assert_ne!(a, b, "gate/up/down are rectangular");
    }
}
