//! Exact trainable-parameter enumeration for named configurations, an
//! analytical memory-footprint model, SVD spectra of the learned updates,
//! and the finite-difference gradient checker.
//!
//! Everything here is a pure function of the architecture description and
//! the adapter scheme; none of it instantiates a full-size model.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::adapters::{AdapterMode, AdapterScheme, LayerAdapter, ModuleKind, ShareScope, SharedParamStore, TapeBinding};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelSpec, TinyTransformer};
use crate::svd::low_rank_singular_values;
use crate::tensor::Tape;

pub const SCHEMA_VERSION: u32 = 1;

// ── parameter counting ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct BaselineComparison {
    pub scheme: String,
    pub exact_params: u64,
    /// 1 - ours/baseline, in percent.
    pub reduction_percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FullFtVariants {
    pub with_embeddings_and_head: u64,
    pub backbone_only: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub preset: String,
    pub scheme: String,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub exact_params: u64,
    pub millions: f64,
    /// Rounded to 0.1M, the precision the reference tables print.
    pub rounded_millions: f64,
    /// Per-module (or per-component for full fine-tuning) breakdown; sums to
    /// the total.
    pub per_module: BTreeMap<String, u64>,
    pub baseline: Option<BaselineComparison>,
    pub full_ft_variants: Option<FullFtVariants>,
}

pub fn round_to_tenth_million(exact: u64) -> f64 {
    (exact as f64 / 1e5).round() / 10.0
}

/// Published tables print counts at 0.1M precision, but are not consistent
/// about the rounding direction (139,165,696 appears as 139.1M while 294,912
/// appears as 0.3M). Agreement therefore means: within 0.1M of the printed
/// value.
pub fn matches_reported(exact: u64, reported_millions: f64) -> bool {
    (exact as f64 / 1e6 - reported_millions).abs() <= 0.1 + 1e-9
}

/// Trainable parameters contributed by adapters on `module`, summed over
/// layers, under the given scheme.
fn adapter_params_for_module(spec: &ModelSpec, scheme: &AdapterScheme, module: ModuleKind) -> u64 {
    let (i, o) = module.dims(spec);
    let (i, o, r, l) = (i as u64, o as u64, scheme.rank as u64, spec.n_layers as u64);
    match scheme.mode {
        AdapterMode::FullFt => 0,
        AdapterMode::Lora => l * (i * r + r * o),
        AdapterMode::LoraFa => l * r * o, // frozen A is not trainable
        AdapterMode::ShareA => match scheme.share_scope {
            ShareScope::PerModuleTypeAcrossLayers => i * r + l * r * o,
            ShareScope::QkvOnly => {
                if matches!(module, ModuleKind::Q | ModuleKind::K | ModuleKind::V) {
                    i * r + l * r * o
                } else {
                    l * (i * r + r * o)
                }
            }
        },
        AdapterMode::ShareB => l * i * r + r * o,
        AdapterMode::ShareAb => i * r + r * o,
    }
}

fn norm_params(spec: &ModelSpec) -> u64 {
    (spec.hidden_dim * if spec.norm_has_bias { 2 } else { 1 }) as u64
}

/// Full-model parameter count split into named components.
fn full_ft_breakdown(spec: &ModelSpec) -> BTreeMap<String, u64> {
    let h = spec.hidden_dim as u64;
    let i = spec.intermediate_dim as u64;
    let l = spec.n_layers as u64;
    let v = spec.vocab_size as u64;
    let bias = |n: u64| if spec.linear_has_bias { n } else { 0 };

    let mut out = BTreeMap::new();
    let mut embeddings = v * h;
    if spec.has_position_embeddings {
        embeddings += spec.max_seq_len as u64 * h;
    }
    out.insert("embeddings".to_string(), embeddings);
    out.insert("attention".to_string(), l * (4 * h * h + bias(4 * h)));
    let mlp_per_layer = if spec.has_gated_mlp {
        2 * h * i + i * h + bias(2 * i + h)
    } else {
        h * i + i * h + bias(i + h)
    };
    out.insert("mlp".to_string(), l * mlp_per_layer);
    out.insert("norms".to_string(), (2 * l + 1) * norm_params(spec));
    out.insert("head".to_string(), h * v);
    out
}

/// Closed-form trainable-parameter enumeration; no model is instantiated.
pub fn count_params(spec: &ModelSpec, scheme: &AdapterScheme) -> Result<AuditReport> {
    spec.validate()?;
    scheme.validate(spec)?;
    let mut per_module = BTreeMap::new();
    let (exact, full_ft_variants) = if scheme.mode == AdapterMode::FullFt {
        per_module = full_ft_breakdown(spec);
        let with_head: u64 = per_module.values().sum();
        let backbone = with_head - per_module["embeddings"] - per_module["head"];
        (with_head, Some(FullFtVariants { with_embeddings_and_head: with_head, backbone_only: backbone }))
    } else {
        for m in &scheme.target_modules {
            per_module.insert(m.to_string(), adapter_params_for_module(spec, scheme, *m));
        }
        (per_module.values().sum(), None)
    };
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION,
        preset: spec.name.clone(),
        scheme: scheme.label(),
        rank: scheme.rank,
        alpha: scheme.alpha,
        targets: scheme.target_modules.iter().map(|m| m.to_string()).collect(),
        exact_params: exact,
        millions: exact as f64 / 1e6,
        rounded_millions: round_to_tenth_million(exact),
        per_module,
        baseline: None,
        full_ft_variants,
    })
}

/// Count with a reduction ratio against a baseline scheme on the same spec.
pub fn count_params_vs_baseline(
    spec: &ModelSpec,
    scheme: &AdapterScheme,
    baseline: &AdapterScheme,
) -> Result<AuditReport> {
    let mut report = count_params(spec, scheme)?;
    let base = count_params(spec, baseline)?;
    report.baseline = Some(BaselineComparison {
        scheme: base.scheme,
        exact_params: base.exact_params,
        reduction_percent: 100.0 * (1.0 - report.exact_params as f64 / base.exact_params as f64),
    });
    Ok(report)
}

// ── memory model ────────────────────────────────────────────────────

/// Bytes-per-element assumptions for each memory component.
#[derive(Clone, Debug, Serialize)]
pub struct PrecisionConfig {
    /// Per trainable parameter: working copy plus any optimizer master copy.
    pub trainable_param_bytes: f64,
    pub gradient_bytes: f64,
    /// Per moment entry; AdamW keeps two moments.
    pub moment_bytes: f64,
    pub frozen_param_bytes: f64,
    pub activation_bytes: f64,
}

impl PrecisionConfig {
    /// Mixed-precision fine-tuning: bf16 working weights (2) plus f32 master
    /// copies (4) in the optimizer, f32 gradients and moments, bf16 frozen
    /// base and activations.
    pub fn mixed_bf16() -> Self {
        PrecisionConfig {
            trainable_param_bytes: 6.0,
            gradient_bytes: 4.0,
            moment_bytes: 4.0,
            frozen_param_bytes: 2.0,
            activation_bytes: 2.0,
        }
    }

    /// Everything in f32.
    pub fn all_f32() -> Self {
        PrecisionConfig {
            trainable_param_bytes: 4.0,
            gradient_bytes: 4.0,
            moment_bytes: 4.0,
            frozen_param_bytes: 4.0,
            activation_bytes: 4.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryModel {
    pub schema_version: u32,
    pub preset: String,
    pub scheme: String,
    pub batch: usize,
    pub seq_len: usize,
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub trainable_param_bytes: f64,
    pub gradient_bytes: f64,
    /// Both AdamW moments together.
    pub optimizer_moment_bytes: f64,
    /// Params + gradients + moments; the part that scales with the trainable
    /// count.
    pub trainable_state_bytes: f64,
    pub frozen_base_bytes: f64,
    pub activation_bytes: f64,
    pub total_bytes: f64,
}

/// Deterministic byte totals under explicit precision assumptions.
pub fn memory_estimate(
    spec: &ModelSpec,
    scheme: &AdapterScheme,
    precision: &PrecisionConfig,
    batch: usize,
    seq_len: usize,
) -> Result<MemoryModel> {
    let report = count_params(spec, scheme)?;
    let trainable = report.exact_params;
    let full: u64 = full_ft_breakdown(spec).values().sum();
    let frozen = if scheme.mode == AdapterMode::FullFt { 0 } else { full };

    let t = trainable as f64;
    let param_bytes = t * precision.trainable_param_bytes;
    let grad_bytes = t * precision.gradient_bytes;
    let moment_bytes = 2.0 * t * precision.moment_bytes;
    // Residual stream, attention projections, MLP activations, and the
    // per-head score matrices; a coarse but monotone accounting.
    let act_elems = (batch * seq_len) as f64
        * (spec.n_layers as f64
            * (6.0 * spec.hidden_dim as f64
                + 2.0 * spec.intermediate_dim as f64
                + (spec.n_heads * seq_len) as f64)
            + spec.hidden_dim as f64);
    let activation_bytes = act_elems * precision.activation_bytes;
    let frozen_base_bytes = frozen as f64 * precision.frozen_param_bytes;
    Ok(MemoryModel {
        schema_version: SCHEMA_VERSION,
        preset: spec.name.clone(),
        scheme: scheme.label(),
        batch,
        seq_len,
        trainable_params: trainable,
        frozen_params: frozen,
        trainable_param_bytes: param_bytes,
        gradient_bytes: grad_bytes,
        optimizer_moment_bytes: moment_bytes,
        trainable_state_bytes: param_bytes + grad_bytes + moment_bytes,
        frozen_base_bytes,
        activation_bytes,
        total_bytes: param_bytes + grad_bytes + moment_bytes + frozen_base_bytes + activation_bytes,
    })
}

// ── SVD spectrum ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumRow {
    pub layer: usize,
    pub module: String,
    pub singular_values: Vec<f64>,
    pub effective_rank_90: usize,
    pub effective_rank_99: usize,
    /// Least-squares slope of ln(sigma) against the index; more negative
    /// means a sharper decay.
    pub decay_slope: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    pub schema_version: u32,
    pub scheme: String,
    pub rows: Vec<SpectrumRow>,
}

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,module,index,sigma\n");
        for row in &self.rows {
            for (i, s) in row.singular_values.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", row.layer, row.module, i, s));
            }
        }
        out
    }
}

/// Smallest k whose leading singular values carry `threshold` of the total
/// energy (sum of squares); 0 for an all-zero spectrum.
pub fn effective_rank(values: &[f64], threshold: f64) -> usize {
    let total: f64 = values.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v * v;
        if acc >= threshold * total {
            return k + 1;
        }
    }
    values.len()
}

fn decay_slope(values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 1e-300)
        .map(|(i, &v)| (i as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Per-adapter singular values of `s * A * B`, computed on the rank-sized
/// core problem, never on the dense in x out product.
pub fn svd_spectrum<'a>(
    store: &SharedParamStore,
    adapters: impl IntoIterator<Item = &'a LayerAdapter>,
    scheme_label: &str,
) -> Result<SpectrumReport> {
    let mut rows = Vec::new();
    for ad in adapters {
        let a = store.param(ad.a.id());
        let b = store.param(ad.b.id());
        let sv = low_rank_singular_values(&a.data, &b.data, ad.in_dim, ad.rank, ad.out_dim, ad.scale)
            .map_err(|e| {
                Error::Numeric(format!(
                    "spectrum of layer {} module {} failed: {e}",
                    ad.layer_index, ad.module
                ))
            })?;
        rows.push(SpectrumRow {
            layer: ad.layer_index,
            module: ad.module.to_string(),
            effective_rank_90: effective_rank(&sv, 0.90),
            effective_rank_99: effective_rank(&sv, 0.99),
            decay_slope: decay_slope(&sv),
            singular_values: sv,
        });
    }
    Ok(SpectrumReport {
        schema_version: SCHEMA_VERSION,
        scheme: scheme_label.to_string(),
        rows,
    })
}

// ── gradient checking ───────────────────────────────────────────────

/// Central finite differences of a scalar function, step `h`.
pub fn central_diff_grad(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + h;
        let fp = f(&p);
        p[i] = point[i] - h;
        let fm = f(&p);
        p[i] = point[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Two-regime error: relative where either side is appreciable, absolute in
/// the noise floor below 1e-6.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckParam {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub schema_version: u32,
    pub scheme: String,
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub params: Vec<GradCheckParam>,
}

/// Compare reverse-mode gradients of the batch loss against central finite
/// differences, for every trainable parameter. O(P) forward evaluations, so
/// only sensible on the tiny presets.
pub fn gradcheck(model: &mut TinyTransformer, batch: &Batch, tolerance: f64) -> Result<GradCheckReport> {
    const H: f64 = 1e-5;
    let mut tape = Tape::new();
    let mut bind = TapeBinding::new();
    let loss = model.loss(&mut tape, &mut bind, batch)?;
    tape.backward(loss)?;
    let analytic = bind.harvest(&tape, &model.store);

    let mut params = Vec::new();
    let mut worst = 0.0f64;
    for pid in model.store.trainable_ids() {
        let name = model.store.param(pid).name.clone();
        let numel = model.store.param(pid).numel();
        let ag = &analytic[&pid];
        let mut max_err = 0.0f64;
        for i in 0..numel {
            let orig = model.store.param(pid).data[i];
            model.store.param_mut(pid).data[i] = orig + H;
            let fp = loss_value(model, batch)?;
            model.store.param_mut(pid).data[i] = orig - H;
            let fm = loss_value(model, batch)?;
            model.store.param_mut(pid).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            max_err = max_err.max(grad_error(ag[i], numeric));
        }
        worst = worst.max(max_err);
        params.push(GradCheckParam { name, numel, max_rel_err: max_err });
    }
    Ok(GradCheckReport {
        schema_version: SCHEMA_VERSION,
        scheme: model.scheme.label(),
        tolerance,
        step: H,
        max_rel_err: worst,
        pass: worst < tolerance,
        params,
    })
}

fn loss_value(model: &TinyTransformer, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let mut bind = TapeBinding::new();
    let loss = model.loss(&mut tape, &mut bind, batch)?;
    Ok(tape.data(loss)[0])
}
