//! Component-level transfer between checkpoints: selective copying, embedding
//! resets, cross-donor composition, and perturbations.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{group_of, init_random, init_tensor, Checkpoint, ComponentGroup, InputMode, ModelConfig};
use crate::diagnostics::DiagnosticTask;
use crate::procgen::{gen_eca_trace, EcaParams, ProceduralTask};
use crate::rng;
use crate::tensor::Tensor;

/// Where a component group's weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Fresh,
    Donor(String),
}

/// Treatment of token embeddings and the output layer when E comes from a donor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPolicy {
    /// Copy overlapping rows; rows past the donor vocabulary stay fresh.
    #[default]
    Copy,
    /// Every row becomes the donor's mean embedding.
    AverageReset,
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalPolicy {
    #[default]
    CopyIfContextSufficient,
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbationKind {
    GaussianNoise { sigma: f32 },
    /// Each tensor's elements permuted independently.
    PerTensorShuffle,
    /// All in-scope tensors of a layer permuted jointly. Embedding-group
    /// tensors form their own pool.
    PerLayerShuffle,
}

/// Serialised flat: `kind = "gaussian_noise"`, `sigma`, `seed`, `scope`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPerturbation", into = "RawPerturbation")]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub seed: u64,
    /// Defaults to the groups the plan takes from donors.
    pub scope: Option<BTreeSet<ComponentGroup>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    GaussianNoise,
    PerTensorShuffle,
    PerLayerShuffle,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerturbation {
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f32>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scope: Option<BTreeSet<ComponentGroup>>,
}

impl TryFrom<RawPerturbation> for PerturbationSpec {
    type Error = String;

    fn try_from(raw: RawPerturbation) -> std::result::Result<Self, String> {
        let kind = match (raw.kind, raw.sigma) {
            (KindTag::GaussianNoise, Some(sigma)) => PerturbationKind::GaussianNoise { sigma },
            (KindTag::GaussianNoise, None) => return Err("gaussian_noise needs `sigma`".into()),
            (_, Some(_)) => return Err("`sigma` only applies to gaussian_noise".into()),
            (KindTag::PerTensorShuffle, None) => PerturbationKind::PerTensorShuffle,
            (KindTag::PerLayerShuffle, None) => PerturbationKind::PerLayerShuffle,
        };
        Ok(Self {
            kind,
            seed: raw.seed,
            scope: raw.scope,
        })
    }
}

impl From<PerturbationSpec> for RawPerturbation {
    fn from(p: PerturbationSpec) -> Self {
        let (kind, sigma) = match p.kind {
            PerturbationKind::GaussianNoise { sigma } => (KindTag::GaussianNoise, Some(sigma)),
            PerturbationKind::PerTensorShuffle => (KindTag::PerTensorShuffle, None),
            PerturbationKind::PerLayerShuffle => (KindTag::PerLayerShuffle, None),
        };
        Self {
            kind,
            sigma,
            seed: p.seed,
            scope: p.scope,
        }
    }
}

/// Per-group recipe for assembling an initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPlan {
    pub embedding: Source,
    pub attention: Source,
    pub mlp: Source,
    #[serde(default)]
    pub embedding_policy: EmbeddingPolicy,
    #[serde(default)]
    pub positional_policy: PositionalPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    /// Seed of the fresh-initialisation stream.
    #[serde(default)]
    pub seed: u64,
}

impl TransferPlan {
    fn with(e: Source, a: Source, f: Source, seed: u64) -> Self {
        Self {
            embedding: e,
            attention: a,
            mlp: f,
            embedding_policy: EmbeddingPolicy::Copy,
            positional_policy: PositionalPolicy::CopyIfContextSufficient,
            perturbation: None,
            seed,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self::with(Source::Fresh, Source::Fresh, Source::Fresh, seed)
    }

    pub fn full(donor: &str, embedding_policy: EmbeddingPolicy, seed: u64) -> Self {
        let d = || Source::Donor(donor.to_string());
        Self {
            embedding_policy,
            ..Self::with(d(), d(), d(), seed)
        }
    }

    pub fn attention_only(donor: &str, seed: u64) -> Self {
        Self::with(Source::Fresh, Source::Donor(donor.into()), Source::Fresh, seed)
    }

    pub fn mlp_only(donor: &str, seed: u64) -> Self {
        Self::with(Source::Fresh, Source::Fresh, Source::Donor(donor.into()), seed)
    }

    /// Attention from one donor, MLPs from another, fresh embeddings.
    pub fn compose(attention_donor: &str, mlp_donor: &str, seed: u64) -> Self {
        Self::with(
            Source::Fresh,
            Source::Donor(attention_donor.into()),
            Source::Donor(mlp_donor.into()),
            seed,
        )
    }

    pub fn with_perturbation(mut self, p: PerturbationSpec) -> Self {
        self.perturbation = Some(p);
        self
    }

    pub fn source(&self, g: ComponentGroup) -> &Source {
        match g {
            ComponentGroup::Embedding => &self.embedding,
            ComponentGroup::Attention => &self.attention,
            ComponentGroup::Mlp => &self.mlp,
        }
    }

    /// Groups supplied by a donor.
    pub fn transferred(&self) -> BTreeSet<ComponentGroup> {
        ComponentGroup::ALL
            .into_iter()
            .filter(|&g| matches!(self.source(g), Source::Donor(_)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding == Source::Fresh && self.embedding_policy == EmbeddingPolicy::AverageReset {
            return Err(Error::InvalidPlan(
                "average_reset needs a donor for the embedding group".into(),
            ));
        }
        if let Some(PerturbationSpec {
            kind: PerturbationKind::GaussianNoise { sigma },
            ..
        }) = self.perturbation
        {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidPlan(format!("noise sigma {sigma} must be ≥ 0")));
            }
        }
        Ok(())
    }

    /// Short label such as `E:fresh A:set F:eca`.
    pub fn label(&self) -> String {
        let s = |src: &Source| match src {
            Source::Fresh => "fresh".to_string(),
            Source::Donor(d) => d.clone(),
        };
        let mut out = format!("E:{} A:{} F:{}", s(&self.embedding), s(&self.attention), s(&self.mlp));
        if let Some(p) = &self.perturbation {
            match p.kind {
                PerturbationKind::GaussianNoise { sigma } => out += &format!(" noise:{sigma}"),
                PerturbationKind::PerTensorShuffle => out += " shuffle",
                PerturbationKind::PerLayerShuffle => out += " shuffle-layer",
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serialises")
    }

    /// Stable hash of the serialised plan.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Embedding policy for a full transfer: copy when the donor's token ids mean
/// the same thing in the target task, otherwise reset to the average vector.
///
/// Identity and Set share the sorting layout (symbols `0..100`, separator
/// 100, pad 101). Every other pairing, and any binary-vector donor, resets.
pub fn embedding_policy_for(donor: ProceduralTask, target: &DiagnosticTask) -> EmbeddingPolicy {
    let symbol_layout = matches!(donor, ProceduralTask::Identity | ProceduralTask::Set);
    match target {
        DiagnosticTask::Sorting { p: 100, .. } if symbol_layout => EmbeddingPolicy::Copy,
        _ => EmbeddingPolicy::AverageReset,
    }
}

fn donor<'a>(donors: &'a BTreeMap<String, Checkpoint>, id: &str) -> Result<&'a Checkpoint> {
    donors.get(id).ok_or_else(|| Error::MissingDonor(id.to_string()))
}

fn copy_from(out: &mut Checkpoint, src: &Checkpoint, name: &str) -> Result<()> {
    let t = src.tensor(name).map_err(|_| Error::TransferShape {
        name: name.to_string(),
        donor: Vec::new(),
        target: out.tensor(name).map(|t| t.shape().to_vec()).unwrap_or_default(),
    })?;
    out.set_tensor(name, t.clone())
}

/// Assembles an initialisation for `target` from `plan`.
///
/// Fresh tensors come from `init_random(target, plan.seed)`. Perturbations are
/// applied after assembly, to the plan's scope only.
pub fn build_init(
    plan: &TransferPlan,
    donors: &BTreeMap<String, Checkpoint>,
    target: &ModelConfig,
) -> Result<Checkpoint> {
    plan.validate()?;
    let mut out = init_random(target, plan.seed)?;
    let names: Vec<String> = out.names().map(str::to_string).collect();

    for g in [ComponentGroup::Attention, ComponentGroup::Mlp] {
        if let Source::Donor(id) = plan.source(g) {
            let d = donor(donors, id)?;
            for name in names.iter().filter(|n| group_of(n).ok() == Some(g)) {
                copy_from(&mut out, d, name)?;
            }
        }
    }
    if let Source::Donor(id) = &plan.embedding {
        let d = donor(donors, id)?;
        transfer_embedding_group(&mut out, d, plan)?;
    }

    if let Some(p) = &plan.perturbation {
        let scope = p.scope.clone().unwrap_or_else(|| plan.transferred());
        out = match p.kind {
            PerturbationKind::GaussianNoise { sigma } => perturb_noise(&out, sigma, p.seed, &scope)?,
            PerturbationKind::PerTensorShuffle => perturb_shuffle(&out, p.seed, &scope),
            PerturbationKind::PerLayerShuffle => perturb_shuffle_per_layer(&out, p.seed, &scope),
        };
    }
    out.provenance = format!("surgery plan_digest={} plan={}", plan.digest(), plan.to_json());
    Ok(out)
}

fn transfer_embedding_group(out: &mut Checkpoint, d: &Checkpoint, plan: &TransferPlan) -> Result<()> {
    let cfg = out.config.clone();
    for name in ["final_ln.g", "final_ln.b"] {
        copy_from(out, d, name)?;
    }
    if plan.positional_policy == PositionalPolicy::CopyIfContextSufficient {
        let pos = transfer_positional(
            d.tensor("embed.pos")?,
            cfg.context_length,
            cfg.d_model,
            plan.seed,
        )?;
        out.set_tensor("embed.pos", pos)?;
    }
    match plan.embedding_policy {
        EmbeddingPolicy::Fresh => Ok(()),
        EmbeddingPolicy::Copy => copy_io_layers(out, d),
        EmbeddingPolicy::AverageReset => {
            let input_mean = match d.config.input_mode {
                InputMode::BinaryVector => Some(eca_input_mean(&d.config, plan.seed)?),
                InputMode::Token => None,
            };
            for (name, t) in average_embedding_reset(d, &cfg, input_mean.as_deref())? {
                out.set_tensor(&name, t)?;
            }
            Ok(())
        }
    }
}

/// Input and output layer names for a config's input mode.
fn io_names(cfg: &ModelConfig) -> [&'static str; 3] {
    match cfg.input_mode {
        InputMode::Token => ["embed.tok", "unembed.w", "unembed.b"],
        InputMode::BinaryVector => ["proj.in.w", "proj.out.w", "proj.out.b"],
    }
}

fn copy_io_layers(out: &mut Checkpoint, d: &Checkpoint) -> Result<()> {
    if d.config.input_mode != out.config.input_mode {
        return Err(Error::InvalidPlan(
            "copying embeddings across input modes; use average_reset".into(),
        ));
    }
    let dm = out.config.d_model;
    if d.config.d_model != dm {
        return Err(Error::TransferShape {
            name: "embed".into(),
            donor: vec![d.config.d_model],
            target: vec![dm],
        });
    }
    if out.config.input_mode == InputMode::BinaryVector {
        for name in ["proj.in.w", "proj.in.b", "proj.out.w", "proj.out.b"] {
            copy_from(out, d, name)?;
        }
        return Ok(());
    }
    // Overlapping vocabulary rows are copied; the rest keep their fresh values.
    let (vt, vd) = (out.config.vocab_size, d.config.vocab_size);
    let shared = vt.min(vd);
    let mut tok = out.tensor("embed.tok")?.clone();
    tok.data_mut()[..shared * dm].copy_from_slice(&d.tensor("embed.tok")?.data()[..shared * dm]);
    let mut w = out.tensor("unembed.w")?.clone();
    let dw = d.tensor("unembed.w")?.data();
    for r in 0..dm {
        w.data_mut()[r * vt..r * vt + shared].copy_from_slice(&dw[r * vd..r * vd + shared]);
    }
    let mut b = out.tensor("unembed.b")?.clone();
    b.data_mut()[..shared].copy_from_slice(&d.tensor("unembed.b")?.data()[..shared]);
    out.set_tensor("embed.tok", tok)?;
    out.set_tensor("unembed.w", w)?;
    out.set_tensor("unembed.b", b)?;
    Ok(())
}

/// Mean of `x` over traces of the donor's pretraining distribution.
fn eca_input_mean(cfg: &ModelConfig, seed: u64) -> Result<Vec<f32>> {
    let params = EcaParams {
        width: cfg.binary_width,
        steps: cfg.context_length,
        ..EcaParams::default()
    };
    let mut rng = rng::stream(seed, "surgery/eca-mean");
    let mut sum = vec![0f64; cfg.binary_width];
    let mut rows = 0usize;
    for _ in 0..32 {
        for row in gen_eca_trace(&params, &mut rng)? {
            for (s, &b) in sum.iter_mut().zip(&row) {
                *s += f64::from(b);
            }
            rows += 1;
        }
    }
    Ok(sum.into_iter().map(|s| (s / rows as f64) as f32).collect())
}

fn column_mean(t: &Tensor) -> Vec<f32> {
    let (r, c) = (t.rows(), t.cols());
    let mut m = vec![0f64; c];
    for i in 0..r {
        for (acc, &v) in m.iter_mut().zip(t.row(i)) {
            *acc += f64::from(v);
        }
    }
    m.into_iter().map(|v| (v / r as f64) as f32).collect()
}

fn mean(v: &[f32]) -> f32 {
    (v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64) as f32
}

/// Input/output layers for `target` built from the donor's average vectors.
///
/// Every embedding row becomes the donor's mean token embedding, every
/// output column the donor's mean output column, and every output bias the
/// mean donor bias. A binary-vector donor has no embedding table; its mean
/// embedding is `x̄·W_in + b_in` for the mean input `x̄` supplied in
/// `input_mean`. Positional embeddings are not touched.
pub fn average_embedding_reset(
    d: &Checkpoint,
    target: &ModelConfig,
    input_mean: Option<&[f32]>,
) -> Result<Vec<(String, Tensor)>> {
    let dm = target.d_model;
    if d.config.d_model != dm {
        return Err(Error::TransferShape {
            name: "embed".into(),
            donor: vec![d.config.d_model],
            target: vec![dm],
        });
    }
    let (emb, out_w, out_b) = match d.config.input_mode {
        InputMode::Token => (
            column_mean(d.tensor("embed.tok")?),
            d.tensor("unembed.w")?,
            d.tensor("unembed.b")?,
        ),
        InputMode::BinaryVector => {
            let xm = input_mean.ok_or_else(|| {
                Error::InvalidPlan("binary donor needs the mean input vector".into())
            })?;
            let w = d.tensor("proj.in.w")?;
            let b = d.tensor("proj.in.b")?;
            if xm.len() != w.rows() {
                return Err(Error::InvalidParams("mean input width mismatch".into()));
            }
            let mut e: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
            for (i, &x) in xm.iter().enumerate() {
                for (acc, &wv) in e.iter_mut().zip(w.row(i)) {
                    *acc += f64::from(x) * f64::from(wv);
                }
            }
            (
                e.into_iter().map(|v| v as f32).collect(),
                d.tensor("proj.out.w")?,
                d.tensor("proj.out.b")?,
            )
        }
    };
    // Mean over output columns: transpose view of a [d×V] matrix.
    let v_d = out_w.cols();
    let out_col: Vec<f32> = (0..dm).map(|r| mean(&out_w.data()[r * v_d..(r + 1) * v_d])).collect();
    let out_bias = mean(out_b.data());

    let [in_name, w_name, b_name] = io_names(target);
    let v_t = target.output_width();
    let mut result = Vec::new();
    match target.input_mode {
        InputMode::Token => {
            let data = (0..v_t).flat_map(|_| emb.iter().copied()).collect();
            result.push((in_name.to_string(), Tensor::new(vec![v_t, dm], data)?));
        }
        // A binary target keeps its fresh input projection and takes the
        // mean embedding as the projection bias.
        InputMode::BinaryVector => {
            result.push(("proj.in.b".to_string(), Tensor::new(vec![dm], emb.clone())?));
        }
    }
    let w_data = out_col.iter().flat_map(|&c| std::iter::repeat_n(c, v_t)).collect();
    result.push((w_name.to_string(), Tensor::new(vec![dm, v_t], w_data)?));
    result.push((b_name.to_string(), Tensor::full(&[v_t], out_bias)));
    Ok(result)
}

/// Copies the first `target_ctx` positions when the donor has enough of them,
/// otherwise returns a fresh table from the `seed` init stream.
pub fn transfer_positional(donor_pos: &Tensor, target_ctx: usize, d_model: usize, seed: u64) -> Result<Tensor> {
    if donor_pos.cols() != d_model {
        return Err(Error::TransferShape {
            name: "embed.pos".into(),
            donor: donor_pos.shape().to_vec(),
            target: vec![target_ctx, d_model],
        });
    }
    if donor_pos.rows() >= target_ctx {
        let data = donor_pos.data()[..target_ctx * d_model].to_vec();
        Ok(Tensor::new(vec![target_ctx, d_model], data)?)
    } else {
        Ok(init_tensor("embed.pos", &[target_ctx, d_model], seed))
    }
}

fn in_scope(name: &str, scope: &BTreeSet<ComponentGroup>) -> bool {
    group_of(name).map(|g| scope.contains(&g)).unwrap_or(false)
}

fn map_tensors(
    ckpt: &Checkpoint,
    mut f: impl FnMut(&str, &Tensor) -> Option<Tensor>,
) -> Checkpoint {
    let mut out = ckpt.clone();
    for (name, t) in ckpt.tensors() {
        if let Some(new) = f(name, t) {
            out.set_tensor(name, new).expect("shape preserved");
        }
    }
    out
}

/// Adds iid `N(0, σ²)` noise to every element of the in-scope tensors.
pub fn perturb_noise(
    ckpt: &Checkpoint,
    sigma: f32,
    seed: u64,
    scope: &BTreeSet<ComponentGroup>,
) -> Result<Checkpoint> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParams(format!("sigma {sigma} must be ≥ 0")));
    }
    if sigma == 0.0 {
        return Ok(ckpt.clone());
    }
    let normal = Normal::new(0.0f32, sigma).expect("valid sigma");
    Ok(map_tensors(ckpt, |name, t| {
        in_scope(name, scope).then(|| {
            let mut rng = rng::stream(seed, &format!("noise/{name}"));
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            t
        })
    }))
}

/// Permutes the flattened elements of each in-scope tensor independently.
pub fn perturb_shuffle(ckpt: &Checkpoint, seed: u64, scope: &BTreeSet<ComponentGroup>) -> Checkpoint {
    map_tensors(ckpt, |name, t| {
        in_scope(name, scope).then(|| {
            let mut rng = rng::stream(seed, &format!("shuffle/{name}"));
            let mut t = t.clone();
            t.data_mut().shuffle(&mut rng);
            t
        })
    })
}

fn layer_key(name: &str) -> String {
    match name.strip_prefix("layer.").and_then(|r| r.split_once('.')) {
        Some((i, _)) => format!("layer.{i}"),
        None => "embedding".into(),
    }
}

/// Permutes the concatenated in-scope parameters of each layer jointly, so
/// values may move between tensors of the same layer.
pub fn perturb_shuffle_per_layer(
    ckpt: &Checkpoint,
    seed: u64,
    scope: &BTreeSet<ComponentGroup>,
) -> Checkpoint {
    let mut pools: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for name in ckpt.names().filter(|n| in_scope(n, scope)) {
        pools.entry(layer_key(name)).or_default().push(name);
    }
    let mut out = ckpt.clone();
    for (key, names) in pools {
        let mut flat: Vec<f32> = names
            .iter()
            .flat_map(|n| ckpt.tensors()[*n].data().iter().copied())
            .collect();
        flat.shuffle(&mut rng::stream(seed, &format!("shuffle-layer/{key}")));
        let mut offset = 0;
        for n in names {
            let mut t = ckpt.tensors()[n].clone();
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
            out.set_tensor(n, t).expect("shape preserved");
        }
    }
    out
}

/// `(acc_x − acc_rand) / (acc_pre − acc_rand)`: 1 for the unperturbed
/// pretrained model, 0 for random initialisation.
pub fn relative_improvement(acc_x: f64, acc_rand: f64, acc_pre: f64) -> Result<f64> {
    let denom = acc_pre - acc_rand;
    if denom == 0.0 || !denom.is_finite() || !acc_x.is_finite() {
        return Err(Error::UndefinedScore(denom));
    }
    Ok((acc_x - acc_rand) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_toml_shape() {
        let p = TransferPlan::compose("set", "eca", 3);
        let json = p.to_json();
        let back: TransferPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        assert_eq!(p.label(), "E:fresh A:set F:eca");
        assert_eq!(p.digest(), back.digest());
    }

    #[test]
    fn average_reset_needs_embedding_donor() {
        let p = TransferPlan {
            embedding_policy: EmbeddingPolicy::AverageReset,
            ..TransferPlan::attention_only("x", 0)
        };
        assert!(matches!(p.validate(), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn per_layer_shuffle_keeps_layer_multiset() {
        let c = init_random(&ModelConfig::small(8, 10), 1).unwrap();
        let scope = BTreeSet::from([ComponentGroup::Attention]);
        let s = perturb_shuffle_per_layer(&c, 5, &scope);
        let collect = |ck: &Checkpoint| {
            let mut v: Vec<f32> = ck
                .tensors()
                .iter()
                .filter(|(n, _)| n.starts_with("layer.0.") && in_scope(n, &scope))
                .flat_map(|(_, t)| t.data().to_vec())
                .collect();
            v.sort_by(f32::total_cmp);
            v
        };
        assert_eq!(collect(&c), collect(&s));
        assert!(!c.bit_eq(&s));
        assert!(c.tensor("layer.0.mlp.w1").unwrap().bit_eq(s.tensor("layer.0.mlp.w1").unwrap()));
    }
}
