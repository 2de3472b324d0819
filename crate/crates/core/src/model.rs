//! Multi-view classifier: per-view backbones grouped into streams, gated
//! fusion of the crop and whole-image streams, and an MLP head.
//!
//! Backbone per view: conv stem → patch embedding → stage 3 → downsample →
//! stage 4 → mean pool. Stage 4 runs at twice the embedding width.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{ConvStem, Downsample, MlpHead, PatchEmbed};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::seqmoe::{ExpertKind, Gate, Stage, StageConfig, StageDims, StageOptions};
use crate::ssm::SsmRoute;
use crate::tensor::{Real, Tensor};

/// Reduction of the conv stem along each spatial axis.
pub const STEM_REDUCTION: usize = 4;
/// Spatial factor of the downsampling between stages 3 and 4.
pub const DOWNSAMPLE_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    CropCc,
    CropMlo,
    WholeCc,
    WholeMlo,
}

impl View {
    pub const ALL: [View; 4] = [View::CropCc, View::CropMlo, View::WholeCc, View::WholeMlo];

    pub fn name(self) -> &'static str {
        match self {
            View::CropCc => "crop_cc",
            View::CropMlo => "crop_mlo",
            View::WholeCc => "whole_cc",
            View::WholeMlo => "whole_mlo",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Model layouts compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Crop and whole streams, experts composed without gates.
    A,
    /// One half-width stream per view, embeddings concatenated into the head.
    B,
    /// Crop and whole streams, gated SecMamba experts only.
    C,
    /// Crop and whole streams, gated SecMamba and attention experts.
    D,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn letter(self) -> char {
        match self {
            Preset::A => 'a',
            Preset::B => 'b',
            Preset::C => 'c',
            Preset::D => 'd',
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::A => "dual-stream, ungated experts",
            Preset::B => "four streams, ungated experts",
            Preset::C => "dual-stream, gated SecMamba experts",
            Preset::D => "dual-stream, gated SecMamba + attention experts",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Preset::A),
            "b" => Ok(Preset::B),
            "c" => Ok(Preset::C),
            "d" => Ok(Preset::D),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected one of a, b, c, d"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_pe: usize,
    pub d_ie: usize,
    pub d_hs: usize,
    /// Patch side in input pixels.
    pub patch: usize,
    pub n_heads: usize,
    /// Gate hidden width; `None` uses the width of the stage.
    pub d_g: Option<usize>,
    pub stem_channels: usize,
    pub image_size: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_pe: 64,
            d_ie: 64,
            d_hs: 16,
            patch: 16,
            n_heads: 4,
            d_g: None,
            stem_channels: 8,
            image_size: 224,
        }
    }
}

impl Dims {
    /// 64×64 images with 8-pixel patches: 64 tokens in stage 3, 16 in stage 4.
    pub fn toy() -> Self {
        Self {
            patch: 8,
            image_size: 64,
            ..Self::default()
        }
    }

    fn halved(self) -> Self {
        Self {
            d_pe: self.d_pe / 2,
            d_ie: self.d_ie / 2,
            d_g: self.d_g.map(|g| (g / 2).max(1)),
            ..self
        }
    }

    /// Tokens per view entering stage 3.
    pub fn tokens_stage3(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn tokens_stage4(&self) -> usize {
        self.tokens_stage3() / (DOWNSAMPLE_FACTOR * DOWNSAMPLE_FACTOR)
    }

    fn stage_dims(&self, widen: usize) -> StageDims {
        let d = self.d_pe * widen;
        StageDims {
            d,
            d_ie: self.d_ie * widen,
            d_hs: self.d_hs,
            n_heads: self.n_heads,
            d_g: self.d_g.map(|g| g * widen).unwrap_or(d),
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if [self.d_pe, self.d_ie, self.d_hs, self.patch, self.n_heads, self.stem_channels, self.image_size]
            .contains(&0)
            || self.d_g == Some(0)
        {
            return fail(format!("all widths must be positive: {self:?}"));
        }
        if self.patch % STEM_REDUCTION != 0 {
            return fail(format!("patch side {} must be a multiple of {STEM_REDUCTION}", self.patch));
        }
        if self.image_size % self.patch != 0 {
            return fail(format!("image size {} is not divisible by patch side {}", self.image_size, self.patch));
        }
        if (self.image_size / self.patch) % DOWNSAMPLE_FACTOR != 0 {
            return fail(format!(
                "patch grid side {} is not divisible by the downsampling factor {DOWNSAMPLE_FACTOR}",
                self.image_size / self.patch
            ));
        }
        if self.d_pe % self.n_heads != 0 {
            return fail(format!("d_pe {} is not divisible into {} heads", self.d_pe, self.n_heads));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub stage3: StageConfig,
    pub stage4: StageConfig,
    pub dims: Dims,
    pub freeze_stem: bool,
}

impl ModelConfig {
    pub fn preset(preset: Preset, dims: Dims) -> Self {
        let (stage3, stage4) = match preset {
            Preset::A | Preset::B => (StageConfig::runs(5, 5, false), StageConfig::runs(3, 2, false)),
            Preset::C => (StageConfig::runs(5, 0, true), StageConfig::runs(3, 0, true)),
            Preset::D => (StageConfig::runs(5, 5, true), StageConfig::runs(3, 2, true)),
        };
        Self {
            preset,
            stage3,
            stage4,
            dims,
            freeze_stem: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.preset == Preset::B {
            let half = self.dims.halved();
            if half.d_pe == 0 || half.d_ie == 0 || half.d_pe % half.n_heads != 0 {
                return Err(Error::Config(format!(
                    "preset b halves d_pe to {} which cannot hold {} heads",
                    half.d_pe, half.n_heads
                )));
            }
        }
        if self.stage3.experts.is_empty() || self.stage4.experts.is_empty() {
            return Err(Error::Config("every stage needs at least one expert".into()));
        }
        Ok(())
    }

    /// Stream layout as `(name, views consumed, dims)`.
    fn streams(&self) -> Vec<(&'static str, Vec<View>, Dims)> {
        match self.preset {
            Preset::B => View::ALL
                .iter()
                .map(|&v| (v.name(), vec![v], self.dims.halved()))
                .collect(),
            _ => vec![
                ("crop", vec![View::CropCc, View::CropMlo], self.dims),
                ("whole", vec![View::WholeCc, View::WholeMlo], self.dims),
            ],
        }
    }

    /// Width of a single view embedding for a stream with `dims`.
    fn embedding_width(dims: &Dims) -> usize {
        2 * dims.d_pe
    }

    /// Width of the vector entering the head: one stream's width when the
    /// streams are fused, their total when concatenated.
    pub fn head_width(&self) -> usize {
        let widths = self
            .streams()
            .iter()
            .map(|(_, views, dims)| views.len() * Self::embedding_width(dims))
            .collect::<Vec<_>>();
        if self.has_fusion_gate() {
            widths[0]
        } else {
            widths.iter().sum()
        }
    }

    fn has_fusion_gate(&self) -> bool {
        self.preset != Preset::B
    }

    /// Parameter count predicted from the layout alone.
    pub fn analytic_param_count(&self) -> usize {
        self.analytic_breakdown().iter().map(|(_, n)| n).sum()
    }

    pub fn analytic_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (name, _, dims) in self.streams() {
            let s3 = dims.stage_dims(1);
            let s4 = dims.stage_dims(2);
            out.push((format!("{name}.stem"), ConvStem::param_count(1, dims.stem_channels)));
            out.push((
                format!("{name}.embed"),
                PatchEmbed::param_count(dims.patch / STEM_REDUCTION, dims.stem_channels, dims.d_pe),
            ));
            out.push((format!("{name}.stage3"), Stage::param_count(&self.stage3, s3)));
            out.push((format!("{name}.down"), Downsample::param_count(dims.d_pe, DOWNSAMPLE_FACTOR)));
            out.push((format!("{name}.stage4"), Stage::param_count(&self.stage4, s4)));
        }
        let width = self.head_width();
        if self.has_fusion_gate() {
            out.push(("fusion".into(), Gate::param_count(width, self.dims.d_pe)));
        }
        out.push(("head".into(), MlpHead::param_count(width, self.dims.d_pe)));
        out
    }
}

/// Backbone shared by the views of one stream.
pub struct Stream {
    pub name: String,
    pub views: Vec<View>,
    pub dims: Dims,
    pub stem: ConvStem,
    pub embed: PatchEmbed,
    pub stage3: Stage,
    pub down: Downsample,
    pub stage4: Stage,
}

/// Intermediate activations of one view.
pub struct ViewTrace<'t, T: Real> {
    pub view: View,
    pub stem: Var<'t, T>,
    pub tokens: Var<'t, T>,
    pub stage3: Var<'t, T>,
    pub downsampled: Var<'t, T>,
    pub stage4: Var<'t, T>,
    pub embedding: Var<'t, T>,
}

impl Stream {
    fn new<T: Real>(store: &mut ParamStore<T>, config: &ModelConfig, name: &str, views: Vec<View>, dims: Dims, seed: u64) -> Result<Self> {
        let scoped = |part: &str| Init::scoped(seed, &format!("{name}.{part}"));
        let stem = ConvStem::new(store, &format!("{name}.stem"), 1, dims.stem_channels, &mut scoped("stem"));
        let embed = PatchEmbed::new(
            store,
            &format!("{name}.embed"),
            dims.patch / STEM_REDUCTION,
            dims.stem_channels,
            dims.d_pe,
            &mut scoped("embed"),
        );
        let stage3 = Stage::new(store, &format!("{name}.stage3"), &config.stage3, dims.stage_dims(1), &mut scoped("stage3"))?;
        let down = Downsample::new(store, &format!("{name}.down"), dims.d_pe, DOWNSAMPLE_FACTOR, &mut scoped("down"));
        let stage4 = Stage::new(store, &format!("{name}.stage4"), &config.stage4, dims.stage_dims(2), &mut scoped("stage4"))?;
        Ok(Self {
            name: name.to_string(),
            views,
            dims,
            stem,
            embed,
            stage3,
            down,
            stage4,
        })
    }

    /// `[H × W × 1] → [2·d_pe]`
    pub fn embed_view<'t, T: Real>(&self, p: &Bound<'t, T>, image: Var<'t, T>, opts: &ForwardOptions) -> Result<Var<'t, T>> {
        Ok(self.trace_view(p, View::CropCc, image, opts)?.embedding)
    }

    pub fn trace_view<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        view: View,
        image: Var<'t, T>,
        opts: &ForwardOptions,
    ) -> Result<ViewTrace<'t, T>> {
        let stage_opts = StageOptions {
            route: opts.route,
            force_gate: opts.force_stage_gates,
        };
        let stem = self.stem.forward(p, image)?;
        let tokens = self.embed.forward(p, stem)?;
        let stage3 = self.stage3.forward(p, tokens, stage_opts)?;
        let downsampled = self.down.forward(p, stage3)?;
        let stage4 = self.stage4.forward(p, downsampled, stage_opts)?;
        let embedding = stage4.mean_pool()?;
        Ok(ViewTrace {
            view,
            stem,
            tokens,
            stage3,
            downsampled,
            stage4,
            embedding,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub route: SsmRoute,
    /// Replace every SeqMoE gate by this constant.
    pub force_stage_gates: Option<f64>,
    /// Replace the crop/whole fusion gate by this constant.
    pub force_fusion: Option<f64>,
}

pub struct ModelTrace<'t, T: Real> {
    pub views: Vec<ViewTrace<'t, T>>,
    /// Per-stream concatenation of its view embeddings.
    pub streams: Vec<Var<'t, T>>,
    pub fusion_gate: Option<Var<'t, T>>,
    pub fused: Var<'t, T>,
    pub logits: Var<'t, T>,
}

pub struct Model {
    pub config: ModelConfig,
    pub streams: Vec<Stream>,
    pub fusion: Option<Gate>,
    pub head: MlpHead,
}

/// Parameter totals per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub components: Vec<(String, usize)>,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.components {
            writeln!(f, "{name:<16} {n:>10}")?;
        }
        write!(f, "{:<16} {:>10} ({} trainable)", "total", self.total, self.trainable)
    }
}

/// Builds the model and its freshly initialized parameters.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut streams = Vec::new();
    for (name, views, dims) in config.streams() {
        streams.push(Stream::new(&mut store, config, name, views, dims, seed)?);
    }
    let width = config.head_width();
    let fusion = config
        .has_fusion_gate()
        .then(|| Gate::new(&mut store, "fusion", width, config.dims.d_pe, &mut Init::scoped(seed, "fusion")));
    let head = MlpHead::new(&mut store, "head", width, config.dims.d_pe, &mut Init::scoped(seed, "head"));
    let model = Model {
        config: config.clone(),
        streams,
        fusion,
        head,
    };
    if config.freeze_stem {
        for s in &model.streams {
            s.stem.set_frozen(&mut store, true);
        }
    }
    let report = model.param_report(&store);
    log::info!("preset {} parameters:\n{report}", config.preset);
    Ok((model, store))
}

impl Model {
    pub fn param_report<T: Real>(&self, store: &ParamStore<T>) -> ParamReport {
        let mut components = Vec::new();
        for s in &self.streams {
            for part in ["stem", "embed", "stage3", "down", "stage4"] {
                let name = format!("{}.{part}", s.name);
                components.push((name.clone(), store.count_with_prefix(&format!("{name}."))));
            }
        }
        if self.fusion.is_some() {
            components.push(("fusion".into(), store.count_with_prefix("fusion.")));
        }
        components.push(("head".into(), store.count_with_prefix("head.")));
        ParamReport {
            total: store.scalar_count(),
            trainable: store.trainable_count(),
            components,
        }
    }

    /// Number of SeqMoE gates, counted per stream.
    pub fn stage_gates_per_stream(&self) -> Vec<usize> {
        self.streams
            .iter()
            .map(|s| s.stage3.gate.is_some() as usize + s.stage4.gate.is_some() as usize)
            .collect()
    }

    pub fn expert_count(&self, kind: ExpertKind) -> usize {
        self.streams
            .iter()
            .map(|s| s.stage3.config().count(kind) + s.stage4.config().count(kind))
            .sum()
    }

    fn check_views<T: Real>(&self, views: &[Tensor<T>]) -> Result<()> {
        if views.len() < View::ALL.len() {
            return Err(Error::Input(format!("missing view {}", View::ALL[views.len()])));
        }
        if views.len() > View::ALL.len() {
            return Err(Error::Input(format!("expected 4 views, got {}", views.len())));
        }
        let s = self.config.dims.image_size;
        for (v, img) in View::ALL.iter().zip(views) {
            if img.is_empty() {
                return Err(Error::Input(format!("missing view {v}")));
            }
            if img.shape() != [s, s, 1] {
                return Err(Error::Input(format!(
                    "view {v} has shape {:?}, expected [{s}, {s}, 1]",
                    img.shape()
                )));
            }
        }
        Ok(())
    }

    /// Logits `[2]` for one sample; `views` are ordered as [`View::ALL`].
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, views: &[Tensor<T>], opts: &ForwardOptions) -> Result<Var<'t, T>> {
        Ok(self.trace(p, views, opts)?.logits)
    }

    pub fn trace<'t, T: Real>(&self, p: &Bound<'t, T>, views: &[Tensor<T>], opts: &ForwardOptions) -> Result<ModelTrace<'t, T>> {
        self.check_views(views)?;
        let tape = p.tape();
        let mut view_traces = Vec::with_capacity(4);
        let mut stream_out = Vec::with_capacity(self.streams.len());
        for s in &self.streams {
            let mut joined: Option<Var<'t, T>> = None;
            for &v in &s.views {
                let image = tape.constant(views[v.index()].clone());
                let t = s.trace_view(p, v, image, opts)?;
                joined = Some(match joined {
                    None => t.embedding,
                    Some(acc) => acc.concat(t.embedding)?,
                });
                view_traces.push(t);
            }
            stream_out.push(joined.expect("stream consumes at least one view"));
        }

        let (fusion_gate, fused) = match &self.fusion {
            Some(gate) => {
                let [crop, whole] = stream_out[..] else {
                    return Err(Error::Config("fusion expects exactly two streams".into()));
                };
                let (g, fused) = fuse_streams(p, gate, crop, whole, opts.force_fusion)?;
                (Some(g), fused)
            }
            None => {
                let mut it = stream_out.iter().copied();
                let mut acc = it.next().expect("at least one stream");
                for s in it {
                    acc = acc.concat(s)?;
                }
                (None, acc)
            }
        };
        let logits = self.head.forward(p, fused)?;
        Ok(ModelTrace {
            views: view_traces,
            streams: stream_out,
            fusion_gate,
            fused,
            logits,
        })
    }
}

/// `g·crop + (1 − g)·whole` with `g` from the fusion gate (or `force`).
/// Returns `(g, fused)`.
pub fn fuse_streams<'t, T: Real>(
    p: &Bound<'t, T>,
    gate: &Gate,
    crop: Var<'t, T>,
    whole: Var<'t, T>,
    force: Option<f64>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if crop.shape() != whole.shape() {
        return Err(Error::dim("fuse_streams", &crop.shape(), &whole.shape()));
    }
    let g = match force {
        Some(v) => p.tape().constant(Tensor::scalar(T::of(v))),
        None => gate.forward(p, crop, whole)?,
    };
    Ok((g, crate::seqmoe::gated_interpolate(crop, whole, g)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{grad_check_params, GradCheckOptions};

    fn tiny() -> Dims {
        Dims {
            d_pe: 4,
            d_ie: 4,
            d_hs: 2,
            patch: 8,
            n_heads: 2,
            d_g: None,
            stem_channels: 2,
            image_size: 16,
        }
    }

    fn images<T: Real>(size: usize, seed: u64) -> Vec<Tensor<T>> {
        let mut init = Init::scoped(seed, "images");
        (0..4)
            .map(|_| init.uniform::<f64>(&[size, size, 1], 0.5).map(|v| v + 0.5).cast())
            .collect()
    }

    fn logits(model: &Model, store: &ParamStore<f64>, views: &[Tensor<f64>], opts: &ForwardOptions) -> Tensor<f64> {
        let tape = Tape::inference();
        let p = Bound::new(&tape, store);
        model.forward(&p, views, opts).unwrap().value()
    }

    #[test]
    fn preset_layouts() {
        let d = ModelConfig::preset(Preset::D, tiny());
        assert_eq!(d.stage3.experts.len(), 10);
        assert_eq!(d.stage4.experts.len(), 5);
        assert_eq!(d.stage3.count(ExpertKind::Attention), 5);
        assert_eq!(d.stage4.count(ExpertKind::Attention), 2);
        let c = ModelConfig::preset(Preset::C, tiny());
        assert_eq!(c.stage3.count(ExpertKind::Attention) + c.stage4.count(ExpertKind::Attention), 0);
        assert!(c.stage3.gated && c.stage4.gated);
        for p in [Preset::A, Preset::B] {
            let cfg = ModelConfig::preset(p, tiny());
            assert!(!cfg.stage3.gated && !cfg.stage4.gated);
        }
        assert_eq!("D".parse::<Preset>().unwrap(), Preset::D);
        assert!("e".parse::<Preset>().is_err());
    }

    #[test]
    fn parameter_count_matches_analytic_formula() {
        for preset in Preset::ALL {
            let cfg = ModelConfig::preset(preset, tiny());
            let (model, store) = build_model::<f64>(&cfg, 0).unwrap();
            assert_eq!(store.scalar_count(), cfg.analytic_param_count(), "preset {preset}");
            let report = model.param_report(&store);
            assert_eq!(report.components.iter().map(|c| c.1).sum::<usize>(), report.total);
        }
    }

    #[test]
    fn full_preset_has_two_gates_per_stream() {
        let (model, store) = build_model::<f64>(&ModelConfig::preset(Preset::D, tiny()), 0).unwrap();
        assert_eq!(model.stage_gates_per_stream(), vec![2, 2]);
        let gate_sets = store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".gate.w_in") && !p.name.starts_with("fusion"))
            .count();
        assert_eq!(gate_sets, 4);
    }

    #[test]
    fn secmamba_only_preset_allocates_no_attention() {
        let (model, store) = build_model::<f64>(&ModelConfig::preset(Preset::C, tiny()), 0).unwrap();
        assert_eq!(model.expert_count(ExpertKind::Attention), 0);
        assert!(store.iter().all(|(_, p)| !p.name.contains("attention")));
        assert_eq!(model.expert_count(ExpertKind::SecMamba), 16);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::preset(Preset::D, tiny());
        let (_, a) = build_model::<f64>(&cfg, 11).unwrap();
        let (_, b) = build_model::<f64>(&cfg, 11).unwrap();
        let (_, c) = build_model::<f64>(&cfg, 12).unwrap();
        let same = |x: &ParamStore<f64>, y: &ParamStore<f64>| x.iter().zip(y.iter()).all(|((_, p), (_, q))| p.value == q.value);
        assert!(same(&a, &b));
        assert!(!same(&a, &c));
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let bad = [
            Dims { patch: 6, ..tiny() },
            Dims { image_size: 20, ..tiny() },
            Dims { image_size: 24, ..tiny() },
            Dims { n_heads: 3, ..tiny() },
            Dims { d_hs: 0, ..tiny() },
        ];
        for dims in bad {
            let r = build_model::<f64>(&ModelConfig::preset(Preset::D, dims), 0);
            assert!(matches!(r, Err(Error::Config(_))), "{dims:?}");
        }
        let r = build_model::<f64>(&ModelConfig::preset(Preset::B, Dims { n_heads: 4, ..tiny() }), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn token_path_at_full_resolution() {
        let dims = Dims::default();
        assert_eq!(dims.tokens_stage3(), 196);
        assert_eq!(dims.tokens_stage4(), 49);
        let cfg = ModelConfig {
            stage3: StageConfig::runs(1, 0, true),
            stage4: StageConfig::runs(1, 0, true),
            ..ModelConfig::preset(Preset::D, Dims { d_pe: 8, d_ie: 8, d_hs: 2, ..dims })
        };
        let (model, store) = build_model::<f32>(&cfg, 0).unwrap();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let s = &model.streams[0];
        let image = tape.constant(Tensor::zeros(&[224, 224, 1]));
        let t = s.trace_view(&p, View::CropCc, image, &ForwardOptions::default()).unwrap();
        assert_eq!(t.stem.shape(), vec![56, 56, 8]);
        assert_eq!(t.tokens.shape()[0], 196);
        assert_eq!(t.stage3.shape()[0], 196);
        assert_eq!(t.downsampled.shape()[0], 49);
        assert_eq!(t.stage4.shape(), vec![49, 16]);
        assert_eq!(t.embedding.shape(), vec![16]);
    }

    #[test]
    fn logits_have_two_entries_and_views_are_checked() {
        let cfg = ModelConfig::preset(Preset::B, Dims { n_heads: 1, ..tiny() });
        let (model, store) = build_model::<f64>(&cfg, 3).unwrap();
        let views = images(16, 1);
        assert_eq!(logits(&model, &store, &views, &Default::default()).shape(), &[2]);

        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let err = model.forward(&p, &views[..3], &Default::default()).unwrap_err();
        assert!(err.to_string().contains("whole_mlo"), "{err}");
        let mut wrong = views.clone();
        wrong[1] = Tensor::zeros(&[8, 8, 1]);
        let err = model.forward(&p, &wrong, &Default::default()).unwrap_err();
        assert!(err.to_string().contains("crop_mlo"), "{err}");
    }

    #[test]
    fn closed_gates_reduce_embedding_to_pooled_downsampled_tokens() {
        let (model, store) = build_model::<f64>(&ModelConfig::preset(Preset::D, tiny()), 4).unwrap();
        let views = images(16, 2);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let opts = ForwardOptions {
            force_stage_gates: Some(0.0),
            ..Default::default()
        };
        let trace = model.trace(&p, &views, &opts).unwrap();
        for v in &trace.views {
            assert_eq!(v.stage3.value(), v.tokens.value());
            let pooled = v.downsampled.mean_pool().unwrap().value();
            assert_eq!(v.embedding.value(), pooled);
        }
    }

    #[test]
    fn fusion_gate_contracts() {
        let (model, store) = build_model::<f64>(&ModelConfig::preset(Preset::D, tiny()), 5).unwrap();
        let gate = model.fusion.as_ref().unwrap();
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let mut init = Init::scoped(0, "fusion-test");
        let crop = tape.constant(init.uniform(&[16], 1.0));
        let whole = tape.constant(init.uniform(&[16], 1.0));

        let (_, forced) = fuse_streams(&p, gate, crop, whole, Some(1.0)).unwrap();
        assert_eq!(forced.value(), crop.value());

        let (g, avg) = fuse_streams(&p, gate, crop, whole, None).unwrap();
        assert_eq!(g.value().item(), 0.5);
        let c = crop.value();
        let w = whole.value();
        for i in 0..16 {
            assert_eq!(avg.value().data()[i], 0.5 * c.data()[i] + 0.5 * w.data()[i]);
        }

        let (_, same) = fuse_streams(&p, gate, crop, crop, None).unwrap();
        assert_eq!(same.value(), crop.value());

        let short = tape.constant(Tensor::zeros(&[8]));
        assert!(matches!(fuse_streams(&p, gate, crop, short, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ungated_and_gated_presets_differ_only_after_embedding() {
        let (ma, sa) = build_model::<f64>(&ModelConfig::preset(Preset::A, tiny()), 6).unwrap();
        let (md, sd) = build_model::<f64>(&ModelConfig::preset(Preset::D, tiny()), 6).unwrap();
        let views = images(16, 3);
        let ta = Tape::inference();
        let pa = Bound::new(&ta, &sa);
        let td = Tape::inference();
        let pd = Bound::new(&td, &sd);
        let a = ma.trace(&pa, &views, &Default::default()).unwrap();
        let d = md.trace(&pd, &views, &Default::default()).unwrap();
        for (va, vd) in a.views.iter().zip(&d.views) {
            assert_eq!(va.stem.value(), vd.stem.value());
            assert_eq!(va.tokens.value(), vd.tokens.value());
            assert_ne!(va.stage3.value(), vd.stage3.value());
        }
        // with every stage gate open the two presets compute the same thing
        let open = ForwardOptions {
            force_stage_gates: Some(1.0),
            ..Default::default()
        };
        let d_open = md.forward(&pd, &views, &open).unwrap().value();
        assert_eq!(d_open, a.logits.value());
    }

    #[test]
    fn routes_agree_end_to_end() {
        let (model, store) = build_model::<f64>(&ModelConfig::preset(Preset::D, tiny()), 7).unwrap();
        let views = images(16, 4);
        let scan = logits(&model, &store, &views, &Default::default());
        let conv = logits(
            &model,
            &store,
            &views,
            &ForwardOptions {
                route: SsmRoute::Convolution,
                ..Default::default()
            },
        );
        assert!(scan.max_abs_diff(&conv) < 1e-10);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            stage3: StageConfig::runs(1, 1, true),
            stage4: StageConfig::runs(1, 1, true),
            ..ModelConfig::preset(Preset::D, tiny())
        };
        let (model, store) = build_model::<f64>(&cfg, 8).unwrap();
        let views = images::<f64>(16, 5);
        let opts = GradCheckOptions {
            max_entries: Some(6),
            ..Default::default()
        };
        let r = grad_check_params(&store, &[], &opts, |p, _| {
            let out = model.forward(p, &views, &ForwardOptions::default())?;
            let w = p.tape().constant(Tensor::from_f64(&[2], &[1.0, -0.4])?);
            Ok(out.mul(w)?.sum())
        })
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn every_trainable_parameter_gets_a_finite_gradient() {
        // stage 4 needs more than one token for the state decay to matter
        let mut cfg = ModelConfig::preset(Preset::D, Dims { image_size: 32, ..tiny() });
        cfg.freeze_stem = true;
        let (model, store) = build_model::<f64>(&cfg, 9).unwrap();
        // open up the zero-initialized gate output rows
        let mut store = store;
        let mut init = Init::scoped(1, "gates");
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with("gate.w_out") {
                let shape = store.value(id).shape().to_vec();
                store.set(id, init.uniform(&shape, 0.5)).unwrap();
            }
        }
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let mut loss = None;
        for seed in 0..2 {
            let out = model.forward(&p, &images(32, seed), &Default::default()).unwrap().log_softmax().unwrap().select(0).unwrap();
            loss = Some(match loss {
                None => out,
                Some(l) => out.add(l).unwrap(),
            });
        }
        let mut g = tape.backward(loss.unwrap()).unwrap();
        let grads = p.gradients(&mut g);
        for (id, param) in store.iter() {
            match &grads[id.index()] {
                Some(g) => {
                    assert!(!param.frozen, "{}", param.name);
                    assert!(g.iter().all(|v| v.is_finite()), "{}", param.name);
                    assert!(g.iter().any(|&v| v != 0.0), "dead parameter {}", param.name);
                }
                None => assert!(param.frozen, "no gradient for {}", param.name),
            }
        }
    }
}
