use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Full-scale widths, scaled down by [`ModelSpec::with_width_multiplier`].
pub const FULL_HIDDEN_SIZE: usize = 4096;
pub const FULL_ATTN_HIDDEN: usize = 512;
pub const FULL_DCC_MID_WIDTH: usize = 2048;

/// The eleven individual temporal operators plus the hybrid family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    AvgPool,
    MaxPool,
    Tc,
    Pdc,
    Dcc,
    Lstm,
    Gru,
    NaiveSa,
    NonlinearSa,
    NonLocal,
    TransformerQ,
    Hybrid,
}

impl ModelKind {
    pub const OPERATORS: [ModelKind; 11] = [
        ModelKind::AvgPool,
        ModelKind::MaxPool,
        ModelKind::Tc,
        ModelKind::Pdc,
        ModelKind::Dcc,
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::NaiveSa,
        ModelKind::NonlinearSa,
        ModelKind::NonLocal,
        ModelKind::TransformerQ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AvgPool => "avgpool",
            ModelKind::MaxPool => "maxpool",
            ModelKind::Tc => "tc",
            ModelKind::Pdc => "pdc",
            ModelKind::Dcc => "dcc",
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::NaiveSa => "naive-sa",
            ModelKind::NonlinearSa => "nonlinear-sa",
            ModelKind::NonLocal => "nonlocal",
            ModelKind::TransformerQ => "transformer",
            ModelKind::Hybrid => "hybrid",
        }
    }

    /// Whether the operator's representation depends on frame order.
    pub fn is_temporal_dependent(self) -> bool {
        matches!(
            self,
            ModelKind::Tc | ModelKind::Pdc | ModelKind::Dcc | ModelKind::Lstm | ModelKind::Gru
        )
    }

    /// Stage chain an individual operator expands to. Convolutions are
    /// followed by average pooling; the others aggregate on their own.
    fn default_chain(self) -> Vec<Stage> {
        match self {
            ModelKind::AvgPool => vec![Stage::AvgPool],
            ModelKind::MaxPool => vec![Stage::MaxPool],
            ModelKind::Tc => vec![Stage::Tc, Stage::AvgPool],
            ModelKind::Pdc => vec![Stage::Pdc, Stage::AvgPool],
            ModelKind::Dcc => vec![Stage::Dcc, Stage::AvgPool],
            ModelKind::Lstm => vec![Stage::Lstm],
            ModelKind::Gru => vec![Stage::Gru],
            ModelKind::NaiveSa => vec![Stage::NaiveSa],
            ModelKind::NonlinearSa => vec![Stage::NonlinearSa],
            ModelKind::NonLocal => vec![Stage::NonLocal],
            ModelKind::TransformerQ => vec![Stage::TransformerQ],
            ModelKind::Hybrid => Vec::new(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One element of a model chain.
///
/// `Tc`, `Pdc` and `Dcc` always map a sequence to a sequence. `Lstm` and
/// `Gru` emit all hidden states when followed by another stage and act as the
/// aggregator (per [`RnnOutput`]) when they come last. The rest aggregate a
/// sequence into one vector and may only appear last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Tc,
    Pdc,
    Dcc,
    Lstm,
    Gru,
    AvgPool,
    MaxPool,
    NaiveSa,
    NonlinearSa,
    NonLocal,
    TransformerQ,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tc => "tc",
            Stage::Pdc => "pdc",
            Stage::Dcc => "dcc",
            Stage::Lstm => "lstm",
            Stage::Gru => "gru",
            Stage::AvgPool => "avgpool",
            Stage::MaxPool => "maxpool",
            Stage::NaiveSa => "naive_sa",
            Stage::NonlinearSa => "nonlinear_sa",
            Stage::NonLocal => "nonlocal",
            Stage::TransformerQ => "transformer",
        }
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, Stage::Tc | Stage::Pdc | Stage::Dcc | Stage::Lstm | Stage::Gru)
    }

    pub fn can_aggregate(self) -> bool {
        !matches!(self, Stage::Tc | Stage::Pdc | Stage::Dcc)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "tc" => Stage::Tc,
            "pdc" => Stage::Pdc,
            "dcc" => Stage::Dcc,
            "lstm" => Stage::Lstm,
            "gru" => Stage::Gru,
            "avgpool" | "avg" => Stage::AvgPool,
            "maxpool" | "max" => Stage::MaxPool,
            "naive-sa" | "naive_sa" => Stage::NaiveSa,
            "nonlinear-sa" | "nonlinear_sa" => Stage::NonlinearSa,
            "nonlocal" | "non-local" => Stage::NonLocal,
            "transformer" | "transformer-q" | "transformerq" => Stage::TransformerQ,
            other => return Err(Error::Config(format!("unknown stage `{other}`"))),
        })
    }
}

/// The six hybrid presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HybridPreset {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl HybridPreset {
    pub const ALL: [HybridPreset; 6] = [
        HybridPreset::M1,
        HybridPreset::M2,
        HybridPreset::M3,
        HybridPreset::M4,
        HybridPreset::M5,
        HybridPreset::M6,
    ];

    pub fn chain(self) -> Vec<Stage> {
        use Stage::*;
        match self {
            HybridPreset::M1 => vec![Lstm, TransformerQ],
            HybridPreset::M2 => vec![Dcc, TransformerQ],
            HybridPreset::M3 => vec![Lstm, Dcc, TransformerQ],
            HybridPreset::M4 => vec![Dcc, Lstm, TransformerQ],
            HybridPreset::M5 => vec![Dcc, Lstm],
            HybridPreset::M6 => vec![Lstm, Dcc, AvgPool],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HybridPreset::M1 => "m1",
            HybridPreset::M2 => "m2",
            HybridPreset::M3 => "m3",
            HybridPreset::M4 => "m4",
            HybridPreset::M5 => "m5",
            HybridPreset::M6 => "m6",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RnnOutput {
    LastHidden,
    AverageHidden,
}

impl FromStr for RnnOutput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "last" | "last-hidden" => Ok(RnnOutput::LastHidden),
            "avg" | "average" | "average-hidden" => Ok(RnnOutput::AverageHidden),
            other => Err(Error::Config(format!("unknown rnn output strategy `{other}`"))),
        }
    }
}

impl fmt::Display for RnnOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RnnOutput::LastHidden => "last",
            RnnOutput::AverageHidden => "average",
        })
    }
}

/// Every valid `--model` value.
pub const MODEL_NAMES: [&str; 17] = [
    "avgpool",
    "maxpool",
    "tc",
    "pdc",
    "dcc",
    "lstm",
    "gru",
    "naive-sa",
    "nonlinear-sa",
    "nonlocal",
    "transformer",
    "m1",
    "m2",
    "m3",
    "m4",
    "m5",
    "m6",
];

/// Declarative description of one temporal model and its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Preset name when the chain came from `m1`..`m6`.
    pub preset: Option<HybridPreset>,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub kernel_size: usize,
    /// Rate of the single TC convolution.
    pub tc_rate: usize,
    /// PDC branch rates and DCC per-layer rates.
    pub dilation_rates: Vec<usize>,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub rnn_output: RnnOutput,
    pub attn_hidden: usize,
    /// Projection width for Non-local / Transformer; `None` means half the stage input.
    pub proj_dim: Option<usize>,
    /// Width of the middle DCC layer; outer layers keep the stage input width.
    pub dcc_mid_width: usize,
    pub dropout: f64,
    pub chain: Vec<Stage>,
}

impl ModelSpec {
    /// Full-scale defaults for an individual operator.
    pub fn new(kind: ModelKind, feature_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind,
            preset: None,
            seq_len: 4,
            feature_dim,
            num_classes,
            kernel_size: 2,
            tc_rate: 1,
            dilation_rates: vec![1, 2, 4],
            hidden_size: FULL_HIDDEN_SIZE,
            num_layers: 1,
            rnn_output: RnnOutput::LastHidden,
            attn_hidden: FULL_ATTN_HIDDEN,
            proj_dim: None,
            dcc_mid_width: FULL_DCC_MID_WIDTH,
            dropout: 0.1,
            chain: kind.default_chain(),
        }
    }

    pub fn hybrid(chain: Vec<Stage>, feature_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            chain,
            ..Self::new(ModelKind::Hybrid, feature_dim, num_classes)
        }
    }

    pub fn preset(preset: HybridPreset, feature_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            preset: Some(preset),
            ..Self::hybrid(preset.chain(), feature_dim, num_classes)
        }
    }

    /// Parses a `--model` value: an operator name or `m1`..`m6`.
    pub fn from_name(name: &str, feature_dim: usize, num_classes: usize) -> Result<Self> {
        let n = name.trim().to_ascii_lowercase();
        if let Some(p) = HybridPreset::ALL.iter().find(|p| p.name() == n) {
            return Ok(Self::preset(*p, feature_dim, num_classes));
        }
        let kind = match n.as_str() {
            "avgpool" => ModelKind::AvgPool,
            "maxpool" => ModelKind::MaxPool,
            "tc" => ModelKind::Tc,
            "pdc" => ModelKind::Pdc,
            "dcc" => ModelKind::Dcc,
            "lstm" => ModelKind::Lstm,
            "gru" => ModelKind::Gru,
            "naive-sa" | "naivesa" => ModelKind::NaiveSa,
            "nonlinear-sa" | "nonlinearsa" => ModelKind::NonlinearSa,
            "nonlocal" | "non-local" => ModelKind::NonLocal,
            "transformer" | "transformer-q" | "transformerq" => ModelKind::TransformerQ,
            _ => {
                return Err(Error::Config(format!(
                    "unknown model kind `{name}`; valid kinds: {}",
                    MODEL_NAMES.join(", ")
                )))
            }
        };
        Ok(Self::new(kind, feature_dim, num_classes))
    }

    /// Scales hidden, attention and DCC widths from their full-scale values.
    pub fn with_width_multiplier(mut self, m: f64) -> Self {
        let scale = |full: usize| ((full as f64 * m).round() as usize).max(1);
        self.hidden_size = scale(FULL_HIDDEN_SIZE);
        self.attn_hidden = scale(FULL_ATTN_HIDDEN);
        self.dcc_mid_width = scale(FULL_DCC_MID_WIDTH);
        self
    }

    pub fn display_name(&self) -> String {
        match (self.kind, self.preset) {
            (ModelKind::Hybrid, Some(p)) => p.name().to_string(),
            (ModelKind::Hybrid, None) => {
                let names: Vec<_> = self.chain.iter().map(|s| s.name()).collect();
                format!("hybrid({})", names.join("+"))
            }
            (k, _) => k.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.feature_dim == 0 || self.kernel_size == 0 {
            return bad("seq-len, feature-dim and kernel-size must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num-classes must be positive".into());
        }
        if self.hidden_size == 0 || self.attn_hidden == 0 || self.dcc_mid_width == 0 {
            return bad("hidden, attention and DCC widths must be positive".into());
        }
        if self.num_layers == 0 {
            return bad("num-layers must be positive".into());
        }
        if self.tc_rate == 0 || self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return bad("dilation rates must be a nonempty list of positive integers".into());
        }
        if self.proj_dim == Some(0) {
            return bad("proj-dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.chain.contains(&Stage::Dcc) {
            for (i, &r) in self.dilation_rates.iter().enumerate() {
                if r != 1 << i {
                    return bad(format!(
                        "DCC layer {i} must use dilation rate {} (got {r})",
                        1usize << i
                    ));
                }
            }
        }
        let Some((last, body)) = self.chain.split_last() else {
            return bad("model chain is empty".into());
        };
        if !last.can_aggregate() {
            return bad(format!(
                "chain ends with sequence-to-sequence stage `{}`; add an aggregator",
                last.name()
            ));
        }
        if let Some(s) = body.iter().find(|s| !s.is_sequence()) {
            return bad(format!("aggregator `{}` may only appear last in a chain", s.name()));
        }
        if self.kind != ModelKind::Hybrid && self.chain != self.kind.default_chain() {
            return bad(format!("chain does not match model kind `{}`", self.kind));
        }
        Ok(())
    }

    /// Canonical text form; two specs are interchangeable iff these match.
    pub fn canonical(&self) -> String {
        let chain: Vec<_> = self.chain.iter().map(|s| s.name()).collect();
        let rates: Vec<_> = self.dilation_rates.iter().map(|r| r.to_string()).collect();
        format!(
            "kind={};chain={};L={};d={};K={};s={};tc_rate={};rates={};hidden={};layers={};rnn_output={};d1={};dm={};dcc_mid={};dropout={}",
            self.kind,
            chain.join("+"),
            self.seq_len,
            self.feature_dim,
            self.num_classes,
            self.kernel_size,
            self.tc_rate,
            rates.join(","),
            self.hidden_size,
            self.num_layers,
            self.rnn_output,
            self.attn_hidden,
            self.proj_dim.map_or("auto".to_string(), |v| v.to_string()),
            self.dcc_mid_width,
            self.dropout,
        )
    }

    /// 64-bit FNV-1a digest of [`ModelSpec::canonical`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    /// Output widths of the classifier: background plus `num_classes`.
    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    /// Parameter-name prefix of each stage; repeated stages carry their chain index.
    pub fn stage_prefixes(&self) -> Vec<String> {
        self.chain
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if self.chain.iter().filter(|t| *t == s).count() > 1 {
                    format!("{}{i}", s.name())
                } else {
                    s.name().to_string()
                }
            })
            .collect()
    }

    pub(crate) fn proj_dim_for(&self, d_in: usize) -> usize {
        self.proj_dim.unwrap_or((d_in / 2).max(1))
    }

    pub(crate) fn dcc_widths(&self, d_in: usize) -> Vec<usize> {
        let n = self.dilation_rates.len();
        (0..n)
            .map(|i| if i == 1 && n > 2 { self.dcc_mid_width } else { d_in })
            .collect()
    }

    /// Representation width after each stage.
    pub fn stage_dims(&self) -> Vec<usize> {
        let mut d = self.feature_dim;
        self.chain
            .iter()
            .map(|s| {
                d = match s {
                    Stage::Lstm | Stage::Gru => self.hidden_size,
                    Stage::Dcc => *self.dcc_widths(d).last().unwrap_or(&d),
                    _ => d,
                };
                d
            })
            .collect()
    }

    /// Width of the representation fed to the classifier.
    pub fn repr_dim(&self) -> usize {
        self.stage_dims().last().copied().unwrap_or(self.feature_dim)
    }

    /// Ordered parameter layout. Names and shapes depend only on the `ModelSpec`.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut d = self.feature_dim;
        let s = self.kernel_size;
        for (stage, prefix) in self.chain.iter().zip(self.stage_prefixes()) {
            let mut w = |name: String, rows, cols| out.push(ParamInfo::weight(name, rows, cols));
            match stage {
                Stage::AvgPool | Stage::MaxPool => {}
                Stage::Tc => {
                    w(format!("{prefix}.W"), s * d, d);
                    out.push(ParamInfo::bias(format!("{prefix}.b"), d));
                }
                Stage::Pdc => {
                    let n = self.dilation_rates.len();
                    for j in 0..n {
                        out.push(ParamInfo::weight(format!("{prefix}.branch{j}.W"), s * d, d));
                        out.push(ParamInfo::bias(format!("{prefix}.branch{j}.b"), d));
                    }
                    out.push(ParamInfo::weight(format!("{prefix}.reduce.W"), n * d, d));
                    out.push(ParamInfo::bias(format!("{prefix}.reduce.b"), d));
                }
                Stage::Dcc => {
                    let mut prev = d;
                    for (i, width) in self.dcc_widths(d).into_iter().enumerate() {
                        out.push(ParamInfo::weight(
                            format!("{prefix}.layer{i}.conv.W"),
                            s * prev,
                            width,
                        ));
                        out.push(ParamInfo::bias(format!("{prefix}.layer{i}.conv.b"), width));
                        out.push(ParamInfo::weight(format!("{prefix}.layer{i}.res.W"), prev, width));
                        out.push(ParamInfo::bias(format!("{prefix}.layer{i}.res.b"), width));
                        prev = width;
                    }
                }
                Stage::Lstm => {
                    let h = self.hidden_size;
                    let mut input = d;
                    for l in 0..self.num_layers {
                        for gate in ["i", "g", "c", "o"] {
                            out.push(ParamInfo::weight(format!("{prefix}.l{l}.W_{gate}"), input, h));
                            out.push(ParamInfo::weight(format!("{prefix}.l{l}.U_{gate}"), h, h));
                            if gate != "c" {
                                out.push(ParamInfo::weight(format!("{prefix}.l{l}.V_{gate}"), 1, h));
                            }
                            out.push(ParamInfo::bias(format!("{prefix}.l{l}.b_{gate}"), h));
                        }
                        input = h;
                    }
                }
                Stage::Gru => {
                    let h = self.hidden_size;
                    let mut input = d;
                    for l in 0..self.num_layers {
                        for gate in ["r", "h", "z"] {
                            out.push(ParamInfo::weight(format!("{prefix}.l{l}.W_{gate}"), input, h));
                            out.push(ParamInfo::weight(format!("{prefix}.l{l}.U_{gate}"), h, h));
                        }
                        input = h;
                    }
                }
                Stage::NaiveSa => {
                    out.push(ParamInfo::weight(format!("{prefix}.W"), d, 1));
                    out.push(ParamInfo::bias(format!("{prefix}.b"), 1));
                }
                Stage::NonlinearSa => {
                    let d1 = self.attn_hidden;
                    out.push(ParamInfo::weight(format!("{prefix}.U1"), d, d1));
                    out.push(ParamInfo::bias(format!("{prefix}.b1"), d1));
                    out.push(ParamInfo::weight(format!("{prefix}.U2"), d1, 1));
                    out.push(ParamInfo::bias(format!("{prefix}.b2"), 1));
                }
                Stage::NonLocal | Stage::TransformerQ => {
                    let dm = self.proj_dim_for(d);
                    out.push(ParamInfo::weight(format!("{prefix}.W_q"), d, dm));
                    out.push(ParamInfo::weight(format!("{prefix}.W_k"), d, dm));
                }
            }
            d = match stage {
                Stage::Lstm | Stage::Gru => self.hidden_size,
                Stage::Dcc => *self.dcc_widths(d).last().unwrap_or(&d),
                _ => d,
            };
        }
        out.push(ParamInfo::weight("head.W".into(), d, self.num_outputs()));
        out.push(ParamInfo::bias("head.b".into(), self.num_outputs()));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: ParamRole,
}

impl ParamInfo {
    fn weight(name: String, rows: usize, cols: usize) -> Self {
        ParamInfo {
            name,
            rows,
            cols,
            role: ParamRole::Weight,
        }
    }

    fn bias(name: String, cols: usize) -> Self {
        ParamInfo {
            name,
            rows: 1,
            cols,
            role: ParamRole::Bias,
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_their_definitions() {
        use Stage::*;
        assert_eq!(HybridPreset::M1.chain(), vec![Lstm, TransformerQ]);
        assert_eq!(HybridPreset::M2.chain(), vec![Dcc, TransformerQ]);
        assert_eq!(HybridPreset::M3.chain(), vec![Lstm, Dcc, TransformerQ]);
        assert_eq!(HybridPreset::M4.chain(), vec![Dcc, Lstm, TransformerQ]);
        assert_eq!(HybridPreset::M5.chain(), vec![Dcc, Lstm]);
        assert_eq!(HybridPreset::M6.chain(), vec![Lstm, Dcc, AvgPool]);
        for p in HybridPreset::ALL {
            ModelSpec::preset(p, 16, 2).validate().unwrap();
        }
    }

    #[test]
    fn chain_ending_in_sequence_stage_is_rejected() {
        let spec = ModelSpec::hybrid(vec![Stage::Lstm, Stage::Dcc], 8, 2);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = ModelSpec::hybrid(vec![Stage::AvgPool, Stage::Lstm], 8, 2);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn dcc_rates_must_double() {
        let mut spec = ModelSpec::new(ModelKind::Dcc, 8, 2);
        spec.dilation_rates = vec![1, 3, 4];
        assert!(spec.validate().is_err());
        // PDC rates are free
        let mut spec = ModelSpec::new(ModelKind::Pdc, 8, 2);
        spec.dilation_rates = vec![1, 3, 5];
        spec.validate().unwrap();
    }

    #[test]
    fn unknown_model_lists_valid_kinds() {
        let err = ModelSpec::from_name("wavenet", 8, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dcc") && msg.contains("m6"), "{msg}");
    }

    #[test]
    fn layout_is_pure_in_spec() {
        for name in MODEL_NAMES {
            let spec = ModelSpec::from_name(name, 16, 3).unwrap().with_width_multiplier(1.0 / 64.0);
            assert_eq!(spec.param_layout(), spec.clone().param_layout());
            let mut names: Vec<_> = spec.param_layout().into_iter().map(|p| p.name).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n, "duplicate names for {name}");
        }
    }

    #[test]
    fn width_multiplier_scales_all_widths() {
        let spec = ModelSpec::new(ModelKind::Dcc, 16, 2).with_width_multiplier(1.0 / 64.0);
        assert_eq!(spec.hidden_size, 64);
        assert_eq!(spec.attn_hidden, 8);
        assert_eq!(spec.dcc_mid_width, 32);
        assert_eq!(spec.dcc_widths(16), vec![16, 32, 16]);
    }

    #[test]
    fn fingerprint_tracks_hyperparameters() {
        let a = ModelSpec::new(ModelKind::Lstm, 16, 2);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.hidden_size = 8;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
