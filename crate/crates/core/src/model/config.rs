use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryKind;

/// How decoder layers read the encoder stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// Every decoder layer attends to every encoder layer.
    #[default]
    FullyConnected,
    /// Decoder layer `i` attends to encoder layer `i` only.
    Single,
    /// Decoder layers attend to a subset of encoder layers.
    Skipped,
    /// Fully connected, with residual additions between encoder layers.
    ResidualEncoder,
    /// Fully connected, with residual additions in both stacks.
    ResidualEncdec,
}

impl Connectivity {
    pub const ALL: [Connectivity; 5] = [
        Connectivity::FullyConnected,
        Connectivity::Single,
        Connectivity::Skipped,
        Connectivity::ResidualEncoder,
        Connectivity::ResidualEncdec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Connectivity::FullyConnected => "fully_connected",
            Connectivity::Single => "single",
            Connectivity::Skipped => "skipped",
            Connectivity::ResidualEncoder => "residual_encoder",
            Connectivity::ResidualEncdec => "residual_encdec",
        }
    }
}

/// `(connectivity, layers)` for each alternative wiring compared against the
/// fully connected 3-layer model.
pub const CONNECTIVITY_GRID: [(Connectivity, usize); 7] = [
    (Connectivity::Single, 3),
    (Connectivity::Skipped, 3),
    (Connectivity::ResidualEncoder, 3),
    (Connectivity::ResidualEncdec, 3),
    (Connectivity::ResidualEncoder, 6),
    (Connectivity::ResidualEncdec, 6),
    (Connectivity::FullyConnected, 6),
];

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Connectivity::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown connectivity `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Learned key/value slots appended to encoder self-attention.
    pub memory_slots: usize,
    pub d_feat: usize,
    pub vocab_size: usize,
    /// Longest caption in tokens, including START and END.
    pub max_len: usize,
    /// Feed-forward inner width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub connectivity: Connectivity,
    /// Encoder layers read by each decoder layer under `skipped`; derived
    /// from layer parity when absent.
    pub skipped_sources: Option<Vec<Vec<usize>>>,
    pub use_geometry: bool,
    pub use_lam: bool,
    pub use_background: bool,
    pub geometry_kind: GeometryKind,
    /// Geometry projections: 1 (shared) or `heads`.
    pub geometry_heads: usize,
    pub dropout: f64,
    /// Divide the gated sum over encoder layers by its square-root count.
    pub meshed_scale: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 3,
            memory_slots: 8,
            d_feat: 64,
            vocab_size: 0,
            max_len: 22,
            ff_mult: 4,
            connectivity: Connectivity::FullyConnected,
            skipped_sources: None,
            use_geometry: true,
            use_lam: true,
            use_background: true,
            geometry_kind: GeometryKind::Ratio,
            geometry_heads: 4,
            dropout: 0.1,
            meshed_scale: true,
            ln_eps: 1e-6,
        }
    }
}

/// Resolved wiring between the two stacks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    /// Encoder layers read by each decoder layer.
    pub sources: Vec<Vec<usize>>,
    pub residual_encoder: bool,
    pub residual_decoder: bool,
}

impl ModelConfig {
    /// Published model size.
    pub fn published_scale() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            memory_slots: 40,
            d_feat: 2048,
            geometry_heads: 8,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(8) || self.d_model == 0 {
            return fail(format!("d_model {} is not a positive multiple of 8", self.d_model));
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} is below 3", self.max_len));
        }
        if self.vocab_size <= crate::data::UNK {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.d_feat == 0 || self.ff_mult == 0 {
            return fail("d_feat and ff_mult must be positive".into());
        }
        if self.use_geometry && self.geometry_heads != 1 && self.geometry_heads != self.heads {
            return fail(format!(
                "geometry_heads must be 1 or {} (got {})",
                self.heads, self.geometry_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps >= 0.0) {
            return fail("ln_eps must be non-negative".into());
        }
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<Plan> {
        let l = self.layers;
        let sources: Vec<Vec<usize>> = match self.connectivity {
            Connectivity::Single => (0..l).map(|i| vec![i]).collect(),
            Connectivity::Skipped => match &self.skipped_sources {
                Some(s) => s.clone(),
                None => (0..l).map(|i| (0..l).filter(|j| j % 2 == i % 2).collect()).collect(),
            },
            _ => (0..l).map(|_| (0..l).collect()).collect(),
        };
        if sources.len() != l {
            return Err(Error::Config(format!(
                "connectivity lists {} decoder layers, model has {l}",
                sources.len()
            )));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Config(format!("decoder layer {i} reads no encoder layer")));
            }
            if let Some(&bad) = s.iter().find(|&&j| j >= l) {
                return Err(Error::Config(format!("decoder layer {i} reads missing encoder layer {bad}")));
            }
        }
        Ok(Plan {
            sources,
            residual_encoder: matches!(
                self.connectivity,
                Connectivity::ResidualEncoder | Connectivity::ResidualEncdec
            ),
            residual_decoder: self.connectivity == Connectivity::ResidualEncdec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: Connectivity) -> ModelConfig {
        ModelConfig {
            connectivity: c,
            vocab_size: 10,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn plans_for_three_layers() {
        assert_eq!(cfg(Connectivity::FullyConnected).plan().unwrap().sources, vec![vec![0, 1, 2]; 3]);
        assert_eq!(cfg(Connectivity::Single).plan().unwrap().sources, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(
            cfg(Connectivity::Skipped).plan().unwrap().sources,
            vec![vec![0, 2], vec![1], vec![0, 2]]
        );
        let p = cfg(Connectivity::ResidualEncdec).plan().unwrap();
        assert!(p.residual_encoder && p.residual_decoder);
    }

    #[test]
    fn empty_skip_subset_is_rejected() {
        let mut c = cfg(Connectivity::Skipped);
        c.skipped_sources = Some(vec![vec![0], vec![], vec![2]]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn head_divisibility() {
        let mut c = cfg(Connectivity::Single);
        c.heads = 5;
        assert!(c.validate().is_err());
        assert!(cfg(Connectivity::Single).validate().is_ok());
    }

    #[test]
    fn names_round_trip() {
        for c in Connectivity::ALL {
            assert_eq!(c.name().parse::<Connectivity>().unwrap(), c);
        }
    }
}
