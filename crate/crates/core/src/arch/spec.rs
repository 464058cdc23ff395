use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four supported network families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Unet,
    MiUnet,
    IterNet,
    IterMiUnet,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [ArchKind::Unet, ArchKind::MiUnet, ArchKind::IterNet, ArchKind::IterMiUnet];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Unet => "unet",
            ArchKind::MiUnet => "miunet",
            ArchKind::IterNet => "iternet",
            ArchKind::IterMiUnet => "itermiunet",
        }
    }

    /// Display name as used in result tables.
    pub fn title(self) -> &'static str {
        match self {
            ArchKind::Unet => "Unet",
            ArchKind::MiUnet => "MiUnet",
            ArchKind::IterNet => "Iternet",
            ArchKind::IterMiUnet => "IterMiUnet",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, ArchKind::IterNet | ArchKind::IterMiUnet)
    }

    /// Whether the filter ladder shrinks with depth.
    pub fn is_reversed(self) -> bool {
        matches!(self, ArchKind::MiUnet | ArchKind::IterMiUnet)
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!("unknown architecture '{s}' (expected unet, miunet, iternet or itermiunet)"))
            })
    }
}

/// Filter counts per encoder level plus the bottleneck width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ladder {
    pub encoder: Vec<usize>,
    pub bottleneck: usize,
}

impl Ladder {
    pub fn new(encoder: &[usize], bottleneck: usize) -> Self {
        Ladder { encoder: encoder.to_vec(), bottleneck }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    fn widths(&self) -> impl Iterator<Item = usize> + '_ {
        self.encoder.iter().copied().chain(std::iter::once(self.bottleneck))
    }

    fn is_non_decreasing(&self) -> bool {
        let w: Vec<_> = self.widths().collect();
        w.windows(2).all(|p| p[0] <= p[1])
    }

    fn is_non_increasing(&self) -> bool {
        let w: Vec<_> = self.widths().collect();
        w.windows(2).all(|p| p[0] >= p[1])
    }

    /// Width of the last decoder level, i.e. of the network's second-last layer
    /// when no feature tap is added.
    pub fn top_width(&self) -> usize {
        self.encoder[0]
    }
}

/// Refinery sub-network of the iterative models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniSpec {
    pub ladder: Ladder,
    /// Channels of the 1x1 feature tap handed to the next iteration.
    pub feature_tap: usize,
}

/// Declarative description of one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub base: Ladder,
    pub mini: Option<MiniSpec>,
    /// Number of probability maps produced (1 + number of refinery passes).
    pub iterations: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ArchitectureSpec {
    /// Default configuration for `kind`, sized to the published parameter budgets.
    pub fn default_for(kind: ArchKind) -> Self {
        let unet = Ladder::new(&[32, 64, 128, 256], 512);
        let miunet = Ladder::new(&[32, 16, 16, 8], 8);
        let (base, mini, iterations) = match kind {
            ArchKind::Unet => (unet, None, 1),
            ArchKind::MiUnet => (miunet, None, 1),
            ArchKind::IterNet => {
                (unet, Some(MiniSpec { ladder: Ladder::new(&[32, 32], 32), feature_tap: 32 }), 4)
            }
            ArchKind::IterMiUnet => {
                (miunet, Some(MiniSpec { ladder: Ladder::new(&[16, 8], 8), feature_tap: 32 }), 4)
            }
        };
        ArchitectureSpec { kind, base, mini, iterations, in_channels: 1, out_channels: 1 }
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.iterations = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.kind)));
        if self.base.encoder.is_empty() {
            return bad("empty encoder ladder".into());
        }
        if self.in_channels == 0 || self.out_channels != 1 {
            return bad(format!(
                "expected in_channels >= 1 and out_channels == 1, got {} and {}",
                self.in_channels, self.out_channels
            ));
        }
        let ladders = std::iter::once(&self.base).chain(self.mini.iter().map(|m| &m.ladder));
        for ladder in ladders {
            if ladder.widths().any(|w| w == 0) {
                return bad(format!("zero-width level in {:?}", ladder));
            }
            if self.kind.is_reversed() && !ladder.is_non_increasing() {
                return bad(format!("filter ladder {:?} must be non-increasing along the encoder", ladder));
            }
            if !self.kind.is_reversed() && !ladder.is_non_decreasing() {
                return bad(format!("filter ladder {:?} must be non-decreasing along the encoder", ladder));
            }
        }
        if self.kind.is_iterative() {
            if self.iterations < 2 {
                return bad(format!("iterative models need at least 2 outputs, got N = {}", self.iterations));
            }
            match &self.mini {
                None => return bad("missing refinery network".into()),
                Some(m) if m.ladder.encoder.is_empty() || m.feature_tap == 0 => {
                    return bad("refinery network needs a non-empty ladder and feature tap".into())
                }
                Some(_) => {}
            }
        } else {
            if self.iterations != 1 {
                return bad(format!("non-iterative models produce exactly 1 output, got N = {}", self.iterations));
            }
            if self.mini.is_some() {
                return bad("non-iterative models have no refinery network".into());
            }
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        let mini = self.mini.as_ref().map_or(0, |m| m.ladder.depth());
        1 << self.base.depth().max(mini)
    }

    /// One-line human-readable summary.
    pub fn describe(&self) -> String {
        let mut s = format!("{} base {:?}+{}", self.kind, self.base.encoder, self.base.bottleneck);
        if let Some(m) = &self.mini {
            s.push_str(&format!(
                ", refinery {:?}+{} tap {}, N = {}",
                m.ladder.encoder, m.ladder.bottleneck, m.feature_tap, self.iterations
            ));
        }
        s
    }
}
