//! Analytical FLOPs model.
//!
//! Only matrix products count, at `2mnp` for an `m×n` by `n×p` product.
//! Per block: `Q, K, V` projections `6bnd²`, scores and weighted values
//! `4bn²d`, output projection `2bnd²`, feed-forward with ratio 4 `16bnd²`.
//!
//! The adapter, InfLoRA and DualLoRA totals are printed in the source without
//! the batch factor `b` even though their derivation carries it. The default
//! ([`Convention::Consistent`]) keeps `b`; [`Convention::StrictPaper`]
//! reproduces the printed expressions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Consistent,
    StrictPaper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Vit,
    Lora,
    Duallora,
    L2p,
    Dualprompt,
    Coda,
    Inflora,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Vit,
        Scheme::Lora,
        Scheme::Duallora,
        Scheme::L2p,
        Scheme::Dualprompt,
        Scheme::Coda,
        Scheme::Inflora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Vit => "vit",
            Scheme::Lora => "lora",
            Scheme::Duallora => "duallora",
            Scheme::L2p => "l2p",
            Scheme::Dualprompt => "dualprompt",
            Scheme::Coda => "coda",
            Scheme::Inflora => "inflora",
        }
    }

    pub fn is_prompt(self) -> bool {
        matches!(self, Scheme::L2p | Scheme::Dualprompt | Scheme::Coda)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Infer => "infer",
        }
    }
}

/// Prompt hyperparameters: pool size `p`, prompt length `e`, E-/G-prompt
/// lengths, prompts per input `k`, expanded layers `l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptParams {
    pub p: u64,
    pub e: u64,
    pub e_e: u64,
    pub e_g: u64,
    pub k: u64,
    pub l: u64,
}

impl PromptParams {
    /// Published settings of each prompt scheme.
    pub fn published(scheme: Scheme) -> Option<Self> {
        match scheme {
            Scheme::L2p => Some(Self { p: 30, e: 20, e_e: 0, e_g: 0, k: 5, l: 1 }),
            Scheme::Dualprompt => Some(Self { p: 10, e: 0, e_e: 20, e_g: 6, k: 5, l: 0 }),
            Scheme::Coda => Some(Self { p: 100, e: 8, e_e: 0, e_g: 0, k: 5, l: 5 }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchParams {
    pub layers: u64,
    pub batch: u64,
    pub tokens: u64,
    pub dim: u64,
    pub rank: u64,
    /// Feature samples per task for the SVD.
    pub samples: u64,
    #[serde(default)]
    pub prompt: Option<PromptParams>,
}

impl ArchParams {
    /// ViT-B/16 setting: `L=12, d=768, n=197, b=16, r=10, m=150`.
    pub fn vit_base() -> Self {
        Self { layers: 12, batch: 16, tokens: 197, dim: 768, rank: 10, samples: 150, prompt: None }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.layers, self.batch, self.tokens, self.dim, self.rank, self.samples];
        if all.contains(&0) {
            return Err(Error::Parameter("architecture parameters must be positive".into()));
        }
        Ok(())
    }
}

/// `L(24bnd² + 4bn²d)`.
pub fn vit_forward(l: u64, b: u64, n: u64, d: u64) -> u64 {
    l * (24 * b * n * d * d + 4 * b * n * n * d)
}

/// Twice the forward pass.
pub fn vit_backward(l: u64, b: u64, n: u64, d: u64) -> u64 {
    2 * vit_forward(l, b, n, d)
}

/// Bidiagonal reduction of a `d×m` matrix: `2dm² + 11m³`.
pub fn svd_flops(d: u64, m: u64) -> u64 {
    2 * d * m * m + 11 * m * m * m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    Duallora,
}

/// Extra forward FLOPs of the adapters: two (LoRA) or three (DualLoRA)
/// rank-`r` branches per layer at `4bndr` each.
pub fn adapter_flops(kind: AdapterKind, l: u64, b: u64, n: u64, d: u64, r: u64, conv: Convention) -> u64 {
    let branches = match kind {
        AdapterKind::Lora => 2,
        AdapterKind::Duallora => 3,
    };
    let b = match conv {
        Convention::Consistent => b,
        Convention::StrictPaper => 1,
    };
    l * branches * 2 * 2 * b * n * d * r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsProfile {
    pub scheme: Scheme,
    pub phase: Phase,
    pub flops: f64,
    /// Prompt schemes ignore prompt matching, so their counts are lower bounds.
    pub lower_bound: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Encoder pass with `t` tokens per image over `layers` blocks.
fn pass(layers: f64, b: f64, t: f64, d: f64) -> f64 {
    layers * (24.0 * b * t * d * d + 4.0 * b * t * t * d)
}

const DUALPROMPT_NOTE: &str = "training expression is not three times the inference expression \
     (it uses n + 2e_G/L + 3k e_E/L tokens where inference uses n + e_G + k e_E); both transcribed as printed";

pub fn scheme_flops(scheme: Scheme, phase: Phase, p: &ArchParams, conv: Convention) -> Result<FlopsProfile> {
    p.validate()?;
    let (l, b, n, d, r, m) = (p.layers, p.batch, p.tokens, p.dim, p.rank, p.samples);
    let fwd = vit_forward(l, b, n, d) as f64;
    let (lf, bf, nf, df) = (l as f64, b as f64, n as f64, d as f64);
    let prompt = || {
        p.prompt
            .ok_or_else(|| Error::Parameter(format!("{scheme} needs prompt parameters")))
    };
    let train = phase == Phase::Train;
    let mut note = None;
    let flops = match scheme {
        Scheme::Vit => if train { 3.0 * fwd } else { fwd },
        Scheme::Lora => {
            let a = adapter_flops(AdapterKind::Lora, l, b, n, d, r, conv) as f64;
            if train { 3.0 * fwd + a } else { fwd + a }
        }
        Scheme::Duallora => {
            let a = adapter_flops(AdapterKind::Duallora, l, b, n, d, r, conv) as f64;
            if train {
                3.0 * fwd + a + lf * svd_flops(d, m) as f64
            } else {
                fwd + a
            }
        }
        Scheme::Inflora => {
            let a = adapter_flops(AdapterKind::Lora, l, b, n, d, r, conv) as f64;
            if train {
                4.0 * fwd + a + 13.0 * lf * df.powi(3)
            } else {
                fwd + a
            }
        }
        Scheme::L2p => {
            let pp = prompt()?;
            let t = nf + (pp.k * pp.e) as f64;
            let prompted = pass(lf, bf, t, df);
            if train { 3.0 * prompted + fwd } else { prompted + fwd }
        }
        Scheme::Dualprompt => {
            let pp = prompt()?;
            let (eg, ee, k) = (pp.e_g as f64, pp.e_e as f64, pp.k as f64);
            let t_avg = nf + 2.0 * eg / lf + 3.0 * k * ee / lf;
            note = Some(DUALPROMPT_NOTE.to_string());
            if train {
                72.0 * lf * bf * t_avg * df * df + 12.0 * lf * bf * t_avg * t_avg * df + fwd
            } else {
                lf * (24.0 * bf * (nf + eg + k * ee) * df * df + 24.0 * bf * nf * df * df
                    + 4.0 * bf * nf * nf * df)
                    + 4.0 * lf * bf * t_avg * t_avg * df
            }
        }
        Scheme::Coda => {
            let pp = prompt()?;
            let (k, e, ll) = (pp.k as f64, pp.e as f64, pp.l as f64);
            if pp.l > l {
                return Err(Error::Parameter("expanded layers exceed depth".into()));
            }
            let early = pass(ll, bf, nf + (1.0 + ll) / 2.0 * k * e, df);
            let late = pass(lf - ll, bf, nf + ll * k * e, df);
            let mult = if train { 3.0 } else { 1.0 };
            mult * (early + late) + fwd
        }
    };
    Ok(FlopsProfile { scheme, phase, flops, lower_bound: scheme.is_prompt(), note })
}

/// Every scheme in both phases. Prompt schemes without parameters in `p`
/// use their published settings.
pub fn report(p: &ArchParams, conv: Convention) -> Result<Vec<FlopsProfile>> {
    let mut out = Vec::new();
    for scheme in Scheme::ALL {
        let mut params = *p;
        if scheme.is_prompt() && params.prompt.is_none() {
            params.prompt = PromptParams::published(scheme);
        }
        for phase in [Phase::Train, Phase::Infer] {
            out.push(scheme_flops(scheme, phase, &params, conv)?);
        }
    }
    Ok(out)
}

/// Aligned text table of a report.
pub fn render_table(profiles: &[FlopsProfile]) -> String {
    let mut s = format!("{:<11} {:<6} {:>14} {}\n", "scheme", "phase", "GFLOPs", "");
    for p in profiles {
        let mark = if p.lower_bound { ">= (lower bound)" } else { "" };
        s.push_str(&format!(
            "{:<11} {:<6} {:>14.3} {}\n",
            p.scheme.as_str(),
            p.phase.as_str(),
            p.flops / 1e9,
            mark
        ));
    }
    for p in profiles.iter().filter(|p| p.note.is_some()) {
        s.push_str(&format!("note ({} {}): {}\n", p.scheme, p.phase.as_str(), p.note.as_deref().unwrap_or("")));
    }
    s
}
