//! AJCC 7th edition lung cancer TNM classification and anatomic stage
//! grouping.
//!
//! Inputs are structured findings; turning free text into findings is the
//! extraction engine's job.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TnmError {
    #[error("{0:?} cannot be combined with other tumor findings")]
    ExclusiveFlag(TumorFlag),
    #[error("tumor size must be a finite non-negative number, got {0}")]
    InvalidSize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorFlag {
    InSitu,
    NoPrimaryEvidence,
    NotAssessable,
    MainBronchusGe2cmFromCarina,
    MainBronchusLt2cmFromCarina,
    VisceralPleuraInvasion,
    AtelectasisHilarPartial,
    AtelectasisEntireLung,
    ParietalPleura,
    ChestWall,
    Diaphragm,
    PhrenicNerve,
    MediastinalPleura,
    ParietalPericardium,
    SeparateNoduleSameLobe,
    Mediastinum,
    Heart,
    GreatVessels,
    Trachea,
    RecurrentLaryngealNerve,
    Esophagus,
    VertebralBody,
    Carina,
    SeparateNoduleIpsilateralDifferentLobe,
}

impl TumorFlag {
    pub const ALL: [TumorFlag; 24] = [
        TumorFlag::InSitu,
        TumorFlag::NoPrimaryEvidence,
        TumorFlag::NotAssessable,
        TumorFlag::MainBronchusGe2cmFromCarina,
        TumorFlag::MainBronchusLt2cmFromCarina,
        TumorFlag::VisceralPleuraInvasion,
        TumorFlag::AtelectasisHilarPartial,
        TumorFlag::AtelectasisEntireLung,
        TumorFlag::ParietalPleura,
        TumorFlag::ChestWall,
        TumorFlag::Diaphragm,
        TumorFlag::PhrenicNerve,
        TumorFlag::MediastinalPleura,
        TumorFlag::ParietalPericardium,
        TumorFlag::SeparateNoduleSameLobe,
        TumorFlag::Mediastinum,
        TumorFlag::Heart,
        TumorFlag::GreatVessels,
        TumorFlag::Trachea,
        TumorFlag::RecurrentLaryngealNerve,
        TumorFlag::Esophagus,
        TumorFlag::VertebralBody,
        TumorFlag::Carina,
        TumorFlag::SeparateNoduleIpsilateralDifferentLobe,
    ];

    pub fn is_exclusive(self) -> bool {
        matches!(
            self,
            TumorFlag::InSitu | TumorFlag::NoPrimaryEvidence | TumorFlag::NotAssessable
        )
    }

    pub fn is_t4(self) -> bool {
        matches!(
            self,
            TumorFlag::Mediastinum
                | TumorFlag::Heart
                | TumorFlag::GreatVessels
                | TumorFlag::Trachea
                | TumorFlag::RecurrentLaryngealNerve
                | TumorFlag::Esophagus
                | TumorFlag::VertebralBody
                | TumorFlag::Carina
                | TumorFlag::SeparateNoduleIpsilateralDifferentLobe
        )
    }

    pub fn is_t3(self) -> bool {
        matches!(
            self,
            TumorFlag::ParietalPleura
                | TumorFlag::ChestWall
                | TumorFlag::Diaphragm
                | TumorFlag::PhrenicNerve
                | TumorFlag::MediastinalPleura
                | TumorFlag::ParietalPericardium
                | TumorFlag::MainBronchusLt2cmFromCarina
                | TumorFlag::AtelectasisEntireLung
                | TumorFlag::SeparateNoduleSameLobe
        )
    }

    pub fn is_t2(self) -> bool {
        matches!(
            self,
            TumorFlag::MainBronchusGe2cmFromCarina
                | TumorFlag::VisceralPleuraInvasion
                | TumorFlag::AtelectasisHilarPartial
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TumorFindings {
    /// Greatest dimension in cm; `None` when unknown.
    #[serde(default)]
    pub size_cm: Option<f64>,
    #[serde(default)]
    pub flags: BTreeSet<TumorFlag>,
}

impl TumorFindings {
    pub fn sized(size_cm: f64) -> Self {
        TumorFindings {
            size_cm: Some(size_cm),
            flags: BTreeSet::new(),
        }
    }

    pub fn with_flag(mut self, flag: TumorFlag) -> Self {
        self.flags.insert(flag);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFindings {
    #[default]
    NotAssessed,
    NoneInvolved,
    IpsilateralPeribronchialOrHilarOrIntrapulmonary,
    IpsilateralMediastinalOrSubcarinal,
    ContralateralOrScaleneOrSupraclavicular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetastasisFlag {
    ContralateralLobeNodule,
    PleuralNodules,
    MalignantEffusion,
    Extrathoracic,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetastasisFindings {
    #[serde(default)]
    pub flags: BTreeSet<MetastasisFlag>,
    /// The effusion was judged unrelated to the tumor and is not staged.
    #[serde(default)]
    pub effusion_excluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TCategory {
    TX,
    T0,
    Tis,
    T1a,
    T1b,
    T2a,
    T2b,
    T3,
    T4,
}

impl TCategory {
    pub const ALL: [TCategory; 9] = [
        TCategory::TX,
        TCategory::T0,
        TCategory::Tis,
        TCategory::T1a,
        TCategory::T1b,
        TCategory::T2a,
        TCategory::T2b,
        TCategory::T3,
        TCategory::T4,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NCategory {
    NX,
    N0,
    N1,
    N2,
    N3,
}

impl NCategory {
    pub const ALL: [NCategory; 5] = [
        NCategory::NX,
        NCategory::N0,
        NCategory::N1,
        NCategory::N2,
        NCategory::N3,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MCategory {
    M0,
    M1a,
    M1b,
}

impl MCategory {
    pub const ALL: [MCategory; 3] = [MCategory::M0, MCategory::M1a, MCategory::M1b];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageGroup {
    Occult,
    #[serde(rename = "0")]
    Stage0,
    IA,
    IB,
    IIA,
    IIB,
    IIIA,
    IIIB,
    IV,
    Indeterminate,
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => f.write_str(&s),
                    _ => write!(f, "{self:?}"),
                }
            }
        }
    )*};
}

display_via_serde!(TCategory, NCategory, MCategory, StageGroup);

/// Size-only T category. Unknown size yields TX.
fn t_by_size(size: Option<f64>) -> TCategory {
    match size {
        None => TCategory::TX,
        Some(s) if s <= 2.0 => TCategory::T1a,
        Some(s) if s <= 3.0 => TCategory::T1b,
        Some(s) if s <= 5.0 => TCategory::T2a,
        Some(s) if s <= 7.0 => TCategory::T2b,
        Some(_) => TCategory::T3,
    }
}

/// T category for a tumor with at least one T2 feature. An unknown size is
/// presumed not to exceed 5 cm, so feature-only input maps to T2a.
fn t2_with_feature(size: Option<f64>) -> TCategory {
    match size {
        Some(s) if s > 5.0 => TCategory::T2b,
        _ => TCategory::T2a,
    }
}

pub fn classify_t(f: &TumorFindings) -> Result<TCategory, TnmError> {
    if let Some(s) = f.size_cm {
        if !s.is_finite() || s < 0.0 {
            return Err(TnmError::InvalidSize(s));
        }
    }
    if let Some(&x) = f.flags.iter().find(|fl| fl.is_exclusive()) {
        if f.flags.len() > 1 {
            return Err(TnmError::ExclusiveFlag(x));
        }
        return Ok(match x {
            TumorFlag::NotAssessable => TCategory::TX,
            TumorFlag::NoPrimaryEvidence => TCategory::T0,
            _ => TCategory::Tis,
        });
    }
    if f.flags.iter().any(|fl| fl.is_t4()) {
        return Ok(TCategory::T4);
    }
    if f.size_cm.is_some_and(|s| s > 7.0) || f.flags.iter().any(|fl| fl.is_t3()) {
        return Ok(TCategory::T3);
    }
    if f.flags.iter().any(|fl| fl.is_t2()) {
        return Ok(t2_with_feature(f.size_cm));
    }
    Ok(t_by_size(f.size_cm))
}

pub fn classify_n(f: NodeFindings) -> NCategory {
    match f {
        NodeFindings::NotAssessed => NCategory::NX,
        NodeFindings::NoneInvolved => NCategory::N0,
        NodeFindings::IpsilateralPeribronchialOrHilarOrIntrapulmonary => NCategory::N1,
        NodeFindings::IpsilateralMediastinalOrSubcarinal => NCategory::N2,
        NodeFindings::ContralateralOrScaleneOrSupraclavicular => NCategory::N3,
    }
}

pub fn classify_m(f: &MetastasisFindings) -> MCategory {
    let staged = |flag: &&MetastasisFlag| {
        !(f.effusion_excluded && **flag == MetastasisFlag::MalignantEffusion)
    };
    let mut flags = f.flags.iter().filter(staged);
    if f.flags.contains(&MetastasisFlag::Extrathoracic) {
        MCategory::M1b
    } else if flags.next().is_some() {
        MCategory::M1a
    } else {
        MCategory::M0
    }
}

/// The anatomic stage table, one entry per listed M0 row.
pub const STAGE_TABLE: [(TCategory, NCategory, StageGroup); 25] = {
    use NCategory::*;
    use StageGroup::*;
    use TCategory::*;
    [
        (TX, N0, Occult),
        (Tis, N0, Stage0),
        (T1a, N0, IA),
        (T1b, N0, IA),
        (T2a, N0, IB),
        (T2b, N0, IIA),
        (T1a, N1, IIA),
        (T1b, N1, IIA),
        (T2a, N1, IIA),
        (T2b, N1, IIB),
        (T3, N0, IIB),
        (T1a, N2, IIIA),
        (T1b, N2, IIIA),
        (T2a, N2, IIIA),
        (T2b, N2, IIIA),
        (T3, N1, IIIA),
        (T3, N2, IIIA),
        (T4, N0, IIIA),
        (T4, N1, IIIA),
        (T1a, N3, IIIB),
        (T1b, N3, IIIB),
        (T2a, N3, IIIB),
        (T2b, N3, IIIB),
        (T3, N3, IIIB),
        (T4, N2, IIIB),
    ]
};

/// Exact table lookup. Any M1 is stage IV; M0 combinations absent from the
/// table are [`StageGroup::Indeterminate`].
pub fn stage_group(t: TCategory, n: NCategory, m: MCategory) -> StageGroup {
    if m != MCategory::M0 {
        return StageGroup::IV;
    }
    STAGE_TABLE
        .iter()
        .find(|(tt, nn, _)| *tt == t && *nn == n)
        .map_or(StageGroup::Indeterminate, |(_, _, g)| *g)
}

/// One line of the `stage` command's input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FindingsRecord {
    pub id: String,
    #[serde(default)]
    pub tumor: TumorFindings,
    #[serde(default)]
    pub nodes: NodeFindings,
    #[serde(default)]
    pub metastasis: MetastasisFindings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedRecord {
    pub id: String,
    #[serde(rename = "T")]
    pub t: TCategory,
    #[serde(rename = "N")]
    pub n: NCategory,
    #[serde(rename = "M")]
    pub m: MCategory,
    pub stage: StageGroup,
}

pub fn stage_record(rec: &FindingsRecord) -> Result<StagedRecord, TnmError> {
    let t = classify_t(&rec.tumor)?;
    let n = classify_n(rec.nodes);
    let m = classify_m(&rec.metastasis);
    Ok(StagedRecord {
        id: rec.id.clone(),
        t,
        n,
        m,
        stage: stage_group(t, n, m),
    })
}
