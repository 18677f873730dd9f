//! The nine ablation settings, identified `i` … `ix`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AblationVariant {
    /// Plain ProtoNet, no adaptation.
    I,
    /// Task kernel on supports only.
    Ii,
    /// Task kernel on supports and queries.
    Iii,
    /// Instance kernel on supports only.
    Iv,
    /// Fused kernel on supports only.
    V,
    /// Full method with a GAP channel descriptor.
    Vi,
    /// Full method plus an instance kernel extracted from each query.
    Vii,
    /// Full method with separate generators for instance and task kernels.
    Viii,
    /// Full method.
    Ix,
}

/// Kernel applied to support feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportKernel {
    None,
    Task,
    Instance,
    Insta,
}

/// Kernel applied to query feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKernel {
    None,
    Task,
    /// Query's own instance kernel fused with the task kernel.
    InstaQuery,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        Self::I,
        Self::Ii,
        Self::Iii,
        Self::Iv,
        Self::V,
        Self::Vi,
        Self::Vii,
        Self::Viii,
        Self::Ix,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::I => "i",
            Self::Ii => "ii",
            Self::Iii => "iii",
            Self::Iv => "iv",
            Self::V => "v",
            Self::Vi => "vi",
            Self::Vii => "vii",
            Self::Viii => "viii",
            Self::Ix => "ix",
        }
    }

    pub fn model_name(self) -> &'static str {
        match self {
            Self::I => "ProtoNet",
            Self::Ii | Self::Iii => "ProtoNet + G^ta",
            Self::Iv => "ProtoNet + G^in",
            Self::V => "ProtoNet + G^insta",
            Self::Vi => "INSTA-ProtoNet + GAP",
            Self::Vii => "INSTA-ProtoNet + G^in_Q",
            Self::Viii => "INSTA-ProtoNet w/o sharing f_omega",
            Self::Ix => "INSTA-ProtoNet",
        }
    }

    pub fn support_kernel(self) -> SupportKernel {
        match self {
            Self::I => SupportKernel::None,
            Self::Ii | Self::Iii => SupportKernel::Task,
            Self::Iv => SupportKernel::Instance,
            _ => SupportKernel::Insta,
        }
    }

    pub fn query_kernel(self) -> QueryKernel {
        match self {
            Self::I | Self::Ii | Self::Iv | Self::V => QueryKernel::None,
            Self::Vii => QueryKernel::InstaQuery,
            _ => QueryKernel::Task,
        }
    }

    /// "Apply to S" column.
    pub fn apply_to_support(self) -> &'static str {
        match self.support_kernel() {
            SupportKernel::None => "-",
            SupportKernel::Task => "G^ta",
            SupportKernel::Instance => "G^in",
            SupportKernel::Insta => "G^ta, G^in",
        }
    }

    /// "Apply to Q" column.
    pub fn apply_to_query(self) -> &'static str {
        match self.query_kernel() {
            QueryKernel::None => "-",
            QueryKernel::Task => "G^ta",
            QueryKernel::InstaQuery => "G^in_Q, G^ta",
        }
    }

    pub fn uses_gap(self) -> bool {
        self == Self::Vi
    }

    pub fn shares_generator(self) -> bool {
        self != Self::Viii
    }

    pub fn needs_task_kernel(self) -> bool {
        !matches!(self.support_kernel(), SupportKernel::None | SupportKernel::Instance)
            || self.query_kernel() != QueryKernel::None
    }

    pub fn needs_instance_kernel(self) -> bool {
        matches!(self.support_kernel(), SupportKernel::Instance | SupportKernel::Insta)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        Self::ALL
            .into_iter()
            .find(|v| v.id() == trimmed)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant {s:?}")))
    }
}

impl TryFrom<String> for AblationVariant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<AblationVariant> for String {
    fn from(v: AblationVariant) -> String {
        v.id().to_string()
    }
}
