use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildInfo {
    pub package_version: String,
    pub git_rev: String,
    pub profile: String,
    pub target_os: String,
    pub target_arch: String,
}

impl BuildInfo {
    pub fn current() -> Self {
        BuildInfo {
            package_version: env!("CARGO_PKG_VERSION").into(),
            git_rev: env!("HYBRID_GIT_REV").into(),
            profile: env!("HYBRID_BUILD_PROFILE").into(),
            target_os: std::env::consts::OS.into(),
            target_arch: std::env::consts::ARCH.into(),
        }
    }
}
