use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid {section} config: {reason}")]
    Invalid { section: String, reason: String },

    #[error("failed to parse scenario: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: i64, expected: i64 },

    #[error("unknown override key `{0}`")]
    UnknownKey(String),

    #[error("override `{key}`: expected {expected}, got `{value}`")]
    OverrideType {
        key: String,
        expected: &'static str,
        value: String,
    },

    #[error("unknown scenario `{name}`; available: {available}")]
    UnknownScenario { name: String, available: String },

    #[error("initial state is outside the invariant set (h_I = {h_i:.4}); set allow_unsafe_start to run it anyway")]
    UnsafeStart { h_i: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub fn invalid(section: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            section: section.into(),
            reason: reason.into(),
        }
    }
}
