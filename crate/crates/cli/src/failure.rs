use std::fmt;

use cad_core::Error;

pub const OTHER: u8 = 1;
pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const ORACLE: u8 = 4;

/// Invalid flag combination or configuration detected by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// One or more oracles did not meet their tolerance.
#[derive(Debug)]
pub struct OracleFailed(pub Vec<String>);

impl fmt::Display for OracleFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "oracle failures: {}", self.0.join(", "))
    }
}

impl std::error::Error for OracleFailed {}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownTask { .. } | Error::InfeasibleGrid { .. } => {
            CONFIG
        }
        Error::Oracle(_) => ORACLE,
        Error::DimensionMismatch { .. }
        | Error::EmptyTask { .. }
        | Error::NonFiniteValue { .. }
        | Error::WeightSum { .. }
        | Error::InvalidWeight { .. }
        | Error::LabelCount { .. }
        | Error::EmptyCollection
        | Error::Shape { .. }
        | Error::MissingLabels { .. }
        | Error::LabelOutOfRange { .. }
        | Error::SupportViolation { .. }
        | Error::Parse { .. }
        | Error::DanglingUsers(_)
        | Error::NoAnomalousClass(_)
        | Error::NoSurvivors
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_) => DATA,
        _ => OTHER,
    }
}

/// Process exit code for an error, from the first classifiable cause.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<toml::de::Error>() {
            return CONFIG;
        }
        if cause.is::<OracleFailed>() {
            return ORACLE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return DATA;
        }
    }
    OTHER
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        assert_eq!(exit_code(&anyhow::Error::new(Usage("x".into()))), CONFIG);
        assert_eq!(exit_code(&anyhow::Error::new(Error::NoSurvivors)), DATA);
        assert_eq!(exit_code(&anyhow::Error::new(OracleFailed(vec![]))), ORACLE);
        let wrapped = anyhow::Error::new(Error::Config("bad".into())).context("loading");
        assert_eq!(exit_code(&wrapped), CONFIG);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), OTHER);
    }
}
