//! Exit-code classification: 0 ok, 1 model failure, 2 input error.

use std::fmt;

use scr_core::ScrError;

pub const EXIT_MODEL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

/// Marks an error as a model failure (exit code 1) rather than bad input.
#[derive(Debug)]
pub struct ModelFailure(pub String);

impl fmt::Display for ModelFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ModelFailure {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ModelFailure>() {
            return EXIT_MODEL;
        }
        if let Some(e) = cause.downcast_ref::<ScrError>() {
            return match e {
                ScrError::RankDeficient { .. } | ScrError::NonFinite { .. } | ScrError::AllFitsFailed => EXIT_MODEL,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classifies_through_context() {
        let e = Err::<(), _>(ScrError::AllFitsFailed).context("ranking").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_MODEL);
        let e = Err::<(), _>(ScrError::UnknownCovariate("x".into()))
            .context("fit")
            .unwrap_err();
        assert_eq!(exit_code(&e), EXIT_INPUT);
        assert_eq!(
            exit_code(&anyhow::Error::new(ModelFailure("no convergence".into()))),
            EXIT_MODEL
        );
        assert_eq!(exit_code(&anyhow::anyhow!("cannot read file")), EXIT_INPUT);
    }
}
