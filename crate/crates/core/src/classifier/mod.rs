//! Occurrence classification: a linear soft-margin SVM refined through
//! rounds of user (or oracle) corrections on clusters near the boundary.

mod oracle;
mod session;
mod svm;

pub use oracle::{run_oracle_session, Oracle, OracleSummary};
pub use session::{
    Classification, LogRecord, Phase, QueryBatch, QueryEntry, RoundOutcome, Session, SessionConfig, SessionState, Zone,
};
pub use svm::{hinge_loss, primal_objective, train_soft_svm, Separator, SvmConfig};
