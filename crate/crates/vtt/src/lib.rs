//! Visual Turing Test: balanced real/synthetic rating sessions served to
//! human raters over HTTP, with persisted ratings and accuracy reports.

mod api;
mod error;
mod session;
mod store;

pub use api::{router, serve};
pub use error::{VttError, VttResult};
pub use session::{
    create_session, session_report, Confusion, JudgmentCounts, PerClass, PoolEntry, Rating, Truth, VttItem,
    VttReport, VttSession,
};
pub use store::{pool_from_manifest, NextItem, RatingAck, VttStore};
