//! Synthetic multi-domain corpus, proxy learner and evaluation environment.

pub mod collect;
pub mod corpus;
pub mod eval;
pub mod proxy;
