//! Control-flow integrity for serverless applications.
//!
//! Flow graphs are learned from execution traces ([`builder`]), enforced
//! per execution by a guard ([`enforcer`]) and across functions by a
//! central [`controller`] speaking the [`protocol`] wire format. The
//! [`credential`] module keeps API secrets out of function memory and the
//! [`harness`] simulates whole applications, including attacks.

pub mod model;
pub mod builder;
pub mod enforcer;
pub mod protocol;
pub mod credential;
pub mod clock;
pub mod controller;
pub mod guard;
pub mod harness;
