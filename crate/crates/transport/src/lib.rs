//! Everything that moves bytes between nodes: the frame codec, typed
//! messages, the link impairment model and the blob store.

// `!(x > 0.0)` is how these checks reject NaN along with the bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod link;
pub mod messages;
pub mod net;
pub mod store;
pub mod wire;
