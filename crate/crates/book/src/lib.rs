//! Guide chapters compiled as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/sequence-consensus.md")]
pub mod sequence_consensus {}

#[doc = include_str!("../../../book/src/leader-election.md")]
pub mod leader_election {}

#[doc = include_str!("../../../book/src/replica.md")]
pub mod replica {}

#[doc = include_str!("../../../book/src/recovery.md")]
pub mod recovery {}

#[doc = include_str!("../../../book/src/reconfiguration.md")]
pub mod reconfiguration {}

#[doc = include_str!("../../../book/src/compaction.md")]
pub mod compaction {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/checking.md")]
pub mod checking {}
