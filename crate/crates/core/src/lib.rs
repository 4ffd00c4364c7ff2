//! Two-layer peer-to-peer electricity market on a radial distribution grid.

pub mod agents;
pub mod congestion;
pub mod convex;
pub mod matching;
pub mod opf;
pub mod oracle;
pub mod report;
pub mod scenario;
