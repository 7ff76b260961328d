pub mod did;
pub mod inference;
pub mod panel;
pub mod pipeline;
pub mod regions;
pub mod report;
pub mod scm;
pub mod synthgen;
