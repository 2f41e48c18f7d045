pub mod algo;
pub mod estimator;
pub mod experiment;
pub mod gantt;
pub mod hp;
pub mod report;
pub mod sim;
pub mod surrogate;
pub mod tree;
