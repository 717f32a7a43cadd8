pub mod formula;
pub mod instance;
pub mod kripke;
pub mod rules;
pub mod chase;
pub mod treeops;
pub mod template;
pub mod decision;
pub mod cli;
