pub mod cli;
pub mod curvature;
pub mod diagnostics;
pub mod expr;
pub mod flow;
pub mod grid;
pub mod io;
pub mod orlicz;
pub mod par;
