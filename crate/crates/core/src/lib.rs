pub mod cli;
pub mod design;
pub mod lp;
pub mod matser;
pub mod mpc;
pub mod polytope;
pub mod qp;
pub mod setcalc;
pub mod sim;
pub mod sqp;
