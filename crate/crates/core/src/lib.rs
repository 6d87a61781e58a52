pub mod error;
pub mod history;
pub mod learner;
pub mod observer;
pub mod ode;
pub mod plant;
pub mod simulator;
