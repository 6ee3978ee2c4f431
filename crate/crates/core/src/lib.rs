pub mod agent;
pub mod autodiff;
pub mod config;
pub mod control;
pub mod metrics;
pub mod neighbor;
pub mod net;
pub mod observe;
pub mod scenario;
pub mod sim;
pub mod train;
