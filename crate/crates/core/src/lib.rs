pub mod bus;
pub mod config;
pub mod devices;
pub mod frame;
pub mod ground_link;
pub mod reentrancy;
pub mod scenario;
pub mod store;
pub mod supervisor;
