pub mod assoc;
pub mod bench;
pub mod mhoming;
pub mod netsim;
pub mod rxpath;
pub mod tcpbase;
pub mod txpath;
pub mod wire;
