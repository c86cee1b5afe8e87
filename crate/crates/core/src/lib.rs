pub mod aes;
pub mod cipher;
pub mod client;
pub mod clock;
pub mod gateway;
pub mod netsim;
pub mod tunnel;
pub mod vault;
