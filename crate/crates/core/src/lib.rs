pub mod codec;
pub mod config;
pub mod datagen;
pub mod env;
pub mod kin;
pub mod policy;
pub mod rpc;
pub mod se3;
pub mod sim;
pub mod space;
pub mod storage;
pub mod teleop;
pub mod vector;
pub mod wrappers;
