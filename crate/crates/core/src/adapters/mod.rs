//! Low-rank adapter structures, their application to frozen weights,
//! flattening to parameter vectors, and the binary blob format.

mod blob;
mod layout;
mod lora;

pub use blob::{
    adapter_from_tensors, adapter_tensors, load_adapter, load_tensors, read_tensors, save_adapter, save_tensors,
    write_tensors, Tensor, TensorData, FORMAT_VERSION, MAGIC,
};
pub use layout::{Layout, ModuleSpec};
pub use lora::{apply_lora, flatten, unflatten, AdapterSet, LoraModule};
