//! Bit-exact persistence of backbones and adapters, and the model registry.

pub mod adapter_file;
pub mod backbone_file;
mod codec;
pub mod packing;
pub mod registry;

pub use adapter_file::{adapter_file_size, decode_adapter, encode_adapter, load_adapter, save_adapter};
pub use backbone_file::{decode_backbone, encode_backbone, load_backbone, save_backbone};
pub use codec::write_atomic;
pub use packing::{pack_switches, packed_len, unpack_switches};
pub use registry::{sha256_hex, EntryMeta, Manifest, ManifestEntry, ModelRegistry, VerifyOutcome};
