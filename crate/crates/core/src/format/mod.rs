//! Binary formats: packed code payloads, the `LOGN` model file and IDX
//! arrays. Byte layouts are listed in `docs/formats.md`.

mod idx;
mod model;
mod pack;

pub use idx::{dataset_from_idx, load_dataset, read_idx, save_dataset, tensor_from_idx, write_idx, IdxArray, IdxType};
pub use model::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION, QUANT_BLOCK_LEN};
pub use pack::{pack_codes, packed_len, unpack_codes};
