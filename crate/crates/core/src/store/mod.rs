//! Named-tensor checkpoints, task vectors, and their on-disk format.

mod checkpoint;
mod format;

pub use checkpoint::{
    apply_delta, mean_abs, task_vector, task_vector_with_id, Checkpoint, TaskVector, Tensor,
};
pub use format::{
    checkpoint_fnv1a, checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint,
    METADATA_KEY,
};
