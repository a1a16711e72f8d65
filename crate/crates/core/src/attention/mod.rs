//! Attention kernels and the masked mutual attention processor.

mod kernels;
mod processor;

pub use kernels::{
    attention_weights, masked_softmax, mmca_fuse, mmca_single, mmsa, softmax, token_dropout,
    vanilla_attention, AttentionInputs, Dropout, FusionWeights, ReferenceKv,
};
pub use processor::{
    LayerActivation, LayerSelect, MsdConfig, MsdProcessor, MsdReport, SubjectMasks,
};
