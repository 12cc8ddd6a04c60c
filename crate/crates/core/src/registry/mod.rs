//! Data registry (sources and metadata) and operator registry.

pub mod data;
pub mod embed;
pub mod operators;

pub use data::{
    score_entry, DataRegistry, Level, MetadataEntry, MetadataProvider, Protocol, SearchHit, SourceDescriptor,
    Statistics, SyncLog, MAX_SAMPLES,
};
pub use embed::{cosine, embed, hash64, tokenize, EMBED_DIM};
pub use operators::{
    AttributeSpec, Attributes, Binding, Constraint, EdgeSource, OperatorDescriptor, OperatorKind, OperatorRegistry,
    PortRange, Properties, RefinementRule, RefinementTemplate, SubplanTemplate, TemplateEdge, TemplateNode,
};
