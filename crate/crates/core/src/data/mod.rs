pub mod aggregate;
pub mod generator;
pub mod io;
pub mod schema;

pub use aggregate::{aggregate_users, AggregationReport, SharedStore};
pub use generator::{generate_dataset, GeneratorConfig};
pub use io::{deserialize_dataset, serialize_dataset};
pub use schema::{
    BehaviorEvent, Dataset, DatasetSchema, Exposure, InferenceRequest, ScenarioSchema, Sequence,
    SequenceSchema, UserSample,
};
