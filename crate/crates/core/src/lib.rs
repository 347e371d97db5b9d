//! Access, local caching, normalization and analysis of the Spanish open
//! mobility datasets (origin-destination matrices, trips per person and
//! overnight stays) at district, municipality and greater-urban-area level.

pub mod analytics;
pub mod catalog;
pub mod fetcher;
pub mod model;
pub mod normalizer;
pub mod zones;

pub use catalog::{CatalogConfig, ResourceDescriptor};
pub use fetcher::{Cache, FetchPolicy, Fetcher};
pub use model::{validate_request, DatasetKind, DatasetRequest, DatasetVersion, ZoneId, ZoneLevel};
pub use normalizer::{Mobility, OdTable, OvernightTable, TripsTable};
