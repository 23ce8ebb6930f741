//! Numerical calculus on Carnot groups.
//!
//! Everything is generic over the scalar type: `f64` and `f32` for numerics,
//! `Ratio<i64>` for exact group arithmetic. The aliases below fix `f64`.

pub mod exponent;
pub mod field;
pub mod group;
pub mod linalg;
pub mod lipschitz;
pub mod maps;
pub mod mc;
pub mod operator;
pub mod metric;
pub mod scalar;

pub use exponent::Exponent;

pub type GroupDescriptor = group::Group<f64>;
pub type GroupPoint = group::Point<f64>;
pub type ExactGroup = group::Group<num_rational::Ratio<i64>>;
pub type ExactPoint = group::Point<num_rational::Ratio<i64>>;
pub type Domain = field::Domain<f64>;
pub type ScalarField = field::ScalarField<f64>;
pub type TestFunction = lipschitz::LipTestFunction<f64, group::Point<f64>>;
pub type OpenSet = lipschitz::OpenSetSpec<group::Point<f64>, f64>;
pub type SharedMap = maps::SharedMap<f64>;
pub type Matrix = linalg::Matrix<f64>;

/// Version of this library, recorded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
