//! Simulation and numerics for a two-type mean-field Fisher-Wright system
//! with selection and rare mutation.
//!
//! The model is a system of N exchangeable sites, each carrying a type-2
//! mass fraction `x2(i,t) in [0,1]`, coupled through the empirical mean:
//!
//! ```text
//! dx2(i) = c (xbar2 - x2(i)) dt + s x2(i)(1 - x2(i)) dt + (m/N)(1 - x2(i)) dt
//!          + sqrt(d x2(i)(1 - x2(i))) dw_i
//! ```
//!
//! The crate provides the forward SDE simulator, the dual
//! coalescing-branching particle system (exact event-driven), deterministic
//! numerics for the Malthusian growth parameter of the collision-free dual,
//! the McKean-Vlasov limit dynamics, and the excursion-driven droplet
//! process, together with the closed-form and cross-method oracles used in
//! the test suites.

pub mod droplet;
pub mod dual;
pub mod forward;
pub mod malthus;
pub mod model;
pub mod mv;
pub mod numerics;
