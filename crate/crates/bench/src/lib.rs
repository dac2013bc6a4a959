//! Fixtures shared by the benchmarks.

use friedrichs_core::config::RunConfig;
use friedrichs_core::System;

/// The seven-point toy system with its kernels built.
pub fn toy_system() -> System {
    System::build(&RunConfig::toy()).expect("toy configuration builds")
}
