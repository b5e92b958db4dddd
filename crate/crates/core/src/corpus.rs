//! Bundled loop-nest kernels: a training corpus and held-out kernels for
//! exploration on unseen applications.

use crate::error::Result;
use crate::ir::{parse_kernel, KernelSpec};

pub const TRAINING: &[(&str, &str)] = &[
    ("vadd", include_str!("../corpus/vadd.dsl")),
    ("dotprod", include_str!("../corpus/dotprod.dsl")),
    ("histogram", include_str!("../corpus/histogram.dsl")),
    ("jacobi1d", include_str!("../corpus/jacobi1d.dsl")),
    ("gemv", include_str!("../corpus/gemv.dsl")),
    ("conv1d", include_str!("../corpus/conv1d.dsl")),
    ("stencil2d", include_str!("../corpus/stencil2d.dsl")),
    ("gesummv", include_str!("../corpus/gesummv.dsl")),
    ("twomm", include_str!("../corpus/twomm.dsl")),
    ("gemm", include_str!("../corpus/gemm.dsl")),
    ("syrk", include_str!("../corpus/syrk.dsl")),
    ("doitgen", include_str!("../corpus/doitgen.dsl")),
    ("fdtd1d", include_str!("../corpus/fdtd1d.dsl")),
    ("ttm", include_str!("../corpus/ttm.dsl")),
    ("trmv", include_str!("../corpus/trmv.dsl")),
];

pub const HELD_OUT: &[(&str, &str)] = &[
    ("mvt", include_str!("../corpus/mvt.dsl")),
    ("bicg", include_str!("../corpus/bicg.dsl")),
];

fn parse_all(srcs: &[(&str, &str)]) -> Result<Vec<KernelSpec>> {
    srcs.iter().map(|(_, s)| parse_kernel(s)).collect()
}

pub fn training() -> Result<Vec<KernelSpec>> {
    parse_all(TRAINING)
}

pub fn held_out() -> Result<Vec<KernelSpec>> {
    parse_all(HELD_OUT)
}

/// Bundled kernel source by name.
pub fn source(name: &str) -> Option<&'static str> {
    TRAINING.iter().chain(HELD_OUT).find(|(n, _)| *n == name).map(|(_, s)| *s)
}
