//! Row-parallel execution of read-only batch work.
//!
//! Only inference-mode work is split: evaluation forward passes and feature
//! bank construction. Each chunk is processed independently and results are
//! reassembled in chunk order, so both strategies produce identical bits.

use crate::matrix::Matrix;

/// Rows handed to one worker at a time.
pub const DEFAULT_CHUNK_ROWS: usize = 256;

/// Defaults to `Parallel` when the `parallel` feature is on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Execution {
    /// Applies `f` to consecutive row chunks of `input` and returns the
    /// per-chunk results in chunk order.
    pub fn map_row_chunks<T, F>(self, input: &Matrix, chunk_rows: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Matrix) -> T + Sync + Send,
    {
        let chunk_rows = chunk_rows.max(1);
        let bounds: Vec<(usize, usize)> = (0..input.rows())
            .step_by(chunk_rows)
            .map(|s| (s, (s + chunk_rows).min(input.rows())))
            .collect();
        match self {
            Execution::Sequential => bounds
                .into_iter()
                .map(|(s, e)| f(input.slice_rows(s, e)))
                .collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                bounds
                    .into_par_iter()
                    .map(|(s, e)| f(input.slice_rows(s, e)))
                    .collect()
            }
        }
    }

    /// Maps independent jobs (e.g. seeds of a sweep), keeping input order.
    pub fn map_jobs<I, T, F>(self, jobs: Vec<I>, f: F) -> Vec<T>
    where
        I: Send,
        T: Send,
        F: Fn(I) -> T + Sync + Send,
    {
        match self {
            Execution::Sequential => jobs.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                jobs.into_par_iter().map(f).collect()
            }
        }
    }
}
