//! Order-preserving execution of independent jobs, in parallel across a
//! rayon pool when the `parallel` feature is compiled in, plus the small
//! aggregation helpers multi-seed sweeps report with.

/// How a batch of jobs is driven. `Rayon` silently degrades to sequential
/// execution when the `parallel` feature is compiled out, so callers can
/// request it unconditionally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    Rayon,
}

impl Parallelism {
    /// The fastest mode this build supports.
    pub fn available() -> Parallelism {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Parallelism::Sequential => "sequential",
            Parallelism::Rayon => "rayon",
        }
    }

    pub fn parse(s: &str) -> Option<Parallelism> {
        match s {
            "sequential" => Some(Parallelism::Sequential),
            "rayon" => Some(Parallelism::Rayon),
            _ => None,
        }
    }
}

/// Runs `f` over every job and returns the results in job order, whatever
/// the execution order was.
pub fn run_jobs<T, R, F>(jobs: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => jobs.iter().map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                jobs.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                jobs.iter().map(f).collect()
            }
        }
    }
}

/// Mean and sample standard deviation of a metric over repeated runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// `None` on an empty slice; a single value has zero deviation.
pub fn summarize(xs: &[f64]) -> Option<Summary> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Some(Summary { mean, std, n })
}
