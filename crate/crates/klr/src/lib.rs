//! Training and evaluation of hierarchies of independently learning agents
//! (sequential and synchronous k-level reasoning, cognitive hierarchies, and
//! a co-trained best response) on small cooperative partially observable
//! games, with a versioned policy store usable in-process or over a framed
//! socket protocol.

pub mod env;
pub mod hanabi;
pub mod learner;
pub mod matrix;
pub mod policy;
pub mod prng;
pub mod server;
pub mod toy;

pub mod hierarchy {
    //! Placeholder during bring-up.

    /// Poisson probability mass `λ^k e^{-λ} / k!`.
    pub fn poisson_pmf(lambda: f64, k: u64) -> f64 {
        let mut log_fact = 0.0;
        for i in 1..=k {
            log_fact += (i as f64).ln();
        }
        ((k as f64) * lambda.ln() - lambda - log_fact).exp()
    }
}
