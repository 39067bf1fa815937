//! Seedable random streams with a serializable state.
//!
//! Every stochastic operation in the crate takes an explicit `&mut SeededRng`;
//! there is no global generator.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named sub-task of a seeded run.
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child generator drawn from a parent; advances the parent.
pub fn fork(rng: &mut SeededRng) -> SeededRng {
    ChaCha8Rng::seed_from_u64(rng.next_u64())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal string (u128 does not survive JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &SeededRng) -> Self {
        Self {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> crate::Result<SeededRng> {
        let bytes = unhex(&self.seed)
            .filter(|b| b.len() == 32)
            .ok_or_else(|| crate::Error::Format(format!("bad rng seed '{}'", self.seed)))?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Format(format!("bad rng word_pos '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.as_bytes());
        h.update(self.stream.to_le_bytes());
        h.update(self.word_pos.as_bytes());
        hex(&h.finalize())
    }
}

pub fn normal_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}
