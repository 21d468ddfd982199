use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SampleKind};
use crate::error::{Error, Result};

const KIND_ORDER: [SampleKind; 3] = [SampleKind::Paired, SampleKind::ImageOnly, SampleKind::NormalOnly];

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Homogeneous mini-batches, interleaved Paired -> ImageOnly -> NormalOnly
/// within each epoch. Every kind is reshuffled at the start of an epoch.
#[derive(Clone, Debug)]
pub struct Schedule {
    by_kind: [Vec<usize>; 3],
    batch_size: usize,
    seed: u64,
    rng: ChaCha8Rng,
    epoch_start: RngState,
    epoch: Vec<Vec<usize>>,
    cursor: usize,
}

/// Where a schedule stands; enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePosition {
    /// Generator state before the current epoch was shuffled.
    pub epoch_rng: RngState,
    pub cursor: usize,
}

impl Schedule {
    pub fn new(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let mut by_kind: [Vec<usize>; 3] = Default::default();
        for (i, s) in samples.iter().enumerate() {
            let k = KIND_ORDER.iter().position(|&k| k == s.kind).expect("known kind");
            by_kind[k].push(i);
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut schedule = Schedule {
            by_kind,
            batch_size,
            seed,
            epoch_start: RngState::capture(seed, &rng),
            rng,
            epoch: Vec::new(),
            cursor: 0,
        };
        schedule.shuffle_epoch();
        Ok(schedule)
    }

    fn shuffle_epoch(&mut self) {
        self.epoch_start = RngState::capture(self.seed, &self.rng);
        let mut per_kind: Vec<std::vec::IntoIter<Vec<usize>>> = Vec::new();
        for ids in &self.by_kind {
            let mut ids = ids.clone();
            ids.shuffle(&mut self.rng);
            let batches: Vec<Vec<usize>> = ids.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
            per_kind.push(batches.into_iter());
        }
        self.epoch.clear();
        loop {
            let before = self.epoch.len();
            for it in per_kind.iter_mut() {
                if let Some(b) = it.next() {
                    self.epoch.push(b);
                }
            }
            if self.epoch.len() == before {
                break;
            }
        }
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.epoch.len()
    }

    /// Indices of the next batch, rolling over into a fresh epoch as needed.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == self.epoch.len() {
            self.shuffle_epoch();
        }
        self.cursor += 1;
        self.epoch[self.cursor - 1].clone()
    }

    pub fn position(&self) -> SchedulePosition {
        SchedulePosition {
            epoch_rng: self.epoch_start,
            cursor: self.cursor,
        }
    }

    pub fn seek(&mut self, pos: &SchedulePosition) -> Result<()> {
        if pos.epoch_rng.seed != self.seed {
            return Err(Error::ConfigMismatch(format!(
                "schedule seed {} differs from the configured seed {}",
                pos.epoch_rng.seed, self.seed
            )));
        }
        self.rng = pos.epoch_rng.restore();
        self.shuffle_epoch();
        if pos.cursor > self.epoch.len() {
            return Err(Error::ConfigMismatch("schedule position is past the end of its epoch".into()));
        }
        self.cursor = pos.cursor;
        Ok(())
    }
}
