use serde::{Deserialize, Serialize};

use super::SearchError;

/// Number of ops removed at the start of each round `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShrinkSchedule {
    start: usize,
    end: usize,
    drops: Vec<usize>,
}

impl ShrinkSchedule {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Drops due at `round`; zero outside `start..=end`.
    pub fn drops_at(&self, round: usize) -> usize {
        if round < self.start || round > self.end {
            0
        } else {
            self.drops[round - self.start]
        }
    }

    /// `(round, drops)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.drops.iter().enumerate().map(move |(i, &d)| (self.start + i, d))
    }

    pub fn total(&self) -> usize {
        self.drops.iter().sum()
    }

    /// `epoch,drops` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,drops\n");
        for (e, d) in self.iter() {
            out.push_str(&format!("{e},{d}\n"));
        }
        out
    }
}

/// Spreads `total − last` drops over rounds `start..=end` by binning points
/// evenly spaced in log scale between `start` and `end` into unit intervals.
/// The final point is `end` itself and lands in the last round.
pub fn build_shrink_schedule(
    total: usize,
    last: usize,
    start: usize,
    end: usize,
) -> Result<ShrinkSchedule, SearchError> {
    if start < 1 || end <= start {
        return Err(SearchError::Schedule { start, end });
    }
    if last > total {
        return Err(SearchError::InvalidConfig(format!(
            "cannot shrink {total} ops to {last}"
        )));
    }
    let n = total - last;
    let mut drops = vec![0usize; end - start + 1];
    let (ls, le) = ((start as f64).ln(), (end as f64).ln());
    for i in 0..n {
        let bin = if i + 1 == n && n > 1 {
            end
        } else {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            // exp(ln S) may round just below S; the clamp keeps it in range.
            ((ls + t * (le - ls)).exp().floor() as usize).clamp(start, end)
        };
        drops[bin - start] += 1;
    }
    Ok(ShrinkSchedule { start, end, drops })
}
