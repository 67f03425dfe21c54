//! Synthetic "modalities": three tasks over disjoint vocabulary ranges that
//! share one backbone.
//!
//! * TEXT: reverse a sequence. The prompt is `x_1..x_n SEP` and the model
//!   continues with `x_n..x_1`.
//! * IMG: majority class. Each token in the IMG range belongs to one of four
//!   classes (`offset % 4`); the answer is the option token of the most
//!   frequent class.
//! * VID: longest run. The answer is the option token of the bucket holding
//!   the length of the longest run of identical tokens in a 96-token clip.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const RANGE_WIDTH: u32 = 64;
pub const TEXT_BASE: u32 = 0;
pub const IMG_BASE: u32 = 64;
pub const VID_BASE: u32 = 128;
/// Option tokens A, B, C, D.
pub const OPTION_BASE: u32 = 192;
pub const N_OPTIONS: usize = 4;
pub const TEXT_SEP: u32 = 196;
pub const IMG_QUERY: u32 = 197;
pub const VID_QUERY: u32 = 198;
pub const MIN_VOCAB: usize = 199;

pub const TEXT_LEN: usize = 8;
pub const IMG_LEN: usize = 16;
pub const VID_LEN: usize = 96;
/// Upper bounds (inclusive) of the VID run-length buckets A, B, C; D is
/// everything longer.
pub const VID_BUCKETS: [usize; 3] = [2, 4, 6];
const VID_MAX_RUN: usize = 8;
const IMG_MIN_MARGIN: usize = 2;

pub const OPTION_LABELS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "TEXT")]
    Text,
    #[serde(rename = "IMG")]
    Img,
    #[serde(rename = "VID")]
    Vid,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Text, TaskId::Img, TaskId::Vid];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Text => "TEXT",
            TaskId::Img => "IMG",
            TaskId::Vid => "VID",
        }
    }

    /// First token of the task's private vocabulary range.
    pub fn token_base(self) -> u32 {
        match self {
            TaskId::Text => TEXT_BASE,
            TaskId::Img => IMG_BASE,
            TaskId::Vid => VID_BASE,
        }
    }

    /// Tokens the answer is chosen among.
    pub fn answer_tokens(self) -> Vec<u32> {
        match self {
            TaskId::Text => (TEXT_BASE..TEXT_BASE + RANGE_WIDTH).collect(),
            TaskId::Img | TaskId::Vid => (OPTION_BASE..OPTION_BASE + N_OPTIONS as u32).collect(),
        }
    }

    /// Printable label of an answer token; tokens outside the task's
    /// answer set (a wrong greedy guess) get a neutral `tok{n}` label.
    pub fn answer_label(self, token: u32) -> String {
        match self {
            TaskId::Text => format!("t{token}"),
            TaskId::Img | TaskId::Vid => match token.checked_sub(OPTION_BASE) {
                Some(i) if (i as usize) < N_OPTIONS => OPTION_LABELS[i as usize].to_string(),
                _ => format!("tok{token}"),
            },
        }
    }

    /// Accuracy of always answering with one fixed option.
    pub fn chance(self) -> f64 {
        match self {
            TaskId::Text => 1.0 / RANGE_WIDTH as f64,
            TaskId::Img | TaskId::Vid => 1.0 / N_OPTIONS as f64,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TEXT" => Ok(TaskId::Text),
            "IMG" => Ok(TaskId::Img),
            "VID" => Ok(TaskId::Vid),
            _ => Err(format!("unknown task {s:?} (TEXT | IMG | VID)")),
        }
    }
}

/// One training/evaluation sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub task: TaskId,
    /// Model input.
    pub tokens: Vec<u32>,
    /// Supervised `(position, next token)` pairs.
    pub targets: Vec<(usize, u32)>,
    /// Position whose prediction is scored at evaluation time.
    pub eval_pos: usize,
    pub answer: u32,
}

pub fn option_token(index: usize) -> u32 {
    OPTION_BASE + index as u32
}

/// IMG reference: the most frequent class (`offset % 4`) among `offsets`,
/// ties resolved to the lowest class.
pub fn img_majority_class(offsets: &[u32]) -> usize {
    let mut counts = [0usize; N_OPTIONS];
    for o in offsets {
        counts[(*o % N_OPTIONS as u32) as usize] += 1;
    }
    let mut best = 0;
    for c in 1..N_OPTIONS {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

pub fn longest_run(tokens: &[u32]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (i, t) in tokens.iter().enumerate() {
        run = if i > 0 && tokens[i - 1] == *t { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

/// VID reference: bucket index of the longest run.
pub fn vid_bucket(tokens: &[u32]) -> usize {
    let run = longest_run(tokens);
    VID_BUCKETS.iter().position(|ub| run <= *ub).unwrap_or(VID_BUCKETS.len())
}

/// Reference answer token for a task's raw content (before the query token).
pub fn reference_answer(task: TaskId, content: &[u32]) -> u32 {
    match task {
        TaskId::Text => *content.last().expect("non-empty text"),
        TaskId::Img => {
            let offsets: Vec<u32> = content.iter().map(|t| t - IMG_BASE).collect();
            option_token(img_majority_class(&offsets))
        }
        TaskId::Vid => option_token(vid_bucket(content)),
    }
}

/// Deterministic sample stream.
pub struct TaskSampler {
    rng: ChaCha8Rng,
}

impl TaskSampler {
    pub fn new(seed: u64) -> Self {
        TaskSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, task: TaskId) -> Sample {
        match task {
            TaskId::Text => self.text(),
            TaskId::Img => self.img(),
            TaskId::Vid => self.vid(),
        }
    }

    fn text(&mut self) -> Sample {
        let n = TEXT_LEN;
        let xs: Vec<u32> = (0..n).map(|_| TEXT_BASE + self.rng.gen_range(0..RANGE_WIDTH)).collect();
        let rev: Vec<u32> = xs.iter().rev().copied().collect();
        let mut tokens = xs.clone();
        tokens.push(TEXT_SEP);
        tokens.extend_from_slice(&rev[..n - 1]);
        let targets = (0..n).map(|k| (n + k, rev[k])).collect();
        let k = self.rng.gen_range(0..n);
        Sample {
            task: TaskId::Text,
            tokens,
            targets,
            eval_pos: n + k,
            answer: rev[k],
        }
    }

    fn img(&mut self) -> Sample {
        let n_classes = N_OPTIONS;
        let majority = self.rng.gen_range(0..n_classes);
        let top = self.rng.gen_range(6..=9usize);
        let mut counts = [0usize; N_OPTIONS];
        counts[majority] = top;
        let cap = top - IMG_MIN_MARGIN; // minority classes stay at or below this
        for _ in 0..IMG_LEN - top {
            let open: Vec<usize> = (0..n_classes).filter(|&c| c != majority && counts[c] < cap).collect();
            let c = *open.choose(&mut self.rng).expect("capacity for the minority classes");
            counts[c] += 1;
        }
        let mut offsets = Vec::with_capacity(IMG_LEN);
        for (class, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let within = self.rng.gen_range(0..RANGE_WIDTH / n_classes as u32);
                offsets.push(within * n_classes as u32 + class as u32);
            }
        }
        offsets.shuffle(&mut self.rng);
        let content: Vec<u32> = offsets.iter().map(|o| IMG_BASE + o).collect();
        let answer = reference_answer(TaskId::Img, &content);
        let mut tokens = content;
        tokens.push(IMG_QUERY);
        let pos = tokens.len() - 1;
        Sample {
            task: TaskId::Img,
            tokens,
            targets: vec![(pos, answer)],
            eval_pos: pos,
            answer,
        }
    }

    fn vid(&mut self) -> Sample {
        let bucket = self.rng.gen_range(0..N_OPTIONS);
        let lo = if bucket == 0 { 1 } else { VID_BUCKETS[bucket - 1] + 1 };
        let hi = VID_BUCKETS.get(bucket).copied().unwrap_or(VID_MAX_RUN);
        let planted = self.rng.gen_range(lo..=hi);
        let filler_max = (lo - 1).max(1).min(planted);
        let mut runs = Vec::new();
        let mut total = 0;
        while total < VID_LEN {
            let r = self.rng.gen_range(1..=filler_max);
            runs.push(r);
            total += r;
        }
        // the planted run must end inside the clip
        let mut valid = 0;
        let mut prefix = 0;
        while valid < runs.len() && prefix + planted <= VID_LEN {
            prefix += runs[valid];
            valid += 1;
        }
        let at = self.rng.gen_range(0..valid.max(1));
        runs.insert(at, planted);
        let mut content = Vec::with_capacity(VID_LEN);
        let mut prev = u32::MAX;
        for r in runs {
            let mut tok = VID_BASE + self.rng.gen_range(0..RANGE_WIDTH);
            while tok == prev {
                tok = VID_BASE + self.rng.gen_range(0..RANGE_WIDTH);
            }
            prev = tok;
            for _ in 0..r {
                if content.len() < VID_LEN {
                    content.push(tok);
                }
            }
        }
        let answer = reference_answer(TaskId::Vid, &content);
        let mut tokens = content;
        tokens.push(VID_QUERY);
        let pos = tokens.len() - 1;
        Sample {
            task: TaskId::Vid,
            tokens,
            targets: vec![(pos, answer)],
            eval_pos: pos,
            answer,
        }
    }
}

/// Block round-robin schedule: `[(TEXT, 3), (IMG, 2), (VID, 1)]` repeats
/// `TEXT TEXT TEXT IMG IMG VID`.
#[derive(Debug, Clone)]
pub struct MixtureSchedule {
    pattern: Vec<TaskId>,
    cursor: usize,
}

impl MixtureSchedule {
    pub fn new(mixture: &[(TaskId, usize)]) -> Self {
        let pattern = mixture
            .iter()
            .flat_map(|(t, w)| std::iter::repeat(*t).take(*w))
            .collect();
        MixtureSchedule { pattern, cursor: 0 }
    }

    pub fn block_len(&self) -> usize {
        self.pattern.len()
    }
}

impl Iterator for MixtureSchedule {
    type Item = TaskId;

    fn next(&mut self) -> Option<TaskId> {
        let t = self.pattern[self.cursor % self.pattern.len()];
        self.cursor += 1;
        Some(t)
    }
}
