#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 2000-01-01T00:00:00Z
const START: i64 = 946_684_800;
const DAY: i64 = 86_400;

/// `user::item::rating::timestamp` lines over six months. Every user rates
/// at least three distinct items.
pub fn synthetic_ratings(users: usize, items: usize, per_user: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for u in 1..=users {
        let picks = rand::seq::index::sample(&mut rng, items, per_user.min(items));
        for i in picks.iter() {
            let rating = 1 + (u * 7 + i * 3) % 5;
            let ts = START + rng.random_range(0..180 * DAY);
            writeln!(out, "{u}::{}::{rating}::{ts}", i + 1).unwrap();
        }
    }
    out
}

pub fn write_ratings(dir: &Path) -> PathBuf {
    let p = dir.join("ratings.dat");
    std::fs::write(&p, synthetic_ratings(30, 20, 8, 1)).unwrap();
    p
}

/// Small model flags so debug-build runs stay quick.
pub const SMALL: &[&str] = &[
    "--dim", "4",
    "--variance-hidden-dim", "3",
    "--variance-mlp-dim", "3",
    "--lstm-hidden-dim", "3",
    "--tower-dims", "8,4",
    "--time-bins", "3",
    "--time-scheme", "equal_width",
];

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dverec"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dverec")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
