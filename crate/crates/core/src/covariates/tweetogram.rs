//! Per-user-normalized posting-rhythm profile ("Tweetogram").
//!
//! For each day of the window, every user active that day contributes their
//! share of posts in each time bin, and the shares are averaged over the
//! active users:
//!
//! ```text
//! A_d(t) = (1 / N_d) * sum_i f_i(d, t) / sum_tau f_i(d, tau)
//! ```
//!
//! Each daily profile sums to one. The default output averages the daily
//! profiles bin by bin; `daily` keeps them separate.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{CovariateSurface, Scope};
use crate::error::{Result, ScrError};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostEvent {
    pub user_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TweetogramOptions {
    /// Start of the window in epoch seconds; bins are aligned to it, so pass
    /// local midnight to get clock-hour bins.
    pub start: i64,
    pub days: usize,
    pub bin_seconds: i64,
}

impl TweetogramOptions {
    pub fn hourly(start: i64, days: usize) -> Self {
        Self {
            start,
            days,
            bin_seconds: 3600,
        }
    }

    pub fn bins_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.bin_seconds) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tweetogram {
    /// One profile per day, each of length `bins_per_day`.
    pub daily: Vec<Vec<f64>>,
    /// Bin-wise mean of the daily profiles over days with at least one active user.
    pub profile: Vec<f64>,
    /// Users with at least one post in the window.
    pub n_users: usize,
    /// Users whose events all fall outside the window.
    pub excluded_users: Vec<String>,
}

impl Tweetogram {
    /// Occasion-scope surface (the averaged profile), or a
    /// session × occasion surface with one session per day when `per_day`.
    pub fn to_surface(&self, name: &str, per_day: bool) -> Result<CovariateSurface> {
        if per_day {
            CovariateSurface::new(name, Scope::SessionOccasion, self.daily.concat())
        } else {
            CovariateSurface::new(name, Scope::Occasion, self.profile.clone())
        }
    }
}

pub fn tweetogram(events: &[PostEvent], opts: &TweetogramOptions) -> Result<Tweetogram> {
    if opts.bin_seconds <= 0 || SECONDS_PER_DAY % opts.bin_seconds != 0 {
        return Err(ScrError::InvalidInput(format!(
            "bin width {} s does not divide a day",
            opts.bin_seconds
        )));
    }
    if opts.days == 0 {
        return Err(ScrError::InvalidInput(
            "tweetogram window must cover at least one day".into(),
        ));
    }
    let bins = opts.bins_per_day();
    let end = opts.start + opts.days as i64 * SECONDS_PER_DAY;

    // user -> day -> per-bin counts
    let mut counts: BTreeMap<&str, BTreeMap<usize, Vec<u64>>> = BTreeMap::new();
    let mut seen: BTreeMap<&str, bool> = BTreeMap::new();
    for e in events {
        let inside = (opts.start..end).contains(&e.timestamp);
        let flag = seen.entry(e.user_id.as_str()).or_insert(false);
        *flag |= inside;
        if !inside {
            continue;
        }
        let offset = e.timestamp - opts.start;
        let day = (offset / SECONDS_PER_DAY) as usize;
        let bin = ((offset % SECONDS_PER_DAY) / opts.bin_seconds) as usize;
        counts
            .entry(e.user_id.as_str())
            .or_default()
            .entry(day)
            .or_insert_with(|| vec![0; bins])[bin] += 1;
    }
    let excluded_users: Vec<String> = seen
        .iter()
        .filter(|(_, &inside)| !inside)
        .map(|(u, _)| u.to_string())
        .collect();
    if !excluded_users.is_empty() {
        log::warn!(
            "{} user(s) have no posts in the tweetogram window and are excluded",
            excluded_users.len()
        );
    }
    if counts.is_empty() {
        return Err(ScrError::Empty(
            "no post events fall inside the tweetogram window".into(),
        ));
    }

    let mut daily = vec![vec![0.0; bins]; opts.days];
    let mut active = vec![0usize; opts.days];
    for per_day in counts.values() {
        for (&day, c) in per_day {
            let total: u64 = c.iter().sum();
            for (a, &f) in daily[day].iter_mut().zip(c) {
                *a += f as f64 / total as f64;
            }
            active[day] += 1;
        }
    }
    for (profile, &n) in daily.iter_mut().zip(&active) {
        if n > 0 {
            profile.iter_mut().for_each(|a| *a /= n as f64);
        }
    }
    let used_days = active.iter().filter(|&&n| n > 0).count() as f64;
    let profile = (0..bins)
        .map(|b| {
            daily
                .iter()
                .zip(&active)
                .filter(|(_, &n)| n > 0)
                .map(|(d, _)| d[b])
                .sum::<f64>()
                / used_days
        })
        .collect();
    Ok(Tweetogram {
        daily,
        profile,
        n_users: counts.len(),
        excluded_users,
    })
}

/// Reads `user_id,timestamp_iso8601` (RFC 3339 timestamps, any offset).
pub fn read_post_csv<R: Read>(reader: R) -> Result<Vec<PostEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ts = rec.get(1).unwrap_or("");
        let parsed = chrono::DateTime::parse_from_rfc3339(ts)
            .map_err(|e| ScrError::InvalidInput(format!("post file row {}: bad timestamp `{ts}`: {e}", line + 2)))?;
        out.push(PostEvent {
            user_id: rec.get(0).unwrap_or("").to_string(),
            timestamp: parsed.timestamp(),
        });
    }
    Ok(out)
}

/// Parses a fixed UTC offset such as `-06:00`, `+0530` or `Z` into seconds.
pub fn parse_utc_offset(text: &str) -> Result<i64> {
    let t = text.trim();
    if t == "Z" || t.eq_ignore_ascii_case("utc") {
        return Ok(0);
    }
    let bad = || ScrError::InvalidInput(format!("cannot parse UTC offset `{text}`"));
    let (sign, rest) = match t.as_bytes().first() {
        Some(b'+') => (1, &t[1..]),
        Some(b'-') => (-1, &t[1..]),
        _ => return Err(bad()),
    };
    let digits: String = rest.chars().filter(|c| *c != ':').collect();
    if digits.len() != 4 || !digits.chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let h: i64 = digits[..2].parse().map_err(|_| bad())?;
    let m: i64 = digits[2..].parse().map_err(|_| bad())?;
    Ok(sign * (h * 3600 + m * 60))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn ev(u: &str, t: i64) -> PostEvent {
        PostEvent {
            user_id: u.into(),
            timestamp: t,
        }
    }

    const T0: i64 = 1_529_647_200; // 2018-06-22T00:00:00-06:00

    #[test]
    fn uniform_poster_is_flat() {
        let events: Vec<_> = (0..24).map(|h| ev("u", T0 + h * 3600 + 10)).collect();
        let tg = tweetogram(&events, &TweetogramOptions::hourly(T0, 1)).unwrap();
        for a in &tg.profile {
            assert_relative_eq!(*a, 1.0 / 24.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_post_at_hour_three() {
        let tg = tweetogram(&[ev("u", T0 + 3 * 3600 + 59)], &TweetogramOptions::hourly(T0, 1)).unwrap();
        for (h, a) in tg.profile.iter().enumerate() {
            assert_eq!(*a, if h == 3 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn per_user_normalization_dominates_counts() {
        let mut events: Vec<_> = (0..10).map(|i| ev("heavy", T0 + i * 60)).collect();
        events.push(ev("light", T0 + 12 * 3600));
        let tg = tweetogram(&events, &TweetogramOptions::hourly(T0, 1)).unwrap();
        assert_eq!(tg.profile[0], 0.5);
        assert_eq!(tg.profile[12], 0.5);
        assert_eq!(tg.profile.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn whole_day_windows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let events: Vec<_> = (0..2000)
            .map(|_| {
                ev(
                    &format!("u{}", rng.random_range(0..150)),
                    T0 + rng.random_range(0..3 * SECONDS_PER_DAY),
                )
            })
            .collect();
        let tg = tweetogram(&events, &TweetogramOptions::hourly(T0, 3)).unwrap();
        assert!((tg.profile.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for d in &tg.daily {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(tg.to_surface("tw", true).unwrap().values.len(), 72);
        assert_eq!(tg.to_surface("tw", false).unwrap().values.len(), 24);
    }

    #[test]
    fn duplicating_users_leaves_profile_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let events: Vec<_> = (0..500)
            .map(|_| {
                ev(
                    &format!("u{}", rng.random_range(0..40)),
                    T0 + rng.random_range(0..2 * SECONDS_PER_DAY),
                )
            })
            .collect();
        let mut doubled = events.clone();
        doubled.extend(events.iter().map(|e| ev(&format!("copy-{}", e.user_id), e.timestamp)));
        let opts = TweetogramOptions::hourly(T0, 2);
        let a = tweetogram(&events, &opts).unwrap();
        let b = tweetogram(&doubled, &opts).unwrap();
        for (x, y) in a.profile.iter().zip(&b.profile) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn users_outside_window_excluded() {
        let tg = tweetogram(
            &[ev("in", T0 + 5), ev("out", T0 - 5)],
            &TweetogramOptions::hourly(T0, 1),
        )
        .unwrap();
        assert_eq!(tg.n_users, 1);
        assert_eq!(tg.excluded_users, vec!["out".to_string()]);
        assert!(tweetogram(&[ev("out", T0 - 5)], &TweetogramOptions::hourly(T0, 1)).is_err());
    }

    #[test]
    fn parses_posts_and_offsets() {
        let csv = "user_id,timestamp_iso8601\nu1,2018-06-22T03:15:00-06:00\n";
        let posts = read_post_csv(csv.as_bytes()).unwrap();
        assert_eq!(posts[0].timestamp, T0 + 3 * 3600 + 15 * 60);
        assert_eq!(parse_utc_offset("-06:00").unwrap(), -21_600);
        assert_eq!(parse_utc_offset("+0530").unwrap(), 19_800);
        assert!(parse_utc_offset("6").is_err());
    }
}
