use super::EnvError;
use crate::preference::TrajectorySegment;

/// Contact flags, ordered FL, FR, RL, RR.
pub const CONTACT_CHANNEL: &str = "feet_contacts";

/// The four-foot contact rows of a segment.
pub fn contact_rows(segment: &TrajectorySegment) -> Result<&[Vec<f64>], EnvError> {
    let rows = segment
        .channel(CONTACT_CHANNEL)
        .ok_or_else(|| EnvError::MissingChannel(CONTACT_CHANNEL.into()))?;
    let width = rows.first().map_or(0, Vec::len);
    if width != 4 {
        return Err(EnvError::ChannelWidth {
            channel: CONTACT_CHANNEL.into(),
            expected: 4,
            found: width,
        });
    }
    Ok(rows)
}

/// Mean per-step mismatch of the front pair and the rear pair; 0 is a
/// perfect bound, 2 is fully alternating.
pub fn sync_error(segment: &TrajectorySegment) -> Result<f64, EnvError> {
    let rows = contact_rows(segment)?;
    let total: f64 = rows
        .iter()
        .map(|c| (c[0] - c[1]).abs() + (c[2] - c[3]).abs())
        .sum();
    Ok(total / rows.len() as f64)
}

/// Contact onsets (0 to 1 transitions) per foot per second.
pub fn cadence(segment: &TrajectorySegment, dt: f64) -> Result<f64, EnvError> {
    let rows = contact_rows(segment)?;
    if rows.len() < 2 {
        return Err(EnvError::TooShort(rows.len()));
    }
    if !(dt > 0.0) {
        return Err(EnvError::Config(format!("dt must be positive, got {dt}")));
    }
    let onsets: usize = rows
        .windows(2)
        .map(|w| (0..4).filter(|&i| w[0][i] == 0.0 && w[1][i] == 1.0).count())
        .sum();
    Ok(onsets as f64 / (4.0 * rows.len() as f64 * dt))
}

/// Mean |command − forward velocity| over the segment.
pub fn tracking_error(segment: &TrajectorySegment) -> Result<f64, EnvError> {
    let cmd = segment
        .channel("commands")
        .ok_or_else(|| EnvError::MissingChannel("commands".into()))?;
    let vel = segment
        .channel("base_linear_velocity")
        .ok_or_else(|| EnvError::MissingChannel("base_linear_velocity".into()))?;
    let total: f64 = cmd.iter().zip(vel).map(|(c, v)| (c[0] - v[0]).abs()).sum();
    Ok(total / cmd.len() as f64)
}
