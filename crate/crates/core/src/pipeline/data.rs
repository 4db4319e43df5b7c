//! Procedural "latent videos": a Gaussian blob gliding across a token grid.
//!
//! Each video token has four leading channels: intensity `a*g`, the two
//! offset-weighted moments `a*g*dy/r` and `a*g*dx/r`, and an optional noise
//! channel. Text tokens encode the clip's velocity, radius and amplitude but
//! not its position, so where the blob is can only be read from the video.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compression::Grid;
use crate::error::{Error, Result};
use crate::flexformer::Segment;
use crate::numerics::Tensor;

/// Minimum token width: three blob channels plus one noise channel.
pub const MIN_TOKEN_DIM: usize = 4;
/// Number of text tokens per clip.
pub const TEXT_TOKENS: usize = 2;
/// Velocity scale used in the text encoding.
const VELOCITY_GAIN: f64 = 4.0;

/// Motion and layout of one synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    /// Blob center `(h, w)` at frame 0, in token units.
    pub center: (f64, f64),
    /// Per-frame displacement `(dh, dw)`.
    pub velocity: (f64, f64),
    pub radius: f64,
    pub amplitude: f64,
    /// `(T_total, H, W)`.
    pub grid: Grid,
    pub token_dim: usize,
    pub seed: u64,
    /// Standard deviation of the noise channel (0 disables it).
    pub noise: f64,
}

/// Ranges for randomly drawn clip parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipDistribution {
    pub grid: Grid,
    pub token_dim: usize,
    /// Per-axis speed range; each axis gets a random sign. The upper end is
    /// capped so the blob cannot leave the grid.
    pub speed: (f64, f64),
    pub radius: (f64, f64),
    pub amplitude: (f64, f64),
    pub noise: f64,
}

impl ClipDistribution {
    pub fn new(grid: Grid, token_dim: usize) -> Self {
        Self { grid, token_dim, speed: (0.1, 0.25), radius: (0.8, 1.2), amplitude: (0.6, 1.0), noise: 0.0 }
    }

    /// Draws a spec whose blob center stays inside the grid for every frame.
    pub fn sample(&self, seed: u64) -> Result<ClipSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = (self.grid.t - 1) as f64;
        let mut axis = |extent: usize| -> Result<(f64, f64)> {
            let hi = (extent - 1) as f64;
            let top = self.speed.1.min(hi / span.max(1.0));
            if top < self.speed.0 {
                return Err(Error::Spec(format!("no speed in {:?} keeps the blob in extent {extent}", self.speed)));
            }
            let speed = rng.gen_range(self.speed.0..=top);
            let v = if rng.gen_bool(0.5) { speed } else { -speed };
            let travel = v * span;
            let (lo_c, hi_c) = (0f64.max(-travel), hi.min(hi - travel));
            Ok((rng.gen_range(lo_c..=hi_c.max(lo_c)), v))
        };
        let (ch, vh) = axis(self.grid.h)?;
        let (cw, vw) = axis(self.grid.w)?;
        let radius = rng.gen_range(self.radius.0..=self.radius.1);
        let amplitude = rng.gen_range(self.amplitude.0..=self.amplitude.1);
        Ok(ClipSpec {
            center: (ch, cw),
            velocity: (vh, vw),
            radius,
            amplitude,
            grid: self.grid,
            token_dim: self.token_dim,
            seed,
            noise: self.noise,
        })
    }
}

/// Rendered video and caption tokens of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub grid: Grid,
    pub video: Tensor,
    pub text: Tensor,
}

impl ClipSpec {
    /// Blob center at frame `f`.
    pub fn center_at(&self, f: f64) -> (f64, f64) {
        (self.center.0 + f * self.velocity.0, self.center.1 + f * self.velocity.1)
    }

    /// Closed-form blob channels at a continuous `(h, w)` location for a
    /// blob centered at `c`.
    pub fn blob_channels(&self, c: (f64, f64), h: f64, w: f64) -> [f64; 3] {
        let (dh, dw) = (h - c.0, w - c.1);
        let r = self.radius;
        let g = self.amplitude * (-(dh * dh + dw * dw) / (2.0 * r * r)).exp();
        [g, g * dh / r, g * dw / r]
    }

    fn validate(&self) -> Result<()> {
        let g = self.grid;
        if g.t == 0 || g.h == 0 || g.w == 0 {
            return Err(Error::Spec("grid extents must be positive".into()));
        }
        if self.token_dim < MIN_TOKEN_DIM {
            return Err(Error::Spec(format!("token_dim must be at least {MIN_TOKEN_DIM}")));
        }
        if !(self.radius > 0.0) || !(self.amplitude > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Spec("radius and amplitude must be positive, noise non-negative".into()));
        }
        for f in [0.0, (g.t - 1) as f64] {
            let (h, w) = self.center_at(f);
            let tol = 1e-9;
            if h < -tol || h > (g.h - 1) as f64 + tol || w < -tol || w > (g.w - 1) as f64 + tol {
                return Err(Error::Spec(format!("blob center ({h:.3}, {w:.3}) leaves the grid at frame {f}")));
            }
        }
        Ok(())
    }

    /// Caption tokens: `[1, 0, gain*vh, gain*vw, 0..]` and `[0, 1, r, a, 0..]`.
    pub fn text_tokens(&self) -> Tensor {
        let c = self.token_dim;
        let mut data = vec![0.0; TEXT_TOKENS * c];
        data[0] = 1.0;
        data[2] = VELOCITY_GAIN * self.velocity.0;
        data[3] = VELOCITY_GAIN * self.velocity.1;
        data[c + 1] = 1.0;
        data[c + 2] = self.radius;
        data[c + 3] = self.amplitude;
        Tensor::new(vec![TEXT_TOKENS, c], data).expect("finite caption")
    }
}

/// Renders a clip. Deterministic in the spec (including its seed).
pub fn make_clip(spec: &ClipSpec) -> Result<Clip> {
    spec.validate()?;
    let g = spec.grid;
    let c = spec.token_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut data = Vec::with_capacity(g.tokens() * c);
    for f in 0..g.t {
        let center = spec.center_at(f as f64);
        for h in 0..g.h {
            for w in 0..g.w {
                data.extend(spec.blob_channels(center, h as f64, w as f64));
                for _ in 3..c {
                    let n: f64 = rng.sample(StandardNormal);
                    data.push(spec.noise * n);
                }
            }
        }
    }
    Ok(Clip { grid: g, video: Tensor::new(vec![g.tokens(), c], data)?, text: spec.text_tokens() })
}

/// Cuts a clip into `k` equal contiguous segments sharing its caption.
pub fn split_clip(clip: &Clip, k: usize) -> Result<Vec<Segment>> {
    if k == 0 || clip.grid.t % k != 0 {
        return Err(Error::Contract(format!("{} frames do not split into {k} segments", clip.grid.t)));
    }
    let t = clip.grid.t / k;
    let grid = Grid::new(t, clip.grid.h, clip.grid.w);
    (0..k)
        .map(|i| {
            let video = clip.video.slice_rows(i * grid.tokens(), grid.tokens())?;
            Segment::new(grid, video, Some(clip.text.clone()))
        })
        .collect()
}

/// Stacks segments back into one `[T_total*H*W x c]` video.
pub fn concat_segments(segments: &[Segment]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = segments.iter().map(Segment::video).collect();
    Tensor::concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ClipSpec {
        ClipSpec {
            center: (1.0, 0.5),
            velocity: (0.15, 0.15),
            radius: 1.5,
            amplitude: 0.8,
            grid: Grid::new(12, 4, 4),
            token_dim: 4,
            seed: 3,
            noise: 0.0,
        }
    }

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let s = ClipSpec { velocity: (0.0, 0.0), ..spec() };
        let clip = make_clip(&s).unwrap();
        let frame = 16;
        for f in 1..12 {
            for i in 0..frame {
                assert_eq!(clip.video.row(f * frame + i), clip.video.row(i));
            }
        }
    }

    #[test]
    fn clips_are_deterministic() {
        let s = ClipSpec { noise: 0.1, ..spec() };
        assert_eq!(make_clip(&s).unwrap(), make_clip(&s).unwrap());
        let other = ClipSpec { seed: 4, ..s };
        assert_ne!(make_clip(&s).unwrap(), make_clip(&other).unwrap());
    }

    #[test]
    fn frames_follow_closed_form_motion() {
        let s = spec();
        let clip = make_clip(&s).unwrap();
        for f in 0..12 {
            for h in 0..4 {
                for w in 0..4 {
                    // Oracle: frame 0's blob evaluated after moving the sample point back.
                    let back = (h as f64 - f as f64 * s.velocity.0, w as f64 - f as f64 * s.velocity.1);
                    let expect = s.blob_channels(s.center, back.0, back.1);
                    let row = clip.video.row(f * 16 + h * 4 + w);
                    for c in 0..3 {
                        assert!((row[c] - expect[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sub_token_shift_matches_bilinear_resampling() {
        for v in [(0.2, 0.1), (0.1, 0.2), (0.15, -0.15), (-0.2, 0.05)] {
            let s = ClipSpec { center: (2.5, 2.5), velocity: v, grid: Grid::new(2, 6, 6), ..spec() };
            let clip = make_clip(&s).unwrap();
            let frame0 = |h: usize, w: usize| clip.video.row(h * 6 + w)[0];
            for h in 1..5 {
                for w in 1..5 {
                    let (y, x) = (h as f64 - v.0, w as f64 - v.1);
                    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                    let bilinear = (1.0 - fy) * (1.0 - fx) * frame0(y0, x0)
                        + (1.0 - fy) * fx * frame0(y0, x0 + 1)
                        + fy * (1.0 - fx) * frame0(y0 + 1, x0)
                        + fy * fx * frame0(y0 + 1, x0 + 1);
                    let got = clip.video.row(36 + h * 6 + w)[0];
                    assert!((got - bilinear).abs() < 0.05, "v={v:?} h={h} w={w}");
                }
            }
        }
    }

    #[test]
    fn escaping_blob_is_a_spec_error() {
        let s = ClipSpec { velocity: (0.5, 0.0), ..spec() };
        assert!(matches!(make_clip(&s), Err(Error::Spec(_))));
        let narrow = ClipSpec { token_dim: 3, ..spec() };
        assert!(matches!(make_clip(&narrow), Err(Error::Spec(_))));
    }

    #[test]
    fn sampled_specs_stay_in_grid() {
        let dist = ClipDistribution::new(Grid::new(12, 4, 4), 4);
        for seed in 0..200 {
            let s = dist.sample(seed).unwrap();
            make_clip(&s).unwrap();
            assert!(s.velocity.0.abs() >= 0.1 && s.velocity.1.abs() <= 0.25);
        }
        assert_eq!(dist.sample(5).unwrap(), dist.sample(5).unwrap());
    }

    #[test]
    fn caption_encodes_motion_but_not_position() {
        let a = spec();
        let b = ClipSpec { center: (2.0, 1.0), ..a };
        assert_eq!(a.text_tokens(), b.text_tokens());
        assert!((a.text_tokens().row(0)[2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn split_and_concat_roundtrip() {
        let clip = make_clip(&spec()).unwrap();
        let one = split_clip(&clip, 1).unwrap();
        assert_eq!(one[0].video(), &clip.video);
        let three = split_clip(&clip, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!(three.iter().all(|s| s.grid() == Grid::new(4, 4, 4) && s.text() == Some(&clip.text)));
        assert_eq!(concat_segments(&three).unwrap(), clip.video);
        assert!(matches!(split_clip(&clip, 5), Err(Error::Contract(_))));
    }
}
