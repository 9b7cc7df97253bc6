//! Terminal shapes above the parabola and the KPZ upper-tail rate function.
//!
//! A shape function at time `t > 0` interpolates node values `h_c` at
//! `x_1 < … < x_n`, stays above the parabola `℘(t,x) = -x²/(2t)`, equals `℘`
//! outside a bounded interval, and has constant slope on `{h > ℘}` away from
//! the nodes. Between consecutive nodes the shape is the chord when the chord
//! clears the parabola, otherwise the two tangent lines from the nodes with
//! the parabolic arc between the tangency points; the outermost pieces are
//! tangent lines with abscissas `x₀ ∓ √(x₀² + 2 t h₀)`.
//!
//! On such shapes the rate function
//! `i_kpz = ∫ ((∂_x h)²/2 − (∂_x ℘)²/2) dx` is a finite sum of per-piece
//! closed forms. Its gradient in the node values is the slope drop at each
//! node; the gradient map is inverted by monotone coordinate-wise bisection.
//! Backward Hopf–Lax evolution shifts every line down by `(s/2)(slope)²` and
//! replaces `℘(t)` by `℘(t−s)`; the kinks of the evolving shape are shocks
//! moving at the Rankine–Hugoniot velocity `(u⁻ + u⁺)/2`, and they coincide
//! with the optimal cluster trajectories of the dual endpoint problem.

use serde::{Deserialize, Serialize};

use crate::cluster::{optimal_deviation, PiecewiseLinear};
use crate::rate::lyapunov_exponent;
use crate::{Error, Result};

/// The parabola `℘(t,x) = -x²/(2t)`.
pub fn parabola(t: f64, x: f64) -> f64 {
    -x * x / (2.0 * t)
}

/// `∂_x ℘(t,x) = -x/t`.
pub fn parabola_slope(t: f64, x: f64) -> f64 {
    -x / t
}

/// One piece of a shape function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Piece {
    /// `u·x + b` on `[x0, x1]`.
    Linear { u: f64, b: f64, x0: f64, x1: f64 },
    /// The parabola `℘(t, ·)` on `[x0, x1]`; bounds may be infinite.
    Parabolic { x0: f64, x1: f64 },
}

impl Piece {
    fn x0(&self) -> f64 {
        match *self {
            Piece::Linear { x0, .. } | Piece::Parabolic { x0, .. } => x0,
        }
    }

    fn x1(&self) -> f64 {
        match *self {
            Piece::Linear { x1, .. } | Piece::Parabolic { x1, .. } => x1,
        }
    }

    fn slope_at(&self, t: f64, x: f64) -> f64 {
        match *self {
            Piece::Linear { u, .. } => u,
            Piece::Parabolic { .. } => parabola_slope(t, x),
        }
    }
}

/// Piecewise description of a shape: linear segments and parabola arcs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapeJson", into = "ShapeJson")]
pub struct ShapeFunction {
    t: f64,
    pieces: Vec<Piece>,
    nodes: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum PieceJson {
    Linear {
        u: f64,
        b: f64,
        a: Option<f64>,
        bx: Option<f64>,
    },
    Parabola {
        a: Option<f64>,
        bx: Option<f64>,
    },
}

/// Wire form: `{"t": t, "pieces": [...], "nodes": [[x,h],...]}` with `null`
/// bounds standing for unbounded parabola ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ShapeJson {
    t: f64,
    pieces: Vec<PieceJson>,
    #[serde(default)]
    nodes: Vec<(f64, f64)>,
}

fn bound_to_json(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn bound_from_json(x: Option<f64>, sign: f64) -> f64 {
    x.unwrap_or(sign * f64::INFINITY)
}

impl TryFrom<ShapeJson> for ShapeFunction {
    type Error = Error;
    fn try_from(j: ShapeJson) -> Result<Self> {
        if !j.t.is_finite() || j.t <= 0.0 {
            return Err(Error::BadShapeTime(j.t));
        }
        let pieces: Vec<Piece> = j
            .pieces
            .into_iter()
            .map(|p| match p {
                PieceJson::Linear { u, b, a, bx } => Piece::Linear {
                    u,
                    b,
                    x0: bound_from_json(a, -1.0),
                    x1: bound_from_json(bx, 1.0),
                },
                PieceJson::Parabola { a, bx } => Piece::Parabolic {
                    x0: bound_from_json(a, -1.0),
                    x1: bound_from_json(bx, 1.0),
                },
            })
            .collect();
        if pieces.is_empty() {
            return Err(Error::invalid("shape needs at least one piece"));
        }
        for w in pieces.windows(2) {
            if (w[0].x1() - w[1].x0()).abs() > 1e-9 * (1.0 + w[0].x1().abs()) {
                return Err(Error::invalid("shape pieces must tile the line"));
            }
        }
        Ok(ShapeFunction {
            t: j.t,
            pieces,
            nodes: j.nodes,
        })
    }
}

impl From<ShapeFunction> for ShapeJson {
    fn from(s: ShapeFunction) -> Self {
        ShapeJson {
            t: s.t,
            pieces: s
                .pieces
                .into_iter()
                .map(|p| match p {
                    Piece::Linear { u, b, x0, x1 } => PieceJson::Linear {
                        u,
                        b,
                        a: bound_to_json(x0),
                        bx: bound_to_json(x1),
                    },
                    Piece::Parabolic { x0, x1 } => PieceJson::Parabola {
                        a: bound_to_json(x0),
                        bx: bound_to_json(x1),
                    },
                })
                .collect(),
            nodes: s.nodes,
        }
    }
}

fn validate_nodes(t: f64, xs: &[f64], hs: &[f64]) -> Result<()> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::BadShapeTime(t));
    }
    if xs.is_empty() {
        return Err(Error::EmptyClusterList);
    }
    if xs.len() != hs.len() {
        return Err(Error::LengthMismatch(xs.len(), hs.len()));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) || xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonIncreasingPositions);
    }
    for (c, (&x, &h)) in xs.iter().zip(hs).enumerate() {
        let floor = parabola(t, x);
        if !h.is_finite() || h < floor - 1e-10 * (1.0 + floor.abs()) {
            return Err(Error::NodeBelowParabola {
                index: c,
                x,
                h,
                floor,
            });
        }
    }
    Ok(())
}

/// Tangency abscissa offset `√(x² + 2 t h)`; a discriminant within float
/// noise of zero means the node lies on the parabola.
fn tangent_offset(t: f64, x: f64, h: f64) -> f64 {
    let disc = x * x + 2.0 * t * h;
    if disc <= 1e-14 * (1.0 + x * x) {
        0.0
    } else {
        disc.sqrt()
    }
}

impl ShapeFunction {
    /// Builds the shape through the nodes `(x_c, h_c)` at time `t`.
    pub fn build(t: f64, xs: &[f64], hs: &[f64]) -> Result<ShapeFunction> {
        validate_nodes(t, xs, hs)?;
        let n = xs.len();
        let mut pieces: Vec<Piece> = Vec::new();

        // Left wing: tangent line from the first node, parabola beyond.
        let off = tangent_offset(t, xs[0], hs[0]);
        if off > 0.0 {
            let y = xs[0] - off;
            let u = parabola_slope(t, y);
            pieces.push(Piece::Parabolic {
                x0: f64::NEG_INFINITY,
                x1: y,
            });
            pieces.push(Piece::Linear {
                u,
                b: hs[0] - u * xs[0],
                x0: y,
                x1: xs[0],
            });
        } else {
            pieces.push(Piece::Parabolic {
                x0: f64::NEG_INFINITY,
                x1: xs[0],
            });
        }

        // Interior: chord when it clears the parabola, tangents + arc else.
        for c in 0..n - 1 {
            let (xa, ha) = (xs[c], hs[c]);
            let (xb, hb) = (xs[c + 1], hs[c + 1]);
            let u = (hb - ha) / (xb - xa);
            let b = ha - u * xa;
            // Gap chord − parabola is the convex quadratic x²/(2t) + u·x + b.
            let x_star = -u * t;
            let dip = if x_star > xa && x_star < xb {
                x_star * x_star / (2.0 * t) + u * x_star + b
            } else {
                0.0
            };
            let scale = 1.0 + ha.abs().max(hb.abs());
            if dip < -1e-13 * scale {
                let y_r = xa + tangent_offset(t, xa, ha);
                let y_l = xb - tangent_offset(t, xb, hb);
                if y_r <= y_l {
                    let ur = parabola_slope(t, y_r);
                    let ul = parabola_slope(t, y_l);
                    pieces.push(Piece::Linear {
                        u: ur,
                        b: ha - ur * xa,
                        x0: xa,
                        x1: y_r,
                    });
                    pieces.push(Piece::Parabolic { x0: y_r, x1: y_l });
                    pieces.push(Piece::Linear {
                        u: ul,
                        b: hb - ul * xb,
                        x0: y_l,
                        x1: xb,
                    });
                    continue;
                }
            }
            pieces.push(Piece::Linear {
                u,
                b,
                x0: xa,
                x1: xb,
            });
        }

        // Right wing.
        let off = tangent_offset(t, xs[n - 1], hs[n - 1]);
        if off > 0.0 {
            let y = xs[n - 1] + off;
            let u = parabola_slope(t, y);
            pieces.push(Piece::Linear {
                u,
                b: hs[n - 1] - u * xs[n - 1],
                x0: xs[n - 1],
                x1: y,
            });
            pieces.push(Piece::Parabolic {
                x0: y,
                x1: f64::INFINITY,
            });
        } else {
            pieces.push(Piece::Parabolic {
                x0: xs[n - 1],
                x1: f64::INFINITY,
            });
        }

        let pieces = normalize_pieces(pieces);
        Ok(ShapeFunction {
            t,
            pieces,
            nodes: xs.iter().copied().zip(hs.iter().copied()).collect(),
        })
    }

    /// The shape that is identically the parabola at time `t`.
    pub fn pure_parabola(t: f64) -> Result<ShapeFunction> {
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::BadShapeTime(t));
        }
        Ok(ShapeFunction {
            t,
            pieces: vec![Piece::Parabolic {
                x0: f64::NEG_INFINITY,
                x1: f64::INFINITY,
            }],
            nodes: Vec::new(),
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Interpolation nodes `(x_c, h_c)` the shape was built through; for
    /// evolved shapes these are the kink points.
    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    fn piece_index_at(&self, x: f64) -> usize {
        let i = self.pieces.partition_point(|p| p.x1() < x);
        i.min(self.pieces.len() - 1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.pieces[self.piece_index_at(x)] {
            Piece::Linear { u, b, .. } => u * x + b,
            Piece::Parabolic { .. } => parabola(self.t, x),
        }
    }

    /// Left limit of the slope at `x`.
    pub fn slope_left(&self, x: f64) -> f64 {
        let mut i = self.piece_index_at(x);
        let tol = 1e-12 * (1.0 + x.abs());
        if i > 0 && (self.pieces[i].x0() - x).abs() <= tol {
            i -= 1;
        }
        self.pieces[i].slope_at(self.t, x)
    }

    /// Right limit of the slope at `x`.
    pub fn slope_right(&self, x: f64) -> f64 {
        let mut i = self.piece_index_at(x);
        let tol = 1e-12 * (1.0 + x.abs());
        if i + 1 < self.pieces.len() && (self.pieces[i].x1() - x).abs() <= tol {
            i += 1;
        }
        self.pieces[i].slope_at(self.t, x)
    }

    /// Slope drop `u(x⁻) − u(x⁺)` at a point.
    pub fn slope_drop(&self, x: f64) -> f64 {
        self.slope_left(x) - self.slope_right(x)
    }

    /// `∫ ((∂_x h)²/2 − (∂_x ℘)²/2) dx`, in closed form per piece: a linear
    /// piece on `[a,b]` contributes `(b−a)u²/2 − (b³−a³)/(6t²)`, parabola
    /// pieces contribute zero.
    pub fn i_kpz(&self) -> f64 {
        let t2 = self.t * self.t;
        self.pieces
            .iter()
            .map(|p| match *p {
                Piece::Linear { u, x0, x1, .. } => {
                    (x1 - x0) * u * u / 2.0 - (x1 * x1 * x1 - x0 * x0 * x0) / (6.0 * t2)
                }
                Piece::Parabolic { .. } => 0.0,
            })
            .sum()
    }

    /// Slope drops at the stored nodes.
    pub fn gradient(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|&(x, _)| self.slope_drop(x))
            .collect()
    }

    /// True when the slope sequence is nonincreasing (tolerance 1e-10), i.e.
    /// the terminal values lie in the concave region.
    pub fn is_concave(&self) -> bool {
        let mut prev = f64::INFINITY;
        for p in &self.pieces {
            let (s0, s1) = match *p {
                Piece::Linear { u, .. } => (u, u),
                Piece::Parabolic { x0, x1 } => {
                    let s0 = if x0.is_finite() {
                        parabola_slope(self.t, x0)
                    } else {
                        f64::INFINITY
                    };
                    let s1 = if x1.is_finite() {
                        parabola_slope(self.t, x1)
                    } else {
                        f64::NEG_INFINITY
                    };
                    (s0, s1)
                }
            };
            if s0 > prev + 1e-10 {
                return false;
            }
            prev = s1.min(s0);
        }
        true
    }

    /// Backward Hopf–Lax evolution by `back_time ∈ [0, t)`: every line drops
    /// by `(s/2)u²` and the ambient parabola becomes `℘(t−s)`; the surviving
    /// lines and their kinks are recomputed per linear run.
    ///
    /// Requires a concave shape (the line representation); the fully evolved
    /// limit `back_time = t` degenerates to a point mass and is rejected.
    pub fn hopf_lax_evolve(&self, back_time: f64) -> Result<ShapeFunction> {
        let s = back_time;
        if !s.is_finite() || s < 0.0 || s >= self.t {
            return Err(Error::BadBackTime(s, self.t));
        }
        if !self.is_concave() {
            return Err(Error::NotConcave);
        }
        if s == 0.0 {
            return Ok(self.clone());
        }
        let t_new = self.t - s;
        let mut pieces: Vec<Piece> = Vec::new();
        let mut nodes: Vec<(f64, f64)> = Vec::new();
        let mut cursor = f64::NEG_INFINITY;
        let mut i = 0;
        while i < self.pieces.len() {
            if let Piece::Parabolic { .. } = self.pieces[i] {
                i += 1;
                continue;
            }
            // A maximal run of linear pieces: shift and rebuild its envelope.
            let mut lines: Vec<(f64, f64)> = Vec::new();
            while i < self.pieces.len() {
                if let Piece::Linear { u, b, .. } = self.pieces[i] {
                    lines.push((u, b - 0.5 * s * u * u));
                    i += 1;
                } else {
                    break;
                }
            }
            let envelope = lower_envelope(&lines);
            // Tangency abscissas with the new parabola scale by (t−s)/t.
            let y_left = -envelope[0].0 * t_new;
            let y_right = -envelope[envelope.len() - 1].0 * t_new;
            pieces.push(Piece::Parabolic {
                x0: cursor,
                x1: y_left,
            });
            let mut left = y_left;
            for k in 0..envelope.len() {
                let (u, b) = envelope[k];
                let right = if k + 1 < envelope.len() {
                    let (u2, b2) = envelope[k + 1];
                    let kink = (b2 - b) / (u - u2);
                    nodes.push((kink, u2 * kink + b2));
                    kink
                } else {
                    y_right
                };
                pieces.push(Piece::Linear {
                    u,
                    b,
                    x0: left,
                    x1: right,
                });
                left = right;
            }
            cursor = y_right;
        }
        pieces.push(Piece::Parabolic {
            x0: cursor,
            x1: f64::INFINITY,
        });
        Ok(ShapeFunction {
            t: t_new,
            pieces: normalize_pieces(pieces),
            nodes,
        })
    }

    /// Sampled rows `(x, h(x), u(x))` on a uniform grid over `[lo, hi]`.
    pub fn sample_rows(&self, lo: f64, hi: f64, samples: usize) -> Vec<[f64; 3]> {
        let n = samples.max(2);
        (0..n)
            .map(|k| {
                let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                [x, self.eval(x), self.slope_right(x)]
            })
            .collect()
    }

    /// A bounded interval outside which the shape equals the parabola.
    pub fn support_hint(&self) -> (f64, f64) {
        let first = &self.pieces[0];
        let last = &self.pieces[self.pieces.len() - 1];
        let lo = if first.x1().is_finite() {
            first.x1()
        } else {
            -1.0
        };
        let hi = if last.x0().is_finite() {
            last.x0()
        } else {
            1.0
        };
        (lo, hi)
    }
}

/// Min-envelope of lines with strictly decreasing slopes, returned in order
/// with the dominated lines removed.
fn lower_envelope(lines: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut env: Vec<(f64, f64)> = Vec::with_capacity(lines.len());
    let mut kinks: Vec<f64> = Vec::new();
    for &(u, b) in lines {
        loop {
            match env.last() {
                None => break,
                Some(&(u2, b2)) => {
                    let x = (b - b2) / (u2 - u);
                    if let Some(&last_kink) = kinks.last() {
                        if x <= last_kink {
                            env.pop();
                            kinks.pop();
                            continue;
                        }
                    }
                    kinks.push(x);
                    break;
                }
            }
        }
        env.push((u, b));
    }
    env
}

fn normalize_pieces(pieces: Vec<Piece>) -> Vec<Piece> {
    let mut out: Vec<Piece> = Vec::with_capacity(pieces.len());
    for p in pieces {
        // Drop zero-length pieces.
        if p.x1() - p.x0() <= 0.0 && p.x1().is_finite() && p.x0().is_finite() {
            continue;
        }
        match (out.last_mut(), &p) {
            (Some(Piece::Parabolic { x1, .. }), Piece::Parabolic { x1: b, .. }) => {
                *x1 = *b;
            }
            (
                Some(Piece::Linear { u, b, x1, .. }),
                Piece::Linear {
                    u: u2,
                    b: b2,
                    x1: e2,
                    ..
                },
            ) if (*u - u2).abs() <= 1e-12 * (1.0 + u2.abs())
                && (*b - b2).abs() <= 1e-12 * (1.0 + b2.abs()) =>
            {
                *x1 = *e2;
            }
            _ => out.push(p),
        }
    }
    out
}

/// Gradient of `i_kpz` in the node values: the slope drop
/// `u(x_c⁻) − u(x_c⁺)` at each node.
pub fn i_kpz_gradient(t: f64, xs: &[f64], hs: &[f64]) -> Result<Vec<f64>> {
    Ok(ShapeFunction::build(t, xs, hs)?.gradient())
}

/// Iteration cap for the gradient inversion sweeps.
const INVERT_MAX_SWEEPS: usize = 10_000;

/// Inverts the gradient map: finds `h` with slope drops `ms ≥ 0` at the
/// nodes, by monotone coordinate-wise bisection. Raising `h_c` strictly
/// increases drop `c` and never increases the others, so upward sweeps from
/// the parabola converge to the unique solution, which lies in the concave
/// region.
pub fn invert_gradient(t: f64, xs: &[f64], ms: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ms.len() {
        return Err(Error::LengthMismatch(xs.len(), ms.len()));
    }
    for &m in ms {
        if !m.is_finite() || m < 0.0 {
            return Err(Error::NegativeGradient(m));
        }
    }
    let mut hs: Vec<f64> = xs.iter().map(|&x| parabola(t, x)).collect();
    validate_nodes(t, xs, &hs)?;
    let m_scale = ms.iter().fold(1.0f64, |a, &b| a.max(b));
    let tol = 1e-11 * m_scale;
    let drop_at = |hs: &[f64], c: usize| -> Result<f64> {
        let shape = ShapeFunction::build(t, xs, hs)?;
        Ok(shape.slope_drop(xs[c]))
    };
    for _sweep in 0..INVERT_MAX_SWEEPS {
        for c in 0..xs.len() {
            let target = ms[c];
            let mut lo = hs[c];
            let f_lo = drop_at(&hs, c)?;
            if (f_lo - target).abs() <= 0.1 * tol {
                continue;
            }
            // Monotone ascent keeps the current state a subsolution, so the
            // root is above `lo`; double a step to bracket it.
            let mut step = 0.5 * (1.0 + hs[c].abs());
            let mut hi = lo + step;
            let mut probe = hs.to_vec();
            for _ in 0..200 {
                probe[c] = hi;
                if drop_at(&probe, c)? >= target {
                    break;
                }
                step *= 2.0;
                hi += step;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                probe[c] = mid;
                if drop_at(&probe, c)? < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hs[c] = hi;
        }
        let grad = i_kpz_gradient(t, xs, &hs)?;
        let residual = grad
            .iter()
            .zip(ms)
            .map(|(g, m)| (g - m).abs())
            .fold(0.0f64, f64::max);
        if residual <= tol {
            return Ok(hs);
        }
    }
    let grad = i_kpz_gradient(t, xs, &hs)?;
    let residual = grad
        .iter()
        .zip(ms)
        .map(|(g, m)| (g - m).abs())
        .fold(0.0f64, f64::max);
    Err(Error::InversionDiverged {
        sweeps: INVERT_MAX_SWEEPS,
        residual,
    })
}

/// One constant-velocity stretch of a shock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockSegment {
    pub start: f64,
    pub end: f64,
    pub u_left: f64,
    pub u_right: f64,
    pub velocity: f64,
}

/// A single shock trajectory in backward time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    /// Index of the node that seeded this shock.
    pub node: usize,
    pub trajectory: PiecewiseLinear,
    pub segments: Vec<ShockSegment>,
}

/// All shocks of a concave shape, advanced event-wise over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockFan {
    pub horizon: f64,
    pub shocks: Vec<Shock>,
}

impl ShockFan {
    pub fn position(&self, shock: usize, s: f64) -> f64 {
        self.shocks[shock].trajectory.eval(s)
    }

    /// CSV-ready rows `(s, shock_1 … shock_k)`.
    pub fn sample_rows(&self, samples: usize) -> Vec<Vec<f64>> {
        let n = samples.max(2);
        (0..n)
            .map(|i| {
                let s = self.horizon * i as f64 / (n - 1) as f64;
                let mut row = Vec::with_capacity(self.shocks.len() + 1);
                row.push(s);
                row.extend(self.shocks.iter().map(|sh| sh.trajectory.eval(s)));
                row
            })
            .collect()
    }
}

struct ActiveShock {
    members: Vec<usize>,
    position: f64,
    left_line: usize,
    right_line: usize,
}

/// Tracks the shocks of the shape built from `(t_horizon, xs, hs)` through
/// backward time `[0, t_horizon]`.
///
/// Shocks are seeded at nodes with a genuine slope drop, move at the
/// Rankine–Hugoniot velocity `(u⁻ + u⁺)/2`, and merge when they meet, the
/// merged shock taking the surviving adjacent slopes. Nodes with zero slope
/// drop carry no shock and are skipped.
pub fn shock_fan(t_horizon: f64, xs: &[f64], hs: &[f64]) -> Result<ShockFan> {
    let shape = ShapeFunction::build(t_horizon, xs, hs)?;
    if !shape.is_concave() {
        return Err(Error::NotConcave);
    }
    let horizon = t_horizon;
    let mut shocks_out: Vec<Option<Shock>> = vec![None; xs.len()];

    // Gather per linear run: lines plus the nodes that kink them.
    type Run = (Vec<(f64, f64)>, Vec<(usize, f64)>);
    let mut runs: Vec<Run> = Vec::new();
    {
        let mut lines: Vec<(f64, f64)> = Vec::new();
        for p in shape.pieces() {
            match *p {
                Piece::Linear { u, b, .. } => lines.push((u, b)),
                Piece::Parabolic { .. } => {
                    if !lines.is_empty() {
                        runs.push((std::mem::take(&mut lines), Vec::new()));
                    }
                }
            }
        }
        if !lines.is_empty() {
            runs.push((lines, Vec::new()));
        }
        for (c, &x) in xs.iter().enumerate() {
            if shape.slope_drop(x) > 1e-12 {
                for run in runs.iter_mut() {
                    // The node belongs to the run whose lines kink at it.
                    let in_run = run.0.windows(2).any(|w| {
                        let kink = (w[1].1 - w[0].1) / (w[0].0 - w[1].0);
                        (kink - x).abs() <= 1e-9 * (1.0 + x.abs())
                    });
                    if in_run {
                        run.1.push((c, x));
                        break;
                    }
                }
            }
        }
    }

    for (lines, seeded) in runs {
        if seeded.is_empty() {
            continue;
        }
        let mut active: Vec<ActiveShock> = Vec::new();
        // Kinks of consecutive lines, matched to their seeding nodes.
        let mut kink_of_line: Vec<(usize, f64)> = Vec::new();
        for i in 0..lines.len() - 1 {
            let kink = (lines[i + 1].1 - lines[i].1) / (lines[i].0 - lines[i + 1].0);
            kink_of_line.push((i, kink));
        }
        for &(node, x) in &seeded {
            let (i, kink) = kink_of_line
                .iter()
                .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
                .copied()
                .expect("seeded node without kink");
            active.push(ActiveShock {
                members: vec![node],
                position: kink,
                left_line: i,
                right_line: i + 1,
            });
        }
        active.sort_by(|a, b| a.position.total_cmp(&b.position));

        // Event loop: record knots per node; merge shocks when they meet.
        let mut knots: Vec<Vec<(f64, f64)>> = vec![Vec::new(); xs.len()];
        let mut segments: Vec<Vec<ShockSegment>> = vec![Vec::new(); xs.len()];
        for sh in &active {
            for &m in &sh.members {
                knots[m].push((0.0, sh.position));
            }
        }
        let mut now = 0.0;
        loop {
            let velocity =
                |sh: &ActiveShock| 0.5 * (lines[sh.left_line].0 + lines[sh.right_line].0);
            let mut next = f64::INFINITY;
            let mut meet: Vec<f64> = Vec::new();
            for i in 0..active.len().saturating_sub(1) {
                let gap = (active[i + 1].position - active[i].position).max(0.0);
                let closing = velocity(&active[i]) - velocity(&active[i + 1]);
                let tm = if closing > 1e-15 {
                    now + gap / closing
                } else {
                    f64::INFINITY
                };
                meet.push(tm);
                next = next.min(tm);
            }
            if next <= now {
                // Degenerate immediate meet from round-off: merge without
                // advancing time, skipping the zero-length segment records.
                next = now;
            }
            if next >= horizon || !next.is_finite() {
                break;
            }
            let tol = 1e-10 * next.max(1.0);
            let dt = next - now;
            for sh in active.iter_mut() {
                sh.position += velocity(sh) * dt;
            }
            // Record the pre-merge segment endpoints.
            if next > now {
                for sh in &active {
                    let v = velocity(sh);
                    for &m in &sh.members {
                        segments[m].push(ShockSegment {
                            start: now,
                            end: next,
                            u_left: lines[sh.left_line].0,
                            u_right: lines[sh.right_line].0,
                            velocity: v,
                        });
                        knots[m].push((next, sh.position));
                    }
                }
            }
            now = next;
            // Merge chains whose meet times coincide with the event time.
            let mut groups: Vec<(usize, usize)> = Vec::new();
            let mut i = 0;
            while i < meet.len() {
                if meet[i] - next <= tol {
                    let start = i;
                    while i < meet.len() && meet[i] - next <= tol {
                        i += 1;
                    }
                    // Meeting pairs start..=i-1 involve shocks start..=i.
                    groups.push((start, i));
                } else {
                    i += 1;
                }
            }
            for &(lo, hi) in groups.iter().rev() {
                let chunk: Vec<ActiveShock> = active.drain(lo..=hi).collect();
                let members: Vec<usize> = chunk.iter().flat_map(|s| s.members.clone()).collect();
                let position = chunk[0].position;
                active.insert(
                    lo,
                    ActiveShock {
                        members,
                        position,
                        left_line: chunk[0].left_line,
                        right_line: chunk[chunk.len() - 1].right_line,
                    },
                );
            }
        }
        // Extend to the horizon.
        for sh in &active {
            let v = 0.5 * (lines[sh.left_line].0 + lines[sh.right_line].0);
            for &m in &sh.members {
                segments[m].push(ShockSegment {
                    start: now,
                    end: horizon,
                    u_left: lines[sh.left_line].0,
                    u_right: lines[sh.right_line].0,
                    velocity: v,
                });
                knots[m].push((horizon, sh.position + v * (horizon - now)));
            }
        }
        for (node, node_knots) in knots.into_iter().enumerate() {
            if node_knots.is_empty() {
                continue;
            }
            shocks_out[node] = Some(Shock {
                node,
                trajectory: PiecewiseLinear::new(node_knots)?,
                segments: segments[node].clone(),
            });
        }
    }

    Ok(ShockFan {
        horizon,
        shocks: shocks_out.into_iter().flatten().collect(),
    })
}

/// The two sides of the Legendre duality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// `L_SHE(0 → (xs, ms))` via the optimal-deviation pipeline.
    pub l_from_clusters: f64,
    /// `ms · hs − i_kpz(hs)` with `hs` the inverted gradient.
    pub l_from_legendre: f64,
}

impl DualityReport {
    pub fn residual(&self) -> f64 {
        (self.l_from_clusters - self.l_from_legendre).abs()
    }
}

/// Evaluates both sides of the Legendre duality between the moment Lyapunov
/// exponent and the KPZ rate function, with terminal point 0.
///
/// Components with `m_c = 0` exactly carry no kink and are dropped before
/// building clusters.
pub fn duality_check(t: f64, xs: &[f64], ms: &[f64]) -> Result<DualityReport> {
    if xs.len() != ms.len() {
        return Err(Error::LengthMismatch(xs.len(), ms.len()));
    }
    let kept: Vec<(f64, f64)> = xs
        .iter()
        .zip(ms)
        .filter(|&(_, &m)| m != 0.0)
        .map(|(&x, &m)| (x, m))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyClusterList);
    }
    let xs: Vec<f64> = kept.iter().map(|&(x, _)| x).collect();
    let ms: Vec<f64> = kept.iter().map(|&(_, m)| m).collect();
    for &m in &ms {
        if !m.is_finite() || m <= 0.0 {
            return Err(Error::NonPositiveMass(m));
        }
    }
    let l_from_clusters = lyapunov_exponent(0.0, t, &xs, &ms)?;
    let hs = invert_gradient(t, &xs, &ms)?;
    let shape = ShapeFunction::build(t, &xs, &hs)?;
    let l_from_legendre = ms.iter().zip(&hs).map(|(m, h)| m * h).sum::<f64>() - shape.i_kpz();
    Ok(DualityReport {
        l_from_clusters,
        l_from_legendre,
    })
}

/// Intermediate-time decomposition of the Lyapunov exponent along the shock
/// tree, with the gradient-consistency residual at the intermediate time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub t_mid: f64,
    /// Distinct cluster positions at backward time `horizon − t_mid`.
    pub xs_mid: Vec<f64>,
    /// Aggregated masses per distinct position.
    pub ms_mid: Vec<f64>,
    /// Limit-shape values at the intermediate positions.
    pub hs_mid: Vec<f64>,
    /// Max componentwise gap between the intermediate gradient and `ms_mid`.
    pub gradient_residual: f64,
    /// Full-horizon Lyapunov exponent.
    pub l_total: f64,
    /// Lyapunov exponent of the merged system over `[0, t_mid]`.
    pub l_head: f64,
    /// Per-group Lyapunov exponents over the remaining time.
    pub l_groups: Vec<f64>,
    /// `|l_total − l_head − Σ l_groups|`.
    pub decomposition_residual: f64,
}

/// Splits `L_SHE(0 → (xs, ms))` at an intermediate time `t_mid ∈ (0, horizon]`
/// and cross-checks the gradient relation at the intermediate node values.
///
/// `t_mid` must avoid exact merge instants, where shock velocities are
/// undefined.
pub fn intermediate_decomposition(
    t_horizon: f64,
    xs: &[f64],
    ms: &[f64],
    t_mid: f64,
) -> Result<DecompositionReport> {
    if !t_mid.is_finite() || t_mid <= 0.0 || t_mid > t_horizon {
        return Err(Error::BadBackTime(t_horizon - t_mid, t_horizon));
    }
    let opt = optimal_deviation(xs, ms, 0.0, t_horizon)?;
    let s_mid = t_horizon - t_mid;
    for ev in &opt.tree.events {
        if (ev.time - s_mid).abs() <= 1e-9 * t_horizon.max(1.0) {
            return Err(Error::MergeInstant(t_mid));
        }
    }

    // Distinct cluster positions and aggregated masses at s_mid.
    let pos = opt.deviation.positions(s_mid);
    let mut xs_mid: Vec<f64> = Vec::new();
    let mut ms_mid: Vec<f64> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (c, &p) in pos.iter().enumerate() {
        match xs_mid.last() {
            Some(&last) if (p - last).abs() <= 1e-9 * (1.0 + p.abs()) => {
                *ms_mid.last_mut().unwrap() += ms[c];
                groups.last_mut().unwrap().push(c);
            }
            _ => {
                xs_mid.push(p);
                ms_mid.push(ms[c]);
                groups.push(vec![c]);
            }
        }
    }

    // Limit-shape values at the intermediate time via backward Hopf–Lax.
    let hs = invert_gradient(t_horizon, xs, ms)?;
    let terminal_shape = ShapeFunction::build(t_horizon, xs, &hs)?;
    let evolved = if s_mid == 0.0 {
        terminal_shape.clone()
    } else {
        terminal_shape.hopf_lax_evolve(s_mid)?
    };
    let hs_mid: Vec<f64> = xs_mid.iter().map(|&x| evolved.eval(x)).collect();
    let grad_mid = i_kpz_gradient(t_mid, &xs_mid, &hs_mid)?;
    let gradient_residual = grad_mid
        .iter()
        .zip(&ms_mid)
        .map(|(g, m)| (g - m).abs())
        .fold(0.0f64, f64::max);

    let l_total = lyapunov_exponent(0.0, t_horizon, xs, ms)?;
    let l_head = lyapunov_exponent(0.0, t_mid, &xs_mid, &ms_mid)?;
    // Degenerate split at s_mid = 0: the tail intervals have zero duration.
    let mut l_groups = vec![0.0; if s_mid == 0.0 { groups.len() } else { 0 }];
    if s_mid > 0.0 {
        for (a, group) in groups.iter().enumerate() {
            let gx: Vec<f64> = group.iter().map(|&c| xs[c]).collect();
            let gm: Vec<f64> = group.iter().map(|&c| ms[c]).collect();
            l_groups.push(lyapunov_exponent(xs_mid[a], s_mid, &gx, &gm)?);
        }
    }
    let decomposition_residual = (l_total - l_head - l_groups.iter().sum::<f64>()).abs();
    Ok(DecompositionReport {
        t_mid,
        xs_mid,
        ms_mid,
        hs_mid,
        gradient_residual,
        l_total,
        l_head,
        l_groups,
        decomposition_residual,
    })
}
