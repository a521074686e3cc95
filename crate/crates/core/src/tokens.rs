use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// A batch of token grids with logical shape `(batch, channels, height, width)`.
///
/// The backing graph node is stored token-major as a `[batch·height·width,
/// channels]` matrix, so "per token over the channel axis" operations are
/// plain row operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMap {
    pub var: Var,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenMap {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens()
    }

    /// Same grid, different node and channel count.
    pub fn with(&self, var: Var, channels: usize) -> Self {
        Self {
            var,
            channels,
            ..*self
        }
    }

    /// Wraps a token-major node, checking that it has `rows × channels` layout.
    pub fn wrap<T: Real>(
        g: &Graph<T>,
        var: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let shape = g.shape(var);
        if shape.len() != 2 || shape[0] != batch * height * width {
            return Err(TensorError::InvalidArgument {
                op: "token_map",
                reason: format!("node shape {shape:?} is not [{}·{height}·{width}, C]", batch),
            });
        }
        Ok(Self {
            var,
            batch,
            channels: shape[1],
            height,
            width,
        })
    }

    /// Registers an NCHW tensor as a constant token map.
    pub fn from_nchw<T: Real>(g: &mut Graph<T>, t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "token_map",
                reason: format!("expected (B,C,H,W), got {s:?}"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let var = g.input(nchw_to_token_major(t));
        Ok(Self {
            var,
            batch: b,
            channels: c,
            height: h,
            width: w,
        })
    }

    /// Copies the node value back out in NCHW layout.
    pub fn to_nchw<T: Real>(&self, g: &Graph<T>) -> Tensor<T> {
        token_major_to_nchw(g.value(self.var), self.batch, self.height, self.width)
    }
}

pub fn nchw_to_token_major<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = src[(bi * c + ci) * hw + p];
            }
        }
    }
    Tensor::new([b * hw, c], out).expect("same element count")
}

pub fn token_major_to_nchw<T: Real>(t: &Tensor<T>, b: usize, h: usize, w: usize) -> Tensor<T> {
    let c = t.last_dim();
    let hw = h * w;
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for p in 0..hw {
            for ci in 0..c {
                out[(bi * c + ci) * hw + p] = src[(bi * hw + p) * c + ci];
            }
        }
    }
    Tensor::new([b, c, h, w], out).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trip() {
        let t = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| i as f64);
        let tm = nchw_to_token_major(&t);
        assert_eq!(tm.shape(), &[8, 3]);
        // batch 0, token (0,1), channel 2 → NCHW index (0*3+2)*4+1 = 9
        assert_eq!(tm.data()[3 + 2], 9.0);
        assert_eq!(token_major_to_nchw(&tm, 2, 2, 2), t);
    }
}
