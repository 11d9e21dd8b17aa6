use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// A `[channels, height, width]` feature map recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureGrid {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureGrid {
    pub fn on(tape: &Tape, var: Var) -> Result<Self> {
        match *tape.shape(var) {
            [channels, height, width] => Ok(Self {
                var,
                channels,
                height,
                width,
            }),
            ref s => Err(Error::dim("feature_grid", format!("expected [C,H,W], got {s:?}"))),
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn expect_channels(&self, op: &'static str, c: usize) -> Result<()> {
        if self.channels != c {
            return Err(Error::dim(
                op,
                format!("expected {c} channels, got {} ({}x{})", self.channels, self.height, self.width),
            ));
        }
        Ok(())
    }
}
