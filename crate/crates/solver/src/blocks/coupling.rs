use cgm_core::{
    concat_channels, split_channels, BytesGuard, Error, GradStore, Grid, Ledger, LedgerTag,
    ParamStore, Result, Scalar,
};

use crate::blocks::attention::{AttentionBlock, AttentionTape};
use crate::blocks::injector::{InjectorBlock, InjectorTape};
use crate::blocks::residual::{ResidualBlock, ResidualTape};
use crate::blocks::Aux;

/// A coupling sub-function: one of the three block varieties operating
/// on half of the module channels.
#[derive(Debug, Clone)]
pub enum Body {
    Residual(ResidualBlock),
    Attention(AttentionBlock),
    Injector(InjectorBlock),
}

#[derive(Debug)]
pub enum BodyTape<T> {
    Residual(ResidualTape<T>),
    Attention(AttentionTape<T>),
    Injector(InjectorTape<T>),
}

impl<T: Scalar> BodyTape<T> {
    pub fn byte_size(&self) -> usize {
        match self {
            BodyTape::Residual(t) => t.byte_size(),
            BodyTape::Attention(t) => t.byte_size(),
            BodyTape::Injector(t) => t.byte_size(),
        }
    }
}

impl Body {
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        aux: &Aux<'_, T>,
    ) -> Result<Grid<T>> {
        match self {
            Body::Residual(b) => b.forward(store, x, aux.t_emb),
            Body::Attention(b) => b.forward(store, x),
            Body::Injector(b) => b.forward(store, x, aux.priors),
        }
    }

    pub fn forward_tape<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        aux: &Aux<'_, T>,
    ) -> Result<(Grid<T>, BodyTape<T>)> {
        Ok(match self {
            Body::Residual(b) => {
                let (y, t) = b.forward_tape(store, x, aux.t_emb)?;
                (y, BodyTape::Residual(t))
            }
            Body::Attention(b) => {
                let (y, t) = b.forward_tape(store, x)?;
                (y, BodyTape::Attention(t))
            }
            Body::Injector(b) => {
                let (y, t) = b.forward_tape(store, x, aux.priors)?;
                (y, BodyTape::Injector(t))
            }
        })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        tape: &BodyTape<T>,
        gout: &Grid<T>,
        aux: &Aux<'_, T>,
        g_temb: &mut [T],
    ) -> Result<Grid<T>> {
        match (self, tape) {
            (Body::Residual(b), BodyTape::Residual(t)) => {
                b.backward(store, grads, t, gout, aux.t_emb, g_temb)
            }
            (Body::Attention(b), BodyTape::Attention(t)) => b.backward(store, grads, t, gout),
            (Body::Injector(b), BodyTape::Injector(t)) => {
                b.backward(store, grads, t, gout, aux.priors)
            }
            _ => Err(Error::InvalidArg("coupling tape/body variety mismatch".into())),
        }
    }
}

/// Two-stream additive coupling: split the channels in half, then
/// y1 = u1 + g1(u2), y2 = u2 + g2(y1). The inverse is division-free:
/// u2 = y2 - g2(y1), u1 = y1 - g1(u2), so the backward pass can
/// reconstruct the input from the output instead of caching it.
#[derive(Debug, Clone)]
pub struct CouplingModule {
    pub g1: Body,
    pub g2: Body,
    pub channels: usize,
}

#[derive(Debug)]
pub struct CouplingTape<T> {
    pub t1: BodyTape<T>,
    pub t2: BodyTape<T>,
    _guard: BytesGuard,
}

impl CouplingModule {
    pub fn new(g1: Body, g2: Body, channels: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "coupling module needs even channels, got {channels}"
            )));
        }
        Ok(CouplingModule { g1, g2, channels })
    }

    fn half(&self) -> usize {
        self.channels / 2
    }

    fn split<T: Scalar>(&self, x: &Grid<T>) -> Result<(Grid<T>, Grid<T>)> {
        if x.c() != self.channels {
            return Err(Error::shape("coupling channels", self.channels, x.c()));
        }
        let mut parts = split_channels(x, &[self.half(), self.half()])?;
        let u2 = parts.pop().unwrap();
        let u1 = parts.pop().unwrap();
        Ok((u1, u2))
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        aux: &Aux<'_, T>,
    ) -> Result<Grid<T>> {
        let (u1, u2) = self.split(x)?;
        let y1 = u1.add(&self.g1.forward(store, &u2, aux)?)?;
        let y2 = u2.add(&self.g2.forward(store, &y1, aux)?)?;
        concat_channels(&[&y1, &y2])
    }

    pub fn forward_tape<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Grid<T>,
        aux: &Aux<'_, T>,
        ledger: &Ledger,
    ) -> Result<(Grid<T>, CouplingTape<T>)> {
        let (u1, u2) = self.split(x)?;
        let (g1v, t1) = self.g1.forward_tape(store, &u2, aux)?;
        let y1 = u1.add(&g1v)?;
        let (g2v, t2) = self.g2.forward_tape(store, &y1, aux)?;
        let y2 = u2.add(&g2v)?;
        let guard = ledger.track(LedgerTag::ModuleInternal, t1.byte_size() + t2.byte_size());
        Ok((
            concat_channels(&[&y1, &y2])?,
            CouplingTape {
                t1,
                t2,
                _guard: guard,
            },
        ))
    }

    /// Exact inverse: u2 = y2 - g2(y1), u1 = y1 - g1(u2).
    pub fn inverse<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        y: &Grid<T>,
        aux: &Aux<'_, T>,
    ) -> Result<Grid<T>> {
        let (y1, y2) = self.split(y)?;
        let u2 = y2.sub(&self.g2.forward(store, &y1, aux)?)?;
        let u1 = y1.sub(&self.g1.forward(store, &u2, aux)?)?;
        concat_channels(&[&u1, &u2])
    }

    /// Backward from a stored tape (activation-caching mode).
    pub fn backward_cached<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        tape: &CouplingTape<T>,
        gy: &Grid<T>,
        aux: &Aux<'_, T>,
        g_temb: &mut [T],
    ) -> Result<Grid<T>> {
        let (gy1, gy2) = self.split(gy)?;
        // y2 = u2 + g2(y1): du2 += gy2, dy1 += g2'(gy2)
        let gy1_total = gy1.add(&self.g2.backward(store, grads, &tape.t2, &gy2, aux, g_temb)?)?;
        // y1 = u1 + g1(u2): du1 = dy1, du2 += g1'(dy1)
        let gu2 = gy2.add(&self.g1.backward(store, grads, &tape.t1, &gy1_total, aux, g_temb)?)?;
        concat_channels(&[&gy1_total, &gu2])
    }

    /// Backward in invertible mode: reconstruct the input from the
    /// output, recompute the body tapes locally, then apply the same
    /// vector-Jacobian products. Returns (reconstructed input, input
    /// cotangent). Transient tape bytes are tracked on the ledger.
    pub fn backward_invertible<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut GradStore<T>,
        y: &Grid<T>,
        gy: &Grid<T>,
        aux: &Aux<'_, T>,
        ledger: &Ledger,
        g_temb: &mut [T],
    ) -> Result<(Grid<T>, Grid<T>)> {
        let (y1, y2) = self.split(y)?;
        let (g2v, t2) = self.g2.forward_tape(store, &y1, aux)?;
        let _guard2 = ledger.track(LedgerTag::ModuleInternal, t2.byte_size());
        let u2 = y2.sub(&g2v)?;
        let (g1v, t1) = self.g1.forward_tape(store, &u2, aux)?;
        let _guard1 = ledger.track(LedgerTag::ModuleInternal, t1.byte_size());
        let u1 = y1.sub(&g1v)?;

        let (gy1, gy2) = self.split(gy)?;
        let gy1_total = gy1.add(&self.g2.backward(store, grads, &t2, &gy2, aux, g_temb)?)?;
        let gu2 = gy2.add(&self.g1.backward(store, grads, &t1, &gy1_total, aux, g_temb)?)?;
        Ok((
            concat_channels(&[&u1, &u2])?,
            concat_channels(&[&gy1_total, &gu2])?,
        ))
    }
}
