use super::{Graph, Real, Tensor, Var};
use crate::error::{shape_err, Result};

/// Bound parameters of one GRU cell. Weight matrices are `(D+H)×H` and act
/// on the concatenation `[x, h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BiGruVars {
    pub fwd: GruVars,
    pub bwd: GruVars,
}

impl<T: Real> Graph<T> {
    /// One GRU step:
    ///
    /// ```text
    /// z  = σ([x, h]·W_z + b_z)
    /// r  = σ([x, h]·W_r + b_r)
    /// h̃  = tanh([x, r⊙h]·W_h + b_h)
    /// h' = (1 − z)⊙h + z⊙h̃
    /// ```
    pub fn gru_cell(&mut self, x: Var, h: Var, p: &GruVars) -> Result<Var> {
        let (sx, sh) = (self.shape(x).to_vec(), self.shape(h).to_vec());
        let hidden = sh.get(1).copied().unwrap_or(0);
        let want = [sx.get(1).copied().unwrap_or(0) + hidden, hidden];
        if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] || self.shape(p.w_z) != want {
            return Err(shape_err!("gru_cell: x {sx:?}, h {sh:?}, W_z {:?}", self.shape(p.w_z)));
        }
        let xh = self.concat_last(x, h)?;
        let z = self.matmul(xh, p.w_z)?;
        let z = self.add_bias(z, p.b_z)?;
        let z = self.sigmoid(z)?;
        let r = self.matmul(xh, p.w_r)?;
        let r = self.add_bias(r, p.b_r)?;
        let r = self.sigmoid(r)?;
        let rh = self.mul(r, h)?;
        let xrh = self.concat_last(x, rh)?;
        let cand = self.matmul(xrh, p.w_h)?;
        let cand = self.add_bias(cand, p.b_h)?;
        let cand = self.tanh(cand)?;
        // h + z⊙(h̃ − h) == (1 − z)⊙h + z⊙h̃
        let delta = self.sub(cand, h)?;
        let step = self.mul(z, delta)?;
        self.add(h, step)
    }

    /// Runs a GRU over `[B,T,D]` from a zero state; returns all states as
    /// `[B,T,H]`. `reverse` walks t = T..1 but still stores step t at index t.
    pub fn gru_sequence(&mut self, x: Var, p: &GruVars, reverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err!("gru_sequence expects [B,T,D], got {sx:?}"));
        }
        let (bsz, steps) = (sx[0], sx[1]);
        let hidden = self.shape(p.w_z)[1];
        let mut h = self.constant(Tensor::zeros(&[bsz, hidden]));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = self.select_time(x, t)?;
            h = self.gru_cell(xt, h, p)?;
            states[t] = h;
        }
        self.stack_time(&states)
    }

    /// Bidirectional GRU: `[B,T,D]` → `[B,T,2H]` with the forward state in
    /// the first half of each step and the backward state in the second.
    pub fn bidirectional(&mut self, x: Var, p: &BiGruVars) -> Result<Var> {
        let fwd = self.gru_sequence(x, &p.fwd, false)?;
        let bwd = self.gru_sequence(x, &p.bwd, true)?;
        self.concat_last(fwd, bwd)
    }
}
