//! Cross-convolution and the cross block.
//!
//! The query stream `u` is `[1, Cu, H, W]`; the support stream `V` is a batch
//! `[n, Cv, H, W]`, one item per support entry. One set of weights serves
//! every entry, so the layers accept any `n >= 1` and are equivariant to the
//! order of the support entries.

use rand::Rng;

use crate::autodiff::{Padding, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel and bias of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A convolution's parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl ConvParams {
    /// Registers `[c_out, c_in, k, k]` weights drawn uniformly from
    /// `±sqrt(1 / fan_in)` and zero biases.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::from_fn(vec![c_out, c_in, k, k], |_| T::lit(rng.random_range(-bound..bound)));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self { weight, bias }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> ConvVars {
        ConvVars { weight: tape.param(store, self.weight), bias: tape.param(store, self.bias) }
    }

    /// `(c_out, c_in, k)` of the registered kernel.
    pub fn dims<T: Scalar>(&self, store: &ParamStore<T>) -> (usize, usize, usize) {
        let s = store.get(self.weight).value.shape();
        (s[0], s[1], s[2])
    }
}

/// `theta_z` mixes the query with each support entry; `theta_v` updates the
/// support entries. The last decoder stage has no `theta_v` because its
/// support output is never consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossBlockParams {
    pub theta_z: ConvParams,
    pub theta_v: Option<ConvParams>,
}

impl CrossBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_u: usize,
        c_v: usize,
        c_out: usize,
        k: usize,
        with_support_update: bool,
        rng: &mut R,
    ) -> Self {
        let theta_z = ConvParams::init(store, &format!("{name}.cross"), c_u + c_v, c_out, k, rng);
        let theta_v =
            with_support_update.then(|| ConvParams::init(store, &format!("{name}.support"), c_out, c_out, k, rng));
        Self { theta_z, theta_v }
    }
}

fn check_streams<T: Scalar>(tape: &Tape<T>, u: Var, v: Var) -> Result<usize> {
    let (us, vs) = (tape.value(u).shape(), tape.value(v).shape());
    if us.len() != 4 || vs.len() != 4 || us[0] != 1 {
        return Err(Error::shape(format!(
            "cross conv: query {us:?} must be [1,C,H,W], support {vs:?} must be [n,C,H,W]"
        )));
    }
    if us[2..] != vs[2..] {
        return Err(Error::shape(format!("cross conv: query extent {:?} vs support extent {:?}", &us[2..], &vs[2..])));
    }
    Ok(vs[0])
}

/// `z_i = Conv(u || v_i)` for every support entry, computed as one
/// convolution over the query tiled along the batch axis.
pub fn cross_conv<T: Scalar>(tape: &mut Tape<T>, u: Var, v: Var, theta_z: ConvVars) -> Result<Var> {
    let n = check_streams(tape, u, v)?;
    let tiled = tape.tile(u, n)?;
    let pairs = tape.concat_channels(tiled, v)?;
    tape.conv2d(pairs, theta_z.weight, theta_z.bias, Padding::Same)
}

/// [`cross_conv`] over a list of `[1, Cv, H, W]` support entries.
pub fn cross_conv_list<T: Scalar>(tape: &mut Tape<T>, u: Var, vs: &[Var], theta_z: ConvVars) -> Result<Vec<Var>> {
    if vs.is_empty() {
        return Err(Error::domain("cross conv needs at least one support entry"));
    }
    let v = tape.stack(vs)?;
    let z = cross_conv(tape, u, v, theta_z)?;
    (0..vs.len()).map(|i| tape.select(z, i)).collect()
}

/// Entry-by-entry cross convolution with no batching. Same contract as
/// [`cross_conv_list`]; kept as an oracle for the tiled path.
pub fn cross_conv_reference<T: Scalar>(tape: &mut Tape<T>, u: Var, vs: &[Var], theta_z: ConvVars) -> Result<Vec<Var>> {
    if vs.is_empty() {
        return Err(Error::domain("cross conv needs at least one support entry"));
    }
    vs.iter()
        .map(|&vi| {
            check_streams(tape, u, vi)?;
            let pair = tape.concat_channels(u, vi)?;
            tape.conv2d(pair, theta_z.weight, theta_z.bias, Padding::Same)
        })
        .collect()
}

/// Output of [`cross_block`].
#[derive(Clone, Copy, Debug)]
pub struct CrossBlockOut {
    /// Mean of the activated cross features, `[1, C, H, W]`.
    pub query: Var,
    /// Updated support features `[n, C, H, W]`; `None` without `theta_v`.
    pub support: Option<Var>,
}

/// `z_i = A(CrossConv(u, v_i))`, `u' = mean_i z_i`, `v'_i = A(Conv(z_i))`.
pub fn cross_block<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    theta_z: ConvVars,
    theta_v: Option<ConvVars>,
    slope: T,
) -> Result<CrossBlockOut> {
    let z = cross_conv(tape, u, v, theta_z)?;
    let z = tape.leaky_relu(z, slope);
    let query = tape.mean_batch(z)?;
    let support = match theta_v {
        Some(tv) => {
            let s = tape.conv2d(z, tv.weight, tv.bias, Padding::Same)?;
            Some(tape.leaky_relu(s, slope))
        }
        None => None,
    };
    Ok(CrossBlockOut { query, support })
}
