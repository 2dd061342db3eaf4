//! Router logits and the two gate orderings.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{top_k_indices, Tensor};

/// Order of the top-k and softmax operators inside the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterType {
    /// KeepTopK, then softmax over the survivors. Gates of a token sum to 1.
    Mixtral,
    /// Softmax over all experts, then KeepTopK without renormalising.
    St,
}

impl std::str::FromStr for RouterType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixtral" => Ok(Self::Mixtral),
            "st" => Ok(Self::St),
            other => Err(Error::Config(format!(
                "unknown router type `{other}` (expected mixtral | st)"
            ))),
        }
    }
}

impl std::fmt::Display for RouterType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mixtral => "mixtral",
            Self::St => "st",
        })
    }
}

/// How overflowing slots are chosen once an expert is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropPolicy {
    /// Earlier batch positions claim capacity first.
    #[default]
    Position,
    /// Higher gate values claim capacity first; position breaks ties.
    Score,
}

/// Capacity factor; `Dropless` is an unbounded expert budget.
///
/// Serialised as a number or the string `"dropless"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CapacityFactor {
    Finite(f64),
    #[default]
    Dropless,
}

impl CapacityFactor {
    pub fn validate(self) -> Result<()> {
        match self {
            Self::Finite(cf) if !(cf.is_finite() && cf > 0.0) => Err(Error::Config(format!(
                "capacity factor must be positive and finite, got {cf}"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for CapacityFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("dropless") {
            return Ok(Self::Dropless);
        }
        let cf: f64 = s.parse().map_err(|_| {
            Error::Config(format!(
                "capacity factor `{s}` is not a number or `dropless`"
            ))
        })?;
        let cf = Self::Finite(cf);
        cf.validate()?;
        Ok(cf)
    }
}

impl std::fmt::Display for CapacityFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Finite(cf) => write!(f, "{cf}"),
            Self::Dropless => f.write_str("dropless"),
        }
    }
}

impl Serialize for CapacityFactor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(cf) => s.serialize_f64(*cf),
            Self::Dropless => s.serialize_str("dropless"),
        }
    }
}

impl<'de> Deserialize<'de> for CapacityFactor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Name(String),
        }
        let cf = match Repr::deserialize(d)? {
            Repr::Number(v) => Self::Finite(v),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom)?,
        };
        cf.validate().map_err(serde::de::Error::custom)?;
        Ok(cf)
    }
}

fn default_top_k() -> usize {
    2
}

fn default_router() -> RouterType {
    RouterType::Mixtral
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Expert count N.
    pub experts: usize,
    /// Active experts per token k.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_router")]
    pub router_type: RouterType,
    /// Adds softplus-scaled Gaussian noise to router logits in training mode.
    #[serde(default)]
    pub noise: bool,
    #[serde(default)]
    pub cf: CapacityFactor,
    #[serde(default)]
    pub drop_policy: DropPolicy,
    /// Coefficient of the optional importance (CV^2) penalty; 0 disables it.
    #[serde(default)]
    pub importance_loss: f64,
}

impl GateConfig {
    pub fn new(experts: usize, top_k: usize) -> Self {
        Self {
            experts,
            top_k,
            router_type: RouterType::Mixtral,
            noise: false,
            cf: CapacityFactor::Dropless,
            drop_policy: DropPolicy::Position,
            importance_loss: 0.0,
        }
    }

    pub fn with_router(mut self, router_type: RouterType) -> Self {
        self.router_type = router_type;
        self
    }

    pub fn with_cf(mut self, cf: CapacityFactor) -> Self {
        self.cf = cf;
        self
    }

    pub fn with_policy(mut self, policy: DropPolicy) -> Self {
        self.drop_policy = policy;
        self
    }

    pub fn with_noise(mut self, noise: bool) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("expert count must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= k <= N = {}, got {}",
                self.experts, self.top_k
            )));
        }
        if !(self.importance_loss.is_finite() && self.importance_loss >= 0.0) {
            return Err(Error::Config("importance_loss must be >= 0".into()));
        }
        self.cf.validate()
    }
}

/// Gate weights `[T x N]` plus the top-k selection they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    pub weights: Tensor,
    /// Row-major `[T x N]`; `true` where the slot survived top-k.
    pub selected: Vec<bool>,
}

impl Gates {
    pub fn tokens(&self) -> usize {
        self.weights.rows()
    }

    pub fn experts(&self) -> usize {
        self.weights.cols()
    }

    pub fn row_sum(&self, t: usize) -> f64 {
        self.weights.row(t).iter().sum()
    }

    pub fn is_selected(&self, t: usize, e: usize) -> bool {
        self.selected[t * self.experts() + e]
    }
}

/// Router logits `H = x . W_g`, plus `z * softplus(x . W_noise)` when noise is
/// on, with `z` standard normal drawn row-major (token-major) from `rng`.
pub(crate) fn router_on_tape(
    tape: &mut Tape,
    x: Var,
    w_g: Var,
    w_noise: Var,
    noise: Option<&mut Rng>,
) -> Result<Var> {
    let clean = tape.matmul(x, w_g)?;
    let Some(rng) = noise else { return Ok(clean) };
    let (t, n) = (tape.value(clean).rows(), tape.value(clean).cols());
    let z = Tensor::from_fn(vec![t, n], |_| rng.standard_normal());
    let z = tape.constant(z);
    let raw = tape.matmul(x, w_noise)?;
    let scale = tape.softplus(raw);
    let noisy = tape.mul(z, scale)?;
    tape.add(clean, noisy)
}

fn top_k_mask(values: &Tensor, k: usize) -> Result<Vec<bool>> {
    let n = values.cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "top-k requires 1 <= k <= {n}, got {k}"
        )));
    }
    let mut selected = vec![false; values.len()];
    for t in 0..values.rows() {
        for e in top_k_indices(values.row(t), k) {
            selected[t * n + e] = true;
        }
    }
    Ok(selected)
}

/// Builds gates from logits `h` on the tape; returns the gate variable and the
/// selection mask. The selection itself is not differentiable.
pub(crate) fn gates_on_tape(
    tape: &mut Tape,
    h: Var,
    k: usize,
    router: RouterType,
) -> Result<(Var, Vec<bool>)> {
    match router {
        RouterType::Mixtral => {
            let selected = top_k_mask(tape.value(h), k)?;
            let masked: Vec<bool> = selected.iter().map(|s| !s).collect();
            let g = tape.softmax_rows(h, Some(&masked))?;
            Ok((g, selected))
        }
        RouterType::St => {
            let p = tape.softmax_rows(h, None)?;
            let selected = top_k_mask(tape.value(p), k)?;
            let keep = Tensor::new(
                tape.value(p).shape().to_vec(),
                selected
                    .iter()
                    .map(|&s| if s { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            let keep = tape.constant(keep);
            let g = tape.mul(p, keep)?;
            Ok((g, selected))
        }
    }
}

/// Router logits for a batch of token representations `x[T x hidden]`.
pub fn router_logits(
    x: &Tensor,
    router: &super::RouterParams,
    noise_enabled: bool,
    rng: Option<&mut Rng>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wg = tape.constant(router.w_g.clone());
    let wn = tape.constant(router.w_noise.clone());
    let noise = if noise_enabled { rng } else { None };
    let h = router_on_tape(&mut tape, xv, wg, wn, noise)?;
    Ok(tape.value(h).clone())
}

fn gate(h: &Tensor, k: usize, router: RouterType) -> Result<Gates> {
    if !h.is_finite() {
        return Err(Error::Input("router logits must be finite".into()));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let (g, selected) = gates_on_tape(&mut tape, hv, k, router)?;
    Ok(Gates {
        weights: tape.value(g).clone(),
        selected,
    })
}

/// KeepTopK then softmax: each row is a distribution over its `k` survivors.
pub fn gate_mixtral(h: &Tensor, k: usize) -> Result<Gates> {
    gate(h, k, RouterType::Mixtral)
}

/// Softmax then KeepTopK, without renormalisation: rows sum to at most 1.
pub fn gate_st(h: &Tensor, k: usize) -> Result<Gates> {
    gate(h, k, RouterType::St)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::RouterParams;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn mixtral_examples() {
        let g = gate_mixtral(&row(&[0.3; 4]), 2).unwrap();
        assert_eq!(g.weights.data(), &[0.5, 0.5, 0.0, 0.0]);

        let g = gate_mixtral(&row(&[1.0, 3.0, 2.0, 0.0]), 2).unwrap();
        let w = g.weights.data();
        assert_eq!((w[0], w[3]), (0.0, 0.0));
        assert!((w[1] - 0.7311).abs() < 1e-4 && (w[2] - 0.2689).abs() < 1e-4);

        let g = gate_mixtral(&row(&[1.0, 3.0, 2.0, 0.0]), 1).unwrap();
        assert_eq!(g.weights.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn st_examples() {
        let g = gate_st(&row(&[0.0; 8]), 2).unwrap();
        assert_eq!(&g.weights.data()[..2], &[0.125, 0.125]);
        assert_eq!(g.row_sum(0), 0.25);

        let h = [1.0, 3.0, 2.0, 0.0];
        let full = gate_st(&row(&h), 4).unwrap();
        let plain = crate::tensor::softmax(&crate::tensor::Masked::unmasked(h.to_vec())).unwrap();
        assert_eq!(full.weights.data(), &plain[..]);

        // Hand softmax of [1, 3, 2, 0]: e^x / (e + e^3 + e^2 + 1).
        let z: f64 = h.iter().map(|x: &f64| x.exp()).sum();
        let g = gate_st(&row(&h), 2).unwrap();
        let w = g.weights.data();
        assert_eq!((w[0], w[3]), (0.0, 0.0));
        assert!((w[1] - 3f64.exp() / z).abs() < 1e-15);
        assert!((w[2] - 2f64.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(gate_mixtral(&row(&[f64::NAN, 1.0]), 1).is_err());
    }

    #[test]
    fn router_noise_off_is_plain_projection() {
        // W_g selects coordinates 2 and 0 of the input.
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let mut w_g = Tensor::zeros(vec![3, 2]);
        w_g.data_mut()[2 * 2] = 1.0;
        w_g.data_mut()[1] = 1.0;
        let p = RouterParams::new(w_g, Tensor::zeros(vec![3, 2])).unwrap();
        let h = router_logits(&x, &p, false, None).unwrap();
        assert_eq!(h.data(), &[3.0, 1.0, 4.0, -1.0]);
    }

    #[test]
    fn router_noise_with_zero_w_noise_is_ln2_scaled_normals() {
        let x = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.1);
        let w_g = Tensor::from_fn(vec![4, 5], |i| (i as f64).cos());
        let p = RouterParams::new(w_g, Tensor::zeros(vec![4, 5])).unwrap();
        let clean = router_logits(&x, &p, false, None).unwrap();
        let noisy = router_logits(&x, &p, true, Some(&mut Rng::new(4, 2))).unwrap();
        let mut draws = Rng::new(4, 2);
        for (c, n) in clean.data().iter().zip(noisy.data()) {
            let z = draws.standard_normal();
            assert!((n - (c + z * std::f64::consts::LN_2)).abs() < 1e-14);
        }
        let again = router_logits(&x, &p, true, Some(&mut Rng::new(4, 2))).unwrap();
        assert!(again.bitwise_eq(&noisy));
    }

    #[test]
    fn capacity_factor_parses() {
        assert_eq!(
            "dropless".parse::<CapacityFactor>().unwrap(),
            CapacityFactor::Dropless
        );
        assert_eq!(
            "2".parse::<CapacityFactor>().unwrap(),
            CapacityFactor::Finite(2.0)
        );
        assert!("0".parse::<CapacityFactor>().is_err());
        assert!("abc".parse::<CapacityFactor>().is_err());
    }

    #[test]
    fn gate_config_validation() {
        assert!(GateConfig::new(8, 2).validate().is_ok());
        assert!(GateConfig::new(0, 1).validate().is_err());
        assert!(GateConfig::new(4, 5).validate().is_err());
        assert!(GateConfig::new(4, 0).validate().is_err());
    }
}
