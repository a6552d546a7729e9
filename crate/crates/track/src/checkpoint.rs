//! JSON checkpoints with hexadecimal floats, so values survive bit for bit.

use std::path::Path;

use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, TrackError};

pub const FORMAT_VERSION: u32 = 1;

/// C99-style hexadecimal float, e.g. `0x1.8p+1` for 3.
pub fn format_hex(v: f64) -> String {
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0x7ff {
        return if mant == 0 { format!("{}inf", sign) } else { "nan".to_string() };
    }
    if exp == 0 && mant == 0 {
        return format!("{}0x0p+0", sign);
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let digits = format!("{:013x}", mant);
    let digits = digits.trim_end_matches('0');
    let frac = if digits.is_empty() { String::new() } else { format!(".{}", digits) };
    format!("{}0x{}{}p{:+}", sign, lead, frac, e)
}

fn scale_pow2(mut x: f64, mut k: i64) -> f64 {
    while k > 1000 {
        x *= 2f64.powi(1000);
        k -= 1000;
    }
    while k < -1000 {
        x *= 2f64.powi(-1000);
        k += 1000;
    }
    x * 2f64.powi(k as i32)
}

pub fn parse_hex(s: &str) -> Option<f64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let body = body.strip_prefix("0x")?;
    let (mant, exp) = body.split_once('p')?;
    let exp: i64 = exp.parse().ok()?;
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    if int.is_empty() || int.len() + frac.len() > 15 {
        return None;
    }
    let m = u64::from_str_radix(&format!("{}{}", int, frac), 16).ok()?;
    let v = scale_pow2(m as f64, exp - 4 * frac.len() as i64);
    Some(if neg { -v } else { v })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<String>,
}

impl NamedArray {
    fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Self { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().iter().map(|v| format_hex(v.as_f64())).collect() }
    }

    fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data = self
            .data
            .iter()
            .map(|s| parse_hex(s).map(T::lit).ok_or_else(|| TrackError::Checkpoint(format!("{}: bad float {:?}", self.name, s))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub buffers: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &SiameseModel<T>) -> Result<Self> {
        for (n, p) in model.names.iter().zip(&model.params) {
            if !p.value.is_finite() {
                return Err(TrackError::Checkpoint(format!("{} holds non-finite values", n)));
            }
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            params: model.names.iter().zip(&model.params).map(|(n, p)| NamedArray::from_tensor(n, &p.value)).collect(),
            buffers: model.buffers().into_iter().map(|(n, t)| NamedArray::from_tensor(&n, t)).collect(),
        })
    }

    /// Rebuilds the model; `expect` guards against loading a conventional
    /// checkpoint where a scale-equivariant model is wanted.
    pub fn to_model<T: Scalar>(&self, expect: Option<ModelKind>) -> Result<SiameseModel<T>> {
        if self.format_version != FORMAT_VERSION {
            return Err(TrackError::Checkpoint(format!("format version {} is not supported (expected {})", self.format_version, FORMAT_VERSION)));
        }
        if let Some(k) = expect {
            if k != self.config.kind {
                let hint = if k == ModelKind::ScaleEquivariant { "; initialize with transfer-init instead" } else { "" };
                return Err(TrackError::Checkpoint(format!("holds a {:?} model, {:?} requested{}", self.config.kind, k, hint)));
            }
        }
        let mut model = SiameseModel::<T>::build(&self.config)?;
        for i in 0..model.params.len() {
            let name = model.names[i].clone();
            let a = self.params.iter().find(|a| a.name == name).ok_or_else(|| TrackError::Checkpoint(format!("missing parameter {}", name)))?;
            let t = a.to_tensor::<T>()?;
            if t.shape() != model.params[i].value.shape() {
                return Err(TrackError::Checkpoint(format!("{}: shape {:?}, architecture wants {:?}", name, t.shape(), model.params[i].value.shape())));
            }
            model.params[i].value = t;
        }
        for (name, slot) in model.buffers_mut() {
            let a = self.buffers.iter().find(|a| a.name == name).ok_or_else(|| TrackError::Checkpoint(format!("missing buffer {}", name)))?;
            let t = a.to_tensor::<T>()?;
            if t.shape() != slot.shape() {
                return Err(TrackError::Checkpoint(format!("{}: shape mismatch", name)));
            }
            *slot = t;
        }
        model.set_training(false);
        Ok(model)
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &SiameseModel<T>) -> Result<()> {
    let ck = Checkpoint::from_model(model)?;
    let text = serde_json::to_string(&ck).map_err(|e| TrackError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expect: Option<ModelKind>) -> Result<SiameseModel<T>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| TrackError::Checkpoint(format!("{}: {}", path.display(), e)))?;
    match v.get("format_version").and_then(|x| x.as_u64()) {
        Some(n) if n == FORMAT_VERSION as u64 => {}
        Some(n) => return Err(TrackError::Checkpoint(format!("format version {} is not supported (expected {})", n, FORMAT_VERSION))),
        None => return Err(TrackError::Checkpoint("header has no format version".into())),
    }
    let ck: Checkpoint = serde_json::from_value(v).map_err(|e| TrackError::Checkpoint(format!("{}: {}", path.display(), e)))?;
    ck.to_model(expect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hex_format_examples() {
        assert_eq!(format_hex(3.0), "0x1.8p+1");
        assert_eq!(format_hex(1.0), "0x1p+0");
        assert_eq!(format_hex(-0.0), "-0x0p+0");
        assert_eq!(format_hex(0.1), "0x1.999999999999ap-4");
        assert_eq!(format_hex(f64::from_bits(1)), "0x0.0000000000001p-1022");
        assert_eq!(parse_hex("0x1.8p+1"), Some(3.0));
        assert_eq!(parse_hex("nonsense"), None);
    }

    #[test]
    fn hex_round_trip_on_random_bit_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let v = f64::from_bits(rng.gen::<u64>());
            if !v.is_finite() {
                continue;
            }
            assert_eq!(parse_hex(&format_hex(v)).unwrap().to_bits(), v.to_bits(), "{}", format_hex(v));
        }
        for v in [f64::MIN_POSITIVE, f64::MAX, -f64::MIN_POSITIVE / 3.0, 5e-324] {
            assert_eq!(parse_hex(&format_hex(v)).unwrap().to_bits(), v.to_bits());
        }
    }
}
